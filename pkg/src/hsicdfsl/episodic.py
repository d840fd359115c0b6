"""N-way K-shot episodes, prototypes, distance-softmax classification and OA/AA/KC."""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, SamplingError
from .tensor import Tensor


@dataclass
class Pool:
    """Labelled sample pool: ``labels[i]`` is the class id of sample ``i``.

    ``fetch(indices)`` returns the stacked patches of those samples.
    """

    labels: np.ndarray
    fetch: object

    def classes(self):
        return np.unique(self.labels)

    def members(self, cls):
        return np.flatnonzero(self.labels == cls)


@dataclass
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray  # episode-local labels; -1 marks unlabelled
    class_map: list
    support_index: np.ndarray = field(default=None)
    query_index: np.ndarray = field(default=None)

    @property
    def n_way(self):
        return len(self.class_map)


@dataclass
class Prototypes:
    mu: Tensor
    counts: np.ndarray


def sample_episode(pool, n, k, q, rng):
    """Uniform classes without replacement, then uniform samples without replacement."""
    classes = pool.classes()
    for c in classes:
        have = int((pool.labels == c).sum())
        if have < k + q:
            raise SamplingError(f"class {int(c)} has {have} samples, needs {k + q}")
    if len(classes) < n:
        raise SamplingError(f"pool has {len(classes)} classes, episode needs {n}")
    chosen = rng.choice(classes, size=n, replace=False)
    s_idx, q_idx, s_y, q_y = [], [], [], []
    for local, c in enumerate(chosen):
        picked = rng.choice(pool.members(c), size=k + q, replace=False)
        s_idx.append(picked[:k])
        q_idx.append(picked[k:])
        s_y += [local] * k
        q_y += [local] * q
    s_idx = np.concatenate(s_idx)
    q_idx = np.concatenate(q_idx) if q else np.zeros(0, dtype=int)
    return Episode(pool.fetch(s_idx), np.array(s_y), pool.fetch(q_idx) if q else None,
                   np.array(q_y, dtype=int), [int(c) for c in chosen], s_idx, q_idx)


def compute_prototypes(embeddings, labels, n_classes=None):
    labels = np.asarray(labels)
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    counts = np.bincount(labels, minlength=n_classes)
    if (counts == 0).any():
        raise ContractError(f"classes {np.flatnonzero(counts == 0).tolist()} have no embeddings")
    avg = np.zeros((n_classes, len(labels)))
    avg[labels, np.arange(len(labels))] = 1.0
    avg /= counts[:, None]
    return Prototypes(T.matmul(Tensor(avg), T.as_tensor(embeddings)), counts)


def logits(query, protos):
    """Negative squared Euclidean distances, (M, N)."""
    return -T.pairwise_sq_dist(T.as_tensor(query), protos.mu)


def classify(query, protos):
    return T.softmax_rows(logits(query, protos))


def fsl_loss_from_embeddings(support_z, support_y, query_z, query_y, n_classes):
    query_y = np.asarray(query_y)
    if (query_y < 0).any():
        raise ContractError("query set is unlabelled; assign pseudo-labels first")
    protos = compute_prototypes(support_z, support_y, n_classes)
    return T.cross_entropy(logits(query_z, protos), Tensor(np.eye(n_classes)[query_y]),
                           from_logits=True)


def fsl_loss(episode, params):
    from .encoder import encode
    z_s = encode(Tensor(episode.support_x), params).z
    z_q = encode(Tensor(episode.query_x), params).z
    return fsl_loss_from_embeddings(z_s, episode.support_y, z_q, episode.query_y,
                                    episode.n_way)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = truth, columns = prediction

    @classmethod
    def from_labels(cls, truth, pred, n_classes):
        cm = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(cm, (np.asarray(truth), np.asarray(pred)), 1)
        return cls(cm)

    @property
    def total(self):
        return int(self.counts.sum())

    def per_class_accuracy(self):
        """Recall per class; NaN where the class has no truth samples."""
        rows = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.counts) / np.maximum(rows, 1), np.nan)


def metrics(cm):
    """Return (OA, AA, KC) as fractions."""
    c = np.asarray(cm.counts if isinstance(cm, ConfusionMatrix) else cm, dtype=np.float64)
    total = c.sum()
    if total <= 0:
        raise ContractError("confusion matrix is empty")
    po = np.trace(c) / total
    recalls = ConfusionMatrix(c).per_class_accuracy()
    aa = float(np.nanmean(recalls))
    pe = float((c.sum(axis=1) * c.sum(axis=0)).sum() / (total * total))
    if pe >= 1.0:
        kc = 1.0 if po >= 1.0 else 0.0
    else:
        kc = (po - pe) / (1.0 - pe)
    return float(po), aa, float(kc)
