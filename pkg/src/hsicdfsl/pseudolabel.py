"""
Target pseudo-labels: support splits, RBF graph, label propagation, top-k refinement.

Both propagation routes return ``(I - alpha * A_hat)^-1 Y_hat``. The
iteration ``F <- alpha * A_hat F + (1 - alpha) Y_hat`` converges to
``(1 - alpha)`` times that matrix and is rescaled to match; the scale does
not affect the argmax.

With a dense RBF graph and alpha near 1 the leading eigenvector of
``A_hat`` dominates F and every row drifts to the same majority class.
Prediction therefore applies class-mass normalisation (each column of F
divided by its total) before the argmax.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NumericError


class ConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class PropagationConfig:
    alpha: float = 0.99
    sigma: float = 0.0  # 0 -> median heuristic
    ridge_eps: float = 1e-6
    max_iters: int = 1000
    conv_tol: float = 1e-9
    batch_size: int = 256
    class_mass_norm: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError("must lie in [0, 1)", "propagation.alpha")
        if self.sigma < 0:
            raise ConfigError("must be >= 0 (0 selects the median heuristic)",
                              "propagation.sigma")
        if self.ridge_eps < 0:
            raise ConfigError("must be >= 0", "propagation.ridge_eps")
        if self.max_iters < 1:
            raise ConfigError("must be >= 1", "propagation.max_iters")
        if self.conv_tol <= 0:
            raise ConfigError("must be > 0", "propagation.conv_tol")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "propagation.batch_size")


@dataclass
class LabelGraph:
    A: np.ndarray
    A_hat: np.ndarray
    Y_hat: np.ndarray


def split_support(support_y, k_s, k_q, rng):
    """Per-class disjoint (sub-support, sub-query) index split of a K-shot support set."""
    support_y = np.asarray(support_y)
    if k_s < 1 or k_q < 1:
        raise ConfigError("k_s and k_q must both be >= 1", "run.k_split")
    s_idx, q_idx = [], []
    for c in np.unique(support_y):
        members = np.flatnonzero(support_y == c)
        if len(members) != k_s + k_q:
            raise ConfigError(f"k_s + k_q = {k_s + k_q} but class {int(c)} has "
                              f"{len(members)} shots", "run.k_split")
        perm = rng.permutation(members)
        s_idx.append(perm[:k_s])
        q_idx.append(perm[k_s:])
    return np.concatenate(s_idx), np.concatenate(q_idx)


def median_sigma(d2):
    n = d2.shape[0]
    dist = np.sqrt(np.maximum(d2[np.triu_indices(n, 1)], 0.0))
    med = float(np.median(dist)) if dist.size else 0.0
    return med if med > 0 else 1.0


def build_graph(embeddings, cfg, y_hat=None):
    z = np.asarray(getattr(embeddings, "data", embeddings), dtype=np.float64)
    n = z.shape[0]
    if n < 2:
        raise ContractError("a label graph needs at least two nodes")
    sq = (z * z).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * z @ z.T, 0.0)
    sigma = cfg.sigma or median_sigma(d2)
    a = np.exp(-d2 / (2.0 * sigma * sigma))
    np.fill_diagonal(a, 0.0)
    a = 0.5 * (a + a.T)
    deg = a.sum(axis=1)
    if (deg <= 0).any():
        deg = deg + cfg.ridge_eps
    inv = 1.0 / np.sqrt(deg)
    a_hat = a * inv[:, None] * inv[None, :]
    if y_hat is None:
        y_hat = np.zeros((n, 0))
    return LabelGraph(a, a_hat, np.asarray(y_hat, dtype=np.float64))


def propagate_iterative(g, cfg):
    alpha = cfg.alpha
    if not alpha < 1:
        raise ContractError("alpha must be < 1")
    f = g.Y_hat.copy()
    base = (1.0 - alpha) * g.Y_hat
    resid = np.inf
    for _ in range(cfg.max_iters):
        nxt = alpha * (g.A_hat @ f) + base
        resid = float(np.abs(nxt - f).max()) if f.size else 0.0
        f = nxt
        if resid < cfg.conv_tol:
            break
    else:
        warnings.warn(f"label propagation stopped after {cfg.max_iters} iterations "
                      f"(residual {resid:.3e})", ConvergenceWarning, stacklevel=2)
    return f / (1.0 - alpha)


def propagate_closed_form(g, cfg):
    if not cfg.alpha < 1:
        raise ContractError("alpha must be < 1")
    n = g.A_hat.shape[0]
    m = np.eye(n) - cfg.alpha * g.A_hat
    try:
        return np.linalg.solve(m, g.Y_hat)
    except np.linalg.LinAlgError:
        pass
    # only reachable with a degenerate A_hat; regularise and retry once
    try:
        return np.linalg.solve(m + cfg.ridge_eps * np.eye(n), g.Y_hat)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"label propagation system is singular: {e}") from None


def class_mass_normalize(f):
    """Divide each column by its (positive) total; zero columns stay zero."""
    f = np.asarray(f, dtype=np.float64)
    mass = np.maximum(f, 0.0).sum(axis=0)
    return f / np.where(mass > 0, mass, 1.0)


def confidence(f):
    """Row-normalised maximum of a label assignment matrix (0 for empty rows)."""
    f = np.maximum(np.asarray(f), 0.0)
    s = f.sum(axis=1)
    return np.where(s > 0, f.max(axis=1) / np.where(s > 0, s, 1.0), 0.0)


def select_topk(f_star, k_per_class, conf=None):
    """Per predicted class, indices of the ``k`` most confident rows (ties: lower index).

    Returns ``(indices, labels)`` sorted by class then rank.
    """
    if k_per_class < 1:
        raise ContractError("k_per_class must be >= 1")
    f_star = np.asarray(f_star)
    pred = f_star.argmax(axis=1)
    conf = f_star.max(axis=1) if conf is None else np.asarray(conf)
    idx, lab = [], []
    for c in range(f_star.shape[1]):
        members = np.flatnonzero(pred == c)
        order = members[np.lexsort((members, -conf[members]))]
        picked = order[:k_per_class]
        idx.extend(picked.tolist())
        lab.extend([c] * len(picked))
    return np.array(idx, dtype=int), np.array(lab, dtype=int)


def nearest_prototype(query_z, protos_mu):
    q = np.asarray(query_z)
    mu = np.asarray(protos_mu)
    d2 = (q * q).sum(1)[:, None] + (mu * mu).sum(1)[None, :] - 2.0 * q @ mu.T
    return d2.argmin(axis=1), d2


def smooth_predictions(query_z, support_z, support_y, n_classes, cfg, smooth=True):
    """Pseudo-label query embeddings from support prototypes.

    Batches of queries are joined with the support nodes (true one-hot rows),
    propagated, and the support rows dropped again. With ``smooth`` off the
    plain nearest-prototype assignment is returned. Returns
    ``(labels, confidence, F)``.
    """
    query_z = np.asarray(query_z)
    support_z = np.asarray(support_z)
    support_y = np.asarray(support_y)
    mu = np.stack([support_z[support_y == c].mean(axis=0) for c in range(n_classes)])
    pred, d2 = nearest_prototype(query_z, mu)
    if not smooth:
        logit = -(d2 - d2.min(axis=1, keepdims=True))
        p = np.exp(logit)
        p /= p.sum(axis=1, keepdims=True)
        return pred, p.max(axis=1), p
    eye = np.eye(n_classes)
    y_sup = eye[support_y]
    f_all = np.zeros((len(query_z), n_classes))
    ns = len(support_z)
    for start in range(0, len(query_z), cfg.batch_size):
        sl = slice(start, start + cfg.batch_size)
        z = np.concatenate([support_z, query_z[sl]])
        g = build_graph(z, cfg, np.concatenate([y_sup, eye[pred[sl]]]))
        f = propagate_closed_form(g, cfg)
        if cfg.class_mass_norm:
            f = class_mass_normalize(f)
        f_all[sl] = f[ns:]
    return f_all.argmax(axis=1), confidence(f_all), f_all
