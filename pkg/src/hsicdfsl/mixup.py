"""
Mixup domain adaptation.

Source episodes are regularised with embedding-level mixup. The
intermediate domain mixes source and pseudo-labelled target samples at both
input and embedding level, with a source weight ``lambda2`` that drifts from
0 (target side) towards 1 as training proceeds:

    q        = exp(-d_S / ((d_S + d_T) * tau))
    lambda2' = n (1 - q) / N + q * lambda2

where d_S and d_T are sliced Wasserstein distances from the intermediate
embeddings to the source and target embeddings.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .encoder import encode
from .episodic import compute_prototypes, logits
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class MixupConfig:
    beta_alpha: float = 1.0
    tau: float = 0.05
    sigma_perturb: float = 0.2
    total_steps: int = 5
    projections: int = 32

    def __post_init__(self):
        if not self.beta_alpha > 0:
            raise ConfigError("must be > 0", "mixup.beta_alpha")
        if not self.tau > 0:
            raise ConfigError("must be > 0", "mixup.tau")
        if not 0 <= self.sigma_perturb <= 1:
            raise ConfigError("must lie in [0, 1]", "mixup.sigma_perturb")
        if self.total_steps < 1:
            raise ConfigError("must be >= 1", "mixup.total_steps")
        if self.projections < 1:
            raise ConfigError("must be >= 1", "mixup.projections")


@dataclass(frozen=True)
class MixupSchedule:
    lambda2: float = 0.0
    q: float = 0.0
    n: int = 0
    total: int = 1


def _check_lambda(lam):
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"mixing ratio {lam} outside [0, 1]")


def mix_embeddings(z_i, z_j, y_i, y_j, lam):
    """Convex combination of two embeddings and their soft labels."""
    _check_lambda(lam)
    z = lam * T.as_tensor(z_i) + (1.0 - lam) * T.as_tensor(z_j)
    y = lam * np.asarray(y_i, dtype=np.float64) + (1.0 - lam) * np.asarray(y_j, dtype=np.float64)
    return z, y


def mix_inputs(x_s, x_t, y_s, y_t, lam):
    """Input-level mix; the result is a fresh sample (no link back to the pair)."""
    _check_lambda(lam)
    x_s = np.asarray(x_s.data if isinstance(x_s, Tensor) else x_s, dtype=np.float64)
    x_t = np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t, dtype=np.float64)
    if x_s.shape != x_t.shape:
        raise DimensionError(f"mix_inputs: patch shapes {x_s.shape} and {x_t.shape} differ")
    y = lam * np.asarray(y_s, dtype=np.float64) + (1.0 - lam) * np.asarray(y_t, dtype=np.float64)
    return lam * x_s + (1.0 - lam) * x_t, y


def sample_lambda_beta(alpha, rng):
    if not alpha > 0:
        raise ContractError("Beta parameter must be positive")
    return float(rng.beta(alpha, alpha))


# -- distances -----------------------------------------------------------------

def _w1_1d(u, v):
    """Exact W1 between two 1-D empirical distributions via their quantile functions."""
    u, v = np.sort(u), np.sort(v)
    if len(u) == len(v):
        return float(np.abs(u - v).mean())
    cuts = np.union1d(np.arange(1, len(u) + 1) / len(u), np.arange(1, len(v) + 1) / len(v))
    widths = np.diff(np.concatenate([[0.0], cuts]))
    mids = cuts - widths / 2
    qu = u[np.minimum((mids * len(u)).astype(int), len(u) - 1)]
    qv = v[np.minimum((mids * len(v)).astype(int), len(v) - 1)]
    return float((widths * np.abs(qu - qv)).sum())


def projection_scale(dim):
    """E|<theta, e1>| for theta uniform on the unit sphere in ``dim`` dimensions."""
    if dim == 1:
        return 1.0
    return math.exp(math.lgamma(dim / 2) - math.lgamma((dim + 1) / 2)) / math.sqrt(math.pi)


def domain_distance(a, b, projections=32, rng=None):
    """Sliced 1-Wasserstein distance between two embedding sets.

    The slice average is divided by :func:`projection_scale` so a pure
    translation by a vector ``v`` measures ``|v|`` in any dimension.
    """
    a = np.atleast_2d(np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ContractError("domain_distance needs two non-empty sets")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"domain_distance: dims {a.shape[1]} and {b.shape[1]} differ")
    d = a.shape[1]
    rng = np.random.default_rng(0) if rng is None else rng
    theta = rng.normal(size=(projections, d))
    theta /= np.linalg.norm(theta, axis=1, keepdims=True)
    pa, pb = a @ theta.T, b @ theta.T
    total = sum(_w1_1d(pa[:, i], pb[:, i]) for i in range(projections))
    return total / projections / projection_scale(d)


# -- schedule ------------------------------------------------------------------

def update_schedule(s, d_to_source, d_to_target, tau):
    if d_to_source < 0 or d_to_target < 0:
        raise ContractError("distances must be non-negative")
    if s.n >= s.total:
        raise ContractError(f"schedule already ran its {s.total} steps")
    if d_to_source + d_to_target == 0:
        return s
    q = math.exp(-d_to_source / ((d_to_source + d_to_target) * tau))
    n = s.n + 1
    lam = n * (1.0 - q) / s.total + q * s.lambda2
    if not 0.0 <= lam <= 1.0 + 1e-12:
        raise ContractError(f"lambda2={lam} left [0, 1] at step {n}")
    return replace(s, lambda2=min(lam, 1.0), q=q, n=n)


def perturb_lambda(lam, sigma, rng):
    if sigma < 0:
        raise ContractError("sigma must be non-negative")
    if sigma == 0:
        return float(lam)
    return float(np.clip(rng.uniform(lam - sigma, lam + sigma), 0.0, 1.0))


# -- losses --------------------------------------------------------------------

def _ce(z, protos, y):
    return T.cross_entropy(logits(z, protos), Tensor(y), from_logits=True)


def source_losses_from_embeddings(z_s, y_s, z_q, y_q, n_classes, lam, perm):
    """(few-shot loss, embedding-mixup loss) for one labelled episode."""
    protos = compute_prototypes(z_s, y_s, n_classes)
    onehot = np.eye(n_classes)[np.asarray(y_q)]
    l_fsl = _ce(z_q, protos, onehot)
    z_mix, y_mix = mix_embeddings(z_q, z_q[perm], onehot, onehot[perm], lam)
    return l_fsl, _ce(z_mix, protos, y_mix)


def source_phase_loss(episode, params, cfg, rng, lam=None):
    """Few-shot loss plus embedding-mixup cross-entropy on shuffled query pairs."""
    lam = sample_lambda_beta(cfg.beta_alpha, rng) if lam is None else lam
    perm = rng.permutation(len(episode.query_y))
    z_s = encode(Tensor(episode.support_x), params).z
    z_q = encode(Tensor(episode.query_x), params).z
    l_fsl, l_mx = source_losses_from_embeddings(z_s, episode.support_y, z_q, episode.query_y,
                                                episode.n_way, lam, perm)
    return l_fsl + l_mx


@dataclass
class IntermediateStep:
    loss: Tensor
    z_mixed_input: np.ndarray
    z_source: np.ndarray
    z_target: np.ndarray
    pairs: tuple


def intermediate_losses_from_embeddings(z_ss, y_ss, z_ts, y_ts, z_sq, y_sq, z_tq, y_tq,
                                        z_in, n_src, n_tgt, lam):
    """(input-mix CE, embedding-mix CE) against prototypes over the union label space.

    ``z_sq``/``z_tq`` are the already-paired source and target query rows;
    ``z_in`` embeds their input-level mixtures. Target labels are shifted by
    ``n_src`` into the union space.
    """
    c = n_src + n_tgt
    proto_z = T.concat([T.as_tensor(z_ss), T.as_tensor(z_ts)], axis=0)
    proto_y = np.concatenate([np.asarray(y_ss), np.asarray(y_ts) + n_src])
    protos = compute_prototypes(proto_z, proto_y, c)
    eye = np.eye(c)
    y_s, y_t = eye[np.asarray(y_sq)], eye[np.asarray(y_tq) + n_src]
    y_mix = lam * y_s + (1.0 - lam) * y_t
    z_mix, _ = mix_embeddings(z_sq, z_tq, y_s, y_t, lam)
    return _ce(z_in, protos, y_mix), _ce(z_mix, protos, y_mix)


def intermediate_phase_loss(src_episode, tgt_episode, params, lam, rng):
    """Input- and embedding-level mixup loss across domains.

    ``tgt_episode.query_y`` must hold pseudo-labels; ``lam`` is the already
    perturbed source weight.
    """
    _check_lambda(lam)
    if tgt_episode.query_y is None or (np.asarray(tgt_episode.query_y) < 0).any():
        raise ContractError("target query set lacks pseudo-labels")
    m = min(len(src_episode.query_y), len(tgt_episode.query_y))
    i = rng.choice(len(src_episode.query_y), size=m, replace=False)
    j = rng.choice(len(tgt_episode.query_y), size=m, replace=False)
    x_mix, _ = mix_inputs(src_episode.query_x[i], tgt_episode.query_x[j], 0.0, 0.0, lam)

    z_ss = encode(Tensor(src_episode.support_x), params).z
    z_ts = encode(Tensor(tgt_episode.support_x), params).z
    z_sq = encode(Tensor(src_episode.query_x[i]), params).z
    z_tq = encode(Tensor(tgt_episode.query_x[j]), params).z
    z_in = encode(Tensor(x_mix), params).z
    l_in, l_emb = intermediate_losses_from_embeddings(
        z_ss, src_episode.support_y, z_ts, tgt_episode.support_y,
        z_sq, src_episode.query_y[i], z_tq, tgt_episode.query_y[j], z_in,
        src_episode.n_way, tgt_episode.n_way, lam)
    return IntermediateStep(l_in + l_emb, z_in.data.copy(), z_sq.data.copy(),
                            z_tq.data.copy(), (i, j))
