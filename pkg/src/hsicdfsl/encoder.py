"""
Dual-branch (spatial + spectral) transformer encoder.

Every attention head carries a D'xD' coalescent projection (CP) matrix
placed between the projected queries and keys:

    SA(U) = softmax(Q C K^T / sqrt(D')) V,   Q = U W_Q, K = U W_K, V = U W_V

CP matrices start at the identity, so a freshly initialised CP encoder
computes exactly the same function as the plain backbone. After the
backbone warm-up, :meth:`EncoderParams.freeze_backbone` leaves only the CP
matrices and the fusion head trainable.
"""

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 2
    embed_dim: int = 32
    heads: int = 4
    mlp_dim: int = 64
    patch_size: int = 3
    spectral_tokens: int = 8
    bands: int = 50
    patch_extent: int = 9
    sem_dim: int = 0  # 0 -> embed_dim // 2
    ln_eps: float = 1e-6

    def __post_init__(self):
        for f in fields(self):
            if f.name in ("sem_dim", "ln_eps"):
                continue
            v = getattr(self, f.name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ConfigError(f"must be a positive int, got {v!r}", f"encoder.{f.name}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"heads={self.heads} must divide embed_dim={self.embed_dim}",
                              "encoder.heads")
        if self.patch_extent % self.patch_size:
            raise ConfigError(f"patch_size={self.patch_size} must divide the patch extent "
                              f"{self.patch_extent}", "encoder.patch_size")
        if self.spectral_tokens > self.bands:
            raise ConfigError(f"spectral_tokens={self.spectral_tokens} exceeds "
                              f"bands={self.bands}", "encoder.spectral_tokens")
        if self.sem_dim < 0:
            raise ConfigError("must be >= 0", "encoder.sem_dim")
        if self.ln_eps <= 0:
            raise ConfigError("must be positive", "encoder.ln_eps")

    @property
    def head_dim(self):
        return self.embed_dim // self.heads

    @property
    def fusion_dim(self):
        return self.sem_dim or max(1, self.embed_dim // 2)

    @property
    def spatial_tokens(self):
        return (self.patch_extent // self.patch_size) ** 2

    @property
    def spectral_depth(self):
        return min(self.depth, 4)

    def branch_depth(self, branch):
        return self.depth if branch == "spat" else self.spectral_depth

    def as_vector(self):
        return [float(getattr(self, f.name)) for f in fields(self)]

    @classmethod
    def from_vector(cls, vec):
        kw = {}
        for f, v in zip(fields(cls), vec):
            kw[f.name] = float(v) if f.name == "ln_eps" else int(round(v))
        return cls(**kw)


@dataclass
class EmbeddingOutput:
    z: Tensor
    z_spat: Tensor
    z_spec: Tensor


BRANCHES = ("spat", "spec")


def cp_name(branch, layer, head):
    return f"{branch}.L{layer}.cp.h{head}"


def is_cp(name):
    return ".cp." in name


def is_head(name):
    return name.startswith("sem.")


class EncoderParams:
    """Named parameter tensors plus the frozen/trainable split."""

    def __init__(self, config, tensors, backbone_frozen=False):
        self.config = config
        self.tensors = dict(tensors)
        self.backbone_frozen = False
        if backbone_frozen:
            self.freeze_backbone()
        else:
            self._set_flags()

    def __getitem__(self, name):
        return self.tensors[name]

    def _set_flags(self):
        for name, t in self.tensors.items():
            if self.backbone_frozen:
                t.requires_grad = is_cp(name) or is_head(name)
            else:
                # warm-up: CP matrices held at identity, backbone trains
                t.requires_grad = not is_cp(name)

    def freeze_backbone(self):
        self.backbone_frozen = True
        self._set_flags()

    def trainable(self):
        return [t for t in self.tensors.values() if t.requires_grad]

    def trainable_names(self):
        return [n for n, t in self.tensors.items() if t.requires_grad]

    def frozen_names(self):
        return [n for n, t in self.tensors.items() if not t.requires_grad]

    def cp_names(self, branch=None):
        return [n for n in self.tensors if is_cp(n) and (branch is None or n.startswith(branch))]

    def copy(self):
        return EncoderParams(self.config, {n: Tensor(t.data) for n, t in self.tensors.items()},
                             self.backbone_frozen)

    def arrays(self):
        return {n: t.data for n, t in self.tensors.items()}


def expected_trainable_count(cfg):
    """CP entries of both branches plus the fusion head, once the backbone is frozen."""
    d, d1, dh = cfg.embed_dim, cfg.fusion_dim, cfg.head_dim
    cp = (cfg.depth + cfg.spectral_depth) * cfg.heads * dh * dh
    head = 2 * (d * d1 + d1) + (cfg.spectral_tokens * d1 + d1) + (d1 * d + d)
    return cp + head


def init_params(cfg, rng):
    """Random backbone, identity CP matrices, near-zero spectral fusion gate."""
    d, dh, d1 = cfg.embed_dim, cfg.head_dim, cfg.fusion_dim
    p = cfg.patch_size
    t = {}

    def lin(name, fan_in, fan_out, bias=True, scale=1.0):
        t[name + ".w"] = Tensor(rng.normal(0.0, scale / math.sqrt(fan_in), (fan_in, fan_out)))
        if bias:
            t[name + ".b"] = Tensor(np.zeros(fan_out))

    def ln(name):
        t[name + ".g"] = Tensor(np.ones(d))
        t[name + ".b"] = Tensor(np.zeros(d))

    lin("spat.embed", p * p * cfg.bands, d)
    t["spat.pos"] = Tensor(rng.normal(0.0, 0.02, (cfg.spatial_tokens, d)))
    lin("spec.embed", cfg.patch_extent ** 2, d)
    t["spec.pos"] = Tensor(rng.normal(0.0, 0.02, (cfg.spectral_tokens, d)))
    for branch in BRANCHES:
        for layer in range(cfg.branch_depth(branch)):
            pre = f"{branch}.L{layer}"
            ln(pre + ".ln1")
            for h in range(cfg.heads):
                for k in ("wq", "wk", "wv"):
                    t[f"{pre}.h{h}.{k}"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (d, dh)))
                t[cp_name(branch, layer, h)] = Tensor(np.eye(dh))
            t[pre + ".proj.w"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)))
            ln(pre + ".ln2")
            lin(pre + ".ffn1", d, cfg.mlp_dim)
            lin(pre + ".ffn2", cfg.mlp_dim, d)
        ln(f"{branch}.lnf")
    lin("sem.spat", d, d1)
    lin("sem.spec", d, d1)
    lin("sem.align", cfg.spectral_tokens, d1, scale=0.1)
    lin("sem.out", d1, d)
    return EncoderParams(cfg, t)


# -- tokenisation --------------------------------------------------------------

def spectral_groups(bands, n_spec):
    """Contiguous, balanced channel partition (larger groups first)."""
    if n_spec > bands:
        raise ConfigError(f"n_spec={n_spec} exceeds the {bands} available channels",
                          "encoder.spectral_tokens")
    return [g.tolist() for g in np.array_split(np.arange(bands), n_spec)]


def group_average_matrix(bands, n_spec):
    m = np.zeros((bands, n_spec))
    for j, g in enumerate(spectral_groups(bands, n_spec)):
        m[g, j] = 1.0 / len(g)
    return m


def _as_batch(patches):
    x = T.as_tensor(patches)
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4:
        raise DimensionError(f"expected H x W x C patch(es), got shape {x.shape}")
    return x, single


def spectral_pre_tokens(patches, n_spec):
    """Group-average channels and lay out as (B, n_spec, H*W) before embedding."""
    x, single = _as_batch(patches)
    b, hh, ww, c = x.shape
    avg = T.matmul(x.reshape(b, hh * ww, c), Tensor(group_average_matrix(c, n_spec)))
    out = T.transpose(avg)
    return out.reshape(out.shape[1:]) if single else out


def spectral_tokenize(patches, n_spec, params):
    x = spectral_pre_tokens(patches, n_spec)
    return T.matmul(x, params["spec.embed.w"]) + params["spec.embed.b"]


def spatial_tokens(x, patch_size):
    b, hh, ww, c = x.shape
    p = patch_size
    g = x.reshape(b, hh // p, p, ww // p, p, c)
    g = T.transpose(g, (0, 1, 3, 2, 4, 5))
    return g.reshape(b, (hh // p) * (ww // p), p * p * c)


# -- attention -----------------------------------------------------------------

def attention_logits(u, branch, layer, head, params, use_cp=True):
    pre = f"{branch}.L{layer}.h{head}"
    q = T.matmul(u, params[pre + ".wq"])
    k = T.matmul(u, params[pre + ".wk"])
    if use_cp:
        q = T.matmul(q, params[cp_name(branch, layer, head)])
    return T.matmul(q, T.transpose(k)) * (1.0 / math.sqrt(params.config.head_dim))


def attention_cp(u, layer, head, params, branch="spat", use_cp=True):
    """One self-attention head with its CP matrix; ``u`` is (.., N, D)."""
    if use_cp and cp_name(branch, layer, head) not in params.tensors:
        raise ContractError(f"no CP matrix for {branch} layer {layer} head {head}")
    a = T.softmax_rows(attention_logits(u, branch, layer, head, params, use_cp))
    return T.matmul(a, T.matmul(u, params[f"{branch}.L{layer}.h{head}.wv"]))


def mhsa_cp(u, layer, params, branch="spat", use_cp=True):
    heads = [attention_cp(u, layer, h, params, branch, use_cp)
             for h in range(params.config.heads)]
    cat = heads[0] if len(heads) == 1 else T.concat(heads, axis=-1)
    return T.matmul(cat, params[f"{branch}.L{layer}.proj.w"])


def _block(u, branch, layer, params, use_cp):
    pre = f"{branch}.L{layer}"
    eps = params.config.ln_eps
    h = T.layer_norm(u, params[pre + ".ln1.g"], params[pre + ".ln1.b"], eps)
    u = u + mhsa_cp(h, layer, params, branch, use_cp)
    h = T.layer_norm(u, params[pre + ".ln2.g"], params[pre + ".ln2.b"], eps)
    h = T.gelu(T.matmul(h, params[pre + ".ffn1.w"]) + params[pre + ".ffn1.b"])
    return u + T.matmul(h, params[pre + ".ffn2.w"]) + params[pre + ".ffn2.b"]


def encode_tokens(tokens, branch, params, use_cp=True):
    """Run one transformer branch on already-embedded tokens (.., N, D)."""
    pos = params[f"{branch}.pos"]
    n = tokens.shape[-2]
    # longer sequences (scaling checks) reuse the table cyclically
    if n != pos.shape[0]:
        pos = pos[np.arange(n) % pos.shape[0]]
    u = tokens + pos
    for layer in range(params.config.branch_depth(branch)):
        u = _block(u, branch, layer, params, use_cp)
    return T.layer_norm(u, params[f"{branch}.lnf.g"], params[f"{branch}.lnf.b"],
                        params.config.ln_eps)


def sem_fuse(z_spat, z_spec, params):
    """Spectral enhancement: (1 + Z') * Z_spat channel-wise, then mean-pool + project."""
    s = T.matmul(z_spat, params["sem.spat.w"]) + params["sem.spat.b"]
    p = T.matmul(z_spec, params["sem.spec.w"]) + params["sem.spec.b"]
    gate = T.matmul(p.mean(axis=-1), params["sem.align.w"]) + params["sem.align.b"]
    b, d1 = gate.shape
    fused = (gate.reshape(b, 1, d1) + 1.0) * s
    return T.matmul(fused.mean(axis=1), params["sem.out.w"]) + params["sem.out.b"]


def encode(patches, params, use_cp=True):
    """Embed one (H, W, C) patch or a (B, H, W, C) batch."""
    cfg = params.config
    x, single = _as_batch(patches)
    want = (cfg.patch_extent, cfg.patch_extent, cfg.bands)
    if x.shape[1:] != want:
        raise DimensionError(f"patch shape {x.shape[1:]} does not match configured {want}")
    spat = T.matmul(spatial_tokens(x, cfg.patch_size), params["spat.embed.w"]) \
        + params["spat.embed.b"]
    spec = spectral_tokenize(x, cfg.spectral_tokens, params)
    z_spat = encode_tokens(spat, "spat", params, use_cp)
    z_spec = encode_tokens(spec, "spec", params, use_cp)
    z = sem_fuse(z_spat, z_spec, params)
    out = EmbeddingOutput(z, z_spat.mean(axis=1), z_spec.mean(axis=1))
    if single:
        out = EmbeddingOutput(*(v.reshape(v.shape[1:]) for v in (out.z, out.z_spat, out.z_spec)))
    return out


def embed(patches, params, batch_size=512):
    """Untaped embeddings of a large batch, as a numpy array."""
    out = []
    with T.no_tape():
        for i in range(0, len(patches), batch_size):
            out.append(encode(patches[i:i + batch_size], params).z.data)
    d = params.config.embed_dim
    return np.concatenate(out) if out else np.zeros((0, d))


def attention_block_decomposition(a, n_real):
    """Split an (N+p)x(N+p) attention map into the (real, prompt) blocks."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"attention map must be square, got {a.shape}")
    if not 0 < n_real <= a.shape[0]:
        raise ContractError(f"n_real={n_real} outside (0, {a.shape[0]}]")
    r = n_real
    return {"A11": a[:r, :r].copy(), "A1p": a[:r, r:].copy(),
            "Ap1": a[r:, :r].copy(), "App": a[r:, r:].copy()}
