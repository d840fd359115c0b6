"""
Hyperspectral cubes: storage, synthetic domain pairs, PCA, patches and maps.

HSIC file layout (little-endian)::

    b"HSIC" | version u32 | H u32 | W u32 | C u32 | flags u32 | patch_radius u32
    [flags & 1] n_names u32, names (u32 length + utf-8) ..., labels u32[H*W]
    cube f32[H*W*C], row-major (row, col, band)
"""

import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .episodic import Pool
from .errors import ConfigError, FormatError, RenderError

MAGIC = b"HSIC"
VERSION = 1


@dataclass
class CubeDataset:
    cube: np.ndarray  # H x W x C float32
    labels: np.ndarray  # H x W int, 0 = unlabelled
    class_names: list = field(default_factory=list)
    patch_radius: int = 4

    def __post_init__(self):
        self.cube = np.asarray(self.cube, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.cube.ndim != 3 or self.labels.shape != self.cube.shape[:2]:
            raise ConfigError(f"cube {self.cube.shape} and labels {self.labels.shape} disagree",
                              "dataset")
        if self.labels.min() < 0 or (self.class_names
                                     and self.labels.max() > len(self.class_names)):
            raise ConfigError("label values exceed the class list", "dataset.labels")
        self._padded = None

    @property
    def shape(self):
        return self.cube.shape

    @property
    def n_classes(self):
        return len(self.class_names) if self.class_names else int(self.labels.max())

    def labelled_index(self):
        """Flat pixel indices with a non-zero label, in raster order."""
        return np.flatnonzero(self.labels.reshape(-1) > 0)

    def padded(self):
        if self._padded is None:
            r = self.patch_radius
            self._padded = np.pad(self.cube, ((r, r), (r, r), (0, 0)), mode="reflect")
        return self._padded

    def patches(self, flat_index):
        """(B, 2r+1, 2r+1, C) float64 windows centred on the given flat pixels."""
        flat_index = np.asarray(flat_index, dtype=np.int64)
        w = self.cube.shape[1]
        rows, cols = flat_index // w, flat_index % w
        r = self.patch_radius
        win = np.lib.stride_tricks.sliding_window_view(self.padded(), (2 * r + 1, 2 * r + 1),
                                                       axis=(0, 1))
        # sliding_window_view puts the window axes last: (H, W, C, h, w)
        return win[rows, cols].transpose(0, 2, 3, 1).astype(np.float64)

    def pool(self, exclude=None):
        """Episode pool over labelled pixels; class ids are the raster labels."""
        idx = self.labelled_index()
        if exclude is not None and len(exclude):
            idx = np.setdiff1d(idx, exclude)
        labels = self.labels.reshape(-1)[idx]
        return Pool(labels, lambda sel: self.patches(idx[np.asarray(sel, dtype=np.int64)])), idx


def extract_patch(dataset, row, col):
    h, w = dataset.labels.shape
    if not (0 <= row < h and 0 <= col < w):
        raise ConfigError(f"pixel ({row}, {col}) outside {h}x{w} raster", "patch")
    return dataset.patches([row * w + col])[0]


# -- file format ---------------------------------------------------------------

def write_cube(dataset, path):
    h, w, c = dataset.cube.shape
    has_labels = dataset.labels is not None
    parts = [MAGIC, struct.pack("<6I", VERSION, h, w, c, 1 if has_labels else 0,
                                dataset.patch_radius)]
    if has_labels:
        parts.append(struct.pack("<I", len(dataset.class_names)))
        for name in dataset.class_names:
            raw = name.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(dataset.labels.astype("<u4").tobytes())
    parts.append(np.ascontiguousarray(dataset.cube, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_cube(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise FormatError("bad magic, expected b'HSIC'", 0)
    if len(buf) < 28:
        raise FormatError("truncated header", len(buf))
    version, h, w, c, flags, radius = struct.unpack_from("<6I", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if h == 0 or w == 0 or c == 0:
        raise FormatError(f"empty extent {h}x{w}x{c}", 8)
    pos = 28

    def need(n, what):
        if pos + n > len(buf):
            raise FormatError(f"truncated {what}", pos)

    names = []
    labels = np.zeros((h, w), dtype=np.int64)
    if flags & 1:
        need(4, "class count")
        (n_names,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        for _ in range(n_names):
            need(4, "class name length")
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            need(n, "class name")
            names.append(buf[pos:pos + n].decode("utf-8"))
            pos += n
        need(4 * h * w, "label raster")
        labels = np.frombuffer(buf, dtype="<u4", count=h * w, offset=pos).reshape(h, w) \
            .astype(np.int64)
        pos += 4 * h * w
    need(4 * h * w * c, "cube payload")
    cube = np.frombuffer(buf, dtype="<f4", count=h * w * c, offset=pos).reshape(h, w, c) \
        .astype(np.float32)
    pos += 4 * h * w * c
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos)
    return CubeDataset(cube, labels, names, radius)


# -- synthetic domains ---------------------------------------------------------

@dataclass(frozen=True)
class GeneratorSpec:
    height: int = 64
    width: int = 64
    bands: int = 64
    source_classes: int = 12
    target_classes: int = 6
    regions_per_class: int = 3
    peaks: int = 3
    signature_spread: float = 0.6
    region_variation: float = 0.08
    field_strength: float = 0.25
    noise: float = 0.12
    distortion_gain: float = 0.6
    distortion_offset: float = 0.3
    band_noise: float = 0.2
    patch_radius: int = 4

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v < 0:
                raise ConfigError("must be non-negative", f"generator.{f.name}")
        for name in ("height", "width", "bands", "source_classes", "target_classes",
                     "regions_per_class", "peaks"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", f"generator.{name}")
        if self.source_classes < self.target_classes:
            raise ConfigError("source domain needs at least as many classes as the target",
                              "generator.source_classes")
        if self.patch_radius >= min(self.height, self.width):
            raise ConfigError("patch radius must be smaller than the raster",
                              "generator.patch_radius")


def _signature(rng, bands, peaks):
    x = np.linspace(0.0, 1.0, bands)
    sig = 0.5 + 0.3 * x * rng.uniform(-1, 1)
    for _ in range(peaks):
        centre, width = rng.uniform(0.05, 0.95), rng.uniform(0.04, 0.15)
        sig += rng.uniform(0.3, 1.0) * np.exp(-0.5 * ((x - centre) / width) ** 2)
    return sig


def _smooth_field(rng, h, w, terms=4):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    f = np.zeros((h, w))
    for _ in range(terms):
        fy, fx = rng.uniform(0.5, 3.0, 2)
        f += np.cos(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    return f / terms


def _region_raster(rng, h, w, n_classes, per_class):
    seeds = rng.uniform(0, 1, (n_classes * per_class, 2)) * [h, w]
    owner = np.repeat(np.arange(1, n_classes + 1), per_class)
    rng.shuffle(owner)
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
    region = d2.argmin(axis=-1)
    labels = owner[region]
    # guarantee every class owns pixels, even if all of its seeds were shadowed
    for c in range(1, n_classes + 1):
        if not (labels == c).any():
            seed = np.flatnonzero(owner == c)[0]
            labels[region == seed] = c
            r, cc = int(seeds[seed, 0]) % h, int(seeds[seed, 1]) % w
            labels[r, cc] = c
    return labels, region


def _domain(rng, spec, n_classes, prefix, distortion=None):
    h, w, b = spec.height, spec.width, spec.bands
    # classes share a base curve; signature_spread sets how far they stray from it
    base = _signature(rng, b, spec.peaks)
    sigs = np.stack([base + spec.signature_spread * (_signature(rng, b, spec.peaks) - base)
                     for _ in range(n_classes)])
    labels, region = _region_raster(rng, h, w, n_classes, spec.regions_per_class)
    n_regions = region.max() + 1
    region_shift = np.stack([spec.region_variation * _signature(rng, b, 1) * rng.normal()
                             for _ in range(n_regions)])
    field = 1.0 + spec.field_strength * _smooth_field(rng, h, w)
    clean = sigs[labels - 1] + region_shift[region]
    cube = field[..., None] * clean
    noise = rng.normal(0.0, spec.noise, (h, w, b))
    if distortion is not None:
        mix, gain, offset = distortion
        cube = cube @ mix.T * gain + offset
        band = np.cumsum(rng.normal(0.0, 1.0, (h, w, b)), axis=-1) / np.sqrt(np.arange(1, b + 1))
        noise = noise + spec.band_noise * band
    cube = cube + noise
    names = [f"{prefix}{i + 1}" for i in range(n_classes)]
    return CubeDataset(cube.astype(np.float32), labels, names, spec.patch_radius)


def target_distortion(spec, rng):
    """Fixed affine spectral distortion: band smoothing mixed with identity, gain, offset."""
    b = spec.bands
    idx = np.arange(b)
    smooth = np.exp(-0.5 * ((idx[:, None] - idx[None, :]) / 3.0) ** 2)
    smooth /= smooth.sum(axis=1, keepdims=True)
    g = spec.distortion_gain
    mix = (1.0 - g) * np.eye(b) + g * smooth
    tilt = 1.0 + g * np.linspace(-0.5, 0.5, b) * rng.choice([-1.0, 1.0])
    offset = spec.distortion_offset * np.sin(np.linspace(0, np.pi, b))
    return mix, tilt, offset


def synth_domain_pair(spec, rng):
    """Source and target cubes with disjoint label spaces and a spectral domain gap."""
    source = _domain(rng, spec, spec.source_classes, "S")
    distortion = target_distortion(spec, rng)
    target = _domain(rng, spec, spec.target_classes, "T", distortion)
    return source, target


# -- PCA -----------------------------------------------------------------------

@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # C x C_out, orthonormal columns
    explained_variance: np.ndarray


def fit_pca(cube, out_bands):
    x = np.asarray(cube, dtype=np.float64)
    c = x.shape[-1]
    if not 1 <= out_bands <= c:
        raise ConfigError(f"out_bands={out_bands} must lie in [1, {c}]", "pca.out_bands")
    flat = x.reshape(-1, c)
    mean = flat.mean(axis=0)
    centred = flat - mean
    cov = centred.T @ centred / max(len(flat) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:out_bands]
    vals, vecs = np.maximum(vals[order], 0.0), vecs[:, order]
    # deterministic sign: largest-magnitude loading positive
    signs = np.sign(vecs[np.abs(vecs).argmax(axis=0), np.arange(out_bands)])
    signs[signs == 0] = 1.0
    return PcaModel(mean, vecs * signs, vals)


def apply_pca(model, cube):
    x = np.asarray(cube, dtype=np.float64)
    return (x - model.mean) @ model.components


def reduce_dataset(dataset, out_bands):
    model = fit_pca(dataset.cube, out_bands)
    cube = apply_pca(model, dataset.cube)
    return CubeDataset(cube.astype(np.float32), dataset.labels.copy(),
                       list(dataset.class_names), dataset.patch_radius), model


# -- maps ----------------------------------------------------------------------

def default_palette(n_classes):
    """Deterministic RGB triples for classes 1..n (index 0 is background black)."""
    import matplotlib

    cmap = matplotlib.colormaps["tab20"]
    pal = [(0, 0, 0)]
    for i in range(n_classes):
        r, g, b, _ = cmap(i % 20)
        pal.append((int(round(r * 255)), int(round(g * 255)), int(round(b * 255))))
    return pal


def render_map(predictions, palette, path=None):
    """Binary PPM (P6) bytes of a label raster; writes them when ``path`` is given."""
    pred = np.asarray(predictions, dtype=np.int64)
    pal = np.asarray(palette, dtype=np.uint8)
    if pred.min() < 0 or pred.max() >= len(pal):
        bad = int(pred.max() if pred.max() >= len(pal) else pred.min())
        raise RenderError(f"class id {bad} has no palette entry")
    h, w = pred.shape
    pix = pal[pred]
    pix[pred == 0] = 0
    data = f"P6\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(data)
    return data
