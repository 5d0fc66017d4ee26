"""Dataset containers, IDX parsing, synthetic glyph/noise generators and splits."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from cpgm.errors import ContractError, FormatError, SpecError

UNKNOWN_LABEL = -1
IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

GLYPHS = ("ring", "vbar", "hbar", "backslash", "plus", "x", "square", "triangle", "slash", "ell")


@dataclass
class Dataset:
    """Images ``[N, C, H, W]`` in ``[0, 1]`` with integer labels.

    Label ``-1`` marks samples of unknown origin.
    """

    images: np.ndarray
    labels: np.ndarray
    class_names: list | None = None
    manifest: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.ndim != 4:
            raise ContractError(f"images must be [N, C, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ContractError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ContractError("pixel values must lie in [0, 1]")
        if self.labels.size and self.labels.min() < UNKNOWN_LABEL:
            raise ContractError("labels must be >= 0 (or -1 for unknown)")
        if self.class_names is not None and self.labels.size and self.labels.max() >= len(self.class_names):
            raise ContractError("label outside the named classes")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, index):
        return Dataset(self.images[index], self.labels[index], self.class_names)

    def relabel(self, labels, class_names=None):
        return Dataset(self.images, labels, class_names)

    def class_counts(self):
        values, counts = np.unique(self.labels, return_counts=True)
        return dict(zip(values.tolist(), counts.tolist()))


def concat_datasets(parts):
    parts = [p for p in parts if len(p)]
    if not parts:
        raise ContractError("nothing to concatenate")
    return Dataset(
        np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts])
    )


# -- IDX ---------------------------------------------------------------------

def _open(path):
    path = str(path)
    with (gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")) as fh:
        return fh.read()


def _parse_idx(raw, expected_magic, path):
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(
            f"{path}: bad magic 0x{magic:08x} at offset 0 (expected 0x{expected_magic:08x})"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header, need {header} bytes, have {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    needed = int(np.prod(dims))
    if len(raw) - header < needed:
        raise FormatError(
            f"{path}: truncated payload, expected {needed} bytes after offset {header}, "
            f"found {len(raw) - header}"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=needed, offset=header).reshape(dims)


def load_idx(images_path, labels_path, class_names=None):
    """Read an IDX image/label pair (MNIST distribution format)."""
    images = _parse_idx(_open(images_path), IDX_IMAGE_MAGIC, images_path)
    labels = _parse_idx(_open(labels_path), IDX_LABEL_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"image count {images.shape[0]} does not match label count {labels.shape[0]}"
        )
    pixels = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(pixels, labels.astype(np.int64), class_names)


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 ``images[N, H, W]`` and ``labels[N]`` as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


# -- synthetic data ------------------------------------------------------------

def _ring(n=16):
    t = np.linspace(0, 2 * np.pi, n + 1)
    pts = np.stack([0.5 + 0.3 * np.cos(t), 0.5 + 0.3 * np.sin(t)], axis=1)
    return [(pts[i], pts[i + 1]) for i in range(n)]


def _strokes(kind):
    a, b, c, d = (0.2, 0.2), (0.8, 0.2), (0.8, 0.8), (0.2, 0.8)
    table = {
        "ring": _ring(),
        "vbar": [((0.5, 0.15), (0.5, 0.85))],
        "hbar": [((0.15, 0.5), (0.85, 0.5))],
        "backslash": [((0.2, 0.2), (0.8, 0.8))],
        "plus": [((0.5, 0.15), (0.5, 0.85)), ((0.15, 0.5), (0.85, 0.5))],
        "x": [((0.2, 0.2), (0.8, 0.8)), ((0.2, 0.8), (0.8, 0.2))],
        "square": [(a, b), (b, c), (c, d), (d, a)],
        "triangle": [((0.5, 0.15), (0.85, 0.8)), ((0.85, 0.8), (0.15, 0.8)), ((0.15, 0.8), (0.5, 0.15))],
        "slash": [((0.2, 0.8), (0.8, 0.2))],
        "ell": [((0.3, 0.15), (0.3, 0.8)), ((0.3, 0.8), (0.8, 0.8))],
    }
    return [(np.asarray(p, float), np.asarray(q, float)) for p, q in table[kind]]


def _segment_distance(px, p, q):
    d = q - p
    t = np.clip(((px - p) @ d) / max(d @ d, 1e-12), 0.0, 1.0)
    return np.linalg.norm(px - (p + t[..., None] * d), axis=-1)


def render_glyph(kind, size, rng):
    """Rasterise one jittered glyph (random shift, scale, rotation, stroke)."""
    grid = (np.arange(size) + 0.5) / size
    # (row, col) -> (x, y) in the unit square
    px = np.stack(np.meshgrid(grid, grid, indexing="xy"), axis=-1)
    angle = rng.uniform(-0.2, 0.2)
    scale = rng.uniform(0.85, 1.1)
    shift = rng.uniform(-0.08, 0.08, size=2)
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    thickness = rng.uniform(0.05, 0.09)
    intensity = rng.uniform(0.75, 1.0)
    dist = np.full((size, size), np.inf)
    for p, q in _strokes(kind):
        p = (rot @ (p - 0.5)) * scale + 0.5 + shift
        q = (rot @ (q - 0.5)) * scale + 0.5 + shift
        dist = np.minimum(dist, _segment_distance(px, p, q))
    soft = 1.0 / size
    img = intensity * np.clip(1.0 - (dist - thickness) / soft, 0.0, 1.0)
    img = img + rng.normal(0.0, 0.04, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def gen_glyph_dataset(n_per_class, classes=None, size=16, seed=0):
    """Structured synthetic 'digit' images: one stroke glyph per class id."""
    classes = list(range(len(GLYPHS))) if classes is None else list(classes)
    rng = np.random.default_rng([seed, 101])
    images, labels = [], []
    for cls in classes:
        for _ in range(n_per_class):
            images.append(render_glyph(GLYPHS[cls], size, rng))
            labels.append(cls)
    ds = Dataset(np.asarray(images)[:, None], np.asarray(labels), list(GLYPHS))
    ds.manifest = {"kind": "glyphs", "seed": seed, "dims": [1, size, size],
                   "count": n_per_class, "classes": classes}
    return ds


def gen_noise_dataset(n, c, h, w, seed):
    """Every pixel drawn independently from Uniform[0, 1]."""
    if n < 1:
        raise ContractError("n must be at least 1")
    rng = np.random.default_rng([seed, 102])
    ds = Dataset(rng.uniform(0.0, 1.0, size=(n, c, h, w)), np.full(n, UNKNOWN_LABEL))
    ds.manifest = {"kind": "noise", "seed": seed, "dims": [c, h, w], "count": n}
    return ds


def gen_mnist_noise(base, seed):
    """``clamp(pixel + u, 0, 1)`` with ``u ~ Uniform[0, 1]`` per pixel."""
    if len(base) == 0:
        raise ContractError("base dataset is empty")
    rng = np.random.default_rng([seed, 103])
    noisy = np.clip(base.images + rng.uniform(0.0, 1.0, size=base.images.shape), 0.0, 1.0)
    ds = Dataset(noisy, np.full(len(base), UNKNOWN_LABEL))
    ds.manifest = {"kind": "mnist_noise", "seed": seed, "dims": list(base.image_shape),
                   "count": len(base), "base": base.manifest}
    return ds


def from_manifest(manifest):
    """Rebuild a synthetic dataset from its JSON manifest."""
    if isinstance(manifest, str):
        manifest = json.loads(manifest)
    kind = manifest["kind"]
    if kind == "noise":
        return gen_noise_dataset(manifest["count"], *manifest["dims"], seed=manifest["seed"])
    if kind == "glyphs":
        return gen_glyph_dataset(manifest["count"], manifest.get("classes"),
                                 manifest["dims"][-1], manifest["seed"])
    if kind == "mnist_noise":
        return gen_mnist_noise(from_manifest(manifest["base"]), manifest["seed"])
    raise SpecError(f"unknown synthetic dataset kind {kind!r}")


# -- splits --------------------------------------------------------------------

@dataclass
class SplitSpec:
    """Which classes are known and where the unknown test samples come from.

    ``unknown_source`` is one of ``("heldout", [class ids])``,
    ``("external", Dataset)`` or ``("synthetic", kind, seed)`` with kind
    ``"noise"`` or ``"mnist_noise"``.
    """

    known_classes: list
    unknown_source: tuple = ("heldout", [])
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if len(set(self.known_classes)) != len(self.known_classes):
            raise SpecError("known classes must be distinct")
        if not 0 < self.test_fraction < 1:
            raise SpecError("test_fraction must lie in (0, 1)")
        if self.unknown_source[0] == "heldout":
            overlap = set(self.known_classes) & set(self.unknown_source[1])
            if overlap:
                raise SpecError(f"classes {sorted(overlap)} are both known and held out")


class Split(NamedTuple):
    train: Dataset
    known_test: Dataset
    unknown_test: Dataset
    remap: dict


def make_split(dataset, spec):
    """Partition ``dataset`` into known train/test and unknown test sets.

    Known labels are remapped to ``0..K-1`` in the order of
    ``spec.known_classes``; unknown samples carry label ``-1``.
    """
    rng = np.random.default_rng([spec.seed, 104])
    remap = {int(c): i for i, c in enumerate(spec.known_classes)}
    train_idx, test_idx = [], []
    for cls in spec.known_classes:
        idx = np.flatnonzero(dataset.labels == cls)
        if len(idx) < 2:
            raise SpecError(f"known class {cls} has {len(idx)} samples")
        idx = rng.permutation(idx)
        n_test = max(1, int(round(spec.test_fraction * len(idx))))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    mapper = np.vectorize(remap.__getitem__, otypes=[np.int64])
    names = None
    if dataset.class_names is not None:
        names = [dataset.class_names[c] for c in spec.known_classes]
    train = Dataset(dataset.images[train_idx], mapper(dataset.labels[train_idx]), names)
    known_test = Dataset(dataset.images[test_idx], mapper(dataset.labels[test_idx]), names)

    kind = spec.unknown_source[0]
    if kind == "heldout":
        mask = np.isin(dataset.labels, list(spec.unknown_source[1]))
        unknown = Dataset(dataset.images[mask], np.full(int(mask.sum()), UNKNOWN_LABEL))
    elif kind == "external":
        ext = spec.unknown_source[1]
        if ext.image_shape != dataset.image_shape:
            raise SpecError(f"external images {ext.image_shape} do not match {dataset.image_shape}")
        unknown = Dataset(ext.images, np.full(len(ext), UNKNOWN_LABEL))
    elif kind == "synthetic":
        _, synth_kind, seed = spec.unknown_source
        # 1:1 known-to-unknown test ratio
        if synth_kind == "noise":
            unknown = gen_noise_dataset(len(known_test), *dataset.image_shape, seed=seed)
        elif synth_kind == "mnist_noise":
            unknown = gen_mnist_noise(known_test, seed)
        else:
            raise SpecError(f"unknown synthetic kind {synth_kind!r}")
    else:
        raise SpecError(f"unknown source {kind!r}")
    return Split(train, known_test, unknown, remap)


def _area_matrix(src, dst):
    scale = src / dst
    m = np.zeros((dst, src))
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), src)):
            m[i, j] = max(0.0, min(hi, j + 1) - max(lo, j))
    return m / scale


def downscale(dataset, h, w):
    """Area-average resampling to ``h x w``; upscaling is rejected."""
    if h < 1 or w < 1:
        raise ContractError("target size must be positive")
    _, _, sh, sw = dataset.images.shape
    if h > sh or w > sw:
        raise ContractError(f"upscaling {sh}x{sw} -> {h}x{w} is not supported")
    if (h, w) == (sh, sw):
        return Dataset(dataset.images.copy(), dataset.labels.copy(), dataset.class_names)
    rows, cols = _area_matrix(sh, h), _area_matrix(sw, w)
    out = np.einsum("ih,nchw,jw->ncij", rows, dataset.images, cols)
    return Dataset(np.clip(out, 0.0, 1.0), dataset.labels.copy(), dataset.class_names)
