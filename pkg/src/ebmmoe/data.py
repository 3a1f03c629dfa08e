"""Synthetic paired multimodal datasets and their text file format.

File format (UTF-8)::

    MMDS1 m=<m> K=<K> n=<n> dims=<D1,..,Dm>
    label,<view1 floats ;-separated>,<view2 ...>,...

Floats are written with 9 significant digits. Generated views are quantized
to that precision, so a save/load round trip reproduces them bitwise.
"""
from __future__ import annotations

import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetParseError

FAMILIES = ("gmm_pair", "bitmap_digits")

# 8x8 glyphs for the digits 0-9
_GLYPHS = [
    ["..####..", ".##..##.", ".##..##.", ".##..##.", ".##..##.", ".##..##.", "..####..", "........"],
    ["...##...", "..###...", "...##...", "...##...", "...##...", "...##...", "..####..", "........"],
    ["..####..", ".##..##.", ".....##.", "....##..", "...##...", "..##....", ".######.", "........"],
    ["..####..", ".##..##.", ".....##.", "...###..", ".....##.", ".##..##.", "..####..", "........"],
    ["....##..", "...###..", "..####..", ".##.##..", ".######.", "....##..", "....##..", "........"],
    [".######.", ".##.....", ".#####..", ".....##.", ".....##.", ".##..##.", "..####..", "........"],
    ["..####..", ".##.....", ".#####..", ".##..##.", ".##..##.", ".##..##.", "..####..", "........"],
    [".######.", ".....##.", "....##..", "...##...", "..##....", "..##....", "..##....", "........"],
    ["..####..", ".##..##.", ".##..##.", "..####..", ".##..##.", ".##..##.", "..####..", "........"],
    ["..####..", ".##..##.", ".##..##.", "..#####.", ".....##.", "....##..", "..###...", "........"],
]


def glyph(k: int) -> np.ndarray:
    """The 64-pixel {0, 1} bitmap of digit ``k``."""
    return np.array([[c == "#" for c in row] for row in _GLYPHS[k]], dtype=np.float64).reshape(-1)


@dataclass
class DatasetSpec:
    family: str = "gmm_pair"
    n_classes: int = 3
    n_modalities: int = 2
    noise: float = 0.3
    n_train: int = 3000
    n_test: int = 600
    seed: int = 0
    radius: float = 4.0
    backgrounds: tuple = (0.1, 0.2)

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown dataset family {self.family!r}")
        if self.n_classes < 2 or self.n_modalities < 2:
            raise ValueError("need at least 2 classes and 2 modalities")
        if min(self.n_train, self.n_test) < 10 * self.n_classes:
            raise ValueError("n_train and n_test must be >= 10 * n_classes")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.family == "bitmap_digits":
            if self.n_classes > 10:
                raise ValueError("bitmap_digits supports at most 10 classes")
            if self.n_modalities != 2:
                raise ValueError("bitmap_digits has exactly two styles (modalities)")


@dataclass
class MultimodalExample:
    label: int
    views: list


@dataclass
class MultimodalDataset:
    labels: np.ndarray
    views: list
    n_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        for v in self.views:
            if v.ndim != 2 or v.shape[0] != n:
                raise ValueError("every view needs one row per label")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, k: int) -> MultimodalExample:
        return MultimodalExample(int(self.labels[k]), [v[k] for v in self.views])

    @property
    def m(self) -> int:
        return len(self.views)

    @property
    def dims(self) -> list[int]:
        return [v.shape[1] for v in self.views]

    def subset(self, idx) -> "MultimodalDataset":
        idx = np.asarray(idx)
        return MultimodalDataset(self.labels[idx], [v[idx] for v in self.views], self.n_classes)


def quantize(a: np.ndarray) -> np.ndarray:
    """Round to the 9 significant digits the file format stores."""
    if a.size == 0:
        return a.astype(np.float64)
    return np.char.mod("%.9g", a).astype(np.float64)


def gmm_centers(spec: DatasetSpec) -> list[np.ndarray]:
    """Class centers per modality, each ``[K x 2]``.

    Modality 0 sits on a circle at angles ``2 pi k / K``. Every further modality
    is rotated by ``pi / K`` per step and reassigns class ``k`` to slot
    ``(k + i) mod K`` (a derangement for ``i`` not divisible by ``K``).
    """
    K, r = spec.n_classes, spec.radius
    ks = np.arange(K)
    out = []
    for i in range(spec.n_modalities):
        slot = (ks + i) % K
        angle = 2.0 * np.pi * slot / K + i * np.pi / K
        out.append(np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1))
    return out


def bitmap_templates(spec: DatasetSpec) -> list[np.ndarray]:
    """Noise-free class images per modality, each ``[K x 64]``.

    Modality 0 draws the glyph at 1 over background ``backgrounds[0]``;
    modality 1 draws the inverted glyph, strokes at ``backgrounds[1]`` over 1.
    """
    glyphs = np.stack([glyph(k) for k in range(spec.n_classes)])
    b0, b1 = spec.backgrounds
    return [b0 + (1.0 - b0) * glyphs, b1 + (1.0 - b1) * (1.0 - glyphs)]


def _draw(spec: DatasetSpec, n: int, rng: np.random.Generator) -> MultimodalDataset:
    labels = rng.integers(0, spec.n_classes, size=n)
    if spec.family == "gmm_pair":
        templates = gmm_centers(spec)
        clamp = False
    else:
        templates = bitmap_templates(spec)
        clamp = True
    views = []
    for tmpl in templates:
        v = tmpl[labels] + spec.noise * rng.standard_normal((n, tmpl.shape[1]))
        if clamp:
            v = np.clip(v, 0.0, 1.0)
        views.append(quantize(v))
    return MultimodalDataset(labels, views, spec.n_classes)


def generate(spec: DatasetSpec) -> tuple[MultimodalDataset, MultimodalDataset]:
    """Deterministic ``(train, test)`` pair for ``spec``."""
    spec.validate()
    train = _draw(spec, spec.n_train, np.random.default_rng([spec.seed, 0]))
    test = _draw(spec, spec.n_test, np.random.default_rng([spec.seed, 1]))
    return train, test


def generate_gmm_pair(spec: DatasetSpec):
    if spec.family != "gmm_pair":
        raise ValueError("spec.family must be gmm_pair")
    return generate(spec)


def generate_bitmap_digits(spec: DatasetSpec):
    if spec.family != "bitmap_digits":
        raise ValueError("spec.family must be bitmap_digits")
    return generate(spec)


# ----------------------------------------------------------------------- io


def _fmt(row: np.ndarray) -> str:
    return ";".join("%.9g" % v for v in row)


def dumps_dataset(ds: MultimodalDataset) -> str:
    dims = ",".join(str(d) for d in ds.dims)
    lines = [f"MMDS1 m={ds.m} K={ds.n_classes} n={len(ds)} dims={dims}"]
    for k in range(len(ds)):
        lines.append(",".join([str(int(ds.labels[k]))] + [_fmt(v[k]) for v in ds.views]))
    return "\n".join(lines) + "\n"


def atomic_write(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": "\n"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(ds: MultimodalDataset, path) -> None:
    atomic_write(path, dumps_dataset(ds))


_HEADER = re.compile(r"^MMDS1 m=(\d+) K=(\d+) n=(\d+) dims=(\d+(?:,\d+)*)$")


def loads_dataset(raw: bytes) -> MultimodalDataset:
    lines = raw.split(b"\n")
    offset = 0
    try:
        header = lines[0].decode("utf-8")
    except UnicodeDecodeError:
        raise DatasetParseError(0, "header is not UTF-8") from None
    match = _HEADER.match(header.rstrip("\r"))
    if not match:
        raise DatasetParseError(0, "bad header line")
    m, K, n = (int(match.group(i)) for i in (1, 2, 3))
    dims = [int(d) for d in match.group(4).split(",")]
    if len(dims) != m:
        raise DatasetParseError(0, f"dims lists {len(dims)} extents for m={m}")
    offset = len(lines[0]) + 1
    labels = np.empty(n, dtype=np.int64)
    views = [np.empty((n, d)) for d in dims]
    for k in range(n):
        if k + 1 >= len(lines) or (k + 2 == len(lines) and lines[k + 1] == b""):
            raise DatasetParseError(min(offset, len(raw)), f"expected {n} rows, found {k}")
        line = lines[k + 1]
        fields = line.decode("utf-8", errors="replace").rstrip("\r").split(",")
        if len(fields) != m + 1:
            raise DatasetParseError(offset, f"row {k} has {len(fields) - 1} views, expected {m}")
        try:
            label = int(fields[0])
            if not 0 <= label < K:
                raise ValueError
            labels[k] = label
            for i in range(m):
                vals = [float(v) for v in fields[i + 1].split(";")]
                if len(vals) != dims[i]:
                    raise DatasetParseError(offset, f"row {k} view {i} has {len(vals)} values, expected {dims[i]}")
                views[i][k] = vals
        except ValueError:
            raise DatasetParseError(offset, f"row {k} has an unparsable field") from None
        offset += len(line) + 1
    trailing = lines[n + 1 :]
    if any(t.strip() for t in trailing):
        raise DatasetParseError(min(offset, len(raw)), "unexpected data after the last row")
    return MultimodalDataset(labels, views, K)


def load_dataset(path) -> MultimodalDataset:
    return loads_dataset(Path(path).read_bytes())


def minibatches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Full-pass permutation for one epoch, split into whole batches."""
    perm = np.random.default_rng([int(seed), int(epoch), 1]).permutation(n)
    count = max(n // batch_size, 1)
    size = min(batch_size, n)
    return [perm[k * size : (k + 1) * size] for k in range(count)]
