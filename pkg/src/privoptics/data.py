"""Attribute-labelled grayscale image corpora.

Two sources: a CelebA-layout directory (image folder, ``list_attr_celeba.txt``
and optionally ``list_eval_partition.txt``) and a seeded synthetic toy corpus
small enough to train on a laptop CPU.
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

CROP = 170
SIZE = 64
LUMA = (0.299, 0.587, 0.114)

TOY_DESIRED = "blob_side"
TOY_SENSITIVE = "stripe_orient"
TOY_VERSION = 1


class CorpusError(ValueError):
    """Malformed attribute table, partition file or cached corpus."""


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    attributes: Mapping[str, int]
    id: str


class SampleSet:
    """Column-oriented view of a list of samples.

    ``images`` is (N, H, W) float32 in [0, 1]; ``labels`` maps attribute name to
    an int64 vector of 0/1 flags.
    """

    def __init__(self, images: np.ndarray, labels: Mapping[str, np.ndarray], ids: Sequence[str]):
        self.images = np.asarray(images, dtype=np.float32)
        self.labels = {k: np.asarray(v, dtype=np.int64) for k, v in labels.items()}
        self.ids = list(ids)
        n = len(self.ids)
        if self.images.shape[0] != n or any(len(v) != n for v in self.labels.values()):
            raise CorpusError("images, labels and ids disagree in length")

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], {k: int(v[i]) for k, v in self.labels.items()}, self.ids[i])

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    def labels_of(self, attribute: str) -> np.ndarray:
        try:
            return self.labels[attribute]
        except KeyError:
            raise KeyError(f"unknown attribute {attribute!r}; have {sorted(self.labels)}") from None

    def subset(self, index: Sequence[int]) -> "SampleSet":
        index = np.asarray(index, dtype=np.int64)
        return SampleSet(self.images[index], {k: v[index] for k, v in self.labels.items()},
                         [self.ids[i] for i in index])

    def tensors(self, *attributes: str) -> tuple[torch.Tensor, ...]:
        """(N, 1, H, W) images followed by one label tensor per attribute."""
        x = torch.from_numpy(self.images)[:, None]
        return (x,) + tuple(torch.from_numpy(self.labels_of(a)) for a in attributes)


@dataclass(frozen=True)
class DatasetSplit:
    train: SampleSet
    val: SampleSet
    test: SampleSet

    @property
    def attributes(self) -> list[str]:
        return sorted(self.train.labels)

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def parts(self) -> dict[str, SampleSet]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name, part in self.parts().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(part.images, dtype="<f4").tobytes())
            for attr in sorted(part.labels):
                h.update(attr.encode())
                h.update(np.ascontiguousarray(part.labels[attr], dtype="<i8").tobytes())
            h.update("\n".join(part.ids).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class AttributePair:
    desired: str
    sensitive: str

    def __post_init__(self):
        if self.desired == self.sensitive:
            raise ValueError(f"desired and sensitive attribute must differ, both are {self.desired!r}")

    def check(self, data: DatasetSplit):
        missing = [a for a in (self.desired, self.sensitive) if a not in data.train.labels]
        if missing:
            raise KeyError(f"attributes {missing} not in corpus; have {data.attributes}")


def trivial_accuracy(labels: Sequence[int]) -> float:
    """Accuracy of always answering the majority class."""
    y = np.asarray(labels, dtype=float)
    if y.size == 0:
        raise ValueError("trivial_accuracy of an empty label list")
    p = float(y.mean())
    return max(p, 1.0 - p)


def _bilinear(img: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))
    t = t.permute(2, 0, 1)[None] if t.ndim == 3 else t[None, None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=False)
    out = out[0].permute(1, 2, 0) if img.ndim == 3 else out[0, 0]
    return out.numpy()


def preprocess_image(raw: np.ndarray, crop: int = CROP, size: int = SIZE) -> np.ndarray:
    """Center crop, bilinear resize, BT.601 luma, scale to [0, 1].

    ``raw`` is (H, W) or (H, W, C) with C in {1, 3, 4}; integer input is treated
    as 8-bit, float input as already in [0, 1].
    """
    a = np.asarray(raw)
    if a.ndim not in (2, 3):
        raise ValueError(f"expected (H, W) or (H, W, C) image, got shape {a.shape}")
    H, W = a.shape[:2]
    if H < crop or W < crop:
        raise ValueError(f"image {H}x{W} is smaller than the {crop}x{crop} crop window")
    img = a.astype(np.float32) / 255.0 if np.issubdtype(a.dtype, np.integer) else a.astype(np.float32)
    top, left = (H - crop) // 2, (W - crop) // 2
    img = img[top : top + crop, left : left + crop]
    img = _bilinear(img, size)
    if img.ndim == 3:
        if img.shape[2] == 1:
            img = img[..., 0]
        else:
            img = img[..., :3] @ np.asarray(LUMA, dtype=np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-6:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def _ratio_split(n: int, ratios: Sequence[float], seed: int) -> list[np.ndarray]:
    n_train, n_val, _ = _split_sizes(n, ratios)
    perm = np.random.default_rng(seed).permutation(n)
    parts = [perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]]
    return [np.sort(p) for p in parts]


def read_attribute_table(path: Union[str, Path]) -> tuple[list[str], list[str], np.ndarray]:
    """Parse a CelebA-style table into (filenames, attribute names, 0/1 matrix)."""
    lines = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise CorpusError(f"{path}: empty attribute table")
    if len(lines[0]) == 1 and lines[0][0].isdigit():
        lines = lines[1:]  # CelebA leads with the row count
    header, rows = lines[0], lines[1:]
    names, flags = [], []
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(header) + 1:
            raise CorpusError(f"{path}:{lineno}: expected {len(header)} flags, got {len(row) - 1}")
        vals = []
        for tok in row[1:]:
            if tok not in ("1", "-1", "+1"):
                raise CorpusError(f"{path}:{lineno}: malformed flag {tok!r}")
            vals.append(0 if tok == "-1" else 1)
        names.append(row[0])
        flags.append(vals)
    order = np.argsort(names, kind="stable")
    table = np.asarray(flags, dtype=np.int64).reshape(len(names), len(header))
    return [names[i] for i in order], header, table[order]


def read_partition(path: Union[str, Path]) -> dict[str, int]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in ("0", "1", "2"):
            raise CorpusError(f"{path}:{lineno}: expected '<filename> <0|1|2>'")
        out[parts[0]] = int(parts[1])
    return out


def load_attribute_corpus(image_dir: Union[str, Path], attribute_table_path: Union[str, Path],
                          partition_source, attributes: Optional[Sequence[str]] = None,
                          workers: int = 0) -> DatasetSplit:
    """Load and preprocess a CelebA-layout corpus.

    ``partition_source`` is either a partition file path (filename -> 0/1/2 for
    train/val/test) or a ``(ratios, seed)`` tuple. ``attributes`` restricts the
    kept label columns. Ordering is by filename regardless of ``workers``.
    """
    image_dir = Path(image_dir)
    names, header, table = read_attribute_table(attribute_table_path)
    keep = list(header) if attributes is None else list(attributes)
    for a in keep:
        if a not in header:
            raise KeyError(f"unknown attribute {a!r}")
    cols = [header.index(a) for a in keep]

    if isinstance(partition_source, (str, Path)):
        part = read_partition(partition_source)
        missing = [n for n in names if n not in part]
        if missing:
            raise CorpusError(f"{len(missing)} images lack a partition entry, e.g. {missing[0]}")
        assign = np.array([part[n] for n in names])
        index = [np.flatnonzero(assign == k) for k in range(3)]
    else:
        ratios, seed = partition_source
        index = _ratio_split(len(names), ratios, seed)

    for n in names:
        if not (image_dir / n).is_file():
            raise FileNotFoundError(f"image listed in attribute table is missing: {image_dir / n}")

    def load(name: str) -> np.ndarray:
        with Image.open(image_dir / name) as im:
            return preprocess_image(np.asarray(im.convert("RGB")))

    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            images = list(pool.map(load, names))
    else:
        images = [load(n) for n in names]
    images = np.stack(images) if images else np.zeros((0, SIZE, SIZE), np.float32)
    labels = {a: table[:, c] for a, c in zip(keep, cols)}
    full = SampleSet(images, labels, names)
    return DatasetSplit(*(full.subset(ix) for ix in index))


def synthesize_toy(n: int, seed: int, size: int = SIZE) -> DatasetSplit:
    """Seeded two-attribute corpus with independent, balanced labels.

    ``blob_side``: a Gaussian blob (sigma 6 px, amplitude 0.5) left (0) or
    right (1) of centre. ``stripe_orient``: a grating with 8 cycles across the
    frame and amplitude 0.3, horizontal stripes (0) or vertical (1). Base level
    0.2, additive N(0, 0.02^2) noise, clipped to [0, 1]. Split 80/10/10.
    """
    if n < 10 or n % 2:
        raise ValueError(f"toy corpus needs an even n >= 10 to balance both attributes, got {n}")
    rng = np.random.default_rng(seed)
    half = n // 2
    desired = np.repeat([0, 1], half)
    # split each desired group as evenly as possible so both marginals are exactly n/2
    sensitive = np.empty(n, dtype=np.int64)
    k0 = (half + 1) // 2
    sensitive[:half] = np.repeat([0, 1], [half - k0, k0])
    sensitive[half:] = np.repeat([0, 1], [k0, half - k0])
    order = rng.permutation(n)
    desired, sensitive = desired[order], sensitive[order]

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    centres = {0: 16 * size / 64, 1: 48 * size / 64}
    blobs = {k: 0.5 * np.exp(-((xx - cx) ** 2 + (yy - size / 2) ** 2) / (2 * 6.0**2))
             for k, cx in centres.items()}
    phase = 2 * np.pi * 8 / size
    gratings = {0: 0.3 * np.sin(phase * yy), 1: 0.3 * np.sin(phase * xx)}

    images = np.empty((n, size, size), dtype=np.float32)
    for i in range(n):
        img = 0.2 + blobs[desired[i]] + gratings[sensitive[i]] + rng.normal(0.0, 0.02, (size, size))
        images[i] = np.clip(img, 0.0, 1.0)

    ids = [f"toy-{i:06d}" for i in range(n)]
    full = SampleSet(images, {TOY_DESIRED: desired, TOY_SENSITIVE: sensitive}, ids)
    index = _stratified_split(2 * desired + sensitive, (0.8, 0.1, 0.1), rng)
    return DatasetSplit(*(full.subset(ix) for ix in index))


def _stratified_split(cells: np.ndarray, ratios: Sequence[float], rng: np.random.Generator) -> list[np.ndarray]:
    """Split so that every label cell is spread evenly over train/val/test.

    Cells are dealt round-robin into one sequence; each block of 40 positions
    then holds 10 of every cell and is cut 32/4/4, so splits are exactly
    balanced whenever n is a multiple of 40.
    """
    n = len(cells)
    pools = [list(rng.permutation(np.flatnonzero(cells == c))) for c in np.unique(cells)]
    dealt = []
    while any(pools):
        for pool in pools:
            if pool:
                dealt.append(pool.pop())
    dealt = np.asarray(dealt)
    block = 40
    full_blocks, rest = divmod(n, block)
    cuts = [int(round(r * block)) for r in ratios[:2]]
    tail = list(_split_sizes(rest, ratios)) if rest else [0, 0, 0]
    which = np.empty(n, dtype=np.int64)
    for pos in range(n):
        b, p = divmod(pos, block)
        c0, c1 = (cuts[0], cuts[0] + cuts[1]) if b < full_blocks else (tail[0], tail[0] + tail[1])
        which[pos] = 0 if p < c0 else (1 if p < c1 else 2)
    return [np.sort(dealt[which == k]) for k in range(3)]


def save_corpus(data: DatasetSplit, directory: Union[str, Path], manifest: Mapping) -> Path:
    """Cache a split as ``corpus.npz`` plus a ``manifest.json`` (written last)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, part in data.parts().items():
        arrays[f"{name}/images"] = part.images
        arrays[f"{name}/ids"] = np.asarray(part.ids)
        for attr, v in part.labels.items():
            arrays[f"{name}/label/{attr}"] = v
    np.savez(directory / "corpus.npz", **arrays)
    meta = dict(manifest)
    meta["content_hash"] = data.content_hash()
    meta["sizes"] = dict(zip(("train", "val", "test"), data.sizes()))
    meta["attributes"] = data.attributes
    (directory / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory / "manifest.json"


def load_corpus(directory: Union[str, Path], verify: bool = True) -> DatasetSplit:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    with np.load(directory / "corpus.npz") as z:
        parts = []
        for name in ("train", "val", "test"):
            prefix = f"{name}/label/"
            labels = {k[len(prefix):]: z[k] for k in z.files if k.startswith(prefix)}
            parts.append(SampleSet(z[f"{name}/images"], labels, [str(s) for s in z[f"{name}/ids"]]))
    data = DatasetSplit(*parts)
    if verify and data.content_hash() != manifest.get("content_hash"):
        raise CorpusError(f"{directory}: corpus content does not match its manifest checksum")
    return data
