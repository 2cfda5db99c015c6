"""Datasets, class splits, and N-way K-shot episode sampling.

On-disk layout: ``root/{train,val,test}/<class>/<example>.(pgm|csv)`` with
binary P5 PGM (maxval <= 255, pixels scaled to [0, 1]) or single-row CSV
float vectors.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ContractError, FormatError

SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    classes: dict[int, np.ndarray]  # class id -> [n_examples, *input_shape]
    splits: dict[str, list[int]]  # split -> sorted class ids (disjoint)
    input_shape: tuple[int, ...]
    class_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        seen: set[int] = set()
        for split, ids in self.splits.items():
            overlap = seen.intersection(ids)
            if overlap:
                raise ContractError(f"class ids {sorted(overlap)} appear in multiple splits")
            seen.update(ids)

    def split_classes(self, split: str) -> list[int]:
        if split not in self.splits:
            raise CapacityError(f"unknown split {split!r}; have {sorted(self.splits)}")
        return self.splits[split]


@dataclass
class TaskEpisode:
    """One N-way K-shot task with local labels 0..N-1.

    Local labels are assigned by sorted global class id; support rows are
    grouped by local class, exactly K per class.
    """

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    class_map: list[int]  # local label -> global class id
    n_way: int
    k_shot: int


def sample_episode(
    d: Dataset, split: str, n_way: int, k_shot: int, n_query: int, rng: np.random.Generator
) -> TaskEpisode:
    """Draw classes without replacement; support and query never share an example."""
    ids = d.split_classes(split)
    if len(ids) < n_way:
        raise CapacityError(f"split {split!r} has {len(ids)} classes, need {n_way}")
    chosen = sorted(rng.choice(np.asarray(ids), size=n_way, replace=False).tolist())
    sup_x, sup_y, qry_x, qry_y = [], [], [], []
    for local, cid in enumerate(chosen):
        pool = d.classes[cid]
        need = k_shot + n_query
        if len(pool) < need:
            raise CapacityError(f"class {cid} has {len(pool)} examples, need {need}")
        picks = rng.choice(len(pool), size=need, replace=False)
        sup_x.append(pool[picks[:k_shot]])
        qry_x.append(pool[picks[k_shot:]])
        sup_y.extend([local] * k_shot)
        qry_y.extend([local] * n_query)
    return TaskEpisode(
        support_x=np.concatenate(sup_x),
        support_y=np.asarray(sup_y, dtype=np.int64),
        query_x=np.concatenate(qry_x),
        query_y=np.asarray(qry_y, dtype=np.int64),
        class_map=chosen,
        n_way=n_way,
        k_shot=k_shot,
    )


# -- synthetic data ---------------------------------------------------------

def _blob_means(n_classes: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    if dim >= n_classes:
        # centered regular simplex scaled to pairwise distance `separation`,
        # randomly rotated so every class projects onto every input axis
        # (unseen-class episodes then share input structure with training)
        verts = np.zeros((n_classes, dim))
        verts[np.arange(n_classes), np.arange(n_classes)] = separation / np.sqrt(2.0)
        verts -= verts.mean(axis=0)
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        return verts @ (q * np.sign(np.diag(r)))
    # too few dimensions for a regular simplex: regular polygon in the first
    # two axes with adjacent (minimum) distance `separation`
    radius = separation / (2.0 * np.sin(np.pi / n_classes))
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    means = np.zeros((n_classes, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def _split_counts(n_classes: int) -> tuple[int, int, int]:
    n_val = max(1, n_classes // 4) if n_classes >= 2 else 0
    n_test = max(1, n_classes // 4) if n_classes >= 3 else 0
    return n_classes - n_val - n_test, n_val, n_test


def make_synthetic(
    kind: str,
    n_classes: int,
    dim: int,
    n_per_class: int,
    spread: float,
    seed: int,
    separation: float = 4.0,
) -> Dataset:
    """Generate blobs (class means on a scaled simplex) or concentric rings.

    Rings are the out-of-distribution counterpart to blobs: class k lives on
    the annulus of radius (k+1)*separation/2 around the origin.
    """
    if kind not in ("blobs", "rings"):
        raise ContractError(f"unknown synthetic kind {kind!r}")
    if n_classes < 2 or dim < 2:
        raise ContractError("make_synthetic needs n_classes >= 2 and dim >= 2")
    rng = np.random.default_rng(seed)
    classes: dict[int, np.ndarray] = {}
    if kind == "blobs":
        means = _blob_means(n_classes, dim, separation, rng)
        for cid in range(n_classes):
            classes[cid] = means[cid] + spread * rng.standard_normal((n_per_class, dim))
    else:
        for cid in range(n_classes):
            radius = (cid + 1) * separation / 2.0
            dirs = rng.standard_normal((n_per_class, dim))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            r = radius + spread * rng.standard_normal((n_per_class, 1))
            classes[cid] = dirs * r
    n_train, n_val, n_test = _split_counts(n_classes)
    # interleave the splits so held-out classes sit between training ones
    # rather than forming a contiguous block of the mean layout
    pattern = {0: "train", 1: "val", 2: "train", 3: "test"}
    quota = {"train": n_train, "val": n_val, "test": n_test}
    splits: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    for cid in range(n_classes):
        for slot in (pattern[cid % 4], "train", "val", "test"):
            if len(splits[slot]) < quota[slot]:
                splits[slot].append(cid)
                break
    return Dataset(classes=classes, splits=splits, input_shape=(dim,))


# -- disk ingestion ----------------------------------------------------------

def _read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != b"P5":
        raise FormatError(f"{path}: not a binary P5 PGM")
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # '#' comments allowed
    tokens: list[int] = []
    i = 2
    while len(tokens) < 3:
        if i >= len(blob):
            raise FormatError(f"{path}: truncated PGM header")
        ch = blob[i : i + 1]
        if ch.isspace():
            i += 1
        elif ch == b"#":
            i = blob.find(b"\n", i)
            if i < 0:
                raise FormatError(f"{path}: unterminated PGM comment")
        elif ch.isdigit():
            j = i
            while j < len(blob) and blob[j : j + 1].isdigit():
                j += 1
            tokens.append(int(blob[i:j]))
            i = j
        else:
            raise FormatError(f"{path}: malformed PGM header")
    width, height, maxval = tokens
    if not (0 < maxval <= 255) or width <= 0 or height <= 0:
        raise FormatError(f"{path}: unsupported PGM header values {tokens}")
    i += 1  # single whitespace byte before the raster
    raster = blob[i : i + width * height]
    if len(raster) != width * height:
        raise FormatError(f"{path}: PGM raster has {len(raster)} bytes, expected {width * height}")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 1)
    return img.astype(np.float64) / maxval


def _read_csv_vector(path: str) -> np.ndarray:
    with open(path, "r", encoding="ascii") as fh:
        row = fh.readline().strip()
    if not row:
        raise FormatError(f"{path}: empty CSV example")
    try:
        return np.array([float(v) for v in row.split(",")])
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric CSV value") from exc


def load_image_dataset(root: str) -> Dataset:
    """Load ``root/{train,val,test}/<class>/<example>.(pgm|csv)``."""
    if not os.path.isdir(root):
        raise FormatError(f"{root}: not a directory")
    classes: dict[int, np.ndarray] = {}
    splits: dict[str, list[int]] = {}
    class_names: dict[int, str] = {}
    input_shape: tuple[int, ...] | None = None
    next_id = 0
    for split in SPLITS:
        split_dir = os.path.join(root, split)
        splits[split] = []
        if not os.path.isdir(split_dir):
            continue
        for cls_name in sorted(os.listdir(split_dir)):
            cls_dir = os.path.join(split_dir, cls_name)
            if not os.path.isdir(cls_dir):
                continue
            examples = []
            for fname in sorted(os.listdir(cls_dir)):
                path = os.path.join(cls_dir, fname)
                if fname.endswith(".pgm"):
                    ex = _read_pgm(path)
                elif fname.endswith(".csv"):
                    ex = _read_csv_vector(path)
                else:
                    continue
                if input_shape is None:
                    input_shape = ex.shape
                elif ex.shape != input_shape:
                    raise FormatError(
                        f"{path}: example shape {ex.shape} differs from {input_shape}"
                    )
                examples.append(ex)
            if not examples:
                raise CapacityError(f"{cls_dir}: class directory holds no examples")
            classes[next_id] = np.stack(examples)
            class_names[next_id] = f"{split}/{cls_name}"
            splits[split].append(next_id)
            next_id += 1
    if input_shape is None:
        raise CapacityError(f"{root}: no examples found under any split")
    return Dataset(classes=classes, splits=splits, input_shape=input_shape, class_names=class_names)


def save_dataset(d: Dataset, root: str) -> None:
    """Materialize a dataset in the directory layout ``load_image_dataset`` reads."""
    for split, ids in d.splits.items():
        for cid in ids:
            cls_dir = os.path.join(root, split, f"class_{cid:04d}")
            os.makedirs(cls_dir, exist_ok=True)
            for i, ex in enumerate(d.classes[cid]):
                if ex.ndim == 1:
                    path = os.path.join(cls_dir, f"ex_{i:05d}.csv")
                    with open(path, "w", encoding="ascii") as fh:
                        fh.write(",".join(repr(v) for v in ex.tolist()) + "\n")
                else:
                    path = os.path.join(cls_dir, f"ex_{i:05d}.pgm")
                    img = np.clip(np.round(ex[..., 0] * 255.0), 0, 255).astype(np.uint8)
                    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
                    with open(path, "wb") as fh:
                        fh.write(header + img.tobytes())
