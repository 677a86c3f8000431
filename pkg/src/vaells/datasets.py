"""Synthetic datasets with known 2-D latent structure, and anchor selection."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError
from .model import AnchorSet

SWISS_T_RANGE = (1.5 * np.pi, 4.5 * np.pi)
CIRCLE_RADII = (0.5, 1.0)


@dataclass
class LabeledDataset:
    inputs: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,)
    latents: np.ndarray | None = None  # (N, 2) ground truth
    embedding: np.ndarray | None = None  # (D, 2)
    kind: str = "custom"
    groups: np.ndarray | None = None  # per-sample anchor group ids
    params: np.ndarray | None = None  # swiss-roll t, or rotation angle in degrees
    bases: np.ndarray | None = None  # unrotated glyph per sample

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.shape[0] != self.inputs.shape[0]:
            raise ConfigurationError("label count must equal sample count")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def data_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def anchor_keys(self) -> np.ndarray:
        """Which anchor group each sample's prior is built from."""
        return self.labels if self.groups is None else self.groups

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return LabeledDataset(self.inputs[idx], self.labels[idx], pick(self.latents), self.embedding,
                              self.kind, pick(self.groups), pick(self.params), pick(self.bases))


def random_embedding(rng, data_dim: int = 20, latent_dim: int = 2) -> np.ndarray:
    """``(data_dim, latent_dim)`` map with orthonormal columns."""
    q, r = np.linalg.qr(rng.standard_normal((data_dim, latent_dim)))
    return q * np.sign(np.diag(r))


def _embedded(latents, labels, embedding, kind, params=None) -> LabeledDataset:
    return LabeledDataset(latents @ embedding.T, labels, latents, embedding, kind, params=params)


def swiss_roll_latents(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    r = t / SWISS_T_RANGE[1]
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=-1)


def gen_swiss_roll(n: int, rng, data_dim: int = 20, embedding=None) -> LabeledDataset:
    """Points on a 1.5-turn spiral, linearly embedded in ``data_dim`` dims.

    Pass the ``embedding`` of an existing dataset to draw test points from
    the same input space.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    E = random_embedding(rng, data_dim) if embedding is None else np.asarray(embedding, dtype=np.float64)
    t = rng.uniform(*SWISS_T_RANGE, size=n)
    return _embedded(swiss_roll_latents(t), np.zeros(n, dtype=np.int64), E, "swiss_roll", t)


def gen_concentric_circles(n: int, rng, data_dim: int = 20, embedding=None) -> LabeledDataset:
    """Two circles (radius 0.5 is class 0, radius 1.0 class 1) embedded in ``data_dim`` dims."""
    if n < 2:
        raise ValueError("n must be >= 2")
    E = random_embedding(rng, data_dim) if embedding is None else np.asarray(embedding, dtype=np.float64)
    labels = np.arange(n) % 2
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    radius = np.asarray(CIRCLE_RADII)[labels]
    latents = radius[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return _embedded(latents, labels, E, "circles", theta)


# --- rotated glyphs ---------------------------------------------------------

GLYPH_TYPES = 3


def make_glyph(kind: int, side: int, rng) -> np.ndarray:
    """An asymmetric glyph on a ``side x side`` grid with values in [0, 1].

    Kinds: 0 an L-shaped bar pair, 1 a bar with a blob at one end, 2 a
    thick wedge.  Stroke positions jitter per call so no two glyphs match.
    """
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    c = (side - 1) / 2.0
    j = rng.uniform(-0.06, 0.06, size=4) * side
    img = np.zeros((side, side))
    w = 0.09 * side
    if kind == 0:
        vert = (np.abs(xx - (c - 0.2 * side + j[0])) < w) & (yy > 0.2 * side + j[1]) & (yy < 0.8 * side)
        horiz = (np.abs(yy - (0.75 * side + j[2])) < w) & (xx > c - 0.2 * side + j[0]) & (xx < 0.8 * side + j[3])
        img[vert | horiz] = 1.0
    elif kind == 1:
        bar = (np.abs(xx - (c + j[0])) < w) & (yy > 0.15 * side) & (yy < 0.85 * side)
        blob = (xx - (c + 0.18 * side + j[1])) ** 2 + (yy - (0.25 * side + j[2])) ** 2 < (0.16 * side) ** 2
        img[bar] = 1.0
        img[blob] = np.maximum(img[blob], 0.7)
    else:
        tip_x, tip_y = 0.2 * side + j[0], 0.2 * side + j[1]
        ang = np.arctan2(yy - tip_y, xx - tip_x)
        dist = np.hypot(xx - tip_x, yy - tip_y)
        img[(ang > 0.15 + j[2] / side) & (ang < 0.75) & (dist < 0.75 * side + j[3])] = 1.0
    return img


def rotate_image(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the grid centre with bilinear interpolation, zero fill."""
    img = np.asarray(img, dtype=np.float64)
    th = np.deg2rad(degrees)
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    centre = (np.array(img.shape) - 1) / 2.0
    offset = centre - R @ centre
    out = ndimage.affine_transform(img, R, offset=offset, order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def gen_rotated_glyphs(n: int, side: int, rng, anchors_per_sample: int = 10):
    """Glyphs rotated to random angles in [0, 350] degrees.

    Returns ``(dataset, anchors)``; sample ``i`` forms anchor group ``i``
    whose members are its base glyph at evenly spaced rotations.
    """
    if side < 8:
        raise ValueError("side must be >= 8")
    kinds = rng.integers(0, GLYPH_TYPES, size=n)
    bases = np.stack([make_glyph(int(k), side, rng) for k in kinds])
    angles = rng.uniform(0.0, 350.0, size=n)
    inputs = np.stack([rotate_image(b, a).ravel() for b, a in zip(bases, angles)])
    ds = LabeledDataset(inputs, kinds, kind="glyphs", groups=np.arange(n), params=angles,
                        bases=bases.reshape(n, -1))
    return ds, select_anchors(ds, "per_sample_rotations", anchors_per_sample, rng)


# --- anchors ----------------------------------------------------------------

ANCHOR_STRATEGIES = ("even", "random", "per_sample_rotations")


def select_anchors(dataset: LabeledDataset, strategy: str, per_class: int, rng) -> AnchorSet:
    """Pick anchor points in input space.

    ``even`` spaces anchors along the ground-truth manifold of each class
    (synthetic sets only), ``random`` draws training samples per class, and
    ``per_sample_rotations`` builds evenly rotated copies of each glyph.
    """
    if per_class < 1:
        raise ConfigurationError("per_class must be >= 1")
    if strategy == "even":
        if dataset.embedding is None or dataset.kind not in ("swiss_roll", "circles"):
            raise ConfigurationError("even anchor spacing needs a synthetic dataset with ground truth")
        if dataset.kind == "swiss_roll":
            lo, hi = SWISS_T_RANGE
            t = lo + (np.arange(per_class) + 0.5) * (hi - lo) / per_class
            latents, labels = swiss_roll_latents(t), np.zeros(per_class, dtype=np.int64)
        else:
            ang = 2 * np.pi * np.arange(per_class) / per_class
            unit = np.stack([np.cos(ang), np.sin(ang)], axis=1)
            latents = np.concatenate([r * unit for r in CIRCLE_RADII])
            labels = np.repeat(np.arange(len(CIRCLE_RADII)), per_class)
        return AnchorSet(latents @ dataset.embedding.T, labels)
    if strategy == "random":
        pts, labels = [], []
        for label in np.unique(dataset.labels):
            members = np.nonzero(dataset.labels == label)[0]
            pick = rng.choice(members, size=min(per_class, members.size), replace=False)
            pts.append(dataset.inputs[np.sort(pick)])
            labels += [label] * pick.size
        return AnchorSet(np.concatenate(pts), labels)
    if strategy == "per_sample_rotations":
        if dataset.bases is None:
            raise ConfigurationError("per-sample rotations need a glyph dataset")
        side = int(round(np.sqrt(dataset.bases.shape[1])))
        angles = 360.0 * np.arange(per_class) / per_class
        pts = [rotate_image(b.reshape(side, side), a).ravel() for b in dataset.bases for a in angles]
        labels = np.repeat(dataset.anchor_keys, per_class)
        return AnchorSet(np.stack(pts), labels, trainable=False)
    raise ConfigurationError(f"unknown anchor strategy {strategy!r}; expected one of {ANCHOR_STRATEGIES}")


# --- CSV ----------------------------------------------------------------------

def _fmt(v) -> str:
    return format(float(v), ".17g")


def save_dataset_csv(dataset: LabeledDataset, path) -> None:
    """``path`` holds label + inputs; latents and embedding go to sibling files."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"x{i}" for i in range(dataset.data_dim)])
        for label, row in zip(dataset.labels, dataset.inputs):
            w.writerow([int(label)] + [_fmt(v) for v in row])
    if dataset.latents is not None:
        _write_matrix(path.with_name(path.stem + "_latents.csv"), dataset.latents, ["z1", "z2"])
    if dataset.embedding is not None:
        _write_matrix(path.with_name(path.stem + "_embedding.csv"), dataset.embedding, ["e1", "e2"])


def _write_matrix(path, mat, header):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in mat:
            w.writerow([_fmt(v) for v in row])


def _read_matrix(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in r] for r in rows])


def load_dataset_csv(path, kind: str = "custom") -> LabeledDataset:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigurationError(f"cannot read dataset {path}: {exc}") from exc
    if not rows or rows[0][0] != "label":
        raise ConfigurationError(f"{path}: missing 'label' header")
    body = rows[1:]
    try:
        labels = np.array([int(r[0]) for r in body])
        inputs = np.array([[float(v) for v in r[1:]] for r in body])
    except (ValueError, IndexError) as exc:
        raise ConfigurationError(f"{path}: malformed row ({exc})") from exc
    lat = path.with_name(path.stem + "_latents.csv")
    emb = path.with_name(path.stem + "_embedding.csv")
    return LabeledDataset(inputs, labels, _read_matrix(lat) if lat.exists() else None,
                          _read_matrix(emb) if emb.exists() else None, kind)
