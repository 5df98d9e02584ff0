"""Datasets: on-disk layout, the synthetic palm-vein generator, splits and a
raw-pixel baseline classifier."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, IngestionError
from .imaging import GrayImage, read_image, to_tensor, write_pgm

IMAGE_SUFFIXES = (".pgm", ".png")


@dataclass(frozen=True)
class LabeledSample:
    image: GrayImage
    identity: str
    session: int
    index: int

    def __post_init__(self):
        if not self.identity:
            raise DataError("sample identity must be non-empty")
        if self.session not in (1, 2):
            raise DataError(f"session must be 1 or 2, got {self.session}")


@dataclass
class DatasetSplit:
    """Separated-session split.

    ``train``/``validation`` come from session 1 of the classifier identities,
    ``test`` holds their session-2 captures, and the held-out identities form
    the matching pool: ``gallery`` (session 1) against ``probes`` (session 2).
    """

    train: list[LabeledSample] = field(default_factory=list)
    validation: list[LabeledSample] = field(default_factory=list)
    test: list[LabeledSample] = field(default_factory=list)
    gallery: list[LabeledSample] = field(default_factory=list)
    probes: list[LabeledSample] = field(default_factory=list)

    @property
    def match_test(self) -> list[LabeledSample]:
        return self.gallery + self.probes

    def summary(self) -> dict:
        return {name: len(getattr(self, name))
                for name in ("train", "validation", "test", "gallery", "probes")}


def stack_tensors(samples: Sequence[LabeledSample]) -> np.ndarray:
    """Network input batch ``[N, 1, H, W]`` scaled to [0, 1]."""
    if not samples:
        raise DataError("no samples to stack")
    return np.stack([to_tensor(s.image) for s in samples])


def identities(samples: Iterable[LabeledSample]) -> list[str]:
    return sorted({s.identity for s in samples})


# --- disk layout: root/<identity>/<session>/<image> ---------------------------

def load_dataset(root) -> list[LabeledSample]:
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"{root}: dataset root is not a directory")
    samples: list[LabeledSample] = []
    shape = None
    for id_dir in sorted(root.iterdir()):
        if id_dir.name.startswith("."):
            continue
        if not id_dir.is_dir():
            raise IngestionError(f"{id_dir}: expected an identity directory")
        for sess_dir in sorted(id_dir.iterdir()):
            if sess_dir.name.startswith("."):
                continue
            if not sess_dir.is_dir() or sess_dir.name not in ("1", "2"):
                raise IngestionError(f"{sess_dir}: expected session directory '1' or '2'")
            for k, img_path in enumerate(sorted(p for p in sess_dir.iterdir() if not p.name.startswith("."))):
                if img_path.suffix.lower() not in IMAGE_SUFFIXES:
                    raise IngestionError(f"{img_path}: not a PGM/PNG image")
                img = read_image(img_path)
                if shape is None:
                    shape = img.pixels.shape
                elif img.pixels.shape != shape:
                    raise IngestionError(
                        f"{img_path}: size {img.width}x{img.height} differs from {shape[1]}x{shape[0]}")
                samples.append(LabeledSample(img, id_dir.name, int(sess_dir.name), k))
    return samples


def save_dataset(root, samples: Iterable[LabeledSample]) -> list[Path]:
    root = Path(root)
    written = []
    for s in samples:
        d = root / s.identity / str(s.session)
        d.mkdir(parents=True, exist_ok=True)
        path = d / f"{s.index:03d}.pgm"
        write_pgm(path, s.image)
        written.append(path)
    return written


# --- splitting ---------------------------------------------------------------

def split(samples: Sequence[LabeledSample], held_out_identities: int = 0,
          val_fraction: float = 0.15) -> DatasetSplit:
    """Partition samples by identity and session.

    The last ``held_out_identities`` identities (lexicographic) never reach the
    classifier. From each remaining identity, ``round(val_fraction * n)``
    session-1 images (the highest indices) go to validation.
    """
    ids = identities(samples)
    if held_out_identities < 0 or (held_out_identities and held_out_identities >= len(ids)):
        raise DataError(f"cannot hold out {held_out_identities} of {len(ids)} identities")
    if not 0 <= val_fraction < 1:
        raise DataError(f"val_fraction must be in [0, 1), got {val_fraction}")
    held = set(ids[len(ids) - held_out_identities:]) if held_out_identities else set()
    out = DatasetSplit()
    by_id: dict[str, list[LabeledSample]] = {}
    for s in samples:
        if s.identity in held:
            (out.gallery if s.session == 1 else out.probes).append(s)
        elif s.session == 2:
            out.test.append(s)
        else:
            by_id.setdefault(s.identity, []).append(s)
    for ident in sorted(by_id):
        group = sorted(by_id[ident], key=lambda s: s.index)
        n_val = int(math.floor(val_fraction * len(group) + 0.5))
        n_val = min(n_val, len(group) - 1)
        out.train.extend(group[:len(group) - n_val])
        out.validation.extend(group[len(group) - n_val:])
    return out


# --- synthetic palm veins ----------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    identities: int = 10
    images_per_session: int = 6
    side: int = 64
    seed: int = 0
    session_noise: float = 3.0
    curves: int = 8
    max_shift: float = 2.0
    max_rotation: float = 0.0
    texture: float = 2.0
    vein_width: float = 0.5
    shared_curves: int = 4
    shared_width: float = 1.5

    def __post_init__(self):
        if self.identities < 1 or self.images_per_session < 1 or self.curves < 1:
            raise DataError("synthetic counts must all be >= 1")
        if self.side < 32:
            raise DataError(f"synthetic image side must be >= 32, got {self.side}")


def _vein_curves(rng: np.random.Generator, spec: SynthSpec, count: int | None = None,
                 width: float | None = None) -> list[tuple[np.ndarray, float, float]]:
    """Identity geometry: list of (points [P, 2], profile width, darkening depth).

    Trunks enter from the border and sweep across the palm; later curves may
    branch off an earlier one.
    """
    side = spec.side
    scale = side / 64.0
    curves: list[tuple[np.ndarray, float, float]] = []
    centre = np.array([side / 2.0, side / 2.0])
    count = spec.curves if count is None else count
    width_centre = spec.vein_width if width is None else width
    for k in range(count):
        if curves and rng.random() < 0.5:
            parent = curves[int(rng.integers(len(curves)))][0]
            pos = parent[int(rng.integers(len(parent) // 4, max(len(parent) // 4 + 1, 3 * len(parent) // 4)))].copy()
            heading = rng.uniform(0, 2 * math.pi)
            length = rng.uniform(0.25, 0.5) * side
        else:
            edge_angle = rng.uniform(0, 2 * math.pi)
            pos = centre + 0.45 * side * np.array([math.cos(edge_angle), math.sin(edge_angle)])
            heading = edge_angle + math.pi + rng.uniform(-0.9, 0.9)
            length = rng.uniform(0.6, 1.1) * side
        turn = rng.normal(0.0, 0.02)
        step = 0.5
        pts = [pos.copy()]
        for _ in range(int(length / step)):
            turn = 0.97 * turn + rng.normal(0.0, 0.004 / scale)
            heading += turn
            pos = pos + step * np.array([math.cos(heading), math.sin(heading)])
            pts.append(pos.copy())
        width = width_centre * rng.uniform(0.7, 1.3) * scale
        depth = rng.uniform(35.0, 65.0)
        curves.append((np.array(pts), width, depth))
    return curves


def _render(curves, side: int, shift: np.ndarray, angle_deg: float) -> np.ndarray:
    """Total darkening field produced by the curves after a rigid motion."""
    c = (side - 1) / 2.0
    th = math.radians(angle_deg)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    dark = np.zeros((side, side))
    for pts, width, depth in curves:
        moved = (pts - c) @ rot.T + c + shift
        r = int(math.ceil(3.5 * width)) + 1
        dist2 = np.full((side, side), np.inf)
        for x, y in moved:
            x0, x1 = max(int(x) - r, 0), min(int(x) + r + 1, side)
            y0, y1 = max(int(y) - r, 0), min(int(y) + r + 1, side)
            if x0 >= x1 or y0 >= y1:
                continue
            yy, xx = np.ogrid[y0:y1, x0:x1]
            d2 = (xx - x) ** 2 + (yy - y) ** 2
            np.minimum(dist2[y0:y1, x0:x1], d2, out=dist2[y0:y1, x0:x1])
        dark += depth * np.exp(-dist2 / (2 * width ** 2))
    return dark


def _illumination(rng: np.random.Generator, side: int, level: float) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side] / (side - 1) - 0.5
    direction = rng.uniform(0, 2 * math.pi)
    ramp = rng.uniform(0, 60.0) * (math.cos(direction) * xx + math.sin(direction) * yy)
    out = level + ramp
    for _ in range(3):
        cy, cx = rng.uniform(-0.4, 0.4, size=2)
        out = out + rng.uniform(-20.0, 20.0) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / 0.05)
    return out


def synth_generate(spec: SynthSpec = SynthSpec()) -> list[LabeledSample]:
    """Deterministic synthetic palm-vein captures.

    Identity fixes the vein geometry; every capture adds its own shift,
    rotation, illumination and sensor noise, and each session has its own
    brightness offset.
    """
    side = spec.side
    samples: list[LabeledSample] = []
    width = max(3, len(str(spec.identities - 1)))
    # gross anatomy common to every hand; identity lives in the finer veins
    shared = _vein_curves(np.random.default_rng([spec.seed, 3]), spec, spec.shared_curves, spec.shared_width)
    for ident in range(spec.identities):
        geo_rng = np.random.default_rng([spec.seed, ident, 0])
        curves = shared + _vein_curves(geo_rng, spec)
        texture = spec.texture * _smooth_noise(geo_rng, side)
        for session in (1, 2):
            # capture-day offset shared by every hand in the session
            sess_rng = np.random.default_rng([spec.seed, session, 1])
            session_level = 180.0 + sess_rng.normal(0.0, 8.0)
            for index in range(spec.images_per_session):
                rng = np.random.default_rng([spec.seed, ident, session, 2, index])
                shift = rng.uniform(-spec.max_shift, spec.max_shift, size=2)
                angle = rng.uniform(-spec.max_rotation, spec.max_rotation)
                base = _illumination(rng, side, session_level + rng.normal(0.0, 6.0))
                img = base + texture - _render(curves, side, shift, angle)
                img = img + rng.normal(0.0, spec.session_noise, size=img.shape)
                px = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
                samples.append(LabeledSample(GrayImage(px), f"id{ident:0{width}d}", session, index))
    return samples


def _smooth_noise(rng: np.random.Generator, side: int) -> np.ndarray:
    from .imaging import gaussian_blur
    field_ = gaussian_blur(rng.normal(size=(side, side)), 2.0 * side / 64.0)
    return field_ / (field_.std() + 1e-12)


# --- baseline ----------------------------------------------------------------

def nearest_centroid_oracle(split_: DatasetSplit, shuffle_labels_seed: int | None = None) -> float:
    """Accuracy of classifying validation images by the nearest per-identity
    mean raw-pixel vector of the training images.

    With ``shuffle_labels_seed`` the training labels are permuted first, which
    should bring accuracy down to chance.
    """
    train, val = split_.train, split_.validation
    if not train or not val:
        raise DataError("nearest-centroid oracle needs non-empty train and validation sets")
    labels = [s.identity for s in train]
    if shuffle_labels_seed is not None:
        labels = list(np.random.default_rng(shuffle_labels_seed).permutation(labels))
    ids = sorted(set(labels))
    x = np.stack([s.image.pixels.ravel().astype(np.float64) for s in train])
    lab = np.array(labels)
    centroids = np.stack([x[lab == i].mean(axis=0) for i in ids])
    v = np.stack([s.image.pixels.ravel().astype(np.float64) for s in val])
    d2 = ((v[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    pred = [ids[k] for k in np.argmin(d2, axis=1)]
    return float(np.mean([p == s.identity for p, s in zip(pred, val)]))
