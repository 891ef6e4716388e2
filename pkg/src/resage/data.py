"""Dataset ingestion, the synthetic desk-scale face renderer, and the
analytic age / identity oracles used by the evaluation protocols.

Synthetic faces encode age in three monotone, invertible channels:
  (a) background-to-skin contrast, decreasing linearly with age;
  (b) number of concentric dark "wrinkle" rings = floor(age / 10);
  (c) a "hair" band whose shade goes dark -> light linearly with age.
Identity lives in the ellipse eccentricity and in three colored marker
spots whose positions and hues depend only on the identity seed, never age.
"""

import colorsys
import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from resage.profiles import SizeProfile

AGE_LO, AGE_HI = 15.0, 70.0
_BG = 0.92
_SKIN_LO, _SKIN_SPAN = 0.30, 0.40      # skin shade rises with age
_HAIR_LO, _HAIR_SPAN = 0.15, 0.70      # hair shade rises with age
_RING_DEPTH = 0.22
_RING_HALF_WIDTH = 0.008               # fraction of canvas
_RING_R0, _RING_STEP = 0.10, 0.03      # ring k radius = R0 + STEP*(k-1)
_MAX_RINGS = 7
_CENTER = (0.56, 0.50)                 # (row, col), fraction of canvas
_FACE_BY = 0.38
_HUE_PALETTE_SIZE = 6
_MARKER_RADIUS = 0.065
_MARKER_RADIAL_FRAC = 0.85
_HAIR_BAND = 0.09
_SUPERSAMPLE = 3

_CHROMA_THRESHOLD = 0.20
_POS_TOLERANCE = 0.04                  # detection deadzones, normalized units
_HUE_TOLERANCE = 0.06
_MAX_DISTANCE = 1.0


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    age: int
    gender: str
    split: str


@dataclass(frozen=True)
class SyntheticFaceSpec:
    identity_seed: int
    age: float
    canvas: int

    def __post_init__(self):
        if not AGE_LO <= self.age <= AGE_HI:
            raise ValueError(f"age must be in [{AGE_LO}, {AGE_HI}]")


@dataclass(frozen=True)
class IdentityMarkers:
    positions: tuple    # ((row, col), ...) in normalized coordinates
    hues: tuple


def _age_fraction(age: float) -> float:
    return (age - AGE_LO) / (AGE_HI - AGE_LO)


def identity_features(identity_seed: int):
    """(eccentricity, IdentityMarkers) as a pure function of the seed."""
    rng = np.random.default_rng(np.uint64(identity_seed) * np.uint64(2654435761) + np.uint64(17))
    ecc = float(rng.uniform(0.0, 1.0))
    bx = 0.30 + 0.10 * ecc
    base_angle = rng.uniform(0.0, 2 * math.pi)
    # hues come from a discrete, well-separated palette (distinct per marker)
    # rather than a continuum: a learnable categorical cue, same detectability
    palette_bins = rng.choice(_HUE_PALETTE_SIZE, size=3, replace=False)
    cy, cx = _CENTER
    positions, hues = [], []
    for i in range(3):
        theta = base_angle + 2 * math.pi * i / 3 + float(rng.uniform(-0.5, 0.5))
        hue = (float(palette_bins[i]) + 0.5) / _HUE_PALETTE_SIZE
        # radius of the face ellipse at this angle
        er = bx * _FACE_BY / math.sqrt((_FACE_BY * math.cos(theta)) ** 2
                                       + (bx * math.sin(theta)) ** 2)
        r = _MARKER_RADIAL_FRAC * er - _MARKER_RADIUS
        positions.append((cy + r * math.sin(theta), cx + r * math.cos(theta)))
        hues.append(hue)
    return ecc, IdentityMarkers(positions=tuple(positions), hues=tuple(hues))


def ring_count(age: float) -> int:
    return int(math.floor(age / 10.0))


def synthesize_face(spec: SyntheticFaceSpec) -> torch.Tensor:
    """Render one face as a (3, S, S) tensor in [-1, 1]."""
    s = spec.canvas
    hi = s * _SUPERSAMPLE
    u = _age_fraction(spec.age)
    ecc, markers = identity_features(spec.identity_seed)
    bx = 0.30 + 0.10 * ecc
    cy, cx = _CENTER

    ys, xs = np.meshgrid((np.arange(hi) + 0.5) / hi,
                         (np.arange(hi) + 0.5) / hi, indexing="ij")
    img = np.full((hi, hi, 3), _BG, dtype=np.float64)

    skin = _SKIN_LO + _SKIN_SPAN * u
    face = ((xs - cx) / bx) ** 2 + ((ys - cy) / _FACE_BY) ** 2 <= 1.0
    img[face] = skin

    r = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
    ring_shade = max(skin - _RING_DEPTH, 0.02)
    for k in range(ring_count(spec.age)):
        rk = _RING_R0 + _RING_STEP * k
        band = np.abs(r - rk) <= _RING_HALF_WIDTH
        img[band & face] = ring_shade

    for (my, mx), hue in zip(markers.positions, markers.hues):
        rgb = colorsys.hsv_to_rgb(hue, 0.9, 0.85)
        spot = (xs - mx) ** 2 + (ys - my) ** 2 <= _MARKER_RADIUS ** 2
        img[spot] = rgb

    hair = _HAIR_LO + _HAIR_SPAN * u
    img[ys < _HAIR_BAND] = hair

    img = img.reshape(s, _SUPERSAMPLE, s, _SUPERSAMPLE, 3).mean(axis=(1, 3))
    img = np.round(img * 255.0) / 255.0       # match PNG quantization
    tensor = torch.from_numpy(img.astype(np.float32)).permute(2, 0, 1)
    return tensor * 2.0 - 1.0


def save_image(tensor: torch.Tensor, path):
    arr = ((tensor.detach().clamp(-1, 1) + 1) * 0.5 * 255.0).round()
    arr = arr.to(torch.uint8).permute(1, 2, 0).numpy()
    Image.fromarray(arr, "RGB").save(path, format="PNG")


def load_image(entry: ManifestEntry, profile: SizeProfile,
               root: Optional[Path] = None) -> torch.Tensor:
    path = Path(entry.path)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    try:
        img = Image.open(path).convert("RGB")
    except Exception as exc:
        raise IOError(f"cannot decode image {path}: {exc}") from exc
    side = profile.image_side
    if img.size != (side, side):
        img = img.resize((side, side), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1) * 2.0 - 1.0


def _to_unit_array(img: torch.Tensor) -> np.ndarray:
    """(3,S,S) in [-1,1] -> (S,S,3) numpy in [0,1]."""
    arr = img.detach().to(torch.float64).permute(1, 2, 0).numpy()
    return (arr + 1.0) * 0.5


def _patch_mean(gray, rows, cols):
    return float(gray[rows[0]:rows[1], cols[0]:cols[1]].mean())


def oracle_age_readout(img: torch.Tensor) -> Optional[float]:
    """Invert the age-coding features; None when the image is unreadable."""
    arr = _to_unit_array(img)
    s = arr.shape[0]
    gray = arr.mean(axis=2)
    cy, cx = int(_CENTER[0] * s), int(_CENTER[1] * s)

    pr = max(2, int(0.06 * s))
    skin = _patch_mean(gray, (cy - pr, cy + pr), (cx - pr, cx + pr))
    c0, c1 = int(0.86 * s), int(0.99 * s)
    w = max(2, int(0.08 * s))
    bg = 0.5 * (_patch_mean(gray, (c0, c1), (1, 1 + w))
                + _patch_mean(gray, (c0, c1), (s - 1 - w, s - 1)))
    hair = _patch_mean(gray, (max(1, int(0.02 * s)), int(0.07 * s)), (1, s - 1))

    u_contrast = ((_BG - _SKIN_LO) - (bg - skin)) / _SKIN_SPAN
    u_hair = (hair - _HAIR_LO) / _HAIR_SPAN
    if not (-0.3 <= u_contrast <= 1.3) or not (-0.3 <= u_hair <= 1.3):
        return None
    age_contrast = AGE_LO + (AGE_HI - AGE_LO) * u_contrast
    age_hair = AGE_LO + (AGE_HI - AGE_LO) * u_hair

    # Ring count via the integrated darkness of the radial profile: each ring
    # contributes depth * width regardless of blur.
    radii = np.arange(0.06 * s, (0.30 * s) + 0.5, 0.5)
    angles = np.linspace(0, 2 * math.pi, 181)[:-1]
    yy = np.clip((cy + radii[:, None] * np.sin(angles)).round().astype(int), 0, s - 1)
    xx = np.clip((cx + radii[:, None] * np.cos(angles)).round().astype(int), 0, s - 1)
    profile = gray[yy, xx].mean(axis=1)
    darkness = np.maximum(skin - profile, 0.0).sum() * 0.5      # d(radius)=0.5 px
    per_ring = _RING_DEPTH * (2 * _RING_HALF_WIDTH * s)
    n_rings = int(round(darkness / per_ring))
    estimates, sigmas = [age_contrast, age_hair], [2.0, 2.0]
    if 1 <= n_rings <= _MAX_RINGS:
        estimates.append(10.0 * n_rings + 5.0)
        sigmas.append(9.0)
    w_inv = [1.0 / sg ** 2 for sg in sigmas]
    return float(sum(e * w for e, w in zip(estimates, w_inv)) / sum(w_inv))


def _rgb_to_hue(rgb: np.ndarray) -> float:
    r, g, b = rgb
    mx, mn = max(rgb), min(rgb)
    if mx == mn:
        return 0.0
    d = mx - mn
    if mx == r:
        h = ((g - b) / d) % 6
    elif mx == g:
        h = (b - r) / d + 2
    else:
        h = (r - g) / d + 4
    return float(h / 6.0)


def detect_markers(img: torch.Tensor) -> Optional[IdentityMarkers]:
    """Locate the chromatic marker spots; None when nothing is detectable."""
    arr = _to_unit_array(img)
    s = arr.shape[0]
    chroma = arr.max(axis=2) - arr.min(axis=2)
    mask = chroma > _CHROMA_THRESHOLD
    mask[: int(0.12 * s)] = False       # hair band can pick up chroma noise
    labels, n = ndimage.label(mask)
    if n == 0:
        return None
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=range(1, n + 1))
    order = np.argsort(sizes)[::-1]
    positions, hues = [], []
    for idx in order[:3]:
        if sizes[idx] < 3:
            continue
        component = labels == idx + 1
        ys, xs = np.nonzero(component)
        positions.append((float(ys.mean() + 0.5) / s, float(xs.mean() + 0.5) / s))
        hues.append(_rgb_to_hue(arr[component].mean(axis=0)))
    if not positions:
        return None
    return IdentityMarkers(positions=tuple(positions), hues=tuple(hues))


def _marker_pair_cost(pa, ha, pb, hb) -> float:
    dpos = math.hypot(pa[0] - pb[0], pa[1] - pb[1])
    dhue = abs(ha - hb)
    dhue = min(dhue, 1.0 - dhue)
    # Discrepancies below detection resolution count as zero.
    return (1.5 * max(0.0, dpos - _POS_TOLERANCE)
            + 1.0 * max(0.0, dhue - _HUE_TOLERANCE))


def measure_face_halfwidth(img: torch.Tensor) -> float:
    """Horizontal half-extent of the face at its center row, normalized."""
    arr = _to_unit_array(img)
    s = arr.shape[0]
    gray = arr.mean(axis=2)
    cy = int(_CENTER[0] * s)
    band = gray[cy - 2:cy + 3, :]
    bg = 0.5 * (band[:, :2].mean() + band[:, -2:].mean())
    face_cols = (np.abs(band - bg) > 0.10).mean(axis=0) > 0.5
    return float(face_cols.sum()) / (2.0 * s)


def oracle_identity_distance(img_a: torch.Tensor, img_b: torch.Tensor) -> float:
    """Mean hue/position discrepancy of matched marker spots plus a face-
    width term; identity features are age-invariant so clean same-identity
    pairs score 0."""
    if img_a.shape != img_b.shape:
        raise ValueError("images must share a shape")
    dwidth = abs(measure_face_halfwidth(img_a) - measure_face_halfwidth(img_b))
    shape_term = 3.0 * max(0.0, dwidth - 0.015)
    det_a, det_b = detect_markers(img_a), detect_markers(img_b)
    if det_a is None or det_b is None:
        return _MAX_DISTANCE
    small, large = sorted([det_a, det_b], key=lambda d: len(d.positions))
    ns, nl = len(small.positions), len(large.positions)
    from itertools import permutations
    best = None
    for perm in permutations(range(nl), ns):
        cost = sum(
            _marker_pair_cost(small.positions[i], small.hues[i],
                              large.positions[j], large.hues[j])
            for i, j in enumerate(perm))
        best = cost if best is None else min(best, cost)
    unmatched = nl - ns
    # the undetectable-marker sentinel (_MAX_DISTANCE) is the worst case, so
    # extreme shape/position terms saturate there rather than exceeding it
    return min((best + unmatched * (_MAX_DISTANCE / 3.0)) / nl + shape_term,
               _MAX_DISTANCE)


def save_manifest(entries, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "age", "gender", "split"])
        for e in entries:
            writer.writerow([e.path, e.age, e.gender, e.split])


def load_manifest(path) -> list:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    entries = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path", "age", "gender", "split"]:
            raise ManifestError(f"bad manifest header in {path}: {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            p, age_s, gender, split = row
            try:
                age = int(age_s)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: age {age_s!r} is not an integer")
            if not 0 <= age <= 99:
                raise ManifestError(f"{path}:{lineno}: age {age} out of [0, 99]")
            if split not in ("train", "test"):
                raise ManifestError(f"{path}:{lineno}: split must be train|test")
            entries.append(ManifestEntry(path=p, age=age, gender=gender, split=split))
    return entries


def build_synthetic_dataset(n_identities: int, ages_per_identity: int,
                            profile: SizeProfile, seed: int, root) -> Path:
    """Render the synthetic dataset and write its manifest; returns the
    manifest path. Roughly every tenth identity goes to the test split."""
    if n_identities < 1 or ages_per_identity < 1:
        raise ValueError("counts must be >= 1")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    age_pool = np.arange(int(AGE_LO), int(AGE_HI) + 1)
    entries = []
    for i in range(n_identities):
        identity_seed = int(rng.integers(0, 2 ** 31 - 1))
        replace = ages_per_identity > len(age_pool)
        ages = sorted(int(a) for a in rng.choice(age_pool, size=ages_per_identity,
                                                 replace=replace))
        split = "test" if i % 10 == 9 else "train"
        gender = "f" if i % 2 == 0 else "m"
        ident_dir = root / f"id{i:05d}"
        ident_dir.mkdir(exist_ok=True)
        for age in ages:
            rel = f"id{i:05d}/{age:03d}.png"
            img = synthesize_face(SyntheticFaceSpec(identity_seed=identity_seed,
                                                    age=float(age),
                                                    canvas=profile.image_side))
            save_image(img, root / rel)
            entries.append(ManifestEntry(path=rel, age=age, gender=gender, split=split))
    manifest = root / "manifest.csv"
    save_manifest(entries, manifest)
    return manifest


class FaceDataset:
    """Images preloaded as tensors with an age index for near-target sampling."""

    def __init__(self, entries, profile: SizeProfile, root=None):
        if not entries:
            raise ValueError("dataset is empty")
        self.profile = profile
        self.entries = list(entries)
        self.images = torch.stack([load_image(e, profile, root) for e in entries])
        self.labels = torch.tensor([e.age for e in entries], dtype=torch.long)
        self.by_age = {}
        for idx, e in enumerate(entries):
            self.by_age.setdefault(e.age, []).append(idx)
        self.ages = sorted(self.by_age)

    def __len__(self):
        return len(self.entries)

    @classmethod
    def from_manifest(cls, manifest_path, profile: SizeProfile, split=None):
        manifest_path = Path(manifest_path)
        entries = load_manifest(manifest_path)
        if split is not None:
            entries = [e for e in entries if e.split == split]
        return cls(entries, profile, root=manifest_path.parent)
