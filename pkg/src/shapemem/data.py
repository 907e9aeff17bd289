"""Synthetic desk-scale dataset: parametric shapes, partial views, storage.

Shapes are sampled uniformly by surface area from six parametric families,
posed (anisotropic scale then rotation), and normalized into the unit cube
centered at the origin. Partial views cut the far side of a shape relative
to one of 8 fixed viewpoints and downsample by farthest-point sampling.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, StateError
from .geometry import Viewpoint, as_cloud, fps, viewpoint_crop

CLOUD_MAGIC = b"NPC1"

# Cube-corner viewpoints in itertools.product order over (-1, +1) per axis:
# (---), (--+), (-+-), (-++), (+--), (+-+), (++-), (+++), each / sqrt(3).
FIXED_VIEWPOINTS = tuple(
    Viewpoint(np.array(corner, dtype=np.float64) / np.sqrt(3.0))
    for corner in itertools.product((-1.0, 1.0), repeat=3)
)

SHAPE_FAMILIES = ("sphere", "box", "cylinder", "cone", "torus", "capsule")


@dataclass
class ShapeSpec:
    family: str
    params: dict
    rotation: np.ndarray          # 3x3
    scale: np.ndarray             # per-axis factors
    category: str

    def __post_init__(self):
        if self.family not in SHAPE_FAMILIES:
            raise ContractError(f"unknown shape family {self.family!r}")
        if any(v <= 0 for v in self.params.values()) or np.any(self.scale <= 0):
            raise ContractError("shape parameters must be positive")


def _random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


_PARAM_RANGES = {
    "sphere": {"radius": (0.5, 1.0)},
    "box": {"ex": (0.4, 1.2), "ey": (0.4, 1.2), "ez": (0.4, 1.2)},
    "cylinder": {"radius": (0.25, 0.6), "height": (0.8, 1.6)},
    "cone": {"radius": (0.3, 0.7), "height": (0.8, 1.6)},
    "torus": {"major": (0.5, 0.9), "minor": (0.12, 0.3)},
    "capsule": {"radius": (0.2, 0.45), "height": (0.6, 1.4)},
}


def random_shape_spec(family: str, rng, category: str | None = None) -> ShapeSpec:
    if family not in _PARAM_RANGES:
        raise ContractError(f"unknown shape family {family!r}")
    params = {k: float(rng.uniform(*r)) for k, r in _PARAM_RANGES[family].items()}
    return ShapeSpec(
        family=family,
        params=params,
        rotation=_random_rotation(rng),
        scale=rng.uniform(0.7, 1.3, size=3),
        category=category or family,
    )


# -- surface samplers (canonical pose, area-uniform) -------------------------


def _sample_sphere(radius, n, rng):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius


def _sample_box(ex, ey, ez, n, rng):
    # faces: +-x, +-y, +-z with areas ey*ez, ex*ez, ex*ey
    areas = np.array([ey * ez, ey * ez, ex * ez, ex * ez, ex * ey, ex * ey])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    pts = np.empty((n, 3))
    half = np.array([ex, ey, ez]) / 2.0
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for i in range(n):
        a = axis[i]
        others = [k for k in range(3) if k != a]
        pts[i, a] = sign[i] * half[a]
        pts[i, others[0]] = u[i] * (2 * half[others[0]])
        pts[i, others[1]] = v[i] * (2 * half[others[1]])
    return pts


def _sample_cylinder(radius, height, n, rng):
    side = 2 * np.pi * radius * height
    cap = np.pi * radius ** 2
    comp = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    u = rng.uniform(0, 1, size=n)
    pts = np.empty((n, 3))
    for i in range(n):
        if comp[i] == 0:
            pts[i] = [radius * np.cos(theta[i]), radius * np.sin(theta[i]),
                      (u[i] - 0.5) * height]
        else:
            r = radius * np.sqrt(u[i])
            z = height / 2.0 if comp[i] == 1 else -height / 2.0
            pts[i] = [r * np.cos(theta[i]), r * np.sin(theta[i]), z]
    return pts


def _sample_cone(radius, height, n, rng):
    slant = np.sqrt(radius ** 2 + height ** 2)
    lateral = np.pi * radius * slant
    base = np.pi * radius ** 2
    comp = rng.choice(2, size=n, p=np.array([lateral, base]) / (lateral + base))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    u = rng.uniform(0, 1, size=n)
    pts = np.empty((n, 3))
    for i in range(n):
        if comp[i] == 0:
            t = np.sqrt(u[i])  # area density grows linearly from the apex
            pts[i] = [radius * t * np.cos(theta[i]), radius * t * np.sin(theta[i]),
                      height * (0.5 - t)]
        else:
            r = radius * np.sqrt(u[i])
            pts[i] = [r * np.cos(theta[i]), r * np.sin(theta[i]), -height / 2.0]
    return pts


def _sample_torus(major, minor, n, rng):
    if minor >= major:
        raise ContractError("torus minor radius must be below the major radius")
    pts = np.empty((n, 3))
    count = 0
    while count < n:
        m = 2 * (n - count) + 16
        theta = rng.uniform(0, 2 * np.pi, size=m)   # around the tube
        accept = rng.uniform(0, 1, size=m) < (major + minor * np.cos(theta)) / (major + minor)
        theta = theta[accept]
        phi = rng.uniform(0, 2 * np.pi, size=len(theta))
        take = min(len(theta), n - count)
        th, ph = theta[:take], phi[:take]
        ring = major + minor * np.cos(th)
        pts[count:count + take, 0] = ring * np.cos(ph)
        pts[count:count + take, 1] = ring * np.sin(ph)
        pts[count:count + take, 2] = minor * np.sin(th)
        count += take
    return pts


def _sample_capsule(radius, height, n, rng):
    side = 2 * np.pi * radius * height
    caps = 4 * np.pi * radius ** 2     # two hemispheres = one full sphere
    comp = rng.uniform(0, 1, size=n) < side / (side + caps)
    pts = np.empty((n, 3))
    for i in range(n):
        if comp[i]:
            theta = rng.uniform(0, 2 * np.pi)
            z = rng.uniform(-0.5, 0.5) * height
            pts[i] = [radius * np.cos(theta), radius * np.sin(theta), z]
        else:
            v = rng.normal(size=3)
            v /= np.linalg.norm(v)
            offset = height / 2.0 if v[2] >= 0 else -height / 2.0
            pts[i] = radius * v + np.array([0.0, 0.0, offset])
    return pts


def sample_surface(spec: ShapeSpec, n: int, rng) -> np.ndarray:
    """Area-uniform points on the canonical (unposed) surface."""
    if n < 1:
        raise ContractError("need at least one sample point")
    p = spec.params
    if spec.family == "sphere":
        return _sample_sphere(p["radius"], n, rng)
    if spec.family == "box":
        return _sample_box(p["ex"], p["ey"], p["ez"], n, rng)
    if spec.family == "cylinder":
        return _sample_cylinder(p["radius"], p["height"], n, rng)
    if spec.family == "cone":
        return _sample_cone(p["radius"], p["height"], n, rng)
    if spec.family == "torus":
        return _sample_torus(p["major"], p["minor"], n, rng)
    return _sample_capsule(p["radius"], p["height"], n, rng)


def normalize_cloud(points: np.ndarray) -> np.ndarray:
    """Center the bounding box at the origin, scale the longest side to 1."""
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    center = (lo + hi) / 2.0
    extent = float(np.max(hi - lo))
    if extent == 0.0:
        raise ContractError("degenerate cloud with zero extent")
    return (points - center) / extent


def generate_shape(spec: ShapeSpec, n_points: int, rng) -> np.ndarray:
    """Sample, pose (scale then rotate), and normalize one complete cloud."""
    pts = sample_surface(spec, n_points, rng)
    pts = (pts * spec.scale) @ spec.rotation.T
    return normalize_cloud(pts)


def make_partial(complete, viewpoint_index: int, fraction: float,
                 partial_size: int,
                 allowed_fractions=(0.25, 0.50, 0.75)) -> np.ndarray:
    """Crop toward a fixed viewpoint, then FPS down to `partial_size`."""
    complete = as_cloud(complete)
    if not 0 <= viewpoint_index < len(FIXED_VIEWPOINTS):
        raise ContractError(f"viewpoint index {viewpoint_index} out of range")
    if not any(abs(fraction - f) < 1e-12 for f in allowed_fractions):
        raise ContractError(f"fraction {fraction} not in {tuple(allowed_fractions)}")
    keep_n = int(round(fraction * len(complete)))
    keep_n = max(1, min(keep_n, len(complete)))
    if partial_size > keep_n:
        raise ContractError(
            f"partial size {partial_size} exceeds kept points {keep_n}"
        )
    cropped = viewpoint_crop(complete, FIXED_VIEWPOINTS[viewpoint_index], keep_n)
    return fps(cropped, partial_size, seed_index=0)


# -- cloud files --------------------------------------------------------------


def write_cloud(path, cloud) -> None:
    """NPC1: magic, u32 point count, f32 xyz triples, little-endian."""
    cloud = as_cloud(cloud)
    with open(path, "wb") as fh:
        fh.write(CLOUD_MAGIC)
        fh.write(struct.pack("<I", len(cloud)))
        fh.write(cloud.astype("<f4").tobytes())


def read_cloud(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise StateError(f"cannot read cloud file {path}: {exc}") from None
    if len(blob) < 8:
        raise FormatError(f"{path}: file too short for a cloud header")
    if blob[:4] != CLOUD_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    (count,) = struct.unpack_from("<I", blob, 4)
    if count == 0:
        raise FormatError(f"{path}: cloud file with zero points")
    if len(blob) - 8 < 12 * count:
        raise FormatError(f"{path}: truncated cloud payload")
    data = np.frombuffer(blob, dtype="<f4", count=3 * count, offset=8)
    return data.astype(np.float64).reshape(count, 3)


def write_xyz(path, cloud) -> None:
    """Plain-text export, one 'x y z' line per point, for external viewers."""
    cloud = as_cloud(cloud)
    with open(path, "w") as fh:
        for x, y, z in cloud:
            fh.write(f"{x:.8g} {y:.8g} {z:.8g}\n")


# -- dataset -----------------------------------------------------------------


MANIFEST_VERSION = 1


@dataclass
class DatasetManifest:
    version: int
    seed: int
    categories: list
    complete_points: int
    partial_points: int
    fractions: list
    viewpoints: list                      # direction triples, fixed order
    samples: list = field(default_factory=list)   # {id, category, file}
    train_ids: list = field(default_factory=list)
    test_ids: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "categories": self.categories,
            "complete_points": self.complete_points,
            "partial_points": self.partial_points,
            "fractions": self.fractions,
            "viewpoints": self.viewpoints,
            "samples": self.samples,
            "train_ids": self.train_ids,
            "test_ids": self.test_ids,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            payload = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: unreadable manifest ({exc})") from None
        if payload.get("version") != MANIFEST_VERSION:
            raise FormatError(f"{path}: unsupported manifest version")
        manifest = cls(**payload)
        root = path.parent
        for sample in manifest.samples:
            if not (root / sample["file"]).exists():
                raise StateError(f"manifest references missing file {sample['file']}")
        return manifest

    def cloud_path(self, root, sample_id: str) -> Path:
        for sample in self.samples:
            if sample["id"] == sample_id:
                return Path(root) / sample["file"]
        raise ContractError(f"unknown sample id {sample_id!r}")


def build_dataset(out_dir, categories, samples_per_category: int,
                  complete_points: int, partial_points: int,
                  train_fraction: float, seed: int,
                  fractions=(0.25, 0.50, 0.75)) -> DatasetManifest:
    """Generate clouds and a manifest under `out_dir`; deterministic in seed."""
    out_dir = Path(out_dir)
    (out_dir / "clouds").mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        seed=seed,
        categories=list(categories),
        complete_points=complete_points,
        partial_points=partial_points,
        fractions=list(fractions),
        viewpoints=[vp.direction.tolist() for vp in FIXED_VIEWPOINTS],
    )
    for ci, category in enumerate(categories):
        for si in range(samples_per_category):
            rng = np.random.default_rng([seed, 101, ci, si])
            spec = random_shape_spec(category, rng)
            cloud = generate_shape(spec, complete_points, rng)
            sample_id = f"{category}_{si:03d}"
            rel = f"clouds/{sample_id}.npc"
            write_cloud(out_dir / rel, cloud)
            manifest.samples.append({"id": sample_id, "category": category, "file": rel})
        ids = [f"{category}_{si:03d}" for si in range(samples_per_category)]
        split_rng = np.random.default_rng([seed, 202, ci])
        order = split_rng.permutation(samples_per_category)
        n_train = int(round(train_fraction * samples_per_category))
        manifest.train_ids.extend(ids[i] for i in sorted(order[:n_train]))
        manifest.test_ids.extend(ids[i] for i in sorted(order[n_train:]))
    manifest.save(out_dir / "manifest.json")
    return manifest


def load_split(root, manifest: DatasetManifest, split: str):
    """Yield (sample_id, category, complete_cloud) for a split, in id order."""
    ids = manifest.train_ids if split == "train" else manifest.test_ids
    if split not in ("train", "test"):
        raise ContractError(f"unknown split {split!r}")
    by_id = {s["id"]: s for s in manifest.samples}
    out = []
    for sid in ids:
        sample = by_id[sid]
        out.append((sid, sample["category"], read_cloud(Path(root) / sample["file"])))
    return out
