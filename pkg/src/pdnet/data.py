"""Synthetic labeled point clouds: analytic shapes, stacked multi-part scenes, augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import geometry
from .cloudio import read_cloud, write_cloud
from .geometry import PointCloud

KINDS = ("sphere", "cube", "torus", "cylinder", "plane")

# Canonical sizes: every primitive fits the unit ball.
_CUBE_HALF = 1.0 / np.sqrt(3.0)
_TORUS_MAJOR, _TORUS_MINOR = 0.7, 0.3
_CYL_RADIUS, _CYL_HALF = 0.6, 0.8
_PLANE_HALF = 1.0 / np.sqrt(2.0)


class DataError(ValueError):
    pass


@dataclass
class ShapeSpec:
    kind: str
    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sigma: float = 0.0
    points: int = 512

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown shape kind {self.kind!r}")
        if self.sigma < 0:
            raise DataError("noise sigma must be non-negative")
        if self.points < 16:
            raise DataError("a shape needs at least 16 points")
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)


@dataclass
class Sample:
    cloud: PointCloud  # normals are the estimated ones the network consumes
    label: int  # class id for classification; -1 for segmentation scenes
    analytic_normals: np.ndarray
    specs: list[ShapeSpec]


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def sample_canonical(kind: str, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Area-uniform surface samples and outward normals for a canonical primitive."""
    if kind == "sphere":
        n_ = _unit(rng.standard_normal((n, 3)))
        return n_.copy(), n_
    if kind == "cube":
        face = rng.integers(0, 6, n)
        axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
        p = rng.uniform(-_CUBE_HALF, _CUBE_HALF, (n, 3))
        p[np.arange(n), axis] = sign * _CUBE_HALF
        nrm = np.zeros((n, 3))
        nrm[np.arange(n), axis] = sign
        return p, nrm
    if kind == "torus":
        u = rng.uniform(0, 2 * np.pi, n)
        # accept tube angle v with density proportional to R + r cos v
        v = np.empty(n)
        filled = 0
        while filled < n:
            cand = rng.uniform(0, 2 * np.pi, 2 * n)
            keep = cand[rng.uniform(0, _TORUS_MAJOR + _TORUS_MINOR, 2 * n)
                        <= _TORUS_MAJOR + _TORUS_MINOR * np.cos(cand)]
            take = min(len(keep), n - filled)
            v[filled:filled + take] = keep[:take]
            filled += take
        nrm = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
        ring = np.stack([_TORUS_MAJOR * np.cos(u), _TORUS_MAJOR * np.sin(u), np.zeros(n)], axis=1)
        return ring + _TORUS_MINOR * nrm, nrm
    if kind == "cylinder":
        side = 2 * np.pi * _CYL_RADIUS * 2 * _CYL_HALF
        cap = np.pi * _CYL_RADIUS ** 2
        part = rng.choice(3, n, p=np.array([side, cap, cap]) / (side + 2 * cap))
        theta = rng.uniform(0, 2 * np.pi, n)
        p = np.zeros((n, 3))
        nrm = np.zeros((n, 3))
        s = part == 0
        p[s] = np.stack([_CYL_RADIUS * np.cos(theta[s]), _CYL_RADIUS * np.sin(theta[s]),
                         rng.uniform(-_CYL_HALF, _CYL_HALF, s.sum())], axis=1)
        nrm[s] = np.stack([np.cos(theta[s]), np.sin(theta[s]), np.zeros(s.sum())], axis=1)
        for which, z in ((1, _CYL_HALF), (2, -_CYL_HALF)):
            c = part == which
            r = _CYL_RADIUS * np.sqrt(rng.uniform(0, 1, c.sum()))
            p[c] = np.stack([r * np.cos(theta[c]), r * np.sin(theta[c]), np.full(c.sum(), z)], axis=1)
            nrm[c] = [0.0, 0.0, np.sign(z)]
        return p, nrm
    if kind == "plane":
        p = np.zeros((n, 3))
        p[:, :2] = rng.uniform(-_PLANE_HALF, _PLANE_HALF, (n, 2))
        nrm = np.tile([0.0, 0.0, 1.0], (n, 1))
        return p, nrm
    raise DataError(f"unknown shape kind {kind!r}")


def realize(spec: ShapeSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Posed, scaled, jittered samples of ``spec`` plus the exact (noise-free) normals."""
    p, nrm = sample_canonical(spec.kind, spec.points, rng)
    p = spec.scale * p @ spec.rotation.T + spec.translation
    nrm = nrm @ spec.rotation.T
    if spec.sigma > 0:
        p = p + rng.normal(0.0, spec.sigma, p.shape)
    return p, _unit(nrm)


def generate_classification_set(classes, per_class: int, n_points: int, seed: int,
                                sigma: float = 0.01, normal_k: int = 16,
                                scale_range=(0.8, 1.2)) -> list[Sample]:
    """``per_class`` randomly posed samples of each shape kind in ``classes``."""
    classes = list(classes)
    for kind in classes:
        if kind not in KINDS:
            raise DataError(f"unknown shape kind {kind!r}")
    if per_class < 1 or n_points < 16:
        raise DataError("per_class must be >= 1 and n_points >= 16")
    rng = np.random.default_rng(seed)
    samples = []
    for label, kind in enumerate(classes):
        for _ in range(per_class):
            rot = Rotation.random(random_state=rng).as_matrix()
            spec = ShapeSpec(kind, float(rng.uniform(*scale_range)), rot, np.zeros(3), sigma, n_points)
            pos, true_n = realize(spec, rng)
            est = geometry.estimate_normals(pos, normal_k)
            samples.append(Sample(PointCloud(pos, normals=est), label, true_n, [spec]))
    return samples


def _split_counts(n: int, parts: int) -> list[int]:
    base = [n // parts] * parts
    for i in range(n - sum(base)):
        base[i] += 1
    return base


def generate_segmentation_set(count: int, n_points: int, seed: int, parts=(2, 4),
                              sigma: float = 0.005, normal_k: int = 16,
                              min_fraction: float = 0.15, min_gap: float = 0.05, height_exponent: float = 0.3,
                              max_attempts: int = 20) -> list[Sample]:
    """Scenes of 2-4 disjoint primitives stacked along z; label = slot from the bottom.

    The stack height grows as ``count ** height_exponent``, so slot
    boundaries shift with the count and a point's label is not a function
    of its height alone.
    """
    lo, hi = parts
    if not 2 <= lo <= hi:
        raise DataError("parts must satisfy 2 <= min <= max")
    if min(_split_counts(n_points, hi)) < 16:
        raise DataError("too few points per part")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(count):
        for _attempt in range(max_attempts):
            c = int(rng.integers(lo, hi + 1))
            height = 2.0 * (c / hi) ** height_exponent / c
            specs = []
            for slot, m in enumerate(_split_counts(n_points, c)):
                radius = 0.4 * height * rng.uniform(0.85, 1.0)
                centre = np.array([rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15),
                                   -1.0 + height * (slot + 0.5) + rng.uniform(-0.05, 0.05) * height])
                rot = Rotation.random(random_state=rng).as_matrix()
                specs.append(ShapeSpec(KINDS[rng.integers(len(KINDS))], radius, rot, centre, sigma, m))
            pieces = [realize(s, rng) for s in specs]
            labels = np.concatenate([np.full(s.points, i) for i, s in enumerate(specs)])
            pos = np.concatenate([p for p, _ in pieces])
            if _parts_disjoint(pos, labels, min_gap):
                break
        else:
            raise DataError("could not place disjoint primitives")
        fractions = np.bincount(labels) / len(labels)
        if fractions.min() < min_fraction:
            raise DataError("label balance below the configured minimum fraction")
        est = geometry.estimate_normals(pos, normal_k)
        true_n = np.concatenate([n for _, n in pieces])
        samples.append(Sample(PointCloud(pos, normals=est, labels=labels), -1, true_n, specs))
    return samples


def _parts_disjoint(pos, labels, min_gap) -> bool:
    for a in np.unique(labels):
        pa, pb = pos[labels == a], pos[labels != a]
        if geometry.knn(pa, pb, 1).distances.min() < min_gap:
            return False
    return True


def nearest_primitive_labels(positions, specs: list[ShapeSpec]) -> np.ndarray:
    """Label each point by the primitive whose centre is closest (exact for separated parts)."""
    centres = np.stack([s.translation for s in specs])
    d = np.linalg.norm(positions[:, None, :] - centres[None], axis=-1)
    return np.argmin(d, axis=1)


def knn_baseline(train: list[Sample], val: list[Sample], k: int = 5, num_classes: int | None = None):
    """Predict per-point labels of ``val`` by majority vote over the k nearest
    training points in raw coordinates (pooled over all training scenes)."""
    support = np.concatenate([s.cloud.positions for s in train])
    support_labels = np.concatenate([s.cloud.labels for s in train])
    num_classes = num_classes or int(support_labels.max()) + 1
    preds = []
    for s in val:
        nb = geometry.knn(s.cloud.positions, support, k, method="tree")
        votes = np.zeros((len(s.cloud), num_classes))
        np.add.at(votes, (np.arange(len(s.cloud))[:, None], support_labels[nb.indices]), 1.0)
        preds.append(np.argmax(votes, axis=1))
    return preds


# -- augmentation --------------------------------------------------------

@dataclass(frozen=True)
class AugmentPolicy:
    rotate_up: bool = True
    scale_range: tuple | None = (0.8, 1.2)
    jitter_sigma: float = 0.01

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(False, None, 0.0)


def augment(cloud: PointCloud, seed: int, policy: AugmentPolicy = AugmentPolicy()) -> PointCloud:
    """Rotation about z, isotropic scaling and Gaussian jitter; labels are untouched."""
    rng = np.random.default_rng(seed)
    pos = cloud.positions.copy()
    normals = None if cloud.normals is None else cloud.normals.copy()
    if policy.rotate_up:
        rot = Rotation.from_euler("z", rng.uniform(0, 2 * np.pi)).as_matrix()
        pos = pos @ rot.T
        if normals is not None:
            normals = _unit(normals @ rot.T)
    if policy.scale_range is not None:
        pos = pos * rng.uniform(*policy.scale_range)
    if policy.jitter_sigma > 0:
        pos = pos + rng.normal(0.0, policy.jitter_sigma, pos.shape)
    return PointCloud(pos, None if cloud.features is None else cloud.features.copy(), normals,
                      None if cloud.labels is None else cloud.labels.copy())


# -- dataset directories -------------------------------------------------

def _spec_text(spec: ShapeSpec) -> str:
    nums = [spec.scale, *spec.rotation.ravel(), *spec.translation, spec.sigma]
    vals = [spec.kind, *(repr(float(x)) for x in nums), str(spec.points)]
    return ";".join(vals)


def _spec_parse(text: str) -> ShapeSpec:
    f = text.split(";")
    return ShapeSpec(f[0], float(f[1]), np.array([float(x) for x in f[2:11]]).reshape(3, 3),
                     np.array([float(x) for x in f[11:14]]), float(f[14]), int(f[15]))


def write_manifest(path, entries: dict) -> None:
    lines = [f"{k}={v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"malformed manifest line: {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def save_dataset(directory, samples_by_split: dict[str, list[Sample]], header: dict) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = dict(header)
    i = 0
    for split, samples in samples_by_split.items():
        entries[f"split.{split}.count"] = len(samples)
        for j, s in enumerate(samples):
            name = f"{split}_{j:05d}.pdc"
            write_cloud(s.cloud, directory / name)
            entries[f"sample.{i}"] = f"{split},{name},{s.label}"
            for t, spec in enumerate(s.specs):
                entries[f"sample.{i}.shape.{t}"] = _spec_text(spec)
            i += 1
    entries["sample.count"] = i
    write_manifest(directory / "manifest.txt", entries)
    return entries


def load_dataset(directory) -> tuple[dict, dict[str, list[tuple[PointCloud, int]]]]:
    """Return ``(manifest, {split: [(cloud, label), ...]})``."""
    directory = Path(directory)
    manifest = read_manifest(directory / "manifest.txt")
    splits: dict[str, list] = {}
    for i in range(int(manifest["sample.count"])):
        split, name, label = manifest[f"sample.{i}"].split(",")
        splits.setdefault(split, []).append((read_cloud(directory / name), int(label)))
    return manifest, splits


def manifest_specs(manifest: dict, index: int) -> list[ShapeSpec]:
    specs, t = [], 0
    while f"sample.{index}.shape.{t}" in manifest:
        specs.append(_spec_parse(manifest[f"sample.{index}.shape.{t}"]))
        t += 1
    return specs


# -- whole datasets from generator settings ------------------------------

def generate_dataset(task: str, seed: int, points: int = 512, classes=("sphere", "cube", "torus", "cylinder"),
                     per_class: int = 16, val_per_class: int = 0, scenes: int = 64, val_scenes: int = 16,
                     sigma: float | None = None, normal_k: int = 16) -> tuple[dict[str, list[Sample]], dict]:
    """Generate train/val splits and the manifest header that reproduces them."""
    if task not in ("cls", "seg"):
        raise DataError("task must be 'cls' or 'seg'")
    header = {"gen.task": task, "gen.seed": seed, "gen.points": points, "gen.normal_k": normal_k}
    if task == "cls":
        sigma = 0.01 if sigma is None else sigma
        classes = tuple(classes)
        header.update({"gen.classes": ",".join(classes), "gen.per_class": per_class,
                       "gen.val_per_class": val_per_class, "gen.sigma": repr(sigma),
                       "gen.num_classes": len(classes)})
        for i, kind in enumerate(classes):
            header[f"label.{i}"] = kind
        splits = {"train": generate_classification_set(classes, per_class, points, seed, sigma, normal_k)}
        if val_per_class:
            splits["val"] = generate_classification_set(classes, val_per_class, points, seed + 1000,
                                                        sigma, normal_k)
    else:
        sigma = 0.005 if sigma is None else sigma
        header.update({"gen.scenes": scenes, "gen.val_scenes": val_scenes, "gen.sigma": repr(sigma),
                       "gen.num_classes": 4})
        for i in range(4):
            header[f"label.{i}"] = f"slot{i}"
        splits = {"train": generate_segmentation_set(scenes, points, seed, sigma=sigma, normal_k=normal_k)}
        if val_scenes:
            splits["val"] = generate_segmentation_set(val_scenes, points, seed + 1000, sigma=sigma,
                                                      normal_k=normal_k)
    return splits, header


def regenerate(manifest: dict) -> dict[str, list[Sample]]:
    """Rebuild every split from the generator settings recorded in a manifest."""
    task = manifest["gen.task"]
    common = dict(seed=int(manifest["gen.seed"]), points=int(manifest["gen.points"]),
                  sigma=float(manifest["gen.sigma"]), normal_k=int(manifest["gen.normal_k"]))
    if task == "cls":
        splits, _ = generate_dataset("cls", classes=manifest["gen.classes"].split(","),
                                     per_class=int(manifest["gen.per_class"]),
                                     val_per_class=int(manifest["gen.val_per_class"]), **common)
    else:
        splits, _ = generate_dataset("seg", scenes=int(manifest["gen.scenes"]),
                                     val_scenes=int(manifest["gen.val_scenes"]), **common)
    return splits
