"""PDNet assembly: stem, four-stage encoder, FP decoder, task heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import geometry
from .blocks import PDSA, PointMetaBlock, batched_knn, idw_weights, interpolate_fixed
from .numerics import MLP, Module, Tensor, as_tensor, concat, gather, max_pool_set, reset_parameters
from .pdam import PDAM

VARIANTS = {
    "pdnet-s": dict(stem_width=32, blocks=(0, 0, 0, 0)),
    "pdnet-l": dict(stem_width=32, blocks=(2, 4, 2, 2)),
    "pdnet-xxl": dict(stem_width=64, blocks=(4, 8, 4, 4)),
}

ABLATIONS = ("plam-only", "pdam-only", "no-ene", "successive", "parallel", "center-init", "random-init")


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    variant: str = "pdnet-s"
    stem_width: int = 32
    blocks: tuple = (0, 0, 0, 0)
    reference_count: int = 32
    neighbor_k: int = 32
    strides: tuple = (1, 4, 4, 4)
    interp_k: int = 3
    n_points: int = 512
    task: str = "cls"
    num_classes: int = 4
    pdam_stages: tuple = (3, 4)
    use_plam: bool = True
    use_ene: bool = True
    combine: str = "parallel"
    ref_init: str = "fps"
    normal_k: int = 16
    expansion: int = 4
    head_widths: tuple = (512, 256)
    normalization: str = "none"
    epsilon: float = 1e-8

    @classmethod
    def from_variant(cls, variant: str, **overrides) -> "NetworkConfig":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        cfg = cls(variant=variant, **VARIANTS[variant])
        return replace(cfg, **overrides) if overrides else cfg

    @property
    def stage_points(self) -> tuple[int, ...]:
        counts, n = [], self.n_points
        for s in self.strides:
            n //= s
            counts.append(n)
        return tuple(counts)

    @property
    def stage_widths(self) -> tuple[int, ...]:
        return tuple(self.stem_width * 2 ** i for i in range(len(self.strides)))

    def stage_references(self, stage: int) -> int:
        return min(self.reference_count, self.stage_points[stage])

    def validate(self) -> "NetworkConfig":
        if self.task not in ("cls", "seg"):
            raise ConfigError(f"task must be 'cls' or 'seg', got {self.task!r}")
        if len(self.blocks) != len(self.strides):
            raise ConfigError("blocks and strides must have one entry per stage")
        if any(b < 0 for b in self.blocks) or any(s < 1 for s in self.strides):
            raise ConfigError("block counts must be >= 0 and strides >= 1")
        if self.n_points % int(np.prod(self.strides)) != 0:
            raise ConfigError("n_points must be divisible by the product of strides")
        if min(self.stage_points) < 1:
            raise ConfigError("strides reduce a stage to zero points")
        if self.stem_width < 1 or self.num_classes < 1 or self.reference_count < 1:
            raise ConfigError("widths, classes and reference count must be positive")
        if self.combine not in ("parallel", "successive"):
            raise ConfigError("combine must be 'parallel' or 'successive'")
        if self.ref_init not in ("fps", "random", "center"):
            raise ConfigError("ref_init must be fps, random or center")
        if any(not 1 <= s <= len(self.strides) for s in self.pdam_stages):
            raise ConfigError("pdam_stages are 1-based stage numbers")
        if self.normalization != "none":
            raise ConfigError("normalization layers are not implemented at desk scale")
        if self.normal_k < 3 or self.normal_k > self.n_points:
            raise ConfigError("normal_k must lie in [3, n_points]")
        return self

    # -- manifest sidecar ------------------------------------------------
    def to_manifest(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"network.{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, mapping: dict) -> "NetworkConfig":
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        defaults = asdict(cls())
        for key, raw in mapping.items():
            if key not in types:
                raise ConfigError(f"unknown network setting {key!r}")
            default = defaults[key]
            kwargs[key] = _coerce(raw, default, key)
        return cls(**kwargs)


def _coerce(raw, default, key):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def apply_ablation(cfg: NetworkConfig, ablation: str | None) -> NetworkConfig:
    if ablation in (None, "", "none"):
        return cfg
    table = {
        "plam-only": dict(pdam_stages=()),
        "pdam-only": dict(use_plam=False),
        "no-ene": dict(use_ene=False),
        "successive": dict(combine="successive"),
        "parallel": dict(combine="parallel"),
        "center-init": dict(ref_init="center"),
        "random-init": dict(ref_init="random"),
    }
    if ablation not in table:
        raise ConfigError(f"unknown ablation {ablation!r}; choose from {ABLATIONS}")
    return replace(cfg, **table[ablation])


# -- geometry plan ---------------------------------------------------------

@dataclass
class CloudBatch:
    """Stacked input clouds plus every feature-independent index they induce.

    Stage ``s`` (0-based) draws its centers from level ``s`` (level 0 is the
    input) and produces level ``s + 1``.
    """

    positions: list  # per level (B, N_l, 3)
    normals: list  # per level (B, N_l, 3)
    centers: list = field(default_factory=list)  # per stage (B, N_{s+1}) into level s
    groups: list = field(default_factory=list)  # per stage (B, N_{s+1}, k) into level s
    self_groups: list = field(default_factory=list)  # per stage (B, N_{s+1}, k)
    upsample: list = field(default_factory=list)  # per stage s>=1: (idx, w) level s+1 -> level s
    to_input: tuple | None = None  # (idx, w) from level 1 back to the input points

    @property
    def size(self) -> int:
        return len(self.positions[0])

    def take(self, rows) -> "CloudBatch":
        rows = np.asarray(rows)

        def sel(x):
            if x is None:
                return None
            if isinstance(x, tuple):
                return tuple(sel(v) for v in x)
            return x[rows]

        return CloudBatch(*(sel(v) if not isinstance(v, list) else [sel(x) for x in v]
                            for v in (self.positions, self.normals, self.centers, self.groups,
                                      self.self_groups, self.upsample, self.to_input)))


def plan_cloud(positions, normals, cfg: NetworkConfig, start: int = 0) -> CloudBatch:
    """Compute sampling/grouping/interpolation indices for a single cloud."""
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) != cfg.n_points:
        raise ConfigError(f"cloud has {len(positions)} points, config expects {cfg.n_points}")
    if normals is None:
        normals = geometry.estimate_normals(positions, cfg.normal_k)
    normals = np.asarray(normals, dtype=np.float64)
    pos, nrm = [positions[None]], [normals[None]]
    centers, groups, self_groups = [], [], []
    for s, m in enumerate(cfg.stage_points):
        prev = pos[-1]
        c = geometry.farthest_point_sample(prev[0], m, start if s == 0 else 0)[None]
        cp = prev[:, c[0]]
        centers.append(c)
        groups.append(batched_knn(cp, prev, min(cfg.neighbor_k, prev.shape[1])))
        self_groups.append(batched_knn(cp, cp, min(cfg.neighbor_k, m)))
        pos.append(cp)
        nrm.append(nrm[-1][:, c[0]])
    upsample = [None]
    for s in range(1, len(cfg.stage_points)):
        upsample.append(idw_weights(pos[s], pos[s + 1], min(cfg.interp_k, pos[s + 1].shape[1]), cfg.epsilon))
    if cfg.strides[0] == 1:
        inv = np.empty(cfg.n_points, dtype=np.int64)
        inv[centers[0][0]] = np.arange(cfg.n_points)
        to_input = (inv[None, :, None], np.ones((1, cfg.n_points, 1)))
    else:
        to_input = idw_weights(pos[0], pos[1], min(cfg.interp_k, pos[1].shape[1]), cfg.epsilon)
    return CloudBatch(pos, nrm, centers, groups, self_groups, upsample, to_input)


def stack_plans(plans: list[CloudBatch]) -> CloudBatch:
    def cat(items):
        if items[0] is None:
            return None
        if isinstance(items[0], tuple):
            return tuple(np.concatenate(parts) for parts in zip(*items))
        return np.concatenate(items)

    cols = []
    for name in ("positions", "normals", "centers", "groups", "self_groups", "upsample"):
        per = [getattr(p, name) for p in plans]
        cols.append([cat([p[i] for p in per]) for i in range(len(per[0]))])
    cols.append(cat([p.to_input for p in plans]))
    return CloudBatch(*cols)


# -- model ---------------------------------------------------------------

class HybridBlock(Module):
    """PLAM and/or PDAM sharing one input, combined in parallel or in sequence."""

    def __init__(self, plam: PointMetaBlock | None, pdam: PDAM | None, combine: str = "parallel"):
        self.plam = plam
        self.pdam = pdam
        self.combine = combine

    def __call__(self, positions, normals, features, group) -> Tensor:
        if self.pdam is None:
            return self.plam(positions, normals, features, group)
        if self.plam is None:
            return self.pdam(positions, normals, features)
        if self.combine == "successive":
            mid = self.plam(positions, normals, features, group)
            return self.pdam(positions, normals, mid)
        return parallel_combine(self.plam.delta(positions, normals, features, group),
                                self.pdam.delta(positions, normals, features),
                                features)


def parallel_combine(plam_delta, pdam_delta, features) -> Tensor:
    """``f + d_plam + d_pdam``: both branches are residual on the shared input."""
    plam_delta, pdam_delta, features = as_tensor(plam_delta), as_tensor(pdam_delta), as_tensor(features)
    if not (plam_delta.shape == pdam_delta.shape == features.shape):
        raise ValueError("parallel branches must share the input shape")
    return (features + plam_delta) + pdam_delta


class Stage(Module):
    def __init__(self, cfg: NetworkConfig, index: int, in_channels: int):
        width = cfg.stage_widths[index]
        n = cfg.stage_points[index]
        self.reduction = PDSA(in_channels, width, use_normals=cfg.use_ene)
        self.blocks = []
        deformable = (index + 1) in cfg.pdam_stages
        for _ in range(cfg.blocks[index]):
            plam = None
            if cfg.use_plam or not deformable:
                plam = PointMetaBlock(width, cfg.expansion, use_normals=cfg.use_ene)
            pdam = None
            if deformable:
                pdam = PDAM(width, n, cfg.stage_references(index), cfg.interp_k,
                            use_normals=cfg.use_ene, ref_init=cfg.ref_init,
                            expansion=cfg.expansion, epsilon=cfg.epsilon)
            self.blocks.append(HybridBlock(plam, pdam, cfg.combine))

    def __call__(self, batch: CloudBatch, s: int, features) -> Tensor:
        normals_prev = batch.normals[s] if self.reduction.ne is not None else None
        f = self.reduction(batch.positions[s], normals_prev, features, batch.centers[s], batch.groups[s])
        pos, nrm = batch.positions[s + 1], batch.normals[s + 1]
        for block in self.blocks:
            f = block(pos, nrm, f, batch.self_groups[s])
        return f


class FeaturePropagation(Module):
    """Interpolate coarse features to the fine level, concatenate the skip, 2-layer MLP."""

    def __init__(self, coarse_channels: int, skip_channels: int, out_channels: int):
        self.mlp = MLP(coarse_channels + skip_channels, [(out_channels, "relu"), (out_channels, "relu")])

    def __call__(self, coarse, skip, idx, weights) -> Tensor:
        if skip is None:
            raise ValueError("feature propagation requires skip features")
        up = interpolate_fixed(coarse, idx, weights)
        return self.mlp(concat([up, as_tensor(skip)], axis=-1))


def feature_propagation(coarse_positions, coarse_features, fine_positions, fine_features,
                        params: FeaturePropagation, k: int = 3, epsilon: float = 1e-8) -> Tensor:
    idx, w = idw_weights(fine_positions, coarse_positions, min(k, coarse_positions.shape[1]), epsilon)
    return params(coarse_features, fine_features, idx, w)


class PDNet(Module):
    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg.validate()
        widths = cfg.stage_widths
        self.stem = MLP(3, [(cfg.stem_width, "relu")])
        self.stages = []
        prev = cfg.stem_width
        for i in range(len(cfg.strides)):
            self.stages.append(Stage(cfg, i, prev))
            prev = widths[i]
        if cfg.task == "cls":
            specs = [(w, "relu") for w in cfg.head_widths] + [(cfg.num_classes, "none")]
            self.head = MLP(widths[-1], specs)
            self.decoder = []
        else:
            self.decoder = [FeaturePropagation(widths[i + 1], widths[i], widths[i])
                            for i in reversed(range(len(widths) - 1))]
            self.head = MLP(widths[0], [(widths[0], "relu"), (cfg.num_classes, "none")])

    @property
    def dtype(self):
        return self.stem.layers[0].weight.dtype

    def encode(self, batch: CloudBatch) -> list[Tensor]:
        f = self.stem(Tensor(batch.positions[0].astype(self.dtype)))
        feats = []
        for s, stage in enumerate(self.stages):
            f = stage(batch, s, f)
            feats.append(f)
        return feats

    def __call__(self, batch: CloudBatch) -> Tensor:
        feats = self.encode(batch)
        if self.cfg.task == "cls":
            return self.head(max_pool_set(feats[-1]))
        f = feats[-1]
        for dec, s in zip(self.decoder, reversed(range(len(feats) - 1))):
            idx, w = batch.upsample[s + 1]
            f = dec(f, feats[s], idx, w)
        idx, w = batch.to_input
        f = interpolate_fixed(f, idx, w) if idx.shape[-1] > 1 else gather(f, idx[..., 0])
        return self.head(f)


def build(cfg: NetworkConfig, seed: int = 0, dtype=np.float64) -> PDNet:
    model = PDNet(cfg)
    reset_parameters(model, seed)
    return model.to(dtype)


def forward_classification(batch: CloudBatch, model: PDNet) -> Tensor:
    if model.cfg.task != "cls":
        raise ConfigError("model was built for segmentation")
    return model(batch)


def forward_segmentation(batch: CloudBatch, model: PDNet) -> Tensor:
    if model.cfg.task != "seg":
        raise ConfigError("model was built for classification")
    return model(batch)


def block_census(model: PDNet) -> list[dict]:
    """Per-stage counts of PDSA, PLAM and PDAM blocks."""
    rows = []
    for stage in model.stages:
        rows.append(dict(
            pdsa=1,
            plam=sum(b.plam is not None for b in stage.blocks),
            pdam=sum(b.pdam is not None for b in stage.blocks),
        ))
    return rows
