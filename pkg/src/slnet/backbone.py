"""Four-stage hierarchical encoder with classification and part-seg heads.

Every stage samples centroids (FPS or seeded random), forms kNN
neighborhoods against the previous level, builds center-relative features,
expands channels with a shared linear+BN+ReLU bridge, refines with a stack
of light residual blocks, and max-pools neighbors per centroid. The
classification head consumes the global max over the final centroids; the
part-segmentation head mirrors the encoder with IDW feature propagation and
multi-scale pooled fusion.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import geom
from . import tensor as T
from .gmu import Gmu
from .nape import NapeConfig, nape_embed_batch
from .tensor import BatchNormState, Param, Tensor

EMBEDDINGS = ("nape", "mlp", "gaussian", "cosine")
GMU_PLACEMENTS = ("after_embedding", "after_grouping", "both", "none")
SAMPLINGS = ("fps", "random")
HEADS = ("classify", "part_segment")
LRB_RATIOS = (0.125, 0.25, 0.5, 1.0)


@dataclass
class ModelConfig:
    """Complete architectural record; one instance reproduces any ablation row."""

    d: int = 16
    embedding: str = "nape"
    gmu_placement: str = "after_embedding"
    gmu_order: str = "ab"
    k: int = 32
    stage_depths: tuple[int, ...] = (1, 1, 2, 1)
    expansion: tuple[int, ...] = (2, 2, 2, 1)
    lrb_ratio: float = 0.25
    sampling: str = "fps"
    n_points: int = 1024
    n_classes: int = 40
    head: str = "classify"
    seg_parts: int | None = None
    n_categories: int | None = None
    class_embed_dim: int = 64
    head_hidden: int | None = None   # default: 4x final stage width
    dropout: float = 0.5
    normalize_input: bool = True

    def __post_init__(self):
        self.stage_depths = tuple(int(x) for x in self.stage_depths)
        self.expansion = tuple(int(x) for x in self.expansion)
        if self.embedding not in EMBEDDINGS:
            raise ValueError(f"unknown embedding {self.embedding!r}")
        if self.gmu_placement not in GMU_PLACEMENTS:
            raise ValueError(f"unknown gmu_placement {self.gmu_placement!r}")
        if self.sampling not in SAMPLINGS:
            raise ValueError(f"unknown sampling {self.sampling!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if len(self.stage_depths) != 4 or len(self.expansion) != 4:
            raise ValueError("stage_depths and expansion must have 4 entries")
        if not any(abs(self.lrb_ratio - r) < 1e-9 for r in LRB_RATIOS):
            raise ValueError(f"lrb_ratio must be one of {LRB_RATIOS}")
        if self.n_points < 16 or self.n_points % 16 != 0:
            raise ValueError("n_points must be a positive multiple of 16")
        if self.head == "part_segment":
            if not self.seg_parts or not self.n_categories:
                raise ValueError("part_segment head needs seg_parts and n_categories")

    @property
    def widths(self) -> list[int]:
        w = [self.d * self.expansion[0]]
        for e in self.expansion[1:]:
            w.append(w[-1] * e)
        return w

    @property
    def stage_points(self) -> list[int]:
        return [self.n_points // (2 ** (s + 1)) for s in range(4)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_depths"] = list(self.stage_depths)
        d["expansion"] = list(self.expansion)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    # presets -------------------------------------------------------------
    @classmethod
    def slnet_s(cls, n_classes: int = 40, n_points: int = 1024, **kw) -> "ModelConfig":
        return cls(d=16, k=32, stage_depths=(1, 1, 2, 1), n_classes=n_classes,
                   n_points=n_points, **kw)

    @classmethod
    def slnet_m(cls, n_classes: int = 40, n_points: int = 1024, **kw) -> "ModelConfig":
        return cls(d=32, k=32, stage_depths=(1, 1, 2, 1), n_classes=n_classes,
                   n_points=n_points, **kw)

    @classmethod
    def slnet_s_tiny(cls, n_classes: int = 4, n_points: int = 256, **kw) -> "ModelConfig":
        """Desk-scale variant for synthetic-shape experiments.

        Same stage structure as the S preset but with smaller neighborhoods
        and a flatter channel ladder, tuned so a full training run finishes
        in minutes on one CPU core.
        """
        kw.setdefault("k", 8)
        kw.setdefault("expansion", (2, 2, 1, 1))
        kw.setdefault("dropout", 0.2)
        return cls(d=16, stage_depths=(1, 1, 2, 1), n_classes=n_classes,
                   n_points=n_points, **kw)


PRESETS = {
    "s": ModelConfig.slnet_s,
    "m": ModelConfig.slnet_m,
    "tiny": ModelConfig.slnet_s_tiny,
}


@dataclass
class StageState:
    """Coordinates and features of one encoder level."""

    coords: np.ndarray   # (B, m, 3), constant
    feats: Tensor        # (B, m, C)
    level: int


# ---------------------------------------------------------------------------
# module plumbing

class Module:
    """Minimal container: tracks Params, submodules and a training flag."""

    def __init__(self):
        self.training = True

    def named_params(self, prefix: str = "") -> list[tuple[str, Param]]:
        out = []
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Param):
                out.append((name, value))
            elif isinstance(value, (Module, Gmu)):
                out.extend(_named_params_of(value, f"{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Gmu)):
                        out.extend(_named_params_of(item, f"{name}.{i}."))
        return out

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = []
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, BatchNormState):
                out.append((f"{name}.running_mean", value.running_mean))
                out.append((f"{name}.running_var", value.running_var))
            elif isinstance(value, Module):
                out.extend(value.named_buffers(f"{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_buffers(f"{name}.{i}."))
        return out

    def train(self, flag: bool = True) -> "Module":
        self.training = flag
        for value in vars(self).values():
            if isinstance(value, Module):
                value.train(flag)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.train(flag)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()


def _named_params_of(obj, prefix: str) -> list[tuple[str, Param]]:
    if isinstance(obj, Gmu):
        return [(f"{prefix}alpha", obj.alpha), (f"{prefix}beta", obj.beta)]
    return obj.named_params(prefix)


class Linear(Module):
    """Dense layer; bias=False where batch norm follows (it would be inert)."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Param(rng.uniform(-bound, bound,
                                        (in_features, out_features)).astype(dtype))
        self.bias = (Param(rng.uniform(-bound, bound, out_features).astype(dtype))
                     if bias else None)

    def __call__(self, x) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        super().__init__()
        self.gamma = Param(np.ones(channels, dtype=dtype))
        self.beta = Param(np.zeros(channels, dtype=dtype))
        self.state = BatchNormState(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.state,
                            training=self.training, momentum=self.momentum,
                            eps=self.eps)


class LightResidualBlock(Module):
    """y = relu(x + W2(relu(BN(W1 x)))) with bottleneck width round(C*ratio)."""

    def __init__(self, channels: int, ratio: float, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        bottleneck = round(channels * ratio)
        if bottleneck < 1:
            raise ValueError(
                f"lrb_ratio {ratio} collapses {channels} channels below 1")
        self.w1 = Linear(channels, bottleneck, rng, dtype, bias=False)
        self.bn = BatchNorm(bottleneck, dtype=dtype)
        self.w2 = Linear(bottleneck, channels, rng, dtype)

    def __call__(self, x) -> Tensor:
        branch = self.w2(T.relu(self.bn(self.w1(x))))
        return T.relu(T.add(x, branch))


class EncoderStage(Module):
    """Channel expansion bridge plus the residual refinement stack."""

    def __init__(self, in_channels: int, width: int, depth: int, ratio: float,
                 gmu_after_grouping: bool, gmu_order: str,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.width = width
        self.group_gmu = (Gmu(in_channels + 3, order=gmu_order, dtype=dtype)
                          if gmu_after_grouping else None)
        self.expand = Linear(in_channels + 3, width, rng, dtype, bias=False)
        self.expand_bn = BatchNorm(width, dtype=dtype)
        self.blocks = [LightResidualBlock(width, ratio, rng, dtype)
                       for _ in range(depth)]

    def forward_grouped(self, grouped: Tensor) -> Tensor:
        """grouped: (B, m, K, C+3) center-relative features -> (B, m, width)."""
        b, m, k, c = grouped.shape
        if c != self.in_channels + 3:
            raise T.ShapeError(
                f"stage expects {self.in_channels + 3} grouped channels, got {c}")
        x = grouped
        if self.group_gmu is not None:
            x = self.group_gmu(x)
        flat = T.reshape(x, (b * m * k, c))
        h = T.relu(self.expand_bn(self.expand(flat)))
        return self._refine_pool(h, b, m, k)

    def forward_factored(self, fx: Tensor, nbr_idx: np.ndarray,
                         sel_idx: np.ndarray) -> Tensor:
        """Same map as forward_grouped on (fx[nbr] - fx[sel]).

        The expansion is linear, so it commutes with the center subtraction:
        projecting the N parent points once and gathering afterwards saves
        roughly a factor K of bridge FLOPs. Requires no grouping-site GMU.
        """
        b, n, c = fx.shape
        proj = T.linear(T.reshape(fx, (b * n, c)), self.expand.weight, None)
        proj = T.reshape(proj, (b, n, self.width))
        rel = T.gather_relative(proj, nbr_idx, sel_idx, self.expand.bias)
        _, m, k, w = rel.shape
        h = T.relu(self.expand_bn(T.reshape(rel, (b * m * k, w))))
        return self._refine_pool(h, b, m, k)

    def _refine_pool(self, h: Tensor, b: int, m: int, k: int) -> Tensor:
        for block in self.blocks:
            h = block(h)
        h = T.reshape(h, (b, m, k, self.width))
        pooled, _ = T.max_reduce(h, axis=2)
        return pooled


class ClassifyHead(Module):
    """linear -> relu -> dropout -> linear."""

    def __init__(self, in_width: int, hidden: int, n_classes: int,
                 dropout: float, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(in_width, hidden, rng, dtype)
        self.fc2 = Linear(hidden, n_classes, rng, dtype)
        self.p = dropout
        self._rng = np.random.default_rng(rng.integers(2 ** 63))

    def __call__(self, x) -> Tensor:
        h = T.relu(self.fc1(x))
        h = T.dropout(h, self.p, self._rng, self.training)
        return self.fc2(h)


class FpBlock(Module):
    """Interpolate coarse features to finer points, fuse the skip, refine."""

    def __init__(self, coarse_channels: int, skip_channels: int, out_channels: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(coarse_channels + skip_channels, out_channels, rng,
                          dtype, bias=False)
        self.bn1 = BatchNorm(out_channels, dtype=dtype)
        self.fc2 = Linear(out_channels, out_channels, rng, dtype, bias=False)
        self.bn2 = BatchNorm(out_channels, dtype=dtype)
        self.out_channels = out_channels

    def __call__(self, coarse_coords: np.ndarray, coarse_feats: Tensor,
                 fine_coords: np.ndarray, skip_feats: Tensor) -> Tensor:
        idx, w = geom.idw_weights_batch(coarse_coords, fine_coords, k=3)
        gathered = T.gather_points(coarse_feats, idx)          # (B, N, k, C)
        weights = Tensor(w[..., None].astype(coarse_feats.dtype))
        interp = T.sum_reduce(T.mul(gathered, weights), axis=2)
        fused = T.concat([interp, skip_feats], axis=-1)
        b, n, c = fused.shape
        h = T.reshape(fused, (b * n, c))
        h = T.relu(self.bn1(self.fc1(h)))
        h = T.relu(self.bn2(self.fc2(h)))
        return T.reshape(h, (b, n, self.out_channels))


class SegmentHead(Module):
    """FP decoder with multi-scale pooled fusion and a class-label embedding."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        widths = cfg.widths
        level_channels = [cfg.d] + widths            # 5 encoder levels
        fp_out = [widths[2], widths[2], widths[1], widths[1]]
        self.fp_blocks = []
        coarse = widths[3]
        for i, skip_level in enumerate((3, 2, 1, 0)):
            block = FpBlock(coarse, level_channels[skip_level], fp_out[i], rng, dtype)
            self.fp_blocks.append(block)
            coarse = fp_out[i]
        self.class_embed = Linear(cfg.n_categories, cfg.class_embed_dim, rng, dtype)
        fused_width = fp_out[-1] + sum(level_channels) + cfg.class_embed_dim
        hidden = widths[2]
        self.fc1 = Linear(fused_width, hidden, rng, dtype, bias=False)
        self.bn1 = BatchNorm(hidden, dtype=dtype)
        self.fc2 = Linear(hidden, cfg.seg_parts, rng, dtype)
        self.p = cfg.dropout
        self._rng = np.random.default_rng(rng.integers(2 ** 63))

    def __call__(self, levels: list[StageState], class_onehot: np.ndarray) -> Tensor:
        feats = levels[-1].feats
        for block, fine_level in zip(self.fp_blocks, (3, 2, 1, 0)):
            fine = levels[fine_level]
            feats = block(levels[fine_level + 1].coords, feats,
                          fine.coords, fine.feats)
        pooled = [T.max_reduce(lv.feats, axis=1)[0] for lv in levels]  # each (B, C)
        class_vec = self.class_embed(Tensor(class_onehot.astype(feats.dtype)))
        global_vec = T.concat(pooled + [class_vec], axis=-1)
        b, n, _ = feats.shape
        per_point = T.concat([feats, T.expand_mid(global_vec, n)], axis=-1)
        flat = T.reshape(per_point, (b * n, per_point.shape[-1]))
        h = T.relu(self.bn1(self.fc1(flat)))
        h = T.dropout(h, self.p, self._rng, self.training)
        h = self.fc2(h)
        return T.reshape(h, (b, n, h.shape[-1]))


class SLNet(Module):
    """The full model: embedding front end, hierarchical encoder, task head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.config = cfg
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.nape_cfg = None
        self.mlp_embed = None
        if cfg.embedding == "nape":
            self.nape_cfg = NapeConfig(d=cfg.d)
        elif cfg.embedding == "gaussian":
            self.nape_cfg = NapeConfig(d=cfg.d, force_beta=1.0)
        elif cfg.embedding == "cosine":
            self.nape_cfg = NapeConfig(d=cfg.d, force_beta=0.0)
        else:
            self.mlp_embed = Linear(3, cfg.d, rng, dtype)

        self.embed_gmu = (Gmu(cfg.d, order=cfg.gmu_order, dtype=dtype)
                          if cfg.gmu_placement in ("after_embedding", "both") else None)
        gmu_group = cfg.gmu_placement in ("after_grouping", "both")

        widths = cfg.widths
        in_ch = cfg.d
        self.stages = []
        for s in range(4):
            self.stages.append(EncoderStage(
                in_ch, widths[s], cfg.stage_depths[s], cfg.lrb_ratio,
                gmu_group, cfg.gmu_order, rng, dtype))
            in_ch = widths[s]

        if cfg.head == "classify":
            hidden = cfg.head_hidden or 4 * widths[3]
            self.head = ClassifyHead(widths[3], hidden, cfg.n_classes,
                                     cfg.dropout, rng, dtype)
            self.seg_head = None
        else:
            self.head = None
            self.seg_head = SegmentHead(cfg, rng, dtype)
        for name, p in self.named_params():
            p.name = name

    # ------------------------------------------------------------------
    def embed(self, coords: np.ndarray) -> Tensor:
        """(B, N, 3) -> (B, N, D) features, modulated when configured."""
        coords = np.asarray(coords, dtype=self.dtype)
        if self.mlp_embed is not None:
            b, n, _ = coords.shape
            flat = T.relu(self.mlp_embed(T.reshape(Tensor(coords), (b * n, 3))))
            feats = T.reshape(flat, (b, n, self.config.d))
        else:
            feats = Tensor(nape_embed_batch(coords, self.nape_cfg))
        if self.embed_gmu is not None:
            feats = self.embed_gmu(feats)
        return feats

    def _sample(self, coords: np.ndarray, m: int, stage: int,
                sample_seed: int) -> np.ndarray:
        if self.config.sampling == "fps":
            return geom.fps_batch(coords, m)
        b, n, _ = coords.shape
        out = np.empty((b, m), dtype=np.int64)
        for i in range(b):
            seed = np.random.SeedSequence([sample_seed, stage, i]).generate_state(1)[0]
            out[i] = geom.random_sample(coords[i], m, int(seed))
        return out

    def encode(self, coords: np.ndarray, sample_seed: int = 0,
               plan: list[tuple[np.ndarray, np.ndarray]] | None = None,
               ) -> tuple[Tensor, list[StageState]]:
        """Run all four stages; returns (global feature, all levels).

        `plan` optionally supplies precomputed per-stage (sample, neighbor)
        indices from precompute_geometry; results are identical because FPS
        and kNN are deterministic functions of the coordinates.
        """
        coords = np.asarray(coords, dtype=self.dtype)
        if coords.ndim != 3 or coords.shape[2] != 3:
            raise ValueError(f"expected (B, N, 3) coordinates, got {coords.shape}")
        cfg = self.config
        min_needed = cfg.stage_points[0]
        if coords.shape[1] < min_needed:
            raise ValueError(
                f"cloud has {coords.shape[1]} points; need at least {min_needed}")
        feats = self.embed(coords)
        levels = [StageState(coords=coords, feats=feats, level=0)]
        cur_coords = coords
        for s, stage in enumerate(self.stages):
            m = cfg.stage_points[s]
            if plan is not None:
                sel, nbr_idx = plan[s]
            else:
                sel = self._sample(cur_coords, m, s, sample_seed)
                nbr_idx = None
            new_coords = np.take_along_axis(cur_coords, sel[..., None], axis=1)
            if nbr_idx is None:
                nbr_idx, _ = geom.knn_batch(new_coords, cur_coords, cfg.k)
            fx = T.concat([feats, Tensor(cur_coords)], axis=-1)
            if stage.group_gmu is None:
                feats = stage.forward_factored(fx, nbr_idx, sel)
            else:
                neighbors = T.gather_points(fx, nbr_idx)         # (B, m, K, C+3)
                centers = T.gather_points(fx, sel)               # (B, m, C+3)
                b, mm, c = centers.shape
                grouped = T.sub(neighbors, T.reshape(centers, (b, mm, 1, c)))
                feats = stage.forward_grouped(grouped)
            cur_coords = new_coords
            levels.append(StageState(coords=cur_coords, feats=feats, level=s + 1))
        global_feat, _ = T.max_reduce(feats, axis=1)
        return global_feat, levels

    def forward(self, coords: np.ndarray, sample_seed: int = 0,
                plan: list[tuple[np.ndarray, np.ndarray]] | None = None) -> Tensor:
        """Classification logits, (B, n_classes)."""
        if self.head is None:
            raise RuntimeError("model was built with a part-segmentation head")
        global_feat, _ = self.encode(coords, sample_seed, plan=plan)
        return self.head(global_feat)

    def forward_segment(self, coords: np.ndarray, class_onehot: np.ndarray,
                        sample_seed: int = 0) -> Tensor:
        """Per-point part logits, (B, N, seg_parts)."""
        if self.seg_head is None:
            raise RuntimeError("model was built with a classification head")
        class_onehot = np.asarray(class_onehot)
        if class_onehot.ndim != 2 or class_onehot.shape[1] != self.config.n_categories:
            raise ValueError("class_onehot must be (B, n_categories)")
        _, levels = self.encode(coords, sample_seed)
        return self.seg_head(levels, class_onehot)

    def __call__(self, coords, **kw) -> Tensor:
        return self.forward(coords, **kw)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> SLNet:
    return SLNet(cfg, seed=seed, dtype=dtype)


def precompute_geometry(cfg: ModelConfig, coords: np.ndarray,
                        chunk: int = 100) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-stage FPS + kNN indices for a set of clouds, computed in chunks.

    Valid only for FPS sampling (deterministic); reusing the plan across
    epochs avoids redundant neighborhood searches.
    """
    if cfg.sampling != "fps":
        raise ValueError("geometry plans require deterministic FPS sampling")
    coords = np.asarray(coords)
    parts: list[list[tuple[np.ndarray, np.ndarray]]] = []
    for lo in range(0, coords.shape[0], chunk):
        cur = coords[lo:lo + chunk]
        stage_plan = []
        for s in range(4):
            m = cfg.stage_points[s]
            sel = geom.fps_batch(cur, m)
            new_coords = np.take_along_axis(cur, sel[..., None], axis=1)
            nbr, _ = geom.knn_batch(new_coords, cur, cfg.k)
            stage_plan.append((sel, nbr))
            cur = new_coords
        parts.append(stage_plan)
    return [
        (np.concatenate([p[s][0] for p in parts], axis=0),
         np.concatenate([p[s][1] for p in parts], axis=0))
        for s in range(4)
    ]
