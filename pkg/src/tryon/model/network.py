"""Background-oriented keypoint hallucination network.

Layout at desk scale (input 64, encoder widths [16, 32, 64, 128])::

    E_b: stem 3x3 -> 4 residual stages, each halving the resolution -> F_b (4x4)
    E_f: same topology over [I_f; M_f]                               -> F_f (4x4)
    DAF: F_fuse = M_fuse * F_b + (1 - M_fuse) * F_f
    D_hm / D_sm: (stages - 1) up-sampling residual stages, then a final
                 transposed conv + 3x3 prediction conv at input resolution

Encoder -> decoder skips (``skip_table``) pair each decoder stage with the
encoder stage of equal resolution, for the three encoder stages that precede
the bottleneck. Every D_sm stage output, and its final up-sampled feature,
is added into the matching D_hm feature; only the D_sm prediction conv is
private to the semantic branch.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..autodiff import Tensor, ops
from ..autodiff.tensor import as_tensor
from ..heatmap import HeatmapSet, LossConfig, heatmap_loss
from .layers import BasicBlock, Conv2d, ConvTranspose2d, GroupNorm, Linear, Module, UpBlock

FUSIONS = ("daf", "daf-simplified", "add", "none")
NUM_SKIPS = 3
HEAD_INIT_STD = 1e-3


class ModelConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    encoder_channels: tuple = (16, 32, 64, 128)
    num_heatmaps: int = 4
    num_semantic_classes: int = 12
    use_semantic: bool = True
    fusion: str = "daf"
    seed: int = 0
    attention_reduction: int = 8

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        stages = len(self.encoder_channels)
        if stages < 1:
            raise ModelConfigError("encoder needs at least one stage")
        if self.input_size % (2**stages):
            raise ModelConfigError(f"input size {self.input_size} not divisible by 2^{stages}")
        if self.input_size // 2**stages < 4:
            raise ModelConfigError(
                f"bottleneck {self.input_size // 2**stages}px is below 4px for input {self.input_size} and {stages} stages"
            )
        for c in self.encoder_channels:
            if c < 1 or (c > 8 and c % 8):
                raise ModelConfigError(f"channel width {c} must be <= 8 or a multiple of 8 for group norm")
        if self.fusion not in FUSIONS:
            raise ModelConfigError(f"fusion must be one of {FUSIONS}, got '{self.fusion}'")
        if self.num_semantic_classes < 1 or self.num_heatmaps < 1:
            raise ModelConfigError("class and heatmap counts must be positive")

    @property
    def stages(self) -> int:
        return len(self.encoder_channels)

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // 2**self.stages

    def skip_table(self) -> dict[int, int]:
        """Decoder stage index -> encoder stage index whose output is added to it."""
        n = self.stages
        return {j: n - 2 - j for j in range(min(NUM_SKIPS, n - 1))}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Encoder(Module):
    def __init__(self, rng, cin: int, widths):
        self.stem = Conv2d(rng, cin, widths[0], 3, bias=False)
        self.stem_norm = GroupNorm(widths[0])
        stages = []
        prev = widths[0]
        for w in widths:
            stages.append(_Stage([BasicBlock(rng, prev, w, stride=2), BasicBlock(rng, w, w)]))
            prev = w
        self.stages = stages

    def forward(self, x) -> list[Tensor]:
        h = ops.relu(self.stem_norm(self.stem(x)))
        feats = []
        for st in self.stages:
            h = st(h)
            feats.append(h)
        return feats


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


class Decoder(Module):
    def __init__(self, rng, widths, cout: int):
        rev = list(reversed(widths))
        self.stages = [
            _Stage([UpBlock(rng, rev[j], rev[j + 1]), BasicBlock(rng, rev[j + 1], rev[j + 1])])
            for j in range(len(rev) - 1)
        ]
        self.final_up = ConvTranspose2d(rng, rev[-1], rev[-1], 4, bias=False)
        self.final_norm = GroupNorm(rev[-1])
        self.head = Conv2d(rng, rev[-1], cout, 3)
        # near-zero start: the prediction begins at the all-background answer
        self.head.weight.data = rng.normal(0.0, HEAD_INIT_STD, self.head.weight.shape)


class DAF(Module):
    """Dual-attention fusion weight predictor (channel then spatial attention)."""

    def __init__(self, rng, channels: int, reduction: int, simplified: bool = False):
        self.simplified = simplified
        if simplified:
            self.weight_conv = Conv2d(rng, channels, 1, 3)
        else:
            hidden = max(1, channels // reduction)
            self.mlp1 = Linear(rng, channels, hidden)
            self.mlp2 = Linear(rng, hidden, channels)
            self.spatial = Conv2d(rng, 2, 1, 7)

    def channel_attention(self, s):
        def mlp(v):
            return self.mlp2(ops.relu(self.mlp1(v)))

        att = ops.sigmoid(ops.add(mlp(ops.global_avg_pool(s)), mlp(ops.global_max_pool(s))))
        return ops.reshape(att, att.shape + (1, 1))

    def weight_logits(self, s):
        if self.simplified:
            return self.weight_conv(s)
        refined = ops.mul(s, self.channel_attention(s))
        pooled = ops.concat(
            [ops.mean(refined, axis=1, keepdims=True), ops.max_reduce(refined, axis=1, keepdims=True)], axis=1
        )
        return self.spatial(pooled)


def daf_fuse(f_b, f_f, daf: DAF, force_mask: Optional[float] = None):
    """Returns ``(m_fuse, f_fuse)`` with ``f_fuse = m * f_b + (1 - m) * f_f``.

    ``force_mask`` replaces the predicted weight map by a constant (test hook).
    """
    f_b, f_f = as_tensor(f_b), as_tensor(f_f)
    if f_b.shape != f_f.shape:
        raise ValueError(f"DAF inputs differ in shape: {f_b.shape} vs {f_f.shape}")
    if force_mask is not None:
        m = Tensor(np.full(f_b.shape, float(force_mask)))
    else:
        s = ops.add(f_b, f_f)
        m = ops.broadcast_to(ops.sigmoid(daf.weight_logits(s)), f_b.shape)
    fused = ops.add(ops.mul(m, f_b), ops.mul(ops.sub(1.0, m), f_f))
    return m, fused


@dataclass
class ForwardOutput:
    heatmaps: Tensor
    semantic: Optional[Tensor]
    f_b: Tensor
    f_f: Optional[Tensor]
    m_fuse: Optional[Tensor]
    f_fuse: Tensor


class TryOnModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        widths = list(cfg.encoder_channels)
        self.enc_b = Encoder(rng, 3, widths)
        self.enc_f = Encoder(rng, 4, widths) if cfg.fusion != "none" else None
        self.dec_hm = Decoder(rng, widths, cfg.num_heatmaps)
        self.dec_sm = Decoder(rng, widths, cfg.num_semantic_classes) if cfg.use_semantic else None
        if cfg.fusion in ("daf", "daf-simplified"):
            self.daf = DAF(rng, widths[-1], cfg.attention_reduction, simplified=cfg.fusion == "daf-simplified")
        else:
            self.daf = None

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def forward(self, i_b, i_f=None, m_f=None, force_mask: Optional[float] = None) -> ForwardOutput:
        return forward(self, i_b, i_f, m_f, force_mask=force_mask)


def build_model(cfg: ModelConfig) -> TryOnModel:
    return TryOnModel(cfg)


def _check_image(name: str, x: Tensor, channels: int, size: int) -> None:
    if x.ndim != 4 or x.shape[1] != channels or x.shape[2:] != (size, size):
        raise ValueError(f"{name}: expected (B, {channels}, {size}, {size}), got {x.shape}")


def forward(model: TryOnModel, i_b, i_f=None, m_f=None, force_mask: Optional[float] = None) -> ForwardOutput:
    """Run the network on NCHW batches: ``i_b``/``i_f`` (B,3,S,S), ``m_f`` (B,1,S,S)."""
    cfg = model.cfg
    i_b = as_tensor(i_b)
    _check_image("background", i_b, 3, cfg.input_size)
    enc = model.enc_b(i_b)
    f_b = enc[-1]

    f_f = m_fuse = None
    if cfg.fusion == "none":
        f_fuse = f_b
    else:
        if i_f is None or m_f is None:
            raise ValueError(f"fusion '{cfg.fusion}' needs the foreground image and mask")
        i_f, m_f = as_tensor(i_f), as_tensor(m_f)
        _check_image("foreground", i_f, 3, cfg.input_size)
        _check_image("foreground mask", m_f, 1, cfg.input_size)
        f_f = model.enc_f(ops.concat([i_f, m_f], axis=1))[-1]
        if cfg.fusion == "add":
            f_fuse = ops.add(f_b, f_f)
        else:
            m_fuse, f_fuse = daf_fuse(f_b, f_f, model.daf, force_mask)

    skips = cfg.skip_table()
    h = f_fuse
    s = f_b if model.dec_sm is not None else None
    for j, stage in enumerate(model.dec_hm.stages):
        h = stage(h)
        if j in skips:
            h = ops.add(h, enc[skips[j]])
        if s is not None:
            s = model.dec_sm.stages[j](s)
            if j in skips:
                s = ops.add(s, enc[skips[j]])
            h = ops.add(h, s)

    dh = model.dec_hm
    h = ops.relu(dh.final_norm(dh.final_up(h)))
    semantic = None
    if s is not None:
        ds = model.dec_sm
        s = ops.relu(ds.final_norm(ds.final_up(s)))
        h = ops.add(h, s)
        semantic = ds.head(s)
    heatmaps = dh.head(h)
    return ForwardOutput(heatmaps, semantic, f_b, f_f, m_fuse, f_fuse)


def semantic_loss(logits, labels: np.ndarray) -> Tensor:
    """Pixel-averaged cross-entropy of (B,C,H,W) logits against (B,H,W) class indices."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    c = logits.shape[1]
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DataError(f"semantic labels {labels.shape} do not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"semantic class index out of range [0, {c - 1}]")
    onehot = (labels[:, None] == np.arange(c)[None, :, None, None]).astype(np.float64)
    n = labels.size
    return ops.scalar_mul(ops.sum(ops.mul(ops.log_softmax(logits, axis=1), onehot)), -1.0 / n)


@dataclass
class LossBreakdown:
    total: Tensor
    hm: float
    sm: float


def total_loss(out: ForwardOutput, gt_heatmaps: np.ndarray, gt_sem: Optional[np.ndarray], cfg: LossConfig) -> LossBreakdown:
    """``L_hm + lambda * L_sm``; the semantic term is skipped when the model has no semantic branch."""
    l_hm = heatmap_loss(HeatmapSet.from_gt(gt_heatmaps, out.heatmaps), cfg)
    if out.semantic is None:
        return LossBreakdown(l_hm, l_hm.item(), 0.0)
    if gt_sem is None:
        raise DataError("semantic labels are required when the semantic decoder is enabled")
    l_sm = semantic_loss(out.semantic, gt_sem)
    total = ops.add(l_hm, ops.scalar_mul(l_sm, cfg.lam))
    return LossBreakdown(total, l_hm.item(), l_sm.item())
