"""Encoder-decoder segmentation model assembly.

Reference wiring: a 5x5 stem conv, then per encoder scale a block
followed by 2x2 max pooling; a bottleneck block with dropout; per
decoder scale a nearest-repeat upsample, a block, and an additive skip
from the matching encoder scale. In multiscale mode every decoder scale
feeds a conv-bn-LeakyReLU-conv-sigmoid head, the per-scale maps are
upsampled to full resolution, concatenated and fused by a final head of
the same shape; plain mode keeps only the final head on the shallowest
decoder scale.

FLOP convention (multiplies and adds counted separately, batch included):
2*k*k*(Cin/groups)*Cout*H*W per conv plus Cout*H*W when biased;
2*in*out per dense map row; 2 per batch-norm output value; 1 per
activation or elementwise output value; 3 per max-pool output; input
size for a global average pool; 0 for upsample/concat/slice/shuffle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import fnt1
from .blocks import BLOCK_KINDS, make_block
from .nn import BatchNorm2d, Conv2d, FlopTracer, Module, set_tracer
from .tensor import (
    Tensor,
    concat_channels,
    dropout,
    flop_counter,
    leaky_relu,
    max_pool2,
    no_grad,
    sigmoid,
    upsample_repeat2,
)

__all__ = ["ModelConfig", "Model", "ConfigError", "CheckpointError", "build",
           "skip_connect", "count_params", "count_flops", "summary",
           "save_checkpoint", "load_checkpoint", "load_config"]

HEAD_HIDDEN = 8  # hidden width of every output head

DECODER_MODES = ("multiscale", "plain")
COMBINE_MODES = ("permutation_equivariant_1x1", "channel_shuffle")


class ConfigError(ValueError):
    """The model configuration violates a constraint."""


class CheckpointError(ValueError):
    """A checkpoint does not match the configured model."""


@dataclass
class ModelConfig:
    scales: int
    widths: list
    in_channels: int = 1
    first_kernel: int = 5
    body_kernel: int = 3
    attention_kernel: int = 1
    bottleneck_dropout: float = 0.5
    decoder_mode: str = "multiscale"
    block_kind: str = "group_attention"
    combine_mode: str = "permutation_equivariant_1x1"
    leaky_slope: float = 0.3
    se_reduction: int = 8

    def __post_init__(self):
        self.widths = list(self.widths)
        if self.scales < 1:
            raise ConfigError("scales must be >= 1")
        if len(self.widths) != self.scales:
            raise ConfigError(f"expected {self.scales} widths, got {len(self.widths)}")
        if any(w < 1 for w in self.widths):
            raise ConfigError("widths must be positive")
        if self.in_channels not in (1, 3):
            raise ConfigError("in_channels must be 1 or 3")
        if self.block_kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block_kind {self.block_kind!r}")
        if self.decoder_mode not in DECODER_MODES:
            raise ConfigError(f"unknown decoder_mode {self.decoder_mode!r}")
        if self.combine_mode not in COMBINE_MODES:
            raise ConfigError(f"unknown combine_mode {self.combine_mode!r}")
        if self.block_kind in ("group_attention", "concat_horizontal"):
            bad = [w for w in self.widths if w % 4]
            if bad:
                raise ConfigError(f"group attention widths must divide by 4, got {bad}")
        for name in ("first_kernel", "body_kernel", "attention_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{name} must be odd and positive, got {k}")
        if self.attention_kernel != 1:
            raise ConfigError("attention (gate) convolutions are fixed at 1x1")
        if not 0.0 <= self.bottleneck_dropout < 1.0:
            raise ConfigError("bottleneck_dropout must lie in [0, 1)")
        if self.se_reduction < 1:
            raise ConfigError("se_reduction must be >= 1")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for required in ("scales", "widths"):
            if required not in d:
                raise ConfigError(f"config key {required!r} is required")
        return cls(**d)


def load_config(path) -> ModelConfig:
    try:
        raw = json.loads(Path(path).read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config JSON must be an object")
    return ModelConfig.from_dict(raw)


def skip_connect(enc: Tensor, dec: Tensor) -> Tensor:
    """Additive encoder-to-decoder merge (shapes must already match)."""
    return dec + enc


class Head(Module):
    """conv-bn-LeakyReLU-conv-sigmoid probability head."""

    def __init__(self, in_ch: int, rng: np.random.Generator, kernel: int = 3,
                 leaky_slope: float = 0.3):
        super().__init__()
        self.leaky_slope = leaky_slope
        self.conv1 = Conv2d(in_ch, HEAD_HIDDEN, kernel, rng)
        self.bn = BatchNorm2d(HEAD_HIDDEN)
        self.gate = Conv2d(HEAD_HIDDEN, 1, 1, rng, bias=True)

    def forward(self, x):
        h = leaky_relu(self.bn(self.conv1(x)), self.leaky_slope)
        return sigmoid(self.gate(h))


class Model(Module):
    """A built network: configuration plus its named parameter store."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        s = config.scales
        widths = config.widths
        kw = dict(se_reduction=config.se_reduction, kernel=config.body_kernel,
                  leaky_slope=config.leaky_slope, combine_mode=config.combine_mode)

        self.stem = Conv2d(config.in_channels, widths[0], config.first_kernel, rng)
        for i in range(s):
            in_w = widths[0] if i == 0 else widths[i - 1]
            setattr(self, f"enc{i}", make_block(config.block_kind, in_w, widths[i], rng, **kw))
        self.bottleneck = make_block(config.block_kind, widths[-1], widths[-1], rng, **kw)
        for i in reversed(range(s)):
            in_w = widths[-1] if i == s - 1 else widths[i + 1]
            setattr(self, f"dec{i}", make_block(config.block_kind, in_w, widths[i], rng, **kw))
        if config.decoder_mode == "multiscale":
            for i in range(s):
                setattr(self, f"head{i}",
                        Head(widths[i], rng, config.body_kernel, config.leaky_slope))
            self.fuse = Head(s, rng, config.body_kernel, config.leaky_slope)
        else:
            self.fuse = Head(widths[0], rng, config.body_kernel, config.leaky_slope)

    def _validate_input(self, x: Tensor) -> None:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected (N,{cfg.in_channels},H,W) input, got {x.shape}")
        div = 1 << cfg.scales
        if x.shape[2] % div or x.shape[3] % div:
            raise ValueError(f"input H,W must divide by {div}, got {x.shape[2:]}")

    def forward(self, x: Tensor, rng: np.random.Generator | None = None,
                return_heads: bool = False):
        self._validate_input(x)
        cfg = self.config
        s = cfg.scales
        h = self.stem(x)
        skips = []
        for i in range(s):
            h = getattr(self, f"enc{i}")(h)
            skips.append(h)
            h = max_pool2(h)
        h = self.bottleneck(h)
        h = dropout(h, cfg.bottleneck_dropout, self.training, rng)
        dec_outs = [None] * s
        for i in reversed(range(s)):
            h = upsample_repeat2(h)
            h = getattr(self, f"dec{i}")(h)
            h = skip_connect(skips[i], h)
            dec_outs[i] = h
        if cfg.decoder_mode == "multiscale":
            maps = []
            for i in range(s):
                y = getattr(self, f"head{i}")(dec_outs[i])
                for _ in range(i):
                    y = upsample_repeat2(y)
                maps.append(y)
            out = self.fuse(concat_channels(maps))
        else:
            maps = []
            out = self.fuse(dec_outs[0])
        if return_heads:
            return out, maps
        return out

    def state_arrays(self) -> dict:
        """Parameters then buffers, declaration order, as float64 arrays."""
        arrays = {name: p.data for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            arrays[name] = b
        return arrays

    def load_state_arrays(self, arrays: dict, strict_dtype: bool = False) -> None:
        del strict_dtype
        expected = self.state_arrays()
        missing = set(expected) - set(arrays)
        unknown = set(arrays) - set(expected)
        if missing or unknown:
            raise CheckpointError(
                f"parameter name set mismatch: missing={sorted(missing)[:4]} "
                f"unknown={sorted(unknown)[:4]}")
        params = dict(self.named_parameters())
        buffers = {name: (owner, bname)
                   for path, owner in self.named_modules()
                   for bname in owner._buffers
                   for name in [f"{path}.{bname}" if path else bname]}
        for name, value in arrays.items():
            value = np.asarray(value, dtype=np.float64)
            if value.shape != expected[name].shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {value.shape}, "
                    f"model {expected[name].shape}")
            if name in params:
                params[name].data = value.copy()
            else:
                owner, bname = buffers[name]
                owner.set_buffer(bname, value.copy())


def build(config: ModelConfig, seed: int = 0) -> Model:
    return Model(config, seed)


def count_params(model: Model) -> int:
    """Learnable scalars only; batch-norm running stats are excluded."""
    return sum(p.data.size for _, p in model.named_parameters())


def _traced_forward(model: Model, input_shape) -> FlopTracer:
    for path, m in model.named_modules():
        m._trace_name = path if path else "(top level)"
    tracer = FlopTracer()
    was_training = model.training
    model.eval()
    try:
        set_tracer(tracer)
        with no_grad(), flop_counter(tracer.add):
            model(Tensor(np.zeros(input_shape)))
    finally:
        set_tracer(None)
        model.train(was_training)
    return tracer


def count_flops(model: Model, input_shape) -> int:
    """Total forward FLOPs per the documented convention (batch included)."""
    return sum(_traced_forward(model, input_shape).totals.values())


def summary(model: Model, input_shape) -> str:
    """Per-scope params/FLOPs table, execution order, plus totals."""
    tracer = _traced_forward(model, input_shape)
    direct_params = {}
    for path, m in model.named_modules():
        n = sum(p.data.size for p in m._params.values())
        if n:
            direct_params[path if path else "(top level)"] = n
    rows = []
    for name in tracer.order:
        rows.append((name, direct_params.pop(name, 0), tracer.totals[name]))
    for name, n in direct_params.items():  # parameters never touched by the trace
        rows.append((name, n, 0))
    width = max(len(r[0]) for r in rows) + 2
    lines = [f"{'scope':<{width}}{'params':>12}{'flops':>16}"]
    for name, n_params, n_flops in rows:
        lines.append(f"{name:<{width}}{n_params:>12}{n_flops:>16}")
    lines.append("-" * (width + 28))
    lines.append(f"{'total':<{width}}{count_params(model):>12}"
                 f"{sum(tracer.totals.values()):>16}")
    return "\n".join(lines)


def save_checkpoint(model: Model, path) -> None:
    """Write weights as FNT1 (binary32) plus a same-stem .json config sidecar."""
    path = Path(path)
    fnt1.write_tensors(path, model.state_arrays())
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(model.config.to_dict(), sort_keys=True, indent=2) + "\n",
                       "utf-8")


def load_checkpoint(path, config: ModelConfig | None = None) -> Model:
    """Rebuild a model from an FNT1 checkpoint and its config sidecar."""
    path = Path(path)
    if config is None:
        sidecar = path.with_suffix(".json")
        if not sidecar.exists():
            raise CheckpointError(f"missing config sidecar {sidecar}")
        config = load_config(sidecar)
    model = Model(config, seed=0)
    model.load_state_arrays(fnt1.read_tensors(path))
    return model
