"""Compact encoder-decoder segmentation network.

Topology (default plan): two stride-2 3x3 stem convolutions, three encoder
blocks (stride 2), three decoder blocks (resize 2, 2, 4), two 3x3 head
convolutions (the second followed by a 2x resize back to frame resolution)
and a final 1x1 classifier.

Each block normalizes its input, then runs two parallel paths - a 1x1
shortcut convolution and a residual path (3x3 convolution followed by a
separable 1x3 + 3x1 pair) - concatenates both, applies the activation and
resizes.  A block configured with ``channels c`` gives each path ``c``
channels, so its output carries ``2c``.  Skip connections concatenate each
encoder block's output into the input of the matching decoder block.

Decoder resizes target the recorded extent of the mirrored encoder stage,
which keeps skip junctions aligned for any input size (for extents
divisible by 32 this coincides with the nominal integer factors).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import (
    BatchNorm,
    BilinearResize,
    Concat,
    Conv2d,
    ParamState,
    ReLU,
    SeparableConv,
)
from .nn.layers import strip_batch


class ArchError(ValueError):
    """Raised for configurations that violate the resolution ledger."""


# Reference class count for full-scale cost ledgers: eight movable foreground
# classes (the teacher vocabulary the system targets) plus background.
DEFAULT_NUM_CLASSES = 9


def round_channels(base: int, multiplier: float) -> int:
    """Scale a channel count, rounding to the nearest multiple of 4 (floor 4)."""
    scaled = base * multiplier
    return max(4, int(np.floor(scaled / 4.0 + 0.5)) * 4)


@dataclass(frozen=True)
class ArchConfig:
    num_classes: int
    width_multiplier: float = 1.0
    input_scale: float = 1.0
    skip_connections: bool = True
    stem_channels: tuple[int, int] = (8, 8)
    encoder_channels: tuple[int, int, int] = (64, 64, 128)
    decoder_channels: tuple[int, int, int] = (64, 32, 32)
    decoder_resizes: tuple[int, int, int] = (2, 2, 4)
    head_channels: tuple[int, int] = (32, 32)
    head_resize: int = 2
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.num_classes < 2:
            raise ArchError("num_classes must be >= 2")
        if self.width_multiplier <= 0:
            raise ArchError("width_multiplier must be > 0")
        if not 0 < self.input_scale <= 1:
            raise ArchError("input_scale must lie in (0, 1]")
        strides = 2 ** (2 + len(self.encoder_channels))
        resizes = int(np.prod(self.decoder_resizes)) * self.head_resize
        if strides != resizes:
            raise ArchError(f"resolution ledger violated: stride product {strides} "
                            f"!= resize product {resizes}")

    def scaled(self, base: int) -> int:
        return round_channels(base, self.width_multiplier)

    def stage_plan(self) -> list[tuple[str, str, int, int, int]]:
        """Ordered (name, kind, stride, resize, channels) rows; block channel
        counts are per path."""
        plan = [("stem1", "conv3x3", 2, 1, self.scaled(self.stem_channels[0])),
                ("stem2", "conv3x3", 2, 1, self.scaled(self.stem_channels[1]))]
        for i, c in enumerate(self.encoder_channels, start=1):
            plan.append((f"enc{i}", "block", 2, 1, self.scaled(c)))
        n = len(self.decoder_channels)
        for i, (c, r) in enumerate(zip(self.decoder_channels, self.decoder_resizes)):
            plan.append((f"dec{n - i}", "block", 1, r, self.scaled(c)))
        plan.append(("head1", "conv3x3", 1, 1, self.scaled(self.head_channels[0])))
        plan.append(("head2", "conv3x3", 1, self.head_resize, self.scaled(self.head_channels[1])))
        plan.append(("head3", "conv1x1", 1, 1, self.num_classes))
        return plan


class ConvStage:
    """Convolution + per-frame norm + activation (stems and head convs)."""

    def __init__(self, name: str, in_ch: int, out_ch: int, kernel: int, stride: int,
                 eps: float, rng: np.random.Generator, dtype):
        self.name = name
        self.conv = Conv2d(in_ch, out_ch, kernel, stride, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm(out_ch, eps, dtype)
        self.relu = ReLU()
        self.out_channels = out_ch

    def params(self):
        return ([(f"{self.name}.conv.{n}", p) for n, p in self.conv.params()]
                + [(f"{self.name}.bn.{n}", p) for n, p in self.bn.params()])

    def forward(self, x):
        return self.relu.forward(self.bn.forward(self.conv.forward(x)))

    def backward(self, dy):
        return self.conv.backward(self.bn.backward(self.relu.backward(dy)))


class EncDecBlock:
    """Shortcut / residual twin-path block with optional output resize."""

    def __init__(self, name: str, in_ch: int, path_ch: int, stride: int,
                 eps: float, rng: np.random.Generator, dtype):
        self.name = name
        self.bn_in = BatchNorm(in_ch, eps, dtype)
        self.shortcut = Conv2d(in_ch, path_ch, 1, stride, bias=True, rng=rng, dtype=dtype)
        self.res_conv = Conv2d(in_ch, path_ch, 3, stride, bias=True, rng=rng, dtype=dtype)
        self.res_sep = SeparableConv(path_ch, path_ch, bias=True, rng=rng, dtype=dtype)
        self.relu_mid = ReLU()
        self.concat = Concat()
        self.relu_out = ReLU()
        self.resize = BilinearResize()
        self.out_channels = 2 * path_ch

    def params(self):
        groups = [("bn_in", self.bn_in), ("shortcut", self.shortcut),
                  ("res3x3", self.res_conv), ("sep", self.res_sep)]
        return [(f"{self.name}.{g}.{n}", p) for g, layer in groups
                for n, p in layer.params()]

    def forward(self, x, out_hw=None):
        h = self.bn_in.forward(x)
        a = self.shortcut.forward(h)
        r = self.relu_mid.forward(self.res_conv.forward(h))
        r = self.res_sep.forward(r)
        y = self.relu_out.forward(self.concat.forward(a, r))
        if out_hw is not None:
            y = self.resize.forward(y, out_hw)
        else:
            self.resize._cache = None
        return y

    def backward(self, dy):
        if self.resize._cache is not None:
            dy = self.resize.backward(dy)
        da, dr = self.concat.backward(self.relu_out.backward(dy))
        dh = self.shortcut.backward(da)
        dh += self.res_conv.backward(self.relu_mid.backward(self.res_sep.backward(dr)))
        return self.bn_in.backward(dh)


class JITNet:
    """The full network graph: owns parameters, momentum state and the
    forward/backward execution order including skip routing."""

    def __init__(self, config: ArchConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4a49544e]))
        eps = config.bn_eps
        s1 = config.scaled(config.stem_channels[0])
        s2 = config.scaled(config.stem_channels[1])
        e1, e2, e3 = (config.scaled(c) for c in config.encoder_channels)
        d3, d2, d1 = (config.scaled(c) for c in config.decoder_channels)
        h1, h2 = (config.scaled(c) for c in config.head_channels)
        skip = config.skip_connections

        self.stem1 = ConvStage("stem1", 3, s1, 3, 2, eps, rng, dtype)
        self.stem2 = ConvStage("stem2", s1, s2, 3, 2, eps, rng, dtype)
        self.enc1 = EncDecBlock("enc1", s2, e1, 2, eps, rng, dtype)
        self.enc2 = EncDecBlock("enc2", 2 * e1, e2, 2, eps, rng, dtype)
        self.enc3 = EncDecBlock("enc3", 2 * e2, e3, 2, eps, rng, dtype)
        self.dec3 = EncDecBlock("dec3", 2 * e3, d3, 1, eps, rng, dtype)
        self.dec2 = EncDecBlock("dec2", 2 * d3 + (2 * e2 if skip else 0), d2, 1, eps, rng, dtype)
        self.dec1 = EncDecBlock("dec1", 2 * d2 + (2 * e1 if skip else 0), d1, 1, eps, rng, dtype)
        self.head1 = ConvStage("head1", 2 * d1, h1, 3, 1, eps, rng, dtype)
        self.head2 = ConvStage("head2", h1, h2, 3, 1, eps, rng, dtype)
        self.classifier = Conv2d(h2, config.num_classes, 1, 1, bias=True, rng=rng, dtype=dtype)

        self._skip2 = Concat()
        self._skip1 = Concat()
        self._in_resize = BilinearResize()
        self._head_resize = BilinearResize()
        self._out_resize = BilinearResize()
        self._blocks = [self.enc1, self.enc2, self.enc3, self.dec3, self.dec2, self.dec1]
        self._stages = ([self.stem1, self.stem2] + self._blocks
                        + [self.head1, self.head2])

    # -- parameter bookkeeping -------------------------------------------

    def params(self) -> list[tuple[str, ParamState]]:
        out = []
        for stage in self._stages:
            out.extend(stage.params())
        out.extend((f"head3.{n}", p) for n, p in self.classifier.params())
        return out

    def param_states(self) -> list[ParamState]:
        return [p for _, p in self.params()]

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(name, p.value) for name, p in self.params()]

    def load_state(self, named_values: list[tuple[str, np.ndarray]]) -> None:
        table = dict(named_values)
        for name, p in self.params():
            if name not in table:
                raise KeyError(f"snapshot is missing parameter {name}")
            value = table.pop(name)
            if tuple(value.shape) != tuple(p.value.shape):
                raise ValueError(f"snapshot extent mismatch for {name}: "
                                 f"{value.shape} vs {p.value.shape}")
            p.value[...] = value.astype(self.dtype)
            p.momentum_buffer[...] = 0
            p.clear_gradient()
        if table:
            raise KeyError(f"snapshot has unknown parameters: {sorted(table)}")

    def clone(self) -> "JITNet":
        twin = JITNet(self.config, seed=0, dtype=self.dtype)
        twin.load_state(self.state_arrays())
        return twin

    # -- execution --------------------------------------------------------

    def _scaled_extent(self, h: int, w: int) -> tuple[int, int]:
        s = self.config.input_scale
        if s == 1.0:
            return (h, w)
        return (max(1, round(h * s)), max(1, round(w * s)))

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Map a ``(3, H, W)`` frame to ``(num_classes, H, W)`` logits.

        A leading batch extent of 1 is accepted and mirrored on the output.
        """
        had_batch = x.ndim == 4
        if had_batch:
            x = strip_batch(x)
        if x.ndim != 3 or x.shape[0] != 3:
            raise ValueError(f"expected a (3, H, W) frame, got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        h, w = x.shape[1:]
        x0 = self._in_resize.forward(x, self._scaled_extent(h, w))

        s1 = self.stem1.forward(x0)
        s2 = self.stem2.forward(s1)
        e1 = self.enc1.forward(s2)
        e2 = self.enc2.forward(e1)
        e3 = self.enc3.forward(e2)

        d3 = self.dec3.forward(e3, e2.shape[1:])
        d2_in = self._skip2.forward(d3, e2) if self.config.skip_connections else d3
        d2 = self.dec2.forward(d2_in, e1.shape[1:])
        d1_in = self._skip1.forward(d2, e1) if self.config.skip_connections else d2
        d1 = self.dec1.forward(d1_in, s1.shape[1:])

        y = self.head1.forward(d1)
        y = self.head2.forward(y)
        y = self._head_resize.forward(y, x0.shape[1:])
        logits = self.classifier.forward(y)
        logits = self._out_resize.forward(logits, (h, w))
        return logits[None] if had_batch else logits

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; returns the input gradient at the
        scaled frame extent (the pre-stem frame resize is not differentiated)."""
        dy = self._out_resize.backward(dlogits)
        dy = self.classifier.backward(dy)
        dy = self._head_resize.backward(dy)
        dy = self.head2.backward(dy)
        dd1 = self.head1.backward(dy)

        dd1_in = self.dec1.backward(dd1)
        if self.config.skip_connections:
            dd2, de1_skip = self._skip1.backward(dd1_in)
        else:
            dd2, de1_skip = dd1_in, 0
        dd2_in = self.dec2.backward(dd2)
        if self.config.skip_connections:
            dd3, de2_skip = self._skip2.backward(dd2_in)
        else:
            dd3, de2_skip = dd2_in, 0
        de3 = self.dec3.backward(dd3)

        de2 = self.enc3.backward(de3) + de2_skip
        de1 = self.enc2.backward(de2) + de1_skip
        ds2 = self.enc1.backward(de1)
        ds1 = self.stem2.backward(ds2)
        return self.stem1.backward(ds1)


def build_network(config: ArchConfig, seed: int = 0, dtype=np.float32) -> JITNet:
    return JITNet(config, seed=seed, dtype=dtype)


def count_params(net: JITNet) -> int:
    return sum(p.value.size for _, p in net.params())


def count_params_by_stage(net: JITNet) -> dict[str, int]:
    totals: dict[str, int] = {}
    for name, p in net.params():
        stage = name.split(".", 1)[0]
        totals[stage] = totals.get(stage, 0) + p.value.size
    return totals


def count_params_from_config(config: ArchConfig) -> int:
    """Parameter count derived from the configuration alone (no allocation)."""
    s1 = config.scaled(config.stem_channels[0])
    s2 = config.scaled(config.stem_channels[1])
    e1, e2, e3 = (config.scaled(c) for c in config.encoder_channels)
    d3, d2, d1 = (config.scaled(c) for c in config.decoder_channels)
    h1, h2 = (config.scaled(c) for c in config.head_channels)
    skip = config.skip_connections

    def block(cin: int, p: int) -> int:
        return (2 * cin                      # input norm
                + cin * p + p                # shortcut 1x1
                + 9 * cin * p + p            # residual 3x3
                + 3 * p * p + p              # 1x3
                + 3 * p * p + p)             # 3x1

    total = 9 * 3 * s1 + 2 * s1 + 9 * s1 * s2 + 2 * s2
    total += block(s2, e1) + block(2 * e1, e2) + block(2 * e2, e3)
    total += block(2 * e3, d3)
    total += block(2 * d3 + (2 * e2 if skip else 0), d2)
    total += block(2 * d2 + (2 * e1 if skip else 0), d1)
    total += 9 * 2 * d1 * h1 + 2 * h1 + 9 * h1 * h2 + 2 * h2
    total += h2 * config.num_classes + config.num_classes
    return total


# -- analytic cost model ----------------------------------------------------
#
# FLOP conventions: one multiply-add counts as 2 FLOPs.  Totals cover the
# convolution kernels (2*kh*kw*Cin*Cout per output element) plus one FLOP
# per biased output element.  Normalization, activation, interpolation and
# concatenation are excluded, as is conventional for conv-net cost ledgers
# (they are O(channels * pixels) and contribute under 3% here).  A training
# step is forward + backward (2x forward per layer) + 2 FLOPs per parameter
# for the momentum update.


def _conv_flops(cin: int, cout: int, k: tuple[int, int], hw: tuple[int, int],
                bias: bool) -> int:
    kh, kw = k
    out_elems = cout * hw[0] * hw[1]
    return 2 * kh * kw * cin * out_elems + (out_elems if bias else 0)


def _conv_out_hw(hw: tuple[int, int], k: int, stride: int) -> tuple[int, int]:
    pad = k // 2
    return ((hw[0] + 2 * pad - k) // stride + 1,
            (hw[1] + 2 * pad - k) // stride + 1)


def estimate_flops(config: ArchConfig, input_hw: tuple[int, int],
                   mode: str = "inference") -> int:
    """Analytic FLOP total of one forward pass (or one training step) at the
    given frame extent, mirroring the execution path of :class:`JITNet`."""
    if mode not in ("inference", "train_step"):
        raise ValueError(f"unknown mode {mode!r}")
    h, w = input_hw
    scale = config.input_scale
    hw0 = (max(1, round(h * scale)), max(1, round(w * scale))) if scale != 1.0 else (h, w)

    total = 0

    s1c = config.scaled(config.stem_channels[0])
    s2c = config.scaled(config.stem_channels[1])
    e1c, e2c, e3c = (config.scaled(c) for c in config.encoder_channels)
    d3c, d2c, d1c = (config.scaled(c) for c in config.decoder_channels)
    h1c, h2c = (config.scaled(c) for c in config.head_channels)
    skip = config.skip_connections

    hw_s1 = _conv_out_hw(hw0, 3, 2)
    total += _conv_flops(3, s1c, (3, 3), hw_s1, bias=False)
    hw_s2 = _conv_out_hw(hw_s1, 3, 2)
    total += _conv_flops(s1c, s2c, (3, 3), hw_s2, bias=False)

    def block(cin: int, path: int, stride: int, hw_in: tuple[int, int]) -> int:
        hw_conv = _conv_out_hw(hw_in, 3, stride)
        flops = _conv_flops(cin, path, (1, 1), hw_conv, bias=True)   # shortcut
        flops += _conv_flops(cin, path, (3, 3), hw_conv, bias=True)
        flops += _conv_flops(path, path, (1, 3), hw_conv, bias=True)
        flops += _conv_flops(path, path, (3, 1), hw_conv, bias=True)
        return flops

    hw_e1 = _conv_out_hw(hw_s2, 3, 2)
    total += block(s2c, e1c, 2, hw_s2)
    hw_e2 = _conv_out_hw(hw_e1, 3, 2)
    total += block(2 * e1c, e2c, 2, hw_e1)
    hw_e3 = _conv_out_hw(hw_e2, 3, 2)
    total += block(2 * e2c, e3c, 2, hw_e2)

    total += block(2 * e3c, d3c, 1, hw_e3)
    total += block(2 * d3c + (2 * e2c if skip else 0), d2c, 1, hw_e2)
    total += block(2 * d2c + (2 * e1c if skip else 0), d1c, 1, hw_e1)

    total += _conv_flops(2 * d1c, h1c, (3, 3), hw_s1, bias=False)
    total += _conv_flops(h1c, h2c, (3, 3), hw_s1, bias=False)
    total += _conv_flops(h2c, config.num_classes, (1, 1), hw0, bias=True)

    if mode == "train_step":
        total = 3 * total + 2 * count_params_from_config(config)
    return total


def end_to_end_gradient_check(seed: int = 0, eps: float = 1e-5,
                              sample_per_tensor: int = 4) -> float:
    """Finite-difference check of the whole network through the training
    loss, on a narrow 16x16 configuration in float64.  Probes a random
    subset of elements per parameter tensor."""
    from .nn.gradcheck import gradient_check
    from .nn.loss import weighted_softmax_cross_entropy

    config = ArchConfig(num_classes=2, width_multiplier=0.25)
    net = JITNet(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = rng.random((3, 16, 16))
    labels = rng.integers(0, 2, size=(16, 16))
    weights = rng.uniform(0.5, 2.0, size=(16, 16))

    class _TrainingHead:
        def params(self):
            return net.params()

        def forward(self, frame):
            res = weighted_softmax_cross_entropy(net.forward(frame), labels, weights)
            return np.array([res.loss])

        def backward(self, proj):
            res = weighted_softmax_cross_entropy(net.forward(x.copy()), labels, weights)
            return net.backward(res.grad * proj[0])

    return gradient_check(_TrainingHead(), x, eps=eps, rng=rng,
                          sample_per_tensor=sample_per_tensor)
