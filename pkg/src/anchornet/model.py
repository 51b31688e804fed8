"""AnchorNet (patch-proposal CNN) and the small downstream classifier.

AnchorNet is a padding-free MBConv extractor with a 1x1 channel-expansion
head, global average pooling, and a bias-free linear softmax classifier.
Because no layer pads, the accumulated receptive field / stride pair of the
default architecture is exactly (95, 8) and a 224x224 input yields a 17x17
grid of feature locations, each mapping to one 95x95 input patch.

Squeeze-and-excitation is deliberately omitted from MBConv: it aggregates
global context, which would break the exact location-to-patch mapping the
whole design rests on.

The downstream classifier is an ordinary padded CNN (padding built from
explicit `pad2d`); it consumes the 95x95 crops and needs no spatial
interpretability, so any classifier honoring that input contract plugs in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rf, tensor
from .patches import Cam
from .rf import ProbeLayer, RfConstraintError, RfState
from .tensor import BatchNormParams, ConvKernel, LinearLayer, Tensor
from .util import named_rng


@dataclass(frozen=True)
class StageSpec:
    """One extractor stage: a plain conv or an MBConv block."""

    op: str  # "conv" | "mbconv"
    out_channels: int
    stride: int = 1
    kernel: int = 3
    expansion: float | None = None

    def __post_init__(self):
        if self.op not in ("conv", "mbconv"):
            raise ValueError(f"unknown stage op {self.op!r}")
        if self.op == "mbconv" and self.expansion is None:
            raise ValueError("mbconv stage requires an expansion ratio")


@dataclass(frozen=True)
class ArchSpec:
    """Extractor stages plus head width and class count."""

    stages: tuple[StageSpec, ...]
    head_channels: int = 320
    num_classes: int = 4
    in_channels: int = 3

    def rf_state(self) -> RfState:
        state = RfState.identity()
        for stage in self.stages:
            if stage.op == "mbconv":
                state = rf.push_layer(state, 1, 1)
                state = rf.push_layer(state, stage.kernel, stage.stride)
                state = rf.push_layer(state, 1, 1)
            else:
                state = rf.push_layer(state, stage.kernel, stage.stride)
        return state

    def probe_layers(self) -> list[ProbeLayer]:
        """Spatial conv skeleton for sensitivity verification."""
        layers: list[ProbeLayer] = []
        for stage in self.stages:
            if stage.op == "mbconv":
                layers.append(ProbeLayer(1, 1))
                layers.append(ProbeLayer(stage.kernel, stage.stride))
                layers.append(ProbeLayer(1, 1))
            else:
                layers.append(ProbeLayer(stage.kernel, stage.stride))
        layers.append(ProbeLayer(1, 1))  # head expansion
        return layers

    def canonical_text(self) -> str:
        lines = ["anchornet-arch v1", f"in_channels {self.in_channels}"]
        for stage in self.stages:
            if stage.op == "conv":
                lines.append(f"conv k{stage.kernel} s{stage.stride} out{stage.out_channels}")
            else:
                lines.append(
                    f"mbconv k{stage.kernel} s{stage.stride} "
                    f"exp{_fmt_ratio(stage.expansion)} out{stage.out_channels}"
                )
        lines.append(f"head {self.head_channels}")
        lines.append(f"classes {self.num_classes}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ArchSpec":
        lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
        if not lines or lines[0] != "anchornet-arch v1":
            raise ValueError("not an anchornet-arch v1 spec")
        stages: list[StageSpec] = []
        head, classes, in_ch = 320, 4, 3
        for line in lines[1:]:
            parts = line.split()
            if parts[0] == "in_channels":
                in_ch = int(parts[1])
            elif parts[0] == "conv":
                kv = _parse_kv(parts[1:])
                stages.append(StageSpec("conv", int(kv["out"]), int(kv["s"]), int(kv["k"])))
            elif parts[0] == "mbconv":
                kv = _parse_kv(parts[1:])
                stages.append(
                    StageSpec("mbconv", int(kv["out"]), int(kv["s"]), int(kv["k"]), float(kv["exp"]))
                )
            elif parts[0] == "head":
                head = int(parts[1])
            elif parts[0] == "classes":
                classes = int(parts[1])
            else:
                raise ValueError(f"unknown arch line: {line!r}")
        return cls(tuple(stages), head_channels=head, num_classes=classes, in_channels=in_ch)


def _fmt_ratio(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def _parse_kv(parts) -> dict:
    kv = {}
    for p in parts:
        i = 0
        while i < len(p) and p[i].isalpha():
            i += 1
        kv[p[:i]] = p[i:]
    return kv


def default_anchornet_spec(num_classes: int = 4, head_channels: int = 320) -> ArchSpec:
    """The standard eight-stage extractor (RF 95, stride 8 on any input)."""
    rows = [
        ("conv", 16, 2, None),
        ("mbconv", 16, 2, 1.0),
        ("mbconv", 24, 2, 3.0),
        ("mbconv", 24, 1, 4.0),
        ("mbconv", 48, 1, 4.0),
        ("mbconv", 96, 1, 2.0),
        ("mbconv", 96, 1, 1.5),
        ("mbconv", 96, 1, 1.5),
    ]
    stages = tuple(
        StageSpec(op, out, stride, 3, exp) for op, out, stride, exp in rows
    )
    return ArchSpec(stages, head_channels=head_channels, num_classes=num_classes)


def expanded_width(in_channels: int, expansion: float) -> int:
    """Round-to-nearest expanded channel count, at least 1."""
    return max(1, int(math.floor(in_channels * expansion + 0.5)))


# ---------------------------------------------------------------------------
# Layer building blocks


class _Conv:
    def __init__(self, name, in_ch, out_ch, kernel, stride, groups, rng, dtype):
        fan_in = (in_ch // groups) * kernel * kernel
        std = math.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=(out_ch, in_ch // groups, kernel, kernel))
        self.name = name
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel_size, self.stride, self.groups = kernel, stride, groups
        self.kernel = ConvKernel(
            Tensor(w.astype(dtype), requires_grad=True, name=f"{name}.weight"),
            stride=(stride, stride),
            groups=groups,
        )

    def __call__(self, x):
        return tensor.conv2d_valid(x, self.kernel)

    def params(self):
        return [(f"{self.name}.weight", self.kernel.weights, True)]


class _Bn:
    def __init__(self, name, channels, dtype, start_initialized=True):
        self.name = name
        self.bn = BatchNormParams.create(channels, dtype=dtype)
        # Models are usable for shape-level inference before any training:
        # identity statistics count as populated.
        self.bn.initialized = start_initialized
        self.bn.gamma.name = f"{name}.gamma"
        self.bn.beta.name = f"{name}.beta"

    def __call__(self, x, train):
        return tensor.batchnorm(x, self.bn, train)

    def params(self):
        return [(f"{self.name}.gamma", self.bn.gamma, False), (f"{self.name}.beta", self.bn.beta, False)]


class _MbConv:
    """expand 1x1 -> bn -> silu -> depthwise kxk -> bn -> silu -> project 1x1 -> bn.

    Stride-1 blocks with equal in/out channels add a residual shortcut: the
    depthwise conv shrinks each side by (k-1)/2, so the shortcut is the
    center crop of the block input, keeping locations aligned.
    """

    def __init__(self, name, in_ch, spec: StageSpec, rng, dtype):
        e = expanded_width(in_ch, spec.expansion)
        self.name = name
        self.in_ch, self.out_ch = in_ch, spec.out_channels
        self.stride, self.kernel_size = spec.stride, spec.kernel
        self.expanded = e
        self.expand = _Conv(f"{name}.expand", in_ch, e, 1, 1, 1, rng, dtype)
        self.bn1 = _Bn(f"{name}.expand_bn", e, dtype)
        self.depthwise = _Conv(f"{name}.depthwise", e, e, spec.kernel, spec.stride, e, rng, dtype)
        self.bn2 = _Bn(f"{name}.depthwise_bn", e, dtype)
        self.project = _Conv(f"{name}.project", e, spec.out_channels, 1, 1, 1, rng, dtype)
        self.bn3 = _Bn(f"{name}.project_bn", spec.out_channels, dtype)
        self.residual = spec.stride == 1 and in_ch == spec.out_channels and spec.kernel % 2 == 1

    def __call__(self, x, train):
        y = tensor.silu(self.bn1(self.expand(x), train))
        y = tensor.silu(self.bn2(self.depthwise(y), train))
        y = self.bn3(self.project(y), train)
        if self.residual:
            y = tensor.add(y, tensor.center_crop(x, (self.kernel_size - 1) // 2))
        return y

    def params(self):
        out = []
        for unit in (self.expand, self.bn1, self.depthwise, self.bn2, self.project, self.bn3):
            out.extend(unit.params())
        return out


def _as_batched(image) -> Tensor:
    if isinstance(image, Tensor):
        return image if image.data.ndim == 4 else Tensor(image.data[None])
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(arr)


# ---------------------------------------------------------------------------
# AnchorNet


class AnchorNetModel:
    """Padding-free extractor + 1x1 head + GAP + bias-free linear classifier."""

    def __init__(self, spec: ArchSpec, seed: int, dtype=np.float32):
        self.spec = spec
        self.seed = seed
        self.dtype = dtype
        self.trained = False
        rng = named_rng(seed, "anchornet-init")

        self.stages: list = []
        in_ch = spec.in_channels
        for idx, stage in enumerate(spec.stages, start=1):
            name = f"stage{idx}"
            if stage.op == "conv":
                unit = {
                    "conv": _Conv(name + ".conv", in_ch, stage.out_channels, stage.kernel, stage.stride, 1, rng, dtype),
                    "bn": _Bn(name + ".bn", stage.out_channels, dtype),
                }
                self.stages.append(("conv", unit))
            else:
                self.stages.append(("mbconv", _MbConv(name, in_ch, stage, rng, dtype)))
            in_ch = stage.out_channels

        self.head_conv = _Conv("head.conv", in_ch, spec.head_channels, 1, 1, 1, rng, dtype)
        self.head_bn = _Bn("head.bn", spec.head_channels, dtype)
        cw = rng.normal(0.0, 0.01, size=(spec.num_classes, spec.head_channels))
        self.classifier = LinearLayer(
            Tensor(cw.astype(dtype), requires_grad=True, name="classifier.weight"), bias=None
        )
        self.rf_state = spec.rf_state()

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def forward_features(self, image, train: bool = False) -> Tensor:
        """Full spatial chain up to (but excluding) GAP: (B, C_head, H', W')."""
        x = _as_batched(image)
        h, w = x.shape[2], x.shape[3]
        if min(h, w) < self.rf_state.rf:
            raise RfConstraintError(
                f"input {h}x{w} smaller than receptive field {self.rf_state.rf}"
            )
        for kind, unit in self.stages:
            if kind == "conv":
                x = tensor.silu(unit["bn"](unit["conv"](x), train))
            else:
                x = unit(x, train)
        x = tensor.silu(self.head_bn(self.head_conv(x), train))
        return x

    def logits(self, image, train: bool = False) -> Tensor:
        feats = self.forward_features(image, train)
        return tensor.linear(tensor.gap(feats), self.classifier)

    def classify(self, image) -> np.ndarray:
        """Softmax class probabilities; (N,) for a single image, else (B, N)."""
        single = not (isinstance(image, Tensor) and image.data.ndim == 4) and np.asarray(
            image.data if isinstance(image, Tensor) else image
        ).ndim == 3
        with tensor.no_grad():
            probs = tensor.softmax(self.logits(image).data, axis=1)
        return probs[0] if single else probs

    def cam(self, features, class_id: int) -> Cam:
        """Class activation map: classifier-weighted channel sum of `features`."""
        return cam(features, self.classifier, class_id)

    def parameters(self):
        out = []
        for kind, unit in self.stages:
            if kind == "conv":
                out.extend(unit["conv"].params())
                out.extend(unit["bn"].params())
            else:
                out.extend(unit.params())
        out.extend(self.head_conv.params())
        out.extend(self.head_bn.params())
        out.append(("classifier.weight", self.classifier.weights, True))
        return out

    def batchnorms(self):
        bns = []
        for kind, unit in self.stages:
            if kind == "conv":
                bns.append(unit["bn"])
            else:
                bns.extend([unit.bn1, unit.bn2, unit.bn3])
        bns.append(self.head_bn)
        return [(b.name, b.bn) for b in bns]

    # --- symbolic per-layer walk shared by the FLOPs counter ---

    def flop_rows(self, input_size) -> list["FlopRow"]:
        h, w = _size_pair(input_size)
        rows: list[FlopRow] = []
        c = self.spec.in_channels
        for idx, (kind, unit) in enumerate(self.stages, start=1):
            name = f"stage{idx}"
            if kind == "conv":
                conv = unit["conv"]
                h, w = _conv_out(h, w, conv.kernel_size, conv.stride)
                rows.append(_conv_row(f"{name}.conv", conv, h, w))
                rows.append(FlopRow(f"{name}.bn", "bn", (conv.out_ch, h, w), conv.out_ch * h * w))
                rows.append(FlopRow(f"{name}.silu", "silu", (conv.out_ch, h, w), conv.out_ch * h * w))
                c = conv.out_ch
            else:
                blk = unit
                e = blk.expanded
                rows.append(_conv_row(f"{name}.expand", blk.expand, h, w))
                rows.append(FlopRow(f"{name}.expand_bn", "bn", (e, h, w), e * h * w))
                rows.append(FlopRow(f"{name}.expand_silu", "silu", (e, h, w), e * h * w))
                ho, wo = _conv_out(h, w, blk.kernel_size, blk.stride)
                rows.append(_conv_row(f"{name}.depthwise", blk.depthwise, ho, wo))
                rows.append(FlopRow(f"{name}.depthwise_bn", "bn", (e, ho, wo), e * ho * wo))
                rows.append(FlopRow(f"{name}.depthwise_silu", "silu", (e, ho, wo), e * ho * wo))
                rows.append(_conv_row(f"{name}.project", blk.project, ho, wo))
                rows.append(FlopRow(f"{name}.project_bn", "bn", (blk.out_ch, ho, wo), blk.out_ch * ho * wo))
                if blk.residual:
                    rows.append(FlopRow(f"{name}.residual_add", "add", (blk.out_ch, ho, wo), blk.out_ch * ho * wo))
                h, w, c = ho, wo, blk.out_ch
        rows.append(_conv_row("head.conv", self.head_conv, h, w))
        ch = self.spec.head_channels
        rows.append(FlopRow("head.bn", "bn", (ch, h, w), ch * h * w))
        rows.append(FlopRow("head.silu", "silu", (ch, h, w), ch * h * w))
        rows.append(FlopRow("gap", "gap", (ch, 1, 1), ch * h * w))
        n = self.spec.num_classes
        rows.append(FlopRow("classifier", "linear", (n,), n * ch))
        rows.append(FlopRow("softmax", "softmax", (n,), n))
        return rows

    def stage_table(self, input_size=(224, 224)):
        """Per-stage (output resolution, accumulated rf, accumulated stride)."""
        h, w = _size_pair(input_size)
        state = RfState.identity()
        table = []
        for idx, stage in enumerate(self.spec.stages, start=1):
            if stage.op == "mbconv":
                state = rf.push_layer(state, 1, 1)
                state = rf.push_layer(state, stage.kernel, stage.stride)
                state = rf.push_layer(state, 1, 1)
            else:
                state = rf.push_layer(state, stage.kernel, stage.stride)
            h, w = _conv_out(h, w, stage.kernel, stage.stride)
            table.append(
                {
                    "stage": idx,
                    "op": stage.op,
                    "kernel": stage.kernel,
                    "expansion": stage.expansion,
                    "out_channels": stage.out_channels,
                    "stride": stage.stride,
                    "out_resolution": h,
                    "rf": state.rf,
                    "acc_stride": state.stride,
                }
            )
        return table


def build_anchornet(spec: ArchSpec, seed: int, dtype=np.float32) -> AnchorNetModel:
    """Deterministically initialized AnchorNet; validates the channel chain."""
    in_ch = spec.in_channels
    for stage in spec.stages:
        if stage.out_channels < 1 or stage.kernel < 1 or stage.stride < 1:
            raise ValueError(f"invalid stage: {stage}")
        in_ch = stage.out_channels
    return AnchorNetModel(spec, seed, dtype=dtype)


def cam(features, classifier: LinearLayer, class_id: int) -> Cam:
    """Weighted channel sum M_n = sum_c w[n, c] * F_c of pre-GAP features.

    With a bias-free classifier the class-n logit equals the spatial mean
    of this map, so each location's activation is that patch's exact
    contribution to the logit.
    """
    f = features.data if isinstance(features, Tensor) else np.asarray(features)
    if f.ndim == 4:
        if f.shape[0] != 1:
            raise tensor.ShapeError("cam expects a single image's features")
        f = f[0]
    if f.ndim != 3:
        raise tensor.ShapeError(f"cam expects (C, H', W') features, got {f.shape}")
    n = classifier.weights.shape[0]
    if not (0 <= class_id < n):
        raise IndexError(f"class {class_id} out of range for {n} classes")
    values = np.tensordot(classifier.weights.data[class_id], f, axes=1)
    return Cam(values=values, class_id=class_id)


# ---------------------------------------------------------------------------
# Downstream classifier


@dataclass(frozen=True)
class DownLayerSpec:
    out_channels: int
    stride: int = 1
    kernel: int = 3
    pad: int = 1


DEFAULT_DOWNSTREAM_LAYERS = (
    DownLayerSpec(16, 2),
    DownLayerSpec(16, 1),
    DownLayerSpec(32, 2),
    DownLayerSpec(32, 1),
    DownLayerSpec(64, 2),
    DownLayerSpec(64, 1),
)


class DownstreamModel:
    """Small padded CNN with GAP head, consuming the proposal-sized crops."""

    def __init__(self, num_classes: int, seed: int, variant: str = "global",
                 layers: tuple[DownLayerSpec, ...] = DEFAULT_DOWNSTREAM_LAYERS,
                 in_channels: int = 3, dtype=np.float32):
        if variant not in ("global", "local"):
            raise ValueError("variant must be 'global' or 'local'")
        self.num_classes = num_classes
        self.seed = seed
        self.variant = variant
        self.layer_specs = tuple(layers)
        self.in_channels = in_channels
        self.dtype = dtype
        self.trained = False
        rng = named_rng(seed, "downstream-init", variant)

        self.layers = []
        c = in_channels
        for idx, ls in enumerate(self.layer_specs, start=1):
            name = f"layer{idx}"
            conv = _Conv(name + ".conv", c, ls.out_channels, ls.kernel, ls.stride, 1, rng, dtype)
            bn = _Bn(name + ".bn", ls.out_channels, dtype)
            self.layers.append((ls, conv, bn))
            c = ls.out_channels
        fw = rng.normal(0.0, 0.01, size=(num_classes, c))
        self.fc = LinearLayer(
            Tensor(fw.astype(dtype), requires_grad=True, name="fc.weight"),
            bias=Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True, name="fc.bias"),
        )

    def logits(self, image, train: bool = False) -> Tensor:
        x = _as_batched(image)
        for ls, conv, bn in self.layers:
            if ls.pad:
                x = tensor.pad2d(x, ls.pad)
            x = tensor.silu(bn(conv(x), train))
        return tensor.linear(tensor.gap(x), self.fc)

    def classify(self, image) -> np.ndarray:
        single = not (isinstance(image, Tensor) and image.data.ndim == 4) and np.asarray(
            image.data if isinstance(image, Tensor) else image
        ).ndim == 3
        with tensor.no_grad():
            probs = tensor.softmax(self.logits(image).data, axis=1)
        return probs[0] if single else probs

    def parameters(self):
        out = []
        for _, conv, bn in self.layers:
            out.extend(conv.params())
            out.extend(bn.params())
        out.append(("fc.weight", self.fc.weights, True))
        out.append(("fc.bias", self.fc.bias, False))
        return out

    def batchnorms(self):
        return [(bn.name, bn.bn) for _, _, bn in self.layers]

    def arch_text(self) -> str:
        lines = ["downstream-arch v1", f"in_channels {self.in_channels}"]
        for ls in self.layer_specs:
            lines.append(f"layer k{ls.kernel} s{ls.stride} p{ls.pad} out{ls.out_channels}")
        lines.append(f"classes {self.num_classes}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def layers_from_text(text: str) -> tuple[tuple[DownLayerSpec, ...], int, int]:
        lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
        if not lines or lines[0] != "downstream-arch v1":
            raise ValueError("not a downstream-arch v1 spec")
        layers: list[DownLayerSpec] = []
        classes, in_ch = 4, 3
        for line in lines[1:]:
            parts = line.split()
            if parts[0] == "in_channels":
                in_ch = int(parts[1])
            elif parts[0] == "layer":
                kv = _parse_kv(parts[1:])
                layers.append(DownLayerSpec(int(kv["out"]), int(kv["s"]), int(kv["k"]), int(kv["p"])))
            elif parts[0] == "classes":
                classes = int(parts[1])
            else:
                raise ValueError(f"unknown arch line: {line!r}")
        return tuple(layers), classes, in_ch

    def flop_rows(self, input_size) -> list["FlopRow"]:
        h, w = _size_pair(input_size)
        rows: list[FlopRow] = []
        for idx, (ls, conv, _) in enumerate(self.layers, start=1):
            name = f"layer{idx}"
            h, w = h + 2 * ls.pad, w + 2 * ls.pad
            h, w = _conv_out(h, w, ls.kernel, ls.stride)
            rows.append(_conv_row(f"{name}.conv", conv, h, w))
            rows.append(FlopRow(f"{name}.bn", "bn", (ls.out_channels, h, w), ls.out_channels * h * w))
            rows.append(FlopRow(f"{name}.silu", "silu", (ls.out_channels, h, w), ls.out_channels * h * w))
        c = self.layer_specs[-1].out_channels
        rows.append(FlopRow("gap", "gap", (c, 1, 1), c * h * w))
        n = self.num_classes
        rows.append(FlopRow("fc", "linear", (n,), n * c + n))
        rows.append(FlopRow("softmax", "softmax", (n,), n))
        return rows


def build_downstream(num_classes: int, seed: int, variant: str = "global",
                     layers: tuple[DownLayerSpec, ...] = DEFAULT_DOWNSTREAM_LAYERS,
                     dtype=np.float32) -> DownstreamModel:
    return DownstreamModel(num_classes, seed, variant=variant, layers=layers, dtype=dtype)


# ---------------------------------------------------------------------------
# FLOPs accounting


@dataclass(frozen=True)
class FlopRow:
    name: str
    kind: str
    out_shape: tuple
    flops: int


@dataclass(frozen=True)
class FlopCount:
    total: int
    rows: tuple[FlopRow, ...]

    def by_name(self, name: str) -> int:
        for row in self.rows:
            if row.name == name:
                return row.flops
        raise KeyError(name)


def count_flops(model, input_size) -> FlopCount:
    """Deterministic forward-pass cost under the 1-FLOP-per-MAC convention.

    Convolutions cost out_positions * out_channels * (in_channels_per_group
    * k^2) multiply-accumulates; linear costs N*C (+N with bias); pointwise
    ops (batchnorm, silu, residual add, softmax) cost one per output
    element; GAP costs one per input element.  Explicit zero-padding moves
    data and costs nothing.
    """
    rows = tuple(model.flop_rows(input_size))
    return FlopCount(total=sum(r.flops for r in rows), rows=rows)


def resize_flops(in_channels: int, target: tuple[int, int]) -> int:
    """Resize charged as one FLOP per output pixel per channel."""
    return in_channels * target[0] * target[1]


def _size_pair(input_size) -> tuple[int, int]:
    if isinstance(input_size, int):
        return input_size, input_size
    h, w = input_size
    return int(h), int(w)


def _conv_out(h: int, w: int, kernel: int, stride: int) -> tuple[int, int]:
    if kernel > h or kernel > w:
        raise RfConstraintError(f"kernel {kernel} larger than input {h}x{w}")
    return (h - kernel) // stride + 1, (w - kernel) // stride + 1


def _conv_row(name: str, conv: _Conv, ho: int, wo: int) -> FlopRow:
    macs_per_pos = (conv.in_ch // conv.groups) * conv.kernel_size * conv.kernel_size
    return FlopRow(name, "conv", (conv.out_ch, ho, wo), ho * wo * conv.out_ch * macs_per_pos)
