"""Receptive-field arithmetic for padding-free convolution stacks.

A stack of valid convolutions with square kernels k_l and strides s_l has an
accumulated receptive field K and stride S obeying the recursion

    K_l = K_{l-1} + (k_l - 1) * S_{l-1},    K_1 = k_1
    S_l = S_{l-1} * s_l,                    S_1 = s_1

subject to K_l <= min(H, W) for a concrete input.  Because nothing pads,
feature location (i, j) of the final map sees exactly the K x K input window
at offset (i*S, j*S) — the mapping is exact, not approximate.  The state is
input-size agnostic; the constraint is enforced where a concrete size
exists (`num_locations`, `map_location`).

`verify_by_sensitivity` is the independent check of that exactness: it
builds a real single-channel stack with all-positive weights and measures
which input pixels can influence a given output location, comparing the
measured footprint against the predicted window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from .tensor import ConvKernel, Tensor


class RfConstraintError(ValueError):
    """Receptive field exceeds the input extent, or a location is off-grid."""


@dataclass(frozen=True)
class PatchBox:
    """Integer rectangle in input-image pixel coordinates, top-left origin."""

    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.top < 0 or self.left < 0:
            raise ValueError(f"box origin must be non-negative: {self}")
        if self.height < 1 or self.width < 1:
            raise ValueError(f"box must be at least 1x1: {self}")

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    @property
    def area(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class RfState:
    """Accumulated receptive field and stride of a layer stack."""

    rf: int = 1
    stride: int = 1
    layer_log: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.rf < 1 or self.stride < 1:
            raise ValueError("rf and stride must be positive")

    @classmethod
    def identity(cls) -> "RfState":
        return cls()

    @classmethod
    def from_layers(cls, layers) -> "RfState":
        state = cls.identity()
        for k, s in layers:
            state = push_layer(state, k, s)
        return state


def push_layer(state: RfState, kernel: int, stride: int) -> RfState:
    """Accumulate one valid convolution layer onto the state."""
    if kernel < 1 or stride < 1:
        raise ValueError("kernel and stride must be >= 1")
    return RfState(
        rf=state.rf + (kernel - 1) * state.stride,
        stride=state.stride * stride,
        layer_log=state.layer_log + ((kernel, stride),),
    )


def num_locations(state: RfState, input_size: tuple[int, int]) -> tuple[int, int]:
    """Grid of high-level locations: floor((dim - K)/S) + 1 per axis."""
    h, w = input_size
    if state.rf > min(h, w):
        raise RfConstraintError(
            f"receptive field {state.rf} exceeds min input dimension {min(h, w)}"
        )
    return ((h - state.rf) // state.stride + 1, (w - state.rf) // state.stride + 1)


def map_location(state: RfState, loc: tuple[int, int], input_size: tuple[int, int]) -> PatchBox:
    """Map feature location (i, j) to its exact input patch."""
    rows, cols = num_locations(state, input_size)
    i, j = loc
    if not (0 <= i < rows and 0 <= j < cols):
        raise RfConstraintError(f"location {loc} outside {rows}x{cols} grid")
    return PatchBox(top=i * state.stride, left=j * state.stride, height=state.rf, width=state.rf)


# ---------------------------------------------------------------------------
# Sensitivity-trace verification


@dataclass(frozen=True)
class ProbeLayer:
    """One layer of a probe stack; pad > 0 deliberately breaks exactness."""

    kernel: int
    stride: int
    pad: int = 0


@dataclass
class SensitivityReport:
    """Truthy iff every probe agreed with the predicted mapping."""

    ok: bool
    reason: str = ""
    location: tuple[int, int] | None = None
    pixel: tuple[int, int] | None = None

    def __bool__(self) -> bool:
        return self.ok


def _coerce_layers(layers) -> list[ProbeLayer]:
    out = []
    for layer in layers:
        if isinstance(layer, ProbeLayer):
            out.append(layer)
        else:
            k, s = layer
            out.append(ProbeLayer(int(k), int(s)))
    return out


def _probe_kernels(layers: list[ProbeLayer]) -> list[ConvKernel]:
    # All-positive weights, scaled so activations stay O(1): every pixel in
    # the true footprint then has strictly positive influence.
    kernels = []
    for layer in layers:
        k = layer.kernel
        w = np.full((1, 1, k, k), 1.0 / (k * k), dtype=np.float64)
        kernels.append(ConvKernel(Tensor(w), stride=(layer.stride, layer.stride)))
    return kernels


def _probe_forward(x: Tensor, layers: list[ProbeLayer], kernels: list[ConvKernel]) -> Tensor:
    for layer, kernel in zip(layers, kernels):
        if layer.pad:
            x = tensor.pad2d(x, layer.pad)
        x = tensor.conv2d_valid(x, kernel)
    return x


def measure_footprint(layers, input_size: tuple[int, int], loc: tuple[int, int]) -> PatchBox:
    """Measured input footprint of one output location (sensitivity oracle).

    Runs the real stack with all-positive weights and returns the bounding
    box of input pixels with nonzero influence on output `loc`.
    """
    layers = _coerce_layers(layers)
    h, w = input_size
    x = Tensor(np.zeros((1, 1, h, w), dtype=np.float64), requires_grad=True)
    y = _probe_forward(x, layers, _probe_kernels(layers))
    seed = np.zeros_like(y.data)
    seed[0, 0, loc[0], loc[1]] = 1.0
    y.backward(seed)
    rows, cols = np.nonzero(x.grad[0, 0])
    if rows.size == 0:
        raise RfConstraintError(f"no input pixel influences output {loc}")
    top, left = int(rows.min()), int(cols.min())
    return PatchBox(
        top=top,
        left=left,
        height=int(rows.max()) - top + 1,
        width=int(cols.max()) - left + 1,
    )


def verify_by_sensitivity(
    layers,
    input_size: tuple[int, int],
    max_locations: int = 4,
    probes_per_side: int = 6,
    seed: int = 0,
) -> SensitivityReport:
    """Check that the predicted location-to-patch mapping is exact.

    For sampled output locations the measured sensitivity footprint must
    equal the predicted patch box, and direct forward perturbation probes
    must change the output for pixels inside the box and leave it unchanged
    for pixels outside.  Any disagreement yields a falsy report carrying the
    offending coordinate.
    """
    layers = _coerce_layers(layers)
    state = RfState.from_layers((l.kernel, l.stride) for l in layers)
    h, w = input_size
    try:
        rows, cols = num_locations(state, input_size)
    except RfConstraintError as err:
        return SensitivityReport(ok=False, reason=str(err))

    kernels = _probe_kernels(layers)
    x = Tensor(np.zeros((1, 1, h, w), dtype=np.float64), requires_grad=True)
    y = _probe_forward(x, layers, kernels)
    gh, gw = y.data.shape[2], y.data.shape[3]
    if (gh, gw) != (rows, cols):
        return SensitivityReport(
            ok=False,
            reason=f"output grid {gh}x{gw} differs from predicted {rows}x{cols}",
        )

    rng = np.random.default_rng(seed)
    candidates = [(0, 0), (rows - 1, cols - 1), (rows // 2, cols // 2), (0, cols - 1)]
    locations = []
    for loc in candidates:
        if loc not in locations:
            locations.append(loc)
    while len(locations) < max_locations and len(locations) < rows * cols:
        loc = (int(rng.integers(rows)), int(rng.integers(cols)))
        if loc not in locations:
            locations.append(loc)

    base = Tensor(np.zeros((1, 1, h, w), dtype=np.float64))
    with tensor.no_grad():
        y_base = _probe_forward(base, layers, kernels).data

    for loc in locations[:max_locations]:
        box = map_location(state, loc, input_size)

        # Tape-based footprint: exact support of the output's dependence.
        xg = Tensor(np.zeros((1, 1, h, w), dtype=np.float64), requires_grad=True)
        yg = _probe_forward(xg, layers, kernels)
        seed_grad = np.zeros_like(yg.data)
        seed_grad[0, 0, loc[0], loc[1]] = 1.0
        yg.backward(seed_grad)
        influence = xg.grad[0, 0] != 0.0

        predicted = np.zeros((h, w), dtype=bool)
        predicted[box.top : box.bottom, box.left : box.right] = True
        if not np.array_equal(influence, predicted):
            bad = np.argwhere(influence != predicted)[0]
            return SensitivityReport(
                ok=False,
                reason="measured footprint disagrees with predicted patch",
                location=loc,
                pixel=(int(bad[0]), int(bad[1])),
            )

        # Forward perturbation probes, independent of the gradient tape.
        inside = [
            (int(rng.integers(box.top, box.bottom)), int(rng.integers(box.left, box.right)))
            for _ in range(probes_per_side)
        ]
        outside = []
        attempts = 0
        while len(outside) < probes_per_side and attempts < 100:
            attempts += 1
            p = (int(rng.integers(h)), int(rng.integers(w)))
            if not (box.top <= p[0] < box.bottom and box.left <= p[1] < box.right):
                outside.append(p)
        for p, must_change in [(q, True) for q in inside] + [(q, False) for q in outside]:
            probe = np.zeros((1, 1, h, w), dtype=np.float64)
            probe[0, 0, p[0], p[1]] = 1.0
            with tensor.no_grad():
                y_probe = _probe_forward(Tensor(probe), layers, kernels).data
            changed = y_probe[0, 0, loc[0], loc[1]] != y_base[0, 0, loc[0], loc[1]]
            if changed != must_change:
                return SensitivityReport(
                    ok=False,
                    reason="perturbation probe disagrees with predicted patch",
                    location=loc,
                    pixel=p,
                )

    return SensitivityReport(ok=True)
