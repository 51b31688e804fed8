"""Sequential early-exit inference and the dynamic-inference protocols.

A sample becomes a short sequence of proposal-sized images: first the
bilinear resize of the whole input, then the CAM-selected patches in
selection order.  Stage scores accumulate raw softmax outputs

    p_t = f(x_1) + f(x_2) + ... + f(x_t)

without renormalization, so the accumulated vector at stage t sums to t and
a stage-t threshold lives in (0, t].  Inference exits at the first stage
t < T whose max accumulated score strictly exceeds rho_t; otherwise the
final stage's argmax is returned.

FLOPs accounting mirrors what actually runs: every sample pays resize plus
the stage-1 classifier; the proposal network is charged once, at the first
stage that needs a patch, so stage-1 exits never pay for it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from . import tensor
from .patches import Cam, SelectionConfig, extract_patch, select_patches
from .rf import PatchBox
from .tensor import Tensor


@dataclass(frozen=True)
class SequenceItem:
    kind: str  # "resized" | "patch"
    image: np.ndarray  # (C, side, side) float32
    box: PatchBox | None = None
    activation: float | None = None


@dataclass
class InputSequence:
    """Item 1 is always the resized full image; the rest are patches."""

    items: list[SequenceItem]
    cam_class: int | None = None

    def __post_init__(self):
        if not self.items:
            raise ValueError("sequence must contain at least the resized image")
        if self.items[0].kind != "resized":
            raise ValueError("item 1 must be the resized full image")

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class ThresholdSchedule:
    values: tuple[float, ...]

    def __post_init__(self):
        if any(not np.isfinite(v) for v in self.values):
            raise ValueError("thresholds must be finite")

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, i: int) -> float:
        return self.values[i]


def unreachable_thresholds(t_max: int) -> ThresholdSchedule:
    """rho_t = t: the accumulated max can never strictly exceed it."""
    return ThresholdSchedule(tuple(float(t) for t in range(1, t_max)))


@dataclass
class InferenceTrace:
    exit_stage: int
    predicted_class: int
    stage_scores: list[np.ndarray]
    stage_confidences: list[float]
    flops_spent: int


@dataclass(frozen=True)
class PipelineCosts:
    """Per-component forward FLOPs used by the accounting."""

    resize: int
    global_net: int
    local_net: int
    anchornet: int

    @classmethod
    def from_models(cls, anchornet, f_global, f_local, input_size=(224, 224)) -> "PipelineCosts":
        side = anchornet.rf_state.rf
        return cls(
            resize=model_mod.resize_flops(anchornet.spec.in_channels, (side, side)),
            global_net=model_mod.count_flops(f_global, side).total,
            local_net=model_mod.count_flops(f_local, side).total,
            anchornet=model_mod.count_flops(anchornet, input_size).total,
        )


def trace_flops(exit_stage: int, costs: PipelineCosts) -> int:
    flops = costs.resize + costs.global_net + (exit_stage - 1) * costs.local_net
    if exit_stage >= 2:
        flops += costs.anchornet
    return flops


def _crosses(confidence: float, threshold: float) -> bool:
    # The single exit predicate shared by every inference path.
    return confidence > threshold


# ---------------------------------------------------------------------------
# Sequence construction


def make_sequence(image, anchornet, cfg: SelectionConfig) -> InputSequence:
    """Resize plus CAM-guided patches, in selection order.

    The CAM class is the argmax of the proposal network's own prediction
    for the image (ground truth is unavailable at inference).
    """
    img = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
    if img.data.ndim == 3:
        img = Tensor(img.data[None])
    side = anchornet.rf_state.rf
    with tensor.no_grad():
        resized = tensor.resize_bilinear(img, (side, side)).data[0]
        feats = anchornet.forward_features(img, train=False)
        logits = tensor.linear(tensor.gap(feats), anchornet.classifier)
        pred = int(np.argmax(tensor.softmax(logits.data, axis=1)[0]))
    cam = model_mod.cam(feats, anchornet.classifier, pred)
    input_size = (img.data.shape[2], img.data.shape[3])
    selected = select_patches(cam, anchornet.rf_state, input_size, cfg)
    items = [SequenceItem("resized", resized.astype(np.float32, copy=False))]
    for box, activation in selected:
        patch = extract_patch(img, box).data[0]
        items.append(
            SequenceItem("patch", patch.astype(np.float32, copy=False), box, activation)
        )
    return InputSequence(items=items, cam_class=pred)


# ---------------------------------------------------------------------------
# Single-sample sequential inference


def run_sequence(f_global, f_local, seq: InputSequence, thresholds, costs: PipelineCosts | None = None) -> InferenceTrace:
    """Early-exit pass over a sequence; stages after the exit never run."""
    t_max = len(seq)
    values = thresholds.values if isinstance(thresholds, ThresholdSchedule) else tuple(thresholds)
    if len(values) < t_max - 1:
        raise ValueError(f"need {t_max - 1} thresholds for a {t_max}-item sequence, got {len(values)}")

    scores: list[np.ndarray] = []
    confidences: list[float] = []
    accumulated = None
    exit_stage = t_max
    flops = 0
    for t in range(1, t_max + 1):
        item = seq.items[t - 1]
        net = f_global if t == 1 else f_local
        probs = np.asarray(net.classify(item.image), dtype=np.float64)
        accumulated = probs if accumulated is None else accumulated + probs
        scores.append(accumulated.copy())
        confidences.append(float(accumulated.max()))
        if costs is not None:
            if t == 1:
                flops += costs.resize + costs.global_net
            else:
                flops += costs.local_net + (costs.anchornet if t == 2 else 0)
        if t < t_max and _crosses(confidences[-1], values[t - 1]):
            exit_stage = t
            break
    return InferenceTrace(
        exit_stage=exit_stage,
        predicted_class=int(np.argmax(scores[exit_stage - 1])),
        stage_scores=scores,
        stage_confidences=confidences,
        flops_spent=flops,
    )


# ---------------------------------------------------------------------------
# Batched trace collection (evaluation and tuning reuse one forward sweep)


@dataclass
class SampleTrace:
    """All-stage record of one sample: run once, replay any schedule."""

    label: int
    stage_scores: np.ndarray  # (seq_len, N) accumulated
    seq_len: int
    cam_class: int
    top_box: PatchBox | None


def propose_patches(anchornet, images: np.ndarray, cfg: SelectionConfig):
    """Batched proposal: per image, the CAM argmax class and its selections.

    Returns (cam_classes, selections) where selections[i] is the ordered
    (PatchBox, activation) list for image i.
    """
    with tensor.no_grad():
        feats = anchornet.forward_features(Tensor(images), train=False)
        logits = tensor.linear(tensor.gap(feats), anchornet.classifier)
        cam_classes = np.argmax(tensor.softmax(logits.data, axis=1), axis=1)
    input_size = (images.shape[2], images.shape[3])
    selections = []
    for bi in range(images.shape[0]):
        cam = Cam(
            values=np.tensordot(
                anchornet.classifier.weights.data[int(cam_classes[bi])],
                feats.data[bi],
                axes=1,
            ),
            class_id=int(cam_classes[bi]),
        )
        selections.append(select_patches(cam, anchornet.rf_state, input_size, cfg))
    return cam_classes, selections


def collect_traces(
    dataset,
    anchornet,
    f_global,
    f_local,
    cfg: SelectionConfig,
    batch_size: int = 32,
) -> list[SampleTrace]:
    """Run every sample through all stages once, batching network passes."""
    n = len(dataset)
    side = anchornet.rf_state.rf
    traces: list[SampleTrace] = []
    for start in range(0, n, batch_size):
        idx = range(start, min(start + batch_size, n))
        images = dataset.batch_float(list(idx))
        labels = [int(dataset.labels[i]) for i in idx]
        with tensor.no_grad():
            resized = tensor.resize_bilinear(Tensor(images), (side, side)).data
            p_global = tensor.softmax(f_global.logits(Tensor(resized)).data, axis=1)
        cam_classes, selections = propose_patches(anchornet, images, cfg)

        batch_patches = []
        for bi in range(images.shape[0]):
            for box, _ in selections[bi]:
                batch_patches.append(
                    images[bi, :, box.top : box.bottom, box.left : box.right]
                )
        if batch_patches:
            stacked = np.stack(batch_patches)
            with tensor.no_grad():
                p_local = tensor.softmax(f_local.logits(Tensor(stacked)).data, axis=1)
        else:
            p_local = np.zeros((0, p_global.shape[1]))

        cursor = 0
        for bi in range(images.shape[0]):
            per_stage = [p_global[bi]]
            for _ in selections[bi]:
                per_stage.append(p_local[cursor])
                cursor += 1
            acc = np.cumsum(np.stack(per_stage), axis=0)
            traces.append(
                SampleTrace(
                    label=labels[bi],
                    stage_scores=acc,
                    seq_len=len(per_stage),
                    cam_class=int(cam_classes[bi]),
                    top_box=selections[bi][0][0] if selections[bi] else None,
                )
            )
    return traces


def simulate_exit(trace: SampleTrace, thresholds) -> int:
    """Exit stage a threshold schedule produces for a collected trace."""
    values = thresholds.values if isinstance(thresholds, ThresholdSchedule) else tuple(thresholds)
    for t in range(1, trace.seq_len):
        if _crosses(float(trace.stage_scores[t - 1].max()), values[t - 1]):
            return t
    return trace.seq_len


@dataclass
class EvalResult:
    accuracy: float
    mean_flops: float
    exit_counts: tuple[int, ...]


def anytime_eval(traces: list[SampleTrace], costs: PipelineCosts, stage: int) -> EvalResult:
    """Force every sample to exit at `stage` and report accuracy and cost."""
    if stage < 1:
        raise ValueError("stage must be >= 1")
    t_max = max(tr.seq_len for tr in traces)
    correct = 0
    total_flops = 0
    counts = [0] * t_max
    for tr in traces:
        t = min(stage, tr.seq_len)
        pred = int(np.argmax(tr.stage_scores[t - 1]))
        correct += pred == tr.label
        total_flops += trace_flops(t, costs)
        counts[t - 1] += 1
    n = len(traces)
    return EvalResult(correct / n, total_flops / n, tuple(counts))


def budgeted_eval(traces: list[SampleTrace], costs: PipelineCosts, thresholds) -> EvalResult:
    """Adaptive exits under a threshold schedule; reports the exit histogram."""
    t_max = max(tr.seq_len for tr in traces)
    correct = 0
    total_flops = 0
    counts = [0] * t_max
    for tr in traces:
        t = simulate_exit(tr, thresholds)
        pred = int(np.argmax(tr.stage_scores[t - 1]))
        correct += pred == tr.label
        total_flops += trace_flops(t, costs)
        counts[t - 1] += 1
    n = len(traces)
    return EvalResult(correct / n, total_flops / n, tuple(counts))


# ---------------------------------------------------------------------------
# Threshold tuning for a compute budget


class InfeasibleBudgetError(ValueError):
    """Requested budget lies outside [stage-1 cost, full-pipeline cost]."""


def thresholds_for_exit_rate(traces: list[SampleTrace], q: float) -> ThresholdSchedule:
    """Quantile schedule: at each stage, roughly a fraction q of the samples
    still alive exits (their accumulated confidence exceeds the threshold)."""
    t_max = max(tr.seq_len for tr in traces)
    alive = list(traces)
    values = []
    for t in range(1, t_max):
        confs = np.array(
            [float(tr.stage_scores[t - 1].max()) for tr in alive if tr.seq_len > t]
        )
        if confs.size == 0:
            values.append(float(t))  # unreachable: nothing left to split
            continue
        rho = float(np.quantile(confs, 1.0 - q))
        values.append(rho)
        alive = [
            tr
            for tr in alive
            if tr.seq_len > t and not _crosses(float(tr.stage_scores[t - 1].max()), rho)
        ]
    return ThresholdSchedule(tuple(values))


def tune_thresholds(
    traces: list[SampleTrace],
    costs: PipelineCosts,
    budget: float,
    tolerance: float = 0.02,
    max_iterations: int = 40,
) -> ThresholdSchedule:
    """Bisect the exit-rate parameter until mean FLOPs meets the budget.

    Mean cost is monotone non-increasing in the exit rate q, so bisection
    either lands within `tolerance` of the budget or the interval collapses
    on the closest achievable schedule.  Budgets outside the feasible cost
    range raise InfeasibleBudgetError.
    """
    stage1_cost = float(trace_flops(1, costs))
    full_mean = float(np.mean([trace_flops(tr.seq_len, costs) for tr in traces]))
    if budget < stage1_cost or budget > full_mean:
        raise InfeasibleBudgetError(
            f"budget {budget:.3g} outside feasible range [{stage1_cost:.3g}, {full_mean:.3g}]"
        )

    def mean_cost(schedule):
        return float(
            np.mean([trace_flops(simulate_exit(tr, schedule), costs) for tr in traces])
        )

    best = None
    lo, hi = 0.0, 1.0
    for _ in range(max_iterations):
        q = 0.5 * (lo + hi)
        schedule = thresholds_for_exit_rate(traces, q)
        mean = mean_cost(schedule)
        diff = abs(mean - budget)
        if best is None or diff < best[0]:
            best = (diff, schedule)
        if diff <= tolerance * budget:
            return schedule
        if mean > budget:
            lo = q
        else:
            hi = q
        if hi - lo < 1e-12:
            break
    return best[1]
