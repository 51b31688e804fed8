"""Two-stage training: the proposal network first, then the two classifiers.

Stage I trains the proposal network with plain cross-entropy on full images.
Stage II finetunes two copies of the downstream classifier: the global one
on resized whole images, the local one on the patches the trained proposal
network selects.  Both Stage II losses carry the literal 1/|X| sequence
normalization (X is the whole input sequence, resize included), so the
global loss is scaled by 1/T even though it sums a single term; set
`sequence_norm="per_item"` to normalize by the summed item count instead.

SGD uses classic momentum, weight decay excluded from normalization scale /
shift parameters (and biases), a step-decay schedule for Stage I and cosine
for Stage II.  With a fixed seed, runs are bit-identical: batch order,
flips, and initialization all derive from named per-purpose generators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from . import pipeline, tensor
from .model import AnchorNetModel, ArchSpec, DownstreamModel, default_anchornet_spec
from .patches import SelectionConfig
from .rf import PatchBox
from .tensor import Tensor
from .util import named_rng

CE_FLOOR = 1e-12


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


class StageOrderError(RuntimeError):
    """Stage II invoked with an untrained proposal network."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 32
    lr: float = 0.05
    schedule: str = "step"  # "step" | "cosine"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    decay_milestones: tuple[float, ...] = (0.3, 0.6, 0.9)
    augment_flip: bool = True
    sequence_norm: str = "literal"  # Stage II 1/|X| factor: "literal" | "per_item"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.schedule not in ("step", "cosine"):
            raise ValueError("schedule must be 'step' or 'cosine'")
        if self.sequence_norm not in ("literal", "per_item"):
            raise ValueError("sequence_norm must be 'literal' or 'per_item'")


@dataclass
class LabeledDataset:
    """Images (N, C, H, W) as uint8 or float32, integer labels, and the
    generator's ground-truth object boxes where known."""

    images: np.ndarray
    labels: np.ndarray
    boxes: list[PatchBox | None]

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError("images must be (N, C, H, W)")
        if len(self.labels) != len(self.images) or len(self.boxes) != len(self.images):
            raise ValueError("images, labels and boxes must align")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def image_float(self, idx: int) -> np.ndarray:
        return self.batch_float([idx])[0]

    def batch_float(self, indices) -> np.ndarray:
        batch = self.images[list(indices)]
        if batch.dtype == np.uint8:
            return batch.astype(np.float32) / 255.0
        return batch.astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# Loss and optimizer


def cross_entropy(probs: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """-log p[label] with a 1e-12 floor; gradient w.r.t. logits is p - onehot."""
    probs = np.asarray(probs, dtype=np.float64)
    if not (0 <= label < probs.shape[-1]):
        raise IndexError(f"label {label} out of range for {probs.shape[-1]} classes")
    loss = -math.log(max(float(probs[label]), CE_FLOOR))
    grad = probs.copy()
    grad[label] -= 1.0
    return loss, grad


def cross_entropy_batch(probs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = probs.shape[0]
    picked = np.maximum(probs[np.arange(n), labels], CE_FLOOR)
    losses = -np.log(picked)
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return losses, grad


class SGD:
    """Momentum SGD; weight decay applies only to decay-tagged parameters."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)  # (name, tensor, decay)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = {name: np.zeros_like(p.data) for name, p, _ in self.params}

    def step(self) -> None:
        for name, p, decay in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if decay and self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self._velocity[name]
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for _, p, _ in self.params:
            p.grad = None


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Step decay divides by 10 at each milestone fraction; cosine anneals."""
    if config.schedule == "cosine":
        return config.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))
    drops = sum(1 for frac in config.decay_milestones if epoch >= int(frac * config.epochs))
    return config.lr * (0.1 ** drops)


# ---------------------------------------------------------------------------
# Generic weighted-row SGD loop


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float
    lr: float


def _train_rows(
    model,
    inputs: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
    objective_count: int,
    config: TrainConfig,
    rng_tag: str,
) -> list[EpochStats]:
    """Minimize sum_i(weights[i] * CE_i) / objective_count over `inputs` rows.

    Rows are shuffled per epoch; each batch's gradient is the unbiased
    estimate R/(B*objective_count) * sum_batch(w_i * dCE_i), so summing
    batch losses weighted by B/R reproduces the full objective exactly.
    """
    total_rows = len(inputs)
    if total_rows == 0:
        return []
    opt = SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
              weight_decay=config.weight_decay)
    history: list[EpochStats] = []
    for epoch in range(config.epochs):
        opt.lr = lr_at_epoch(config, epoch)
        perm = named_rng(config.seed, rng_tag, "shuffle", epoch).permutation(total_rows)
        flip_rng = named_rng(config.seed, rng_tag, "flip", epoch)
        objective_sum = 0.0
        correct = 0
        for start in range(0, total_rows, config.batch_size):
            idx = perm[start : start + config.batch_size]
            x = inputs[idx].astype(np.float32, copy=True)
            if config.augment_flip:
                flips = flip_rng.random(len(idx)) < 0.5
                x[flips] = x[flips, :, :, ::-1]
            y = labels[idx]
            w = weights[idx]
            logits = model.logits(Tensor(x), train=True)
            probs = tensor.softmax(logits.data.astype(np.float64), axis=1)
            losses, dlogits = cross_entropy_batch(probs, y)
            batch_objective = float(np.sum(w * losses))
            if not np.isfinite(batch_objective):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, rows {start}:{start + len(idx)}"
                )
            objective_sum += batch_objective
            correct += int(np.sum(np.argmax(probs, axis=1) == y))
            # Unbiased batch estimate of the objective gradient:
            # R/(B*N) * sum_batch(w_i * dCE_i).
            scale = total_rows / (len(idx) * objective_count)
            logits.backward((dlogits * w[:, None] * scale).astype(logits.data.dtype))
            opt.step()
            opt.zero_grad()
        history.append(
            EpochStats(
                epoch=epoch,
                loss=objective_sum / objective_count,
                accuracy=correct / total_rows,
                lr=opt.lr,
            )
        )
    return history


def dataset_objective(
    model,
    inputs: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
    objective_count: int,
    batch_size: int = 32,
) -> float:
    """sum_i(weights[i] * CE_i) / objective_count with inference forwards.

    Accumulates batch partial sums in index order; since each row's loss is
    independent of the partition here (no batch statistics), the result is
    the dataset-mean definition regardless of batch size.
    """
    total = 0.0
    for start in range(0, len(inputs), batch_size):
        x = inputs[start : start + batch_size].astype(np.float32, copy=False)
        y = labels[start : start + batch_size]
        with tensor.no_grad():
            probs = tensor.softmax(model.logits(Tensor(x)).data.astype(np.float64), axis=1)
        losses, _ = cross_entropy_batch(probs, y)
        total += float(np.sum(weights[start : start + batch_size] * losses))
    return total / objective_count


# ---------------------------------------------------------------------------
# Stage I


def train_anchornet(
    dataset: LabeledDataset,
    config: TrainConfig,
    spec: ArchSpec | None = None,
    dtype=np.float32,
) -> AnchorNetModel:
    """Cross-entropy training of the proposal network on full images."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if spec is None:
        spec = default_anchornet_spec(num_classes=dataset.num_classes)
    model = model_mod.build_anchornet(spec, seed=config.seed, dtype=dtype)
    inputs = dataset.batch_float(range(len(dataset)))
    weights = np.ones(len(dataset))
    model.train_history = _train_rows(
        model, inputs, dataset.labels, weights, len(dataset), config, "anchornet"
    )
    model.trained = True
    return model


# ---------------------------------------------------------------------------
# Stage II


def _resize_all(dataset: LabeledDataset, side: int, batch: int = 64) -> np.ndarray:
    out = np.empty((len(dataset), dataset.images.shape[1], side, side), dtype=np.float32)
    for start in range(0, len(dataset), batch):
        idx = list(range(start, min(start + batch, len(dataset))))
        with tensor.no_grad():
            out[idx] = tensor.resize_bilinear(
                Tensor(dataset.batch_float(idx)), (side, side)
            ).data
    return out


def finetune_global(
    f: DownstreamModel,
    dataset: LabeledDataset,
    config: TrainConfig,
    sequence_len: int = 5,
    side: int = 95,
) -> DownstreamModel:
    """Finetune the stage-1 classifier on resized whole images."""
    inputs = _resize_all(dataset, side)
    w = 1.0 / sequence_len if config.sequence_norm == "literal" else 1.0
    weights = np.full(len(dataset), w)
    f.train_history = _train_rows(
        f, inputs, dataset.labels, weights, len(dataset), config, "finetune-global"
    )
    f.trained = True
    return f


def collect_local_rows(
    dataset: LabeledDataset,
    anchornet: AnchorNetModel,
    cfg: SelectionConfig,
    sequence_norm: str = "literal",
    batch_size: int = 32,
):
    """Patch pixels, labels, and per-row loss weights for local finetuning.

    Images whose proposal yields no patches simply contribute no rows.
    """
    patches_list, labels_list, weights_list = [], [], []
    for start in range(0, len(dataset), batch_size):
        idx = list(range(start, min(start + batch_size, len(dataset))))
        images = dataset.batch_float(idx)
        _, selections = pipeline.propose_patches(anchornet, images, cfg)
        for bi, i in enumerate(idx):
            selected = selections[bi]
            if not selected:
                continue
            seq_len = len(selected) + 1  # the resized image occupies slot 1
            w = 1.0 / seq_len if sequence_norm == "literal" else 1.0 / len(selected)
            for box, _ in selected:
                patches_list.append(images[bi, :, box.top : box.bottom, box.left : box.right])
                labels_list.append(int(dataset.labels[i]))
                weights_list.append(w)
    if not patches_list:
        return (
            np.zeros((0, dataset.images.shape[1], anchornet.rf_state.rf, anchornet.rf_state.rf), dtype=np.float32),
            np.zeros(0, dtype=np.int64),
            np.zeros(0),
        )
    return np.stack(patches_list), np.array(labels_list), np.array(weights_list)


def finetune_local(
    f: DownstreamModel,
    dataset: LabeledDataset,
    anchornet: AnchorNetModel,
    sel_cfg: SelectionConfig,
    config: TrainConfig,
) -> DownstreamModel:
    """Finetune the patch classifier on proposal-selected crops.

    Requires a trained proposal network (Stage I precedes Stage II); an
    image with an empty proposal set contributes zero updates.
    """
    if not anchornet.trained:
        raise StageOrderError("finetune_local requires a trained proposal network")
    patches_arr, labels, weights = collect_local_rows(
        dataset, anchornet, sel_cfg, config.sequence_norm
    )
    f.train_history = _train_rows(
        f, patches_arr, labels, weights, len(dataset), config, "finetune-local"
    )
    f.trained = True
    return f
