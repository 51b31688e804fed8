"""Synthetic localization benchmark: one textured object over structured noise.

Each image carries a single class-identifying texture patch — a sinusoidal
grating whose orientation and period encode the class — masked to a disc and
placed uniformly at random over a smooth random background.  Object size and
grating contrast vary widely and independently of the class: large
high-contrast objects are recognizable even in a downsampled view, but the
small low-contrast ones lose their period cue to aliasing and noise when
the whole image is resized to the proposal window, while a full-resolution
crop around the object keeps them plainly separable.  That gap is the
point: the resized view alone is a mediocre classifier input, a well-placed
patch is an excellent one, and the recorded ground-truth box makes
localization quality measurable.

Object side lengths stay at or below 80 px, so every object fits inside one
95x95 proposal window.  Generation is deterministic per (seed, index), so a
dataset can be produced in any order or in parallel and still be
byte-identical.
"""

from __future__ import annotations

import csv
import os

import numpy as np

from . import netpbm, tensor
from .rf import PatchBox
from .tensor import Tensor
from .training import LabeledDataset
from .util import named_rng

# (orientation degrees, period px); class c uses CLASS_TEXTURES[c].
CLASS_TEXTURES = (
    (0.0, 4.0),
    (0.0, 6.0),
    (90.0, 4.0),
    (90.0, 6.0),
    (45.0, 4.0),
    (45.0, 6.0),
    (135.0, 4.0),
    (135.0, 6.0),
)

OBJECT_SIDE_RANGE = (28, 80)
TEXTURE_AMPLITUDE_RANGE = (0.16, 0.34)
BACKGROUND_CELLS = 8
PIXEL_NOISE = 0.015


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.35, 0.65, size=(1, 1, BACKGROUND_CELLS, BACKGROUND_CELLS))
    with tensor.no_grad():
        smooth = tensor.resize_bilinear(Tensor(coarse), (size, size)).data[0, 0]
    return smooth


def _grating(rng, side: int, angle_deg: float, period: float, amplitude: float) -> np.ndarray:
    theta = np.deg2rad(angle_deg)
    ys, xs = np.mgrid[0:side, 0:side]
    coord = xs * np.cos(theta) + ys * np.sin(theta)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    return 0.5 + amplitude * np.sin(2.0 * np.pi * coord / period + phase)


def make_sample(num_classes: int, seed: int, index: int, image_size: int = 224):
    """One (image, label, box) triple; image is (3, H, W) uint8."""
    if not 2 <= num_classes <= len(CLASS_TEXTURES):
        raise ValueError(f"num_classes must be in [2, {len(CLASS_TEXTURES)}]")
    label = index % num_classes
    rng = named_rng(seed, "sample", index)
    bg = _background(rng, image_size)

    side = int(rng.integers(OBJECT_SIDE_RANGE[0], OBJECT_SIDE_RANGE[1] + 1))
    top = int(rng.integers(0, image_size - side + 1))
    left = int(rng.integers(0, image_size - side + 1))
    angle, period = CLASS_TEXTURES[label]
    amplitude = rng.uniform(*TEXTURE_AMPLITUDE_RANGE)
    texture = _grating(rng, side, angle, period, amplitude)

    ys, xs = np.mgrid[0:side, 0:side]
    radius = side / 2.0
    mask = (ys - (side - 1) / 2.0) ** 2 + (xs - (side - 1) / 2.0) ** 2 <= radius**2

    plane = bg.copy()
    region = plane[top : top + side, left : left + side]
    region[mask] = texture[mask]
    plane += rng.normal(0.0, PIXEL_NOISE, size=plane.shape)
    np.clip(plane, 0.0, 1.0, out=plane)

    image = np.round(plane * 255.0).astype(np.uint8)
    image = np.repeat(image[None], 3, axis=0)
    return image, label, PatchBox(top=top, left=left, height=side, width=side)


def make_dataset(
    num_classes: int, samples_per_class: int, seed: int, image_size: int = 224
) -> LabeledDataset:
    """Balanced in-memory dataset, classes interleaved by index."""
    n = num_classes * samples_per_class
    images = np.empty((n, 3, image_size, image_size), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    boxes: list[PatchBox | None] = []
    for i in range(n):
        image, label, box = make_sample(num_classes, seed, i, image_size)
        images[i] = image
        labels[i] = label
        boxes.append(box)
    return LabeledDataset(images=images, labels=labels, boxes=boxes)


INDEX_FIELDS = ("path", "label", "top", "left", "height", "width")


def generate_synthetic(
    num_classes: int,
    samples_per_class: int,
    seed: int,
    out_dir: str,
    image_size: int = 224,
) -> LabeledDataset:
    """Write the dataset as binary PPM files plus a CSV index; returns it."""
    dataset = make_dataset(num_classes, samples_per_class, seed, image_size)
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)
    index_path = os.path.join(out_dir, "index.csv")
    try:
        with open(index_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(INDEX_FIELDS)
            for i in range(len(dataset)):
                rel = os.path.join("images", f"{i:05d}.ppm")
                netpbm.write_ppm(
                    os.path.join(out_dir, rel),
                    dataset.images[i].transpose(1, 2, 0),
                )
                box = dataset.boxes[i]
                writer.writerow(
                    [rel, int(dataset.labels[i]), box.top, box.left, box.height, box.width]
                )
    except OSError as err:
        raise OSError(f"failed writing dataset under {out_dir}: {err}") from err
    return dataset


def load_dataset(root: str) -> LabeledDataset:
    """Read a dataset written by `generate_synthetic`."""
    index_path = os.path.join(root, "index.csv")
    images, labels, boxes = [], [], []
    with open(index_path, newline="") as fh:
        for row in csv.DictReader(fh):
            pixels = netpbm.read_ppm(os.path.join(root, row["path"]))
            images.append(pixels.transpose(2, 0, 1))
            labels.append(int(row["label"]))
            boxes.append(
                PatchBox(
                    top=int(row["top"]),
                    left=int(row["left"]),
                    height=int(row["height"]),
                    width=int(row["width"]),
                )
            )
    return LabeledDataset(
        images=np.stack(images), labels=np.array(labels, dtype=np.int64), boxes=boxes
    )
