"""Deterministic synthetic color-at-quadrant task.

Each image carries one solid colored patch in the outer corner of each of the
four quadrants on a neutral gray background. The question is a one-hot vector
picking a quadrant; the label is the palette index of that quadrant's color.
The task is noiseless by construction: reading the queried patch directly
classifies perfectly, and the question reaches the network only through the
gate controllers, so gating is load-bearing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PALETTE = np.array(
    [
        [0.90, 0.10, 0.10],  # red
        [0.10, 0.80, 0.20],  # green
        [0.15, 0.25, 0.90],  # blue
        [0.90, 0.85, 0.10],  # yellow
    ],
    dtype=np.float32,
)

BACKGROUND = 0.35


@dataclass
class SyntheticTask:
    seed: int = 0
    image_size: int = 32
    patch: int = 8
    n_colors: int = 4
    n_positions: int = 4  # quadrants; also the question width
    n_train: int = 8192
    n_val: int = 2048


def _quadrant_slices(task: SyntheticTask):
    """Patch windows at the outer corner of each quadrant (row, col slices)."""
    s, p = task.image_size, task.patch
    return [
        (slice(0, p), slice(0, p)),
        (slice(0, p), slice(s - p, s)),
        (slice(s - p, s), slice(0, p)),
        (slice(s - p, s), slice(s - p, s)),
    ][: task.n_positions]


def _generate(task: SyntheticTask, count: int, stream: int):
    rng = np.random.default_rng([task.seed, stream])
    colors = rng.integers(0, task.n_colors, size=(count, task.n_positions))
    quadrant = rng.integers(0, task.n_positions, size=count)
    labels = colors[np.arange(count), quadrant].astype(np.int64)

    images = np.full((count, 3, task.image_size, task.image_size), BACKGROUND, dtype=np.float32)
    for qi, (rows, cols) in enumerate(_quadrant_slices(task)):
        images[:, :, rows, cols] = PALETTE[colors[:, qi]][:, :, None, None]

    questions = np.zeros((count, task.n_positions), dtype=np.float32)
    questions[np.arange(count), quadrant] = 1.0
    return images, questions, labels


def generate_dataset(task: SyntheticTask):
    """Training split as (images, questions, labels); byte-deterministic per seed."""
    return _generate(task, task.n_train, stream=0)


def generate_val(task: SyntheticTask):
    return _generate(task, task.n_val, stream=1)


def oracle_predict(images: np.ndarray, questions: np.ndarray,
                   task: SyntheticTask = SyntheticTask()) -> np.ndarray:
    """Read the queried quadrant's patch pixel directly and match the palette."""
    quadrant = questions.argmax(axis=1)
    slices = _quadrant_slices(task)
    n = images.shape[0]
    pixels = np.empty((n, 3), dtype=np.float32)
    for qi, (rows, cols) in enumerate(slices):
        at = quadrant == qi
        pixels[at] = images[at, :, rows.start, cols.start]
    dist = ((pixels[:, None, :] - PALETTE[None, :, :]) ** 2).sum(axis=2)
    return dist.argmin(axis=1).astype(np.int64)
