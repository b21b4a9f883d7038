"""Synthetic weakly-labelled gloss videos.

Each gloss is a Gaussian blob sweeping across the frame in one of six
directions, in one of two sizes (12 glosses by default), over 8-16 frames.
A sentence strings 2-5 glosses (repeats allowed) between short rest
segments of pure noise.  Only the sentence label is kept.  Nuisances:
additive noise, a temporal stretch applied with probability 0.5, and a
random crop (center crop for the dev split).
"""

import json
import os
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .ctc import required_frames
from .errors import ConfigError
from .model import MIN_FRAMES
from .tensor import load_tensor, save_tensor

_SPLIT_CODES = {"train": 1, "dev": 2, "test": 3}


class Sample(NamedTuple):
    id: str
    labels: list
    video: np.ndarray  # 1 x T x S x S


@dataclass(frozen=True)
class SyntheticGlossWorld:
    num_glosses: int = 12
    image_size: int = 16
    crop_margin: int = 2
    min_duration: int = 8
    max_duration: int = 16
    min_length: int = 2
    max_length: int = 5
    noise: float = 0.05
    stretch_prob: float = 0.5
    stretch_range: tuple = (0.8, 1.2)
    rest_frames: tuple = (2, 4)

    def __post_init__(self):
        object.__setattr__(self, "stretch_range", tuple(self.stretch_range))
        object.__setattr__(self, "rest_frames", tuple(self.rest_frames))
        if self.num_glosses < 1 or self.min_length < 1 or self.min_length > self.max_length:
            raise ConfigError(f"invalid world {self}")

    def to_dict(self):
        d = asdict(self)
        d["stretch_range"] = list(self.stretch_range)
        d["rest_frames"] = list(self.rest_frames)
        return d

    # -- sampling

    def sample_labels(self, rng):
        n = int(rng.integers(self.min_length, self.max_length + 1))
        return [int(g) for g in rng.integers(1, self.num_glosses + 1, size=n)]

    def _template(self, gloss):
        k = gloss - 1
        angle = 2 * np.pi * (k % 6) / 6
        sigma = 1.0 if (k // 6) % 2 == 0 else 2.0
        return np.array([np.cos(angle), np.sin(angle)]), sigma

    def _render(self, centres, sigmas):
        size = self.image_size + self.crop_margin
        grid = np.arange(size, dtype=np.float64)
        frames = np.zeros((len(centres), size, size))
        for i, (c, s) in enumerate(zip(centres, sigmas)):
            if c is None:
                continue
            gy = np.exp(-((grid - c[1]) ** 2) / (2 * s * s))
            gx = np.exp(-((grid - c[0]) ** 2) / (2 * s * s))
            frames[i] = np.outer(gy, gx)
        return frames

    def render(self, labels, rng, split="train"):
        size = self.image_size + self.crop_margin
        mid = (size - 1) / 2.0
        reach = 0.3 * size
        lo, hi = self.rest_frames
        centres, sigmas = [], []

        def rest(count):
            centres.extend([None] * count)
            sigmas.extend([0.0] * count)

        rest(int(rng.integers(lo, hi + 1)))
        for j, g in enumerate(labels):
            if j:
                rest(int(rng.integers(0, 2)))
            direction, sigma = self._template(g)
            dur = int(rng.integers(self.min_duration, self.max_duration + 1))
            for tau in np.linspace(0.0, 1.0, dur):
                centres.append(mid + reach * (2 * tau - 1) * direction)
                sigmas.append(sigma)
        rest(int(rng.integers(lo, hi + 1)))
        frames = self._render(centres, sigmas)
        if rng.random() < self.stretch_prob:
            frames = stretch_frames(frames, rng.uniform(*self.stretch_range))
        need = max(MIN_FRAMES, 4 * required_frames(labels) + 4)
        if len(frames) < need:
            frames = np.concatenate([frames, np.zeros((need - len(frames), size, size))])
        frames = frames + self.noise * rng.normal(size=frames.shape)
        if split == "train":
            oy, ox = rng.integers(0, self.crop_margin + 1, size=2)
        else:
            oy = ox = self.crop_margin // 2
        frames = frames[:, oy : oy + self.image_size, ox : ox + self.image_size]
        return frames[None].astype(np.float32).astype(np.float64)

    def sample(self, seed, split, index):
        rng = np.random.default_rng([int(seed), _SPLIT_CODES[split], int(index)])
        labels = self.sample_labels(rng)
        return Sample(f"{split}-{index:05d}", labels, self.render(labels, rng, split))

    def make_split(self, seed, split, n):
        return [self.sample(seed, split, i) for i in range(n)]


def stretch_frames(frames, factor):
    """Nearest-frame temporal resampling to ``round(T * factor)`` frames."""
    T = len(frames)
    n = max(1, int(round(T * factor)))
    idx = np.minimum((np.arange(n) / factor).astype(int), T - 1)
    return frames[idx]


def stretch_video(video, factor):
    """Stretch a C x T x H x W clip in time, padding with blank frames to the minimum length."""
    out = np.stack([stretch_frames(c, factor) for c in video])
    if out.shape[1] < MIN_FRAMES:
        pad = np.zeros((out.shape[0], MIN_FRAMES - out.shape[1]) + out.shape[2:])
        out = np.concatenate([out, pad], axis=1)
    return out


def generate_dataset(seed, n_train, n_dev, out_dir, world=None):
    """Write one tensor file per sample plus ``index.json``; returns the index."""
    if n_train < 1 or n_dev < 1:
        raise ConfigError("n_train and n_dev must be >= 1")
    world = SyntheticGlossWorld() if world is None else world
    index = {"seed": int(seed), "world": world.to_dict(), "splits": {}}
    for split, n in (("train", n_train), ("dev", n_dev)):
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)
        entries = []
        for i in range(n):
            s = world.sample(seed, split, i)
            rel = f"{split}/{s.id}.dct"
            save_tensor(os.path.join(out_dir, rel), s.video)
            entries.append({"id": s.id, "gloss_ids": s.labels, "T": int(s.video.shape[1]), "file": rel})
        index["splits"][split] = entries
    with open(os.path.join(out_dir, "index.json"), "w", encoding="utf-8") as fh:
        json.dump(index, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return index


def load_split(data_dir, split):
    with open(os.path.join(data_dir, "index.json"), encoding="utf-8") as fh:
        index = json.load(fh)
    return [
        Sample(e["id"], list(e["gloss_ids"]), load_tensor(os.path.join(data_dir, e["file"])))
        for e in index["splits"][split]
    ]


def load_index(data_dir):
    with open(os.path.join(data_dir, "index.json"), encoding="utf-8") as fh:
        return json.load(fh)
