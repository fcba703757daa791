"""Two-view augmentation for contrastive training.

Pipeline per view: random resized crop (area 0.2-1.0), horizontal flip (p=0.5),
color jitter (p=0.8; brightness/contrast/saturation factors in [0.6, 1.4],
applied in that fixed order), grayscale (p=0.2), then per-channel
standardization with fixed constants.  All draws come from the numpy
generator passed in, so a pair is a pure function of (image, rng state).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

CHANNEL_MEAN = (0.5, 0.5, 0.5)
CHANNEL_STD = (0.25, 0.25, 0.25)

_LUMA = (0.299, 0.587, 0.114)

_CROP_AREA = (0.2, 1.0)
_CROP_LOG_ASPECT = (np.log(3.0 / 4.0), np.log(4.0 / 3.0))
_JITTER_PROB = 0.8
_JITTER_RANGE = (0.6, 1.4)
_GRAYSCALE_PROB = 0.2
_FLIP_PROB = 0.5


@dataclass
class AugmentedPair:
    """The two stochastically augmented views of one image."""

    view_s: Tensor
    view_t: Tensor


def standardize(images: Tensor) -> Tensor:
    """Fixed per-channel standardization; shared by training and inference."""
    mean = torch.tensor(CHANNEL_MEAN, dtype=images.dtype).view(3, 1, 1)
    std = torch.tensor(CHANNEL_STD, dtype=images.dtype).view(3, 1, 1)
    return (images - mean) / std


def _random_crop(image: Tensor, rng: np.random.Generator) -> Tensor:
    _, height, width = image.shape
    area = height * width
    for _ in range(10):
        target = area * rng.uniform(*_CROP_AREA)
        aspect = float(np.exp(rng.uniform(*_CROP_LOG_ASPECT)))
        crop_w = int(round(np.sqrt(target * aspect)))
        crop_h = int(round(np.sqrt(target / aspect)))
        if 0 < crop_w <= width and 0 < crop_h <= height:
            top = int(rng.integers(0, height - crop_h + 1))
            left = int(rng.integers(0, width - crop_w + 1))
            patch = image[:, top : top + crop_h, left : left + crop_w]
            break
    else:
        patch = image
    return F.interpolate(
        patch.unsqueeze(0), size=(height, width), mode="bilinear",
        align_corners=False,
    ).squeeze(0)


def _color_jitter(image: Tensor, rng: np.random.Generator) -> Tensor:
    brightness = float(rng.uniform(*_JITTER_RANGE))
    contrast = float(rng.uniform(*_JITTER_RANGE))
    saturation = float(rng.uniform(*_JITTER_RANGE))
    image = (image * brightness).clamp(0.0, 1.0)
    mean = image.mean()
    image = (mean + contrast * (image - mean)).clamp(0.0, 1.0)
    luma = _grayscale(image)
    return (luma + saturation * (image - luma)).clamp(0.0, 1.0)


def _grayscale(image: Tensor) -> Tensor:
    weights = torch.tensor(_LUMA, dtype=image.dtype).view(3, 1, 1)
    return (image * weights).sum(dim=0, keepdim=True).expand_as(image)


def _augment_once(image: Tensor, rng: np.random.Generator) -> Tensor:
    view = _random_crop(image, rng)
    if rng.uniform() < _FLIP_PROB:
        view = view.flip(-1)
    if rng.uniform() < _JITTER_PROB:
        view = _color_jitter(view, rng)
    if rng.uniform() < _GRAYSCALE_PROB:
        view = _grayscale(view).clone()
    return standardize(view)


def make_views(image: Tensor, rng: np.random.Generator) -> AugmentedPair:
    """Draw the two views of one [3, H, W] image in [0, 1]."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a [3, H, W] image, got {tuple(image.shape)}")
    return AugmentedPair(
        view_s=_augment_once(image, rng),
        view_t=_augment_once(image, rng),
    )


def augment_batch(images: Tensor, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    """Stack per-image pairs for a [B, 3, H, W] batch."""
    pairs = [make_views(images[i], rng) for i in range(images.shape[0])]
    view_s = torch.stack([p.view_s for p in pairs])
    view_t = torch.stack([p.view_t for p in pairs])
    return view_s, view_t
