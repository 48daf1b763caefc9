"""Square patch sampling from item regions and resizing to the network resolution."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

MAX_SIDE = 30
R_RANGE = (0.1, 0.25)
MASK_COVERAGE = 0.6
MASK_TRIES = 10


@dataclass(frozen=True)
class PatchSpec:
    image_id: str
    region_index: int
    top_left: tuple  # (px, py)
    side: int
    r: float = float("nan")


@dataclass(frozen=True, eq=False)
class Patch:
    spec: PatchSpec
    pixels: np.ndarray  # (S, S, 3) float32 in [0, 1]


def patch_side(w: int, h: int, r: float) -> int:
    """``min(30, floor(r * min(w, h)))`` clamped to at least one pixel."""
    # 1e-9 keeps exact products such as 0.15 * 20 from flooring to 2
    side = math.floor(r * min(w, h) + 1e-9)
    return max(1, min(MAX_SIDE, side))


def _mask_coverage(region, px: int, py: int, side: int) -> float:
    ox, oy = px - region.x, py - region.y
    return float(region.mask[oy:oy + side, ox:ox + side].mean())


def sample_patch_spec(region, rng: np.random.Generator, r_range=R_RANGE, *,
                      image_id: str = "", region_index: int = 0) -> PatchSpec:
    lo, hi = r_range
    attempts = MASK_TRIES if region.mask is not None else 1
    for _ in range(attempts):
        r = float(rng.uniform(lo, hi))
        side = patch_side(region.w, region.h, r)
        px = region.x + int(rng.integers(0, region.w - side + 1))
        py = region.y + int(rng.integers(0, region.h - side + 1))
        spec = PatchSpec(image_id, region_index, (px, py), side, r)
        if region.mask is None or _mask_coverage(region, px, py, side) >= MASK_COVERAGE:
            break
    return spec


def crop_to_tensor(pixels: np.ndarray, spec: PatchSpec, out_resolution: int) -> torch.Tensor:
    """Crop ``spec`` from uint8 HxWx3 pixels; returns a 3xRxR float tensor in [0, 1]."""
    px, py = spec.top_left
    s = spec.side
    h, w = pixels.shape[:2]
    if px < 0 or py < 0 or s < 1 or px + s > w or py + s > h:
        raise ValueError(f"patch {spec} outside {w}x{h} image")
    crop = torch.from_numpy(np.ascontiguousarray(pixels[py:py + s, px:px + s]))
    crop = crop.permute(2, 0, 1).unsqueeze(0).to(torch.float32) / 255.0
    if s != out_resolution:
        crop = F.interpolate(crop, size=(out_resolution, out_resolution),
                             mode="bilinear", align_corners=False)
    return crop[0].clamp_(0.0, 1.0)


def extract_patch(image, spec: PatchSpec, out_resolution: int) -> Patch:
    t = crop_to_tensor(image.pixels, spec, out_resolution)
    return Patch(spec, t.permute(1, 2, 0).numpy().copy())


def sample_patches_for_item(image, region, n: int, rng: np.random.Generator,
                            out_resolution: int = 32, r_range=R_RANGE,
                            region_index: int = 0) -> list:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return [
        extract_patch(image, sample_patch_spec(region, rng, r_range, image_id=image.image_id,
                                               region_index=region_index), out_resolution)
        for _ in range(n)
    ]


def item_patch_tensor(image, region, n: int, rng: np.random.Generator,
                      out_resolution: int = 32, r_range=R_RANGE) -> torch.Tensor:
    """``n`` patches of one item stacked as an (n, 3, R, R) batch."""
    specs = [sample_patch_spec(region, rng, r_range, image_id=image.image_id) for _ in range(n)]
    return torch.stack([crop_to_tensor(image.pixels, s, out_resolution) for s in specs])


def patches_to_tensor(patches) -> torch.Tensor:
    return torch.from_numpy(np.stack([p.pixels for p in patches])).permute(0, 3, 1, 2).contiguous()
