"""Procedural stand-in for street photos and catalog shots with known style labels.

Each style is a base colour plus a stripe frequency. A synthetic person draws
a personal centre near their style; each worn item jitters around it. Catalog
items are rendered alone on a white backdrop with a global brightness offset,
which is the domain shift the discriminator has to find.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ._rng import lane_rng
from .data import CatalogImage, DatasetManifest, ItemRegion, RegionedImage, save_manifest, write_png
from .evalkit import FITBQuestion, Outfit, save_fitb, save_outfits


@dataclass
class SynthConfig:
    n_styles: int = 4
    persons_per_style: int = 50
    items_per_person: int = 3
    image_size: int = 160
    catalog_size: int = 64
    person_sigma: float = 0.04
    item_sigma: float = 0.03
    pixel_noise: float = 0.02
    texture_amplitude: float = 0.08
    brightness_offset: float = 0.1
    n_target_train: int = 200
    outfit_size: int = 4  # catalog outfits used to build FITB questions
    valid_groups_per_style: int = 5
    test_groups_per_style: int = 25
    valid_comp_per_class: int = 50
    test_comp_per_class: int = 200
    comp_outfit_size: int = 3

    def __post_init__(self):
        checks = {
            "n_styles": self.n_styles >= 2,
            "persons_per_style": self.persons_per_style >= 1,
            "items_per_person": self.items_per_person >= 2,
            "image_size": self.image_size >= 8 * self.items_per_person,
            "catalog_size": self.catalog_size >= 16,
            "n_target_train": self.n_target_train >= 1,
            "outfit_size": self.outfit_size >= 2,
            "comp_outfit_size": 2 <= self.comp_outfit_size <= self.n_styles,
            "valid_groups_per_style": self.valid_groups_per_style >= 1,
            "test_groups_per_style": self.test_groups_per_style >= 1,
            "valid_comp_per_class": self.valid_comp_per_class >= 1,
            "test_comp_per_class": self.test_comp_per_class >= 1,
        }
        for name, ok in checks.items():
            if not ok:
                raise ValueError(f"synth.{name} has an invalid value: {getattr(self, name)!r}")
        for name in ("person_sigma", "item_sigma", "pixel_noise", "texture_amplitude", "brightness_offset"):
            if getattr(self, name) < 0:
                raise ValueError(f"synth.{name} must be >= 0")


@dataclass
class SynthDataset:
    source: DatasetManifest
    target: DatasetManifest  # unlabelled catalog pool used for adaptation
    target_valid: DatasetManifest
    target_test: DatasetManifest
    valid_outfits: list
    valid_fitb: list
    test_outfits: list
    test_fitb: list
    labels: dict  # image_id -> style index
    config: SynthConfig
    seed: int


def style_palette(n_styles: int):
    """Equally spaced hues at fixed saturation/value, stripe periods 3..9 px."""
    colors = np.array([colorsys.hsv_to_rgb(k / n_styles, 0.6, 0.65) for k in range(n_styles)])
    periods = np.linspace(3.0, 9.0, n_styles)
    return colors, periods


def _render_item(canvas: np.ndarray, box, color, period, cfg: SynthConfig, rng) -> None:
    x, y, w, h = box
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    angle = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    period = period * rng.uniform(0.9, 1.1)
    proj = xx * np.cos(angle) + yy * np.sin(angle)
    stripes = cfg.texture_amplitude * np.sin(2 * np.pi * proj / period + phase)
    canvas[y:y + h, x:x + w] = color[None, None, :] + stripes[..., None]


def _to_uint8(canvas: np.ndarray, cfg: SynthConfig, rng) -> np.ndarray:
    noisy = canvas + rng.normal(0.0, cfg.pixel_noise, canvas.shape)
    return np.clip(np.round(noisy * 255.0), 0, 255).astype(np.uint8)


def _person_image(image_id, person_id, center, period, cfg, rng) -> RegionedImage:
    s = cfg.image_size
    band = s // cfg.items_per_person
    canvas = np.empty((s, s, 3))
    canvas[:] = rng.uniform(0.3, 0.5) + rng.normal(0, 0.02, 3)
    regions = []
    for k in range(cfg.items_per_person):
        h = int(rng.integers(max(1, int(0.7 * band)), band - 1))
        w = int(rng.integers(int(0.3 * s), int(0.8 * s)))
        x = int(rng.integers(0, s - w + 1))
        y = k * band + int(rng.integers(0, band - h + 1))
        color = center + rng.normal(0.0, cfg.item_sigma, 3)
        _render_item(canvas, (x, y, w, h), color, period, cfg, rng)
        regions.append(ItemRegion((x, y, w, h), category=f"slot{k}"))
    return RegionedImage(image_id, _to_uint8(canvas, cfg, rng), person_id, tuple(regions),
                         path=f"images/{image_id}.png")


def _catalog_image(image_id, color, period, cfg, rng) -> CatalogImage:
    s = cfg.catalog_size
    canvas = np.full((s, s, 3), 0.95)
    margin = rng.integers(3, s // 8 + 1, size=4)
    x, y = int(margin[0]), int(margin[1])
    w, h = s - x - int(margin[2]), s - y - int(margin[3])
    _render_item(canvas, (x, y, w, h), color + cfg.brightness_offset, period, cfg, rng)
    return CatalogImage(image_id, _to_uint8(canvas, cfg, rng), ItemRegion((x, y, w, h)),
                        path=f"images/{image_id}.png")


_GREY = np.ones(3) / np.sqrt(3.0)


def _person_center(colors, style, cfg, rng):
    # chroma-only jitter: brightness never identifies a person, so the only
    # systematic brightness difference in the data is the catalog offset
    noise = rng.normal(0.0, cfg.person_sigma, 3)
    return colors[style] + noise - (noise @ _GREY) * _GREY


def _catalog_split(split, groups_per_style, comp_per_class, colors, periods, cfg, seed, labels):
    rng = lane_rng(seed, "catalog", split)
    entries, groups = [], []
    by_style = {s: [] for s in range(cfg.n_styles)}
    for style in range(cfg.n_styles):
        for g in range(groups_per_style):
            center = _person_center(colors, style, cfg, rng)
            members = []
            for m in range(cfg.outfit_size):
                image_id = f"{split}_s{style}_g{g:03d}_i{m}"
                color = center + rng.normal(0.0, cfg.item_sigma, 3)
                entries.append(_catalog_image(image_id, color, periods[style], cfg, rng))
                labels[image_id] = style
                members.append(image_id)
                by_style[style].append(image_id)
            groups.append((style, members))

    questions = []
    for style, members in groups:
        others = [s for s in range(cfg.n_styles) if s != style]
        for m, answer in enumerate(members):
            query = tuple(r for r in members if r != answer)
            if len(others) >= 3:
                neg_styles = rng.choice(others, 3, replace=False)
            else:
                neg_styles = rng.choice(others, 3, replace=True)
            negatives = [by_style[int(s)][int(rng.integers(len(by_style[int(s)])))] for s in neg_styles]
            slot = int(rng.integers(4))
            cands = negatives[:slot] + [answer] + negatives[slot:]
            questions.append(FITBQuestion(query, tuple(cands), slot))

    outfits = []
    k = cfg.comp_outfit_size
    for _ in range(comp_per_class):
        style = int(rng.integers(cfg.n_styles))
        pool = by_style[style]
        picks = rng.choice(len(pool), k, replace=False)
        outfits.append(Outfit(tuple(pool[int(i)] for i in picks), True))
    for _ in range(comp_per_class):
        styles = rng.choice(cfg.n_styles, k, replace=False)
        outfits.append(Outfit(tuple(by_style[int(s)][int(rng.integers(len(by_style[int(s)])))]
                                    for s in styles), False))
    manifest = DatasetManifest("target", "valid" if split == "valid" else "test", tuple(entries))
    return manifest, outfits, questions


def generate_synthetic_dataset(config: SynthConfig, seed: int) -> SynthDataset:
    cfg = config
    colors, periods = style_palette(cfg.n_styles)
    labels: dict = {}

    rng = lane_rng(seed, "source")
    source = []
    for style in range(cfg.n_styles):
        for p in range(cfg.persons_per_style):
            person_id = f"p_s{style}_{p:04d}"
            center = _person_center(colors, style, cfg, rng)
            image_id = f"src_{person_id}"
            source.append(_person_image(image_id, person_id, center, periods[style], cfg, rng))
            labels[image_id] = style

    rng = lane_rng(seed, "catalog", "train")
    target = []
    for t in range(cfg.n_target_train):
        style = int(rng.integers(cfg.n_styles))
        color = _person_center(colors, style, cfg, rng) + rng.normal(0.0, cfg.item_sigma, 3)
        image_id = f"tgt_{t:05d}"
        target.append(_catalog_image(image_id, color, periods[style], cfg, rng))
        labels[image_id] = style

    valid, valid_outfits, valid_fitb = _catalog_split(
        "valid", cfg.valid_groups_per_style, cfg.valid_comp_per_class, colors, periods, cfg, seed, labels)
    test, test_outfits, test_fitb = _catalog_split(
        "test", cfg.test_groups_per_style, cfg.test_comp_per_class, colors, periods, cfg, seed, labels)

    return SynthDataset(
        source=DatasetManifest("source", "train", tuple(source)),
        target=DatasetManifest("target", "train", tuple(target)),
        target_valid=valid, target_test=test,
        valid_outfits=valid_outfits, valid_fitb=valid_fitb,
        test_outfits=test_outfits, test_fitb=test_fitb,
        labels=labels, config=cfg, seed=seed,
    )


LAYOUT = {
    "source": "source_train.json",
    "target": "target_train.json",
    "target_valid": "target_valid.json",
    "target_test": "target_test.json",
    "valid_outfits": "valid_outfits.json",
    "valid_fitb": "valid_fitb.json",
    "test_outfits": "test_outfits.json",
    "test_fitb": "test_fitb.json",
    "labels": "labels.json",
}


def write_synthetic_dataset(ds: SynthDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("source", "target", "target_valid", "target_test"):
        manifest = getattr(ds, name)
        for e in manifest.entries:
            write_png(e.pixels, out / e.path)
        save_manifest(manifest, out / LAYOUT[name])
    save_outfits(ds.valid_outfits, out / LAYOUT["valid_outfits"])
    save_outfits(ds.test_outfits, out / LAYOUT["test_outfits"])
    save_fitb(ds.valid_fitb, out / LAYOUT["valid_fitb"])
    save_fitb(ds.test_fitb, out / LAYOUT["test_fitb"])
    doc = {"seed": ds.seed, "config": asdict(ds.config), "style_of": ds.labels}
    (out / LAYOUT["labels"]).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return out
