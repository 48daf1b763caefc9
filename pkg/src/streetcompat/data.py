"""Domain data model and manifest I/O for source (in-the-wild) and target (catalog) images."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image

DOMAINS = ("source", "target")
SPLITS = ("train", "valid", "test")
SOURCE_KINDS = ("ground_truth", "detected")


class ManifestError(ValueError):
    """Manifest does not match the schema or violates a data invariant."""


class ImageLoadError(FileNotFoundError):
    """An image or mask referenced by a manifest could not be read."""


@dataclass(frozen=True, eq=False)
class ItemRegion:
    box: tuple  # (x, y, w, h) in pixels
    mask: Optional[np.ndarray] = None  # bool (h, w), aligned to box
    category: Optional[str] = None
    source_kind: str = "ground_truth"
    mask_path: Optional[str] = None

    def __post_init__(self):
        if len(self.box) != 4:
            raise ValueError(f"box must be (x, y, w, h), got {self.box!r}")
        box = tuple(int(v) for v in self.box)
        if any(b != v for b, v in zip(box, self.box)):
            raise ValueError(f"box coordinates must be integers, got {self.box!r}")
        object.__setattr__(self, "box", box)
        if box[2] < 1 or box[3] < 1:
            raise ValueError(f"region width and height must be >= 1, got {box}")
        if self.source_kind not in SOURCE_KINDS:
            raise ValueError(f"unknown source_kind {self.source_kind!r}")
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != (box[3], box[2]):
                raise ValueError(
                    f"mask shape {mask.shape} does not match box (h, w) = {(box[3], box[2])}")
            object.__setattr__(self, "mask", mask)

    @property
    def x(self) -> int:
        return self.box[0]

    @property
    def y(self) -> int:
        return self.box[1]

    @property
    def w(self) -> int:
        return self.box[2]

    @property
    def h(self) -> int:
        return self.box[3]

    def inside(self, width: int, height: int) -> bool:
        x, y, w, h = self.box
        return x >= 0 and y >= 0 and x + w <= width and y + h <= height


def _check_pixels(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValueError(f"pixels must be uint8 HxWx3, got {pixels.dtype} {pixels.shape}")
    return pixels


@dataclass(frozen=True, eq=False)
class RegionedImage:
    """A person photo with its item regions."""

    image_id: str
    pixels: np.ndarray
    person_id: str
    regions: tuple = ()
    path: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "pixels", _check_pixels(self.pixels))
        object.__setattr__(self, "regions", tuple(self.regions))
        if not self.person_id:
            raise ValueError(f"image {self.image_id!r}: person_id must be non-empty")
        h, w = self.pixels.shape[:2]
        for k, region in enumerate(self.regions):
            if not region.inside(w, h):
                raise ValueError(
                    f"image {self.image_id!r}: region {k} box {region.box} outside {w}x{h} image")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True, eq=False)
class CatalogImage:
    """A single-item product photo; the item region defaults to the full frame."""

    image_id: str
    pixels: np.ndarray
    item_region: Optional[ItemRegion] = None
    path: Optional[str] = None

    def __post_init__(self):
        pixels = _check_pixels(self.pixels)
        object.__setattr__(self, "pixels", pixels)
        h, w = pixels.shape[:2]
        if self.item_region is None:
            object.__setattr__(self, "item_region", ItemRegion((0, 0, w, h)))
        elif not self.item_region.inside(w, h):
            raise ValueError(
                f"image {self.image_id!r}: item box {self.item_region.box} outside {w}x{h} image")

    @property
    def regions(self) -> tuple:
        return (self.item_region,)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


Entry = Union[RegionedImage, CatalogImage]


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    domain: str
    split: str
    entries: tuple = ()
    root: Optional[str] = None  # directory relative paths are resolved against
    # target entries loaded without any region keep that fact for round-trips
    _implicit_region: frozenset = field(default=frozenset(), repr=False)

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ManifestError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if self.split not in SPLITS:
            raise ManifestError(f"split must be one of {SPLITS}, got {self.split!r}")
        object.__setattr__(self, "entries", tuple(self.entries))
        seen = set()
        for i, entry in enumerate(self.entries):
            expected = RegionedImage if self.domain == "source" else CatalogImage
            if not isinstance(entry, expected):
                raise ManifestError(
                    f"entry {i}: {self.domain} manifest holds {expected.__name__}, "
                    f"got {type(entry).__name__}")
            if entry.image_id in seen:
                raise ManifestError(f"entry {i}: duplicate image_id {entry.image_id!r}")
            seen.add(entry.image_id)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def n_regions(self) -> int:
        return sum(len(e.regions) for e in self.entries)

    @property
    def flagged(self) -> list:
        """image_ids of source entries with no regions (kept, but never paired)."""
        if self.domain != "source":
            return []
        return [e.image_id for e in self.entries if not e.regions]

    def by_id(self) -> dict:
        return {e.image_id: e for e in self.entries}


def filter_pairable(manifest: DatasetManifest) -> list:
    """Images that can supply a positive pair, i.e. carry at least two regions."""
    if manifest.domain != "source":
        raise ValueError("filter_pairable expects a source-domain manifest")
    return [e for e in manifest.entries if len(e.regions) >= 2]


# ----------------------------------------------------------------------------
# JSON I/O

def _read_rgb(path: Path) -> np.ndarray:
    if not path.is_file():
        raise ImageLoadError(f"image file not found: {path}")
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except OSError as exc:
        raise ImageLoadError(f"cannot read image {path}: {exc}") from exc


def _read_mask(path: Path) -> np.ndarray:
    if not path.is_file():
        raise ImageLoadError(f"mask file not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def _expect(cond, index, msg):
    if not cond:
        raise ManifestError(f"entry {index}: {msg}")


def _parse_region(raw, index: int, k: int, root: Path) -> ItemRegion:
    _expect(isinstance(raw, dict), index, f"region {k} must be an object")
    missing = {"box", "mask_path", "category", "source_kind"} - set(raw)
    _expect(not missing, index, f"region {k} missing keys {sorted(missing)}")
    box = raw["box"]
    _expect(isinstance(box, list) and len(box) == 4
            and all(isinstance(v, int) and not isinstance(v, bool) for v in box),
            index, f"region {k} box must be 4 integers, got {box!r}")
    mask = None
    if raw["mask_path"] is not None:
        _expect(isinstance(raw["mask_path"], str), index, f"region {k} mask_path must be str|null")
        mask = _read_mask(root / raw["mask_path"])
    try:
        return ItemRegion(tuple(box), mask=mask, category=raw["category"],
                          source_kind=raw["source_kind"], mask_path=raw["mask_path"])
    except ValueError as exc:
        raise ManifestError(f"entry {index}: region {k}: {exc}") from exc


def manifest_from_dict(doc: dict, root: Union[str, Path] = ".") -> DatasetManifest:
    root = Path(root)
    if not isinstance(doc, dict):
        raise ManifestError("manifest must be a JSON object")
    for key in ("domain", "split", "entries"):
        if key not in doc:
            raise ManifestError(f"manifest missing key {key!r}")
    domain = doc["domain"]
    if domain not in DOMAINS:
        raise ManifestError(f"domain must be one of {DOMAINS}, got {domain!r}")
    if not isinstance(doc["entries"], list):
        raise ManifestError("entries must be a list")

    entries = []
    implicit = set()
    for i, raw in enumerate(doc["entries"]):
        _expect(isinstance(raw, dict), i, "must be an object")
        for key in ("image_id", "path", "regions"):
            _expect(key in raw, i, f"missing key {key!r}")
        _expect(isinstance(raw["image_id"], str) and raw["image_id"], i,
                "image_id must be a non-empty string")
        _expect(isinstance(raw["path"], str), i, "path must be a string")
        _expect(isinstance(raw["regions"], list), i, "regions must be a list")
        regions = [_parse_region(r, i, k, root) for k, r in enumerate(raw["regions"])]
        pixels = _read_rgb(root / raw["path"])
        try:
            if domain == "source":
                _expect(isinstance(raw.get("person_id"), str) and raw["person_id"], i,
                        "source entries need a non-empty person_id")
                entries.append(RegionedImage(raw["image_id"], pixels, raw["person_id"],
                                             tuple(regions), path=raw["path"]))
            else:
                _expect("person_id" not in raw, i, "target entries must omit person_id")
                _expect(len(regions) <= 1, i, "target entries carry at most one region")
                if not regions:
                    implicit.add(raw["image_id"])
                entries.append(CatalogImage(raw["image_id"], pixels,
                                            regions[0] if regions else None, path=raw["path"]))
        except ValueError as exc:
            if isinstance(exc, ManifestError):
                raise
            raise ManifestError(f"entry {i}: {exc}") from exc
    return DatasetManifest(domain, doc["split"], tuple(entries), root=str(root),
                           _implicit_region=frozenset(implicit))


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    """Parse a manifest JSON file; image and mask paths resolve relative to its directory."""
    path = Path(path)
    if not path.is_file():
        raise ImageLoadError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON: {exc}") from exc
    return manifest_from_dict(doc, root=path.parent)


def _region_dict(region: ItemRegion) -> dict:
    return {"box": list(region.box), "mask_path": region.mask_path,
            "category": region.category, "source_kind": region.source_kind}


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    entries = []
    for e in manifest.entries:
        if e.path is None:
            raise ValueError(f"entry {e.image_id!r} has no path; write its pixels first")
        if isinstance(e, RegionedImage):
            entries.append({"image_id": e.image_id, "path": e.path, "person_id": e.person_id,
                            "regions": [_region_dict(r) for r in e.regions]})
        else:
            regions = [] if e.image_id in manifest._implicit_region else [_region_dict(e.item_region)]
            entries.append({"image_id": e.image_id, "path": e.path, "regions": regions})
    return {"domain": manifest.domain, "split": manifest.split, "entries": entries}


def save_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest_to_dict(manifest), indent=1) + "\n")


def write_png(pixels: np.ndarray, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path, format="PNG", optimize=False)


def item_refs(manifest: DatasetManifest) -> dict:
    """Map evaluation item references to ``(image, region)``.

    Catalog items are referenced by ``image_id``; source regions by ``image_id#k``.
    """
    refs = {}
    for e in manifest.entries:
        if isinstance(e, CatalogImage):
            refs[e.image_id] = (e, e.item_region)
        else:
            for k, region in enumerate(e.regions):
                refs[f"{e.image_id}#{k}"] = (e, region)
    return refs


def group_by_person(images: Sequence[RegionedImage]) -> dict:
    groups: dict = {}
    for img in images:
        groups.setdefault(img.person_id, []).append(img)
    return groups


__all__ = [
    "CatalogImage", "DatasetManifest", "ImageLoadError", "ItemRegion", "ManifestError",
    "RegionedImage", "filter_pairable", "group_by_person", "item_refs", "load_manifest",
    "manifest_from_dict", "manifest_to_dict", "save_manifest", "write_png",
]
