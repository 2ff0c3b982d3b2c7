"""Two-domain slice datasets: preprocessing, augmentation, synthesis and I/O.

On disk a dataset looks like::

    <root>/<domain>/<case_id>/manifest.json
    <root>/<domain>/<case_id>/slice_000.png        16-bit grayscale
    <root>/<domain>/<case_id>/slice_000_mask.png   8-bit palette (source only)
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

DOMAINS = ("source", "target")
_U16 = 65535.0


class InvalidWindowError(ValueError):
    pass


class CropTooLargeError(ValueError):
    pass


class GeneratorConfigError(ValueError):
    pass


class DatasetFormatError(Exception):
    def __init__(self, message, path=None):
        super().__init__(f"{message}: {path}" if path is not None else message)
        self.path = path


class TargetLabelAccess(RuntimeError):
    """Raised when a firewalled target mask is read."""


@dataclass
class LabeledImage:
    pixels: np.ndarray
    mask: np.ndarray | None
    domain_tag: str
    case_id: str
    slice_index: int = 0

    def validate(self, num_classes=None):
        px = self.pixels
        if px.ndim != 2 or not np.all(np.isfinite(px)) or px.min() < 0 or px.max() > 1:
            raise ValueError(f"{self.case_id}/{self.slice_index}: pixels must be a finite 2D grid in [0,1]")
        if self.domain_tag not in DOMAINS:
            raise ValueError(f"unknown domain tag {self.domain_tag!r}")
        if self.mask is not None:
            if self.mask.shape != px.shape:
                raise ValueError(f"{self.case_id}/{self.slice_index}: mask shape {self.mask.shape} != {px.shape}")
            if num_classes is not None and self.mask.size and self.mask.max() >= num_classes:
                raise ValueError(f"{self.case_id}/{self.slice_index}: class id out of range")
        return self


class FirewalledImage:
    """Read-only view of a :class:`LabeledImage` that guards its mask.

    Every access to ``mask`` is counted; with ``strict=True`` it also raises
    :class:`TargetLabelAccess`. Used to prove training never looks at
    target-domain labels.
    """

    def __init__(self, image: LabeledImage, strict: bool = True):
        self._image = image
        self._strict = strict
        self.mask_reads = 0

    @property
    def pixels(self):
        return self._image.pixels

    @property
    def domain_tag(self):
        return self._image.domain_tag

    @property
    def case_id(self):
        return self._image.case_id

    @property
    def slice_index(self):
        return self._image.slice_index

    @property
    def mask(self):
        self.mask_reads += 1
        if self._strict:
            raise TargetLabelAccess(f"target mask read for {self.case_id}/{self.slice_index}")
        return self._image.mask


def firewall(cases, strict=True):
    return [FirewalledImage(c, strict=strict) for c in cases]


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    val: tuple

    def __post_init__(self):
        overlap = set(self.train) & set(self.val)
        if overlap:
            raise ValueError(f"cases in both splits: {sorted(overlap)}")


def split_cases(case_ids: Iterable[str], val_fraction: float, seed: int) -> DatasetSplit:
    """Patient-wise split; every case lands in exactly one side."""
    ids = sorted(set(case_ids))
    if not ids:
        return DatasetSplit((), ())
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    n_val = int(round(val_fraction * len(ids)))
    if 0 < val_fraction and n_val == 0:
        n_val = 1
    n_val = min(n_val, len(ids) - 1) if len(ids) > 1 else 0
    val = tuple(sorted(ids[i] for i in order[:n_val]))
    train = tuple(sorted(ids[i] for i in order[n_val:]))
    return DatasetSplit(train, val)


# --------------------------------------------------------------------------
# preprocessing


def hu_window(raw, lo: int = -200, hi: int = 500) -> np.ndarray:
    if lo >= hi:
        raise InvalidWindowError(f"window lower bound {lo} must be below upper bound {hi}")
    raw = np.asarray(raw, dtype=np.float64)
    return (np.clip(raw, lo, hi) - lo) / (hi - lo)


def center_crop(image, size) -> np.ndarray:
    image = np.asarray(image)
    h, w = size
    H, W = image.shape[:2]
    if h > H or w > W:
        raise CropTooLargeError(f"crop {h}x{w} larger than image {H}x{W}")
    top, left = (H - h) // 2, (W - w) // 2
    return image[top:top + h, left:left + w]


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationPolicy:
    blur_sigma_range: tuple = (0.0, 0.0)
    rotation_degrees_max: float = 0.0
    dropout_fraction: float = 0.0
    strength: str = "weak"

    def __post_init__(self):
        lo, hi = self.blur_sigma_range
        if lo > hi or lo < 0:
            raise ValueError(f"bad blur range {self.blur_sigma_range}")
        if not 0 <= self.dropout_fraction < 1:
            raise ValueError("dropout_fraction must be in [0, 1)")
        if self.strength not in ("weak", "strong"):
            raise ValueError(f"unknown strength {self.strength!r}")


WEAK = AugmentationPolicy(rotation_degrees_max=10.0, strength="weak")
STRONG = AugmentationPolicy(blur_sigma_range=(0.0, 1.0), rotation_degrees_max=10.0,
                            dropout_fraction=0.05, strength="strong")


def augment(image: LabeledImage, policy: AugmentationPolicy, rng_seed: int) -> LabeledImage:
    """Random rotation, Gaussian blur and pixel dropout.

    Draw order from ``default_rng(rng_seed)`` is fixed: rotation angle, blur
    sigma, dropout permutation. Two policies with the same rotation limit and
    seed therefore rotate by the same angle, which keeps weak and strong views
    of one image geometrically aligned.
    """
    rng = np.random.default_rng(rng_seed)
    angle = rng.uniform(-policy.rotation_degrees_max, policy.rotation_degrees_max)
    sigma = rng.uniform(*policy.blur_sigma_range)
    pixels = np.asarray(image.pixels)
    mask = image.mask
    out_dtype = pixels.dtype

    if angle != 0.0:
        pixels = ndimage.rotate(pixels, angle, reshape=False, order=1, mode="constant", cval=0.0)
        if mask is not None:
            mask = ndimage.rotate(mask, angle, reshape=False, order=0, mode="constant", cval=0)
    if sigma > 0.0:
        pixels = ndimage.gaussian_filter(pixels, sigma, mode="nearest")
    n_drop = int(math.floor(policy.dropout_fraction * pixels.size + 1e-9))
    if n_drop:
        flat = np.array(pixels, copy=True).reshape(-1)
        flat[rng.permutation(flat.size)[:n_drop]] = 0.0
        pixels = flat.reshape(pixels.shape)
    pixels = np.clip(pixels, 0.0, 1.0).astype(out_dtype, copy=False)
    return LabeledImage(pixels, mask, image.domain_tag, image.case_id, image.slice_index)


def augment_pixels(pixels, policy, rng_seed):
    """Augment an unlabeled grid (no mask involved)."""
    return augment(LabeledImage(pixels, None, "target", ""), policy, rng_seed).pixels


# --------------------------------------------------------------------------
# synthetic domains


@dataclass(frozen=True)
class DomainStyle:
    gain: float
    bias: float
    texture_frequency: float
    texture_amplitude: float
    noise_sigma: float


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 64
    num_cases: int = 20
    slices_per_case: int = 8
    num_classes: int = 2
    vessel_count: tuple = (2, 4)
    vessel_axes: tuple = (4.0, 14.0)
    lesion_count: tuple = (1, 3)
    lesion_radius: tuple = (2.5, 4.5)
    vessel_level: float = 0.45
    lesion_level: float = 0.85
    source: DomainStyle = field(default_factory=lambda: DomainStyle(
        gain=0.55, bias=0.08, texture_frequency=2.0, texture_amplitude=0.04, noise_sigma=0.02))
    target: DomainStyle = field(default_factory=lambda: DomainStyle(
        gain=0.75, bias=0.28, texture_frequency=5.0, texture_amplitude=0.06, noise_sigma=0.03))

    def validate(self):
        lo, hi = self.lesion_count
        if lo < 0 or hi < lo:
            raise GeneratorConfigError(f"bad lesion_count {self.lesion_count}")
        if self.lesion_radius[0] <= 0 or self.lesion_radius[1] < self.lesion_radius[0]:
            raise GeneratorConfigError(f"bad lesion_radius {self.lesion_radius}")
        if 2 * self.lesion_radius[1] >= self.image_size:
            raise GeneratorConfigError("lesion larger than image")
        if self.image_size < 8 or self.num_cases < 1 or self.slices_per_case < 1:
            raise GeneratorConfigError("image_size >= 8, num_cases >= 1, slices_per_case >= 1 required")
        if self.num_classes != 2:
            raise GeneratorConfigError("the synthetic generator produces background/lesion masks only")
        return self

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("source", "target"):
            if key in d and not isinstance(d[key], DomainStyle):
                d[key] = DomainStyle(**d[key])
        for key in ("vessel_count", "vessel_axes", "lesion_count", "lesion_radius"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise GeneratorConfigError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**d)


def _case_anatomy(cfg: GeneratorConfig, rng):
    """Per-case vessel ellipses and lesions (positions drift slowly over slices)."""
    n = cfg.image_size
    vessels = []
    for _ in range(rng.integers(cfg.vessel_count[0], cfg.vessel_count[1] + 1)):
        vessels.append(dict(
            cy=rng.uniform(0.2, 0.8) * n, cx=rng.uniform(0.2, 0.8) * n,
            a=rng.uniform(*cfg.vessel_axes), b=rng.uniform(*cfg.vessel_axes) * 0.5,
            theta=rng.uniform(0, np.pi), drift=rng.normal(0, 0.6, size=2)))
    return vessels


def _render_slice(cfg, style, vessels, k, rng):
    n = cfg.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    anatomy = np.zeros((n, n))
    vessel_mask = np.zeros((n, n), dtype=bool)
    for v in vessels:
        cy, cx = v["cy"] + k * v["drift"][0], v["cx"] + k * v["drift"][1]
        ct, st = np.cos(v["theta"]), np.sin(v["theta"])
        u = ((yy - cy) * ct + (xx - cx) * st) / v["a"]
        w = (-(yy - cy) * st + (xx - cx) * ct) / v["b"]
        vessel_mask |= (u ** 2 + w ** 2) <= 1.0
    anatomy[vessel_mask] = cfg.vessel_level

    mask = np.zeros((n, n), dtype=np.uint8)
    n_lesions = rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1)
    r_max = cfg.lesion_radius[1]
    inside = np.argwhere(vessel_mask & (yy >= r_max) & (yy < n - r_max) & (xx >= r_max) & (xx < n - r_max))
    for _ in range(n_lesions):
        r = rng.uniform(*cfg.lesion_radius)
        if len(inside):
            cy, cx = inside[rng.integers(len(inside))]
        else:
            cy, cx = rng.uniform(r_max, n - r_max, size=2)
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        mask[blob] = 1
    anatomy[mask == 1] = cfg.lesion_level

    phase = rng.uniform(0, 2 * np.pi, size=2)
    f = style.texture_frequency * 2 * np.pi / n
    texture = style.texture_amplitude * np.sin(f * yy + phase[0]) * np.cos(f * xx + phase[1])
    img = style.bias + style.gain * anatomy + texture + rng.normal(0, style.noise_sigma, size=(n, n))
    img = np.clip(img, 0.0, 1.0)

    if mask.any():
        # detectability by construction: each lesion pixel beats the mean of
        # the non-lesion pixels in its 7x7 neighbourhood
        bg = (mask == 0).astype(np.float64)
        win = 7
        bg_sum = ndimage.uniform_filter(img * bg, win, mode="constant")
        bg_cnt = ndimage.uniform_filter(bg, win, mode="constant")
        local_bg = np.where(bg_cnt > 0, bg_sum / np.maximum(bg_cnt, 1e-12), 0.0)
        lesion = mask == 1
        img[lesion] = np.minimum(1.0, np.maximum(img[lesion], local_bg[lesion] + 0.05))
    img = np.round(img * _U16) / _U16
    return img.astype(np.float32), mask


def local_background_mean(pixels, mask, window=7):
    bg = (np.asarray(mask) == 0).astype(np.float64)
    img = np.asarray(pixels, dtype=np.float64)
    s = ndimage.uniform_filter(img * bg, window, mode="constant")
    c = ndimage.uniform_filter(bg, window, mode="constant")
    return np.where(c > 0, s / np.maximum(c, 1e-12), 0.0)


def gen_synthetic_domains(config: GeneratorConfig, seed: int):
    """Generate (source_cases, target_cases) sharing one anatomy model.

    Both domains carry ground-truth masks; target masks exist for final
    evaluation only.
    """
    config.validate()
    out = {}
    for d_index, domain in enumerate(DOMAINS):
        style = getattr(config, domain)
        rng = np.random.default_rng([seed, d_index])
        cases = []
        for ci in range(config.num_cases):
            vessels = _case_anatomy(config, rng)
            case_id = f"{domain[:3]}_{ci:03d}"
            for k in range(config.slices_per_case):
                img, mask = _render_slice(config, style, vessels, k, rng)
                cases.append(LabeledImage(img, mask, domain, case_id, k))
        out[domain] = cases
    return out["source"], out["target"]


# --------------------------------------------------------------------------
# disk format

_PALETTE = [0, 0, 0, 255, 0, 0, 0, 255, 0, 0, 0, 255] + [255, 255, 255] * 252


def _write_png16(path, pixels):
    arr = np.round(np.asarray(pixels, dtype=np.float64) * _U16).astype(np.uint16)
    Image.fromarray(arr).save(path)


def _read_png16(path):
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.array(im)
    except Exception as exc:
        raise DatasetFormatError(f"unreadable image ({exc.__class__.__name__})", path) from exc
    if arr.ndim != 2:
        raise DatasetFormatError("expected a single-channel image", path)
    if arr.dtype == np.uint8:
        scale = 255.0
    else:
        scale = _U16
    return (arr.astype(np.float64) / scale).astype(np.float32)


def _write_mask(path, mask):
    im = Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="P")
    im.putpalette(_PALETTE)
    im.save(path)


def _read_mask(path):
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("P", "L"):
                raise DatasetFormatError(f"mask must be 8-bit indexed, got mode {im.mode}", path)
            return np.array(im, dtype=np.uint8)
    except DatasetFormatError:
        raise
    except Exception as exc:
        raise DatasetFormatError(f"unreadable mask ({exc.__class__.__name__})", path) from exc


def save_dataset(cases: Sequence[LabeledImage], root) -> None:
    root = Path(root)
    by_case = {}
    for c in cases:
        by_case.setdefault((c.domain_tag, c.case_id), []).append(c)
    for (domain, case_id), items in sorted(by_case.items()):
        items = sorted(items, key=lambda c: c.slice_index)
        case_dir = root / domain / case_id
        case_dir.mkdir(parents=True, exist_ok=True)
        slices = []
        for c in items:
            name = f"slice_{c.slice_index:03d}"
            _write_png16(case_dir / f"{name}.png", c.pixels)
            if c.mask is not None:
                _write_mask(case_dir / f"{name}_mask.png", c.mask)
            slices.append({"index": c.slice_index, "image": f"{name}.png",
                           "mask": f"{name}_mask.png" if c.mask is not None else None})
        manifest = {"case_id": case_id, "domain": domain, "slices": slices}
        (case_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(root, domain: str | None = None, masks: bool = True) -> list[LabeledImage]:
    """Load every case under ``root`` (or only ``root/<domain>``).

    ``root`` may also point directly at a domain directory. With
    ``masks=False`` no mask file is opened and every mask is None.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetFormatError("dataset root is not a directory", root)
    if (root.name in DOMAINS) and not any((root / d).is_dir() for d in DOMAINS):
        domain_dirs = [root]
    else:
        names = [domain] if domain else list(DOMAINS)
        domain_dirs = [root / d for d in names if (root / d).is_dir()]
    cases = []
    for ddir in domain_dirs:
        for case_dir in sorted(p for p in ddir.iterdir() if p.is_dir()):
            mpath = case_dir / "manifest.json"
            try:
                manifest = json.loads(mpath.read_text())
            except FileNotFoundError as exc:
                raise DatasetFormatError("missing manifest.json", mpath) from exc
            except json.JSONDecodeError as exc:
                raise DatasetFormatError("malformed manifest.json", mpath) from exc
            tag = manifest.get("domain", ddir.name)
            if tag not in DOMAINS:
                raise DatasetFormatError(f"unknown domain {tag!r}", mpath)
            for s in manifest["slices"]:
                img_path = case_dir / s["image"]
                pixels = _read_png16(img_path)
                mask_path = case_dir / (s.get("mask") or f"{Path(s['image']).stem}_mask.png")
                if not masks:
                    mask = None
                elif mask_path.exists():
                    mask = _read_mask(mask_path)
                    if mask.shape != pixels.shape:
                        raise DatasetFormatError("mask shape differs from image", mask_path)
                elif tag == "source":
                    raise DatasetFormatError("missing mask for source image", mask_path)
                else:
                    mask = None
                cases.append(LabeledImage(pixels, mask, tag, manifest["case_id"], int(s["index"])))
    return cases


def read_image(path) -> np.ndarray:
    """Single-channel 8- or 16-bit PNG as float32 in [0, 1]."""
    return _read_png16(path)


def write_image(path, pixels) -> None:
    _write_png16(path, np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0))
