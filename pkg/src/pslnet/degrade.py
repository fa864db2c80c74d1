"""Degradation synthesis: watermark blending, Gaussian noise, self-paired samples, corpora.

Images are float64 numpy arrays of shape (H, W, 3) with values in [0, 1].
Noise sigmas are quoted on the 0-255 scale and divided by 255 internally.
Noisy images are NOT clipped during synthesis, so ``input == denoise_target + noise``
holds exactly; clipping happens only when a file is written.

Every operation here is a pure function of its inputs and an explicit seed.
Per-sample randomness is derived from (seed, *path) through a counter-based
generator, so corpus generation can be fanned out without changing results.
"""

from __future__ import annotations

import hashlib
import json
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

MANIFEST_VERSION = 1

_MASK64 = (1 << 64) - 1


class PlacementError(ValueError):
    """Watermark placement falls outside the host image."""


class CoverageError(ValueError):
    """Scaled watermark area exceeds the configured coverage budget."""


class GenerationError(RuntimeError):
    """No valid degradation draw found within the attempt budget."""


class CleanAccessError(RuntimeError):
    """A guarded code path tried to read the evaluation-only clean image."""


class CorpusReadError(OSError):
    """One or more corpus input files could not be decoded."""

    def __init__(self, paths):
        self.paths = [str(p) for p in paths]
        super().__init__("unreadable input files: " + ", ".join(self.paths))


# ---------------------------------------------------------------------------
# seeding

def _word(value) -> int:
    if isinstance(value, str):
        return int.from_bytes(hashlib.sha256(value.encode("utf-8")).digest()[:8], "big")
    return int(value) & _MASK64


def derive_seed(seed: int, *path) -> int:
    """Derive a 64-bit child seed from (seed, *path); stable across runs."""
    h = hashlib.sha256()
    for w in (_word(seed), *map(_word, path)):
        h.update(w.to_bytes(8, "big"))
    return int.from_bytes(h.digest()[:8], "big")


def derive_rng(seed: int, *path) -> np.random.Generator:
    """Counter-based generator keyed by (seed, *path)."""
    words = [_word(seed), *map(_word, path)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


# ---------------------------------------------------------------------------
# types

@dataclass(frozen=True)
class WatermarkAsset:
    """RGBA watermark: rgb in [0,1], alpha mask in [0,1] (zero outside the glyph)."""

    rgb: np.ndarray
    alpha: np.ndarray
    wm_id: str


@dataclass(frozen=True)
class DegradationParams:
    """One watermark/noise draw. ``sigma`` is on the 0-255 scale."""

    wm_id: str
    transparency: float
    scale: float
    position: tuple[int, int]
    sigma: float = 0.0
    coverage_max: float = 0.4
    seed: int = 0

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["position"] = list(self.position)
        return d


_CLEAN_GUARD_DEPTH = 0


@contextmanager
def forbid_clean_access():
    """While active, any read of TrainingSample.clean raises CleanAccessError.

    The training loop runs under this guard so the self-supervision contract
    (targets are degraded references, never the true clean image) is enforced
    at runtime, not just by convention.
    """
    global _CLEAN_GUARD_DEPTH
    _CLEAN_GUARD_DEPTH += 1
    try:
        yield
    finally:
        _CLEAN_GUARD_DEPTH -= 1


@dataclass
class TrainingSample:
    """Self-supervised triple: noisy watermarked input and its two degraded targets.

    ``input = denoise_target + noise`` exactly (no clipping). The true clean
    image rides along for evaluation only, behind the ``clean`` guard.
    """

    input: np.ndarray
    denoise_target: np.ndarray
    removal_target: np.ndarray
    params_input: DegradationParams
    params_target: DegradationParams
    _clean: np.ndarray | None = None

    @property
    def clean(self) -> np.ndarray | None:
        if _CLEAN_GUARD_DEPTH > 0:
            raise CleanAccessError(
                "clean image read inside a training context; "
                "training may only consume degraded targets"
            )
        return self._clean


# ---------------------------------------------------------------------------
# image file IO

def load_image(path) -> np.ndarray:
    """Load an 8-bit image file as float64 RGB in [0, 1]."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(path, img: np.ndarray) -> None:
    """Write an image as 8-bit PNG; values are round(clip(x, 0, 1) * 255)."""
    arr = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_watermark(path, wm_id: str | None = None) -> WatermarkAsset:
    """Load an RGBA PNG as a WatermarkAsset (alpha defaults to opaque if absent)."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
    return WatermarkAsset(rgb=arr[..., :3], alpha=arr[..., 3],
                          wm_id=wm_id or Path(path).stem)


def save_watermark(path, wm: WatermarkAsset) -> None:
    rgba = np.concatenate([wm.rgb, wm.alpha[..., None]], axis=-1)
    arr = np.rint(np.clip(rgba, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(arr, mode="RGBA").save(path, format="PNG")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# geometry helpers

def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers; accepts (h, w) or (h, w, c)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be positive")
    h, w = arr.shape[:2]
    if (out_h, out_w) == (h, w):
        return arr.copy()
    rows = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    cols = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0).reshape(-1, 1)
    fc = (cols - c0).reshape(1, -1)
    if arr.ndim == 3:
        fr = fr[..., None]
        fc = fc[..., None]
    top = arr[r0][:, c0] * (1 - fc) + arr[r0][:, c1] * fc
    bot = arr[r1][:, c0] * (1 - fc) + arr[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def scaled_watermark(wm: WatermarkAsset, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Return (rgb, alpha) resized by ``scale`` (each dim at least 1 pixel)."""
    h, w = wm.alpha.shape
    sh = max(1, int(round(h * scale)))
    sw = max(1, int(round(w * scale)))
    if (sh, sw) == (h, w):
        return wm.rgb.copy(), wm.alpha.copy()
    return resize_bilinear(wm.rgb, sh, sw), resize_bilinear(wm.alpha, sh, sw)


# ---------------------------------------------------------------------------
# core degradations

def blend_watermark(clean: np.ndarray, wm: WatermarkAsset,
                    params: DegradationParams) -> np.ndarray:
    """Alpha-blend a scaled watermark onto a clean image.

    At each pixel the output is ``d * W + (1 - d) * clean`` where
    ``d = transparency * alpha_mask``; pixels outside the placed glyph are
    returned bit-identical to the clean image.
    """
    if not 0.0 <= params.transparency <= 1.0:
        raise ValueError(f"transparency must be in [0, 1], got {params.transparency}")
    H, W = clean.shape[:2]
    rgb_s, alpha_s = scaled_watermark(wm, params.scale)
    sh, sw = alpha_s.shape
    coverage = (sh * sw) / (H * W)
    if coverage > params.coverage_max + 1e-12:
        raise CoverageError(
            f"watermark covers {coverage:.3f} of the image, budget {params.coverage_max}")
    r, c = params.position
    if r < 0 or c < 0 or r + sh > H or c + sw > W:
        raise PlacementError(
            f"watermark {sh}x{sw} at ({r}, {c}) does not fit inside {H}x{W}")
    d = params.transparency * alpha_s
    out = clean.copy()
    region = clean[r:r + sh, c:c + sw]
    out[r:r + sh, c:c + sw] = d[..., None] * rgb_s + (1.0 - d)[..., None] * region
    return out


def add_gaussian_noise(img: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Add i.i.d. Gaussian noise with std ``sigma/255``; output is not clipped."""
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if sigma == 0:
        return img.copy()
    rng = derive_rng(seed, "gauss")
    return img + rng.normal(0.0, sigma / 255.0, size=img.shape)


def draw_degradation(rng: np.random.Generator, image_shape, pool,
                     transparencies=(0.3, 0.5, 0.7, 1.0), blind_transparency=False,
                     scale_range=(0.5, 1.0), coverage_max=0.4,
                     max_attempts=100) -> tuple[WatermarkAsset, DegradationParams]:
    """Draw (watermark, params) by rejection sampling over the placement constraints."""
    H, W = image_shape[:2]
    for _ in range(max_attempts):
        wm = pool[int(rng.integers(len(pool)))]
        if blind_transparency:
            t = float(rng.uniform(0.3, 1.0))
        else:
            t = float(transparencies[int(rng.integers(len(transparencies)))])
        s = float(rng.uniform(scale_range[0], scale_range[1]))
        h, w = wm.alpha.shape
        sh = max(1, int(round(h * s)))
        sw = max(1, int(round(w * s)))
        if sh > H or sw > W or (sh * sw) / (H * W) > coverage_max:
            continue
        r = int(rng.integers(0, H - sh + 1))
        c = int(rng.integers(0, W - sw + 1))
        params = DegradationParams(wm_id=wm.wm_id, transparency=t, scale=s,
                                   position=(r, c), coverage_max=coverage_max)
        return wm, params
    raise GenerationError(
        f"no valid watermark placement found in {max_attempts} attempts")


def make_pair(clean: np.ndarray, watermark_pool, sigma_set, seed: int, *,
              transparencies=(0.3, 0.5, 0.7, 1.0), blind_transparency=False,
              scale_range=(0.5, 1.0), coverage_max=0.4) -> TrainingSample:
    """Build one self-supervised training sample from a clean image.

    Two independent watermark draws from the same distribution give the
    denoising target and the removal target; Gaussian noise (sigma drawn from
    ``sigma_set``) on top of the first gives the network input. The clean
    image never appears in the input/target pair, only as evaluation metadata.
    """
    if not len(watermark_pool):
        raise ValueError("watermark_pool must be non-empty")
    if not len(sigma_set):
        raise ValueError("sigma_set must be non-empty")
    draw_kw = dict(transparencies=transparencies, blind_transparency=blind_transparency,
                   scale_range=scale_range, coverage_max=coverage_max)
    wm_in, params_in = draw_degradation(derive_rng(seed, "input"), clean.shape,
                                        watermark_pool, **draw_kw)
    wm_tgt, params_tgt = draw_degradation(derive_rng(seed, "target"), clean.shape,
                                          watermark_pool, **draw_kw)
    sigma = float(sigma_set[int(derive_rng(seed, "sigma").integers(len(sigma_set)))])
    params_in = replace(params_in, sigma=sigma, seed=seed)
    params_tgt = replace(params_tgt, seed=seed)

    denoise_target = blend_watermark(clean, wm_in, params_in)
    removal_target = blend_watermark(clean, wm_tgt, params_tgt)
    noisy = add_gaussian_noise(denoise_target, sigma, derive_seed(seed, "noise"))
    return TrainingSample(input=noisy, denoise_target=denoise_target,
                          removal_target=removal_target, params_input=params_in,
                          params_target=params_tgt, _clean=clean)


def extract_patches(sample: TrainingSample, patch: int, stride: int) -> list[TrainingSample]:
    """Aligned grid crops of all images in a sample.

    Yields floor((H-patch)/stride + 1) * floor((W-patch)/stride + 1) patches.
    """
    H, W = sample.input.shape[:2]
    if patch < 1 or patch > min(H, W):
        raise ValueError(f"patch size {patch} invalid for {H}x{W} image")
    if stride < 1:
        raise ValueError("stride must be positive")
    clean = sample._clean
    out = []
    for r in range(0, H - patch + 1, stride):
        for c in range(0, W - patch + 1, stride):
            win = (slice(r, r + patch), slice(c, c + patch))
            out.append(TrainingSample(
                input=sample.input[win].copy(),
                denoise_target=sample.denoise_target[win].copy(),
                removal_target=sample.removal_target[win].copy(),
                params_input=sample.params_input,
                params_target=sample.params_target,
                _clean=None if clean is None else clean[win].copy(),
            ))
    return out


# ---------------------------------------------------------------------------
# procedural test assets (CI substitute for real photos and logo files)

def _dist_to_segment(yy, xx, p0, p1):
    vy, vx = p1[0] - p0[0], p1[1] - p0[1]
    norm2 = max(vy * vy + vx * vx, 1e-12)
    t = np.clip(((yy - p0[0]) * vy + (xx - p0[1]) * vx) / norm2, 0.0, 1.0)
    return np.sqrt((yy - (p0[0] + t * vy)) ** 2 + (xx - (p0[1] + t * vx)) ** 2)


def generate_clean_image(rng: np.random.Generator, size: int = 96) -> np.ndarray:
    """Procedural clean image: smooth gradients, soft shapes, mild texture."""
    lin = np.linspace(0.0, 1.0, size)
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    img = np.empty((size, size, 3))
    for ch in range(3):
        gx, gy = rng.uniform(-0.35, 0.35, size=2)
        img[..., ch] = rng.uniform(0.25, 0.75) + gx * xx + gy * yy
    cy, cx = rng.uniform(0.2, 0.8, size=2)
    width = rng.uniform(0.15, 0.4)
    bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width * width))
    img += rng.uniform(-0.25, 0.25, size=3) * bump[..., None]
    fy, fx = rng.uniform(2.0, 9.0, size=2)
    phase = rng.uniform(0.0, 2 * np.pi)
    img += rng.uniform(0.01, 0.05) * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)[..., None]
    for _ in range(int(rng.integers(2, 5))):
        color = rng.uniform(0.0, 1.0, size=3)
        opacity = rng.uniform(0.4, 0.9)
        if rng.random() < 0.5:
            sy, sx = rng.uniform(0.15, 0.75, size=2)
            radius = rng.uniform(0.08, 0.22)
            dist = np.sqrt((yy - sy) ** 2 + (xx - sx) ** 2)
            mask = 1.0 / (1.0 + np.exp((dist - radius) / 0.01))
        else:
            y0, x0 = rng.uniform(0.1, 0.6, size=2)
            hh, ww = rng.uniform(0.1, 0.3, size=2)
            inside_y = 1.0 / (1.0 + np.exp((np.abs(yy - y0 - hh / 2) - hh / 2) / 0.01))
            inside_x = 1.0 / (1.0 + np.exp((np.abs(xx - x0 - ww / 2) - ww / 2) / 0.01))
            mask = inside_y * inside_x
        m = (opacity * mask)[..., None]
        img = img * (1.0 - m) + m * color
    return np.clip(img, 0.0, 1.0)


def generate_watermark(rng: np.random.Generator, size: int = 40,
                       wm_id: str = "wm") -> WatermarkAsset:
    """Procedural watermark: text-like strokes or geometric outlines, soft alpha."""
    yy, xx = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float),
                         indexing="ij")
    alpha = np.zeros((size, size))
    margin = max(4, size // 8)
    lo, hi = float(margin), float(size - 1 - margin)
    for _ in range(int(rng.integers(2, 6))):
        p0 = rng.uniform(lo, hi, size=2)
        p1 = np.clip(p0 + rng.uniform(-size / 2.5, size / 2.5, size=2), lo, hi)
        width = rng.uniform(0.8, 1.8)
        alpha = np.maximum(alpha, np.exp(-(_dist_to_segment(yy, xx, p0, p1) / width) ** 2))
    if rng.random() < 0.7:
        cy, cx = size / 2 + rng.uniform(-size / 10, size / 10, size=2)
        max_r = min(cy, cx, size - 1 - cy, size - 1 - cx) - margin
        radius = rng.uniform(0.5, 0.95) * max(max_r, 2.0)
        ring = np.abs(np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) - radius)
        alpha = np.maximum(alpha, np.exp(-(ring / rng.uniform(0.8, 1.5)) ** 2))
    alpha[alpha < 0.05] = 0.0
    alpha[:2, :] = alpha[-2:, :] = 0.0
    alpha[:, :2] = alpha[:, -2:] = 0.0
    if rng.random() < 0.5:
        color = rng.uniform(0.8, 1.0, size=3)  # light logo
    else:
        color = rng.uniform(0.0, 1.0, size=3)
    rgb = np.broadcast_to(color, (size, size, 3)).copy()
    return WatermarkAsset(rgb=rgb, alpha=np.clip(alpha, 0.0, 1.0), wm_id=wm_id)


def generate_test_assets(n_images: int, n_watermarks: int, seed: int, *,
                         image_size: int = 96, wm_size: int = 40):
    """Deterministic procedural clean images and watermark glyphs."""
    if n_images < 1 or n_watermarks < 1:
        raise ValueError("need at least one image and one watermark")
    images = [generate_clean_image(derive_rng(seed, "clean", i), image_size)
              for i in range(n_images)]
    marks = [generate_watermark(derive_rng(seed, "wm", i), wm_size, wm_id=f"wm{i:02d}")
             for i in range(n_watermarks)]
    return images, marks


# ---------------------------------------------------------------------------
# corpus construction

@dataclass(frozen=True)
class CorpusConfig:
    """Generation knobs for a training/evaluation corpus."""

    patch_size: int = 64
    stride: int = 64
    sigma_set: tuple[float, ...] = (0.0, 25.0, 50.0)
    transparencies: tuple[float, ...] = (0.3, 0.5, 0.7, 1.0)
    blind_transparency: bool = False
    scale_range: tuple[float, float] = (0.5, 1.0)
    coverage_max: float = 0.4
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "stride": self.stride,
            "sigma_set": list(self.sigma_set),
            "transparencies": list(self.transparencies),
            "blind_transparency": self.blind_transparency,
            "scale_range": list(self.scale_range),
            "coverage_max": self.coverage_max,
            "seed": self.seed,
        }

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class ManifestEntry:
    input: str
    denoise_target: str
    removal_target: str
    clean: str
    sigma: float
    wm_id_input: str
    wm_id_target: str
    transparency_input: float
    transparency_target: float
    position_input: tuple[int, int]
    position_target: tuple[int, int]
    scale_input: float
    scale_target: float

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["position_input"] = list(self.position_input)
        d["position_target"] = list(self.position_target)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        d = dict(d)
        d["position_input"] = tuple(d["position_input"])
        d["position_target"] = tuple(d["position_target"])
        return cls(**d)


@dataclass
class CorpusManifest:
    """Index of a generated corpus; all entry paths are relative to its location."""

    version: int
    seed: int
    patch_size: int
    stride: int
    sigma_set: list
    transparency_mode: str
    transparencies: list
    config_digest: str
    entries: list
    root: Path | None = None

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "patch_size": self.patch_size,
            "stride": self.stride,
            "sigma_set": list(self.sigma_set),
            "transparency_mode": self.transparency_mode,
            "transparencies": list(self.transparencies),
            "config_digest": self.config_digest,
            "entries": [e.to_dict() for e in self.entries],
        }

    def save(self, path) -> Path:
        path = Path(path)
        payload = json.dumps(self.to_dict(), indent=1, sort_keys=True)
        path.write_text(payload, encoding="utf-8")
        self.root = path.parent
        return path

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        path = Path(path)
        d = json.loads(path.read_text(encoding="utf-8"))
        entries = [ManifestEntry.from_dict(e) for e in d["entries"]]
        return cls(version=d["version"], seed=d["seed"], patch_size=d["patch_size"],
                   stride=d["stride"], sigma_set=d["sigma_set"],
                   transparency_mode=d["transparency_mode"],
                   transparencies=d["transparencies"],
                   config_digest=d["config_digest"], entries=entries,
                   root=path.parent)

    def resolve(self, rel: str) -> Path:
        if self.root is None:
            raise ValueError("manifest has no root directory; load or save it first")
        return self.root / rel


def _load_inputs(paths, loader):
    items, bad = [], []
    for p in paths:
        try:
            items.append(loader(p))
        except Exception:
            bad.append(p)
    if bad:
        raise CorpusReadError(bad)
    return items


def build_corpus(clean_dir, wm_dir, config: CorpusConfig, out_dir) -> CorpusManifest:
    """Generate a full corpus of training samples under ``out_dir``.

    Writes each patch quadruple as 8-bit PNGs plus a JSON manifest; the result
    is a pure function of the input files and config, so rebuilding with the
    same seed reproduces the manifest byte for byte.
    """
    clean_paths = sorted(p for p in Path(clean_dir).iterdir()
                         if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    wm_paths = sorted(p for p in Path(wm_dir).iterdir()
                      if p.suffix.lower() == ".png")
    if not clean_paths:
        raise ValueError(f"no decodable images in {clean_dir}")
    if not wm_paths:
        raise ValueError(f"no watermark assets in {wm_dir}")
    cleans = _load_inputs(clean_paths, load_image)
    pool = _load_inputs(wm_paths, load_watermark)

    out_dir = Path(out_dir)
    samples_dir = out_dir / "samples"
    samples_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    for i, clean in enumerate(cleans):
        sample_seed = derive_seed(config.seed, "sample", i)
        sample = make_pair(clean, pool, config.sigma_set, sample_seed,
                           transparencies=config.transparencies,
                           blind_transparency=config.blind_transparency,
                           scale_range=config.scale_range,
                           coverage_max=config.coverage_max)
        for j, patch in enumerate(extract_patches(sample, config.patch_size,
                                                  config.stride)):
            stem = f"img{i:04d}_p{j:03d}"
            names = {
                "input": f"samples/{stem}_input.png",
                "denoise_target": f"samples/{stem}_denoise.png",
                "removal_target": f"samples/{stem}_removal.png",
                "clean": f"samples/{stem}_clean.png",
            }
            save_image(out_dir / names["input"], patch.input)
            save_image(out_dir / names["denoise_target"], patch.denoise_target)
            save_image(out_dir / names["removal_target"], patch.removal_target)
            save_image(out_dir / names["clean"], patch._clean)
            pi, pt = patch.params_input, patch.params_target
            entries.append(ManifestEntry(
                input=names["input"], denoise_target=names["denoise_target"],
                removal_target=names["removal_target"], clean=names["clean"],
                sigma=pi.sigma, wm_id_input=pi.wm_id, wm_id_target=pt.wm_id,
                transparency_input=pi.transparency, transparency_target=pt.transparency,
                position_input=pi.position, position_target=pt.position,
                scale_input=pi.scale, scale_target=pt.scale))

    manifest = CorpusManifest(
        version=MANIFEST_VERSION, seed=config.seed, patch_size=config.patch_size,
        stride=config.stride, sigma_set=list(config.sigma_set),
        transparency_mode="blind" if config.blind_transparency else "fixed",
        transparencies=list(config.transparencies),
        config_digest=config.digest(), entries=entries)
    manifest.save(out_dir / "manifest.json")
    return manifest
