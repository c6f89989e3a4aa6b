"""Virtual device environments: seeded, ordered perturbation pipelines.

An environment stands in for one device's sensing-and-processing stack.
Applying the same environment to the same image always produces the same
bits: randomness is derived per image from (environment seed, image id)
through a counter-based generator, so results are independent of the
order in which images are processed.

Every transform maps a canonical [0, 1] float RGB tensor to another one,
preserving dimensions (except the explicit resize) and value range.
Identity parameterizations short-circuit, so they are exact identities.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import dataset
from .seeding import derive_rng

# ---------------------------------------------------------------------------
# transform variants


@dataclass(frozen=True)
class GaussianNoise:
    """Uncorrelated per-pixel Gaussian noise with variance sigma2."""

    sigma2: float

    def __post_init__(self):
        if self.sigma2 < 0:
            raise ValueError(f"sigma2 must be >= 0, got {self.sigma2}")


@dataclass(frozen=True)
class Distort:
    """Photometric distortion: hue, saturation, contrast, brightness, JPEG.

    Stages apply in exactly that order.  All-default parameters are an
    exact identity.
    """

    hue_delta: float = 0.0  # degrees in [-180, 180]
    contrast: float = 1.0
    brightness: float = 0.0  # offset in [-1, 1]
    saturation: float = 1.0
    jpeg_quality: int | None = None

    def __post_init__(self):
        if not -180.0 <= self.hue_delta <= 180.0:
            raise ValueError(f"hue_delta must be in [-180, 180], got {self.hue_delta}")
        if self.contrast <= 0:
            raise ValueError(f"contrast must be > 0, got {self.contrast}")
        if not -1.0 <= self.brightness <= 1.0:
            raise ValueError(f"brightness must be in [-1, 1], got {self.brightness}")
        if self.saturation < 0:
            raise ValueError(f"saturation must be >= 0, got {self.saturation}")
        if self.jpeg_quality is not None and not 1 <= self.jpeg_quality <= 100:
            raise ValueError(f"jpeg_quality must be in 1..100, got {self.jpeg_quality}")


@dataclass(frozen=True)
class JpegRoundtrip:
    quality: int

    def __post_init__(self):
        if not 1 <= self.quality <= 100:
            raise ValueError(f"quality must be in 1..100, got {self.quality}")


@dataclass(frozen=True)
class PngRoundtrip:
    pass


@dataclass(frozen=True)
class IspConfig:
    """Parameters of the staged software ISP.

    All-default values act as the identity (after demosaic).
    """

    wb_gains: tuple[float, float, float] = (1.0, 1.0, 1.0)
    ccm: tuple[tuple[float, float, float], ...] = (
        (1.0, 0.0, 0.0),
        (0.0, 1.0, 0.0),
        (0.0, 0.0, 1.0),
    )
    gamma: float = 1.0
    denoise_sigma: float = 0.0  # Gaussian blur std-dev, pixels
    sharpen_amount: float = 0.0

    def __post_init__(self):
        if len(self.wb_gains) != 3 or any(g <= 0 for g in self.wb_gains):
            raise ValueError(f"wb_gains must be 3 positive reals, got {self.wb_gains}")
        if len(self.ccm) != 3 or any(len(row) != 3 for row in self.ccm):
            raise ValueError("ccm must be a 3x3 matrix")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.denoise_sigma < 0 or self.sharpen_amount < 0:
            raise ValueError("denoise_sigma and sharpen_amount must be >= 0")


@dataclass(frozen=True)
class IspPipeline:
    """Mosaic the input to synthetic RGGB raw, then run the software ISP."""

    config: IspConfig


@dataclass(frozen=True)
class Resize:
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"resize target must be positive, got {self.height}x{self.width}")


Transform = GaussianNoise | Distort | JpegRoundtrip | PngRoundtrip | IspPipeline | Resize


@dataclass(frozen=True)
class EnvironmentSpec:
    """A named virtual device: ordered transforms plus a 64-bit seed."""

    env_id: str
    transforms: tuple[Transform, ...]
    seed: int

    def __post_init__(self):
        if not self.env_id:
            raise ValueError("env_id must be non-empty")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")


@dataclass(frozen=True)
class BayerImage:
    """Single-channel RGGB sensor plane with values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ValueError(f"Bayer plane must be 2-D, got shape {v.shape}")
        if v.shape[0] % 2 or v.shape[1] % 2:
            raise ValueError(f"Bayer dimensions must be even, got {v.shape}")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("Bayer values outside [0, 1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    pattern = "RGGB"


# ---------------------------------------------------------------------------
# HSV helpers (float, vectorized)


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    c = maxc - minc
    safe_max = np.where(maxc > 0, maxc, 1.0)
    s = np.where(maxc > 0, c / safe_max, 0.0)
    safe_c = np.where(c > 0, c, 1.0)
    rc = (maxc - r) / safe_c
    gc = (maxc - g) / safe_c
    bc = (maxc - b) / safe_c
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = (h / 6.0) % 1.0
    h = np.where(c > 0, h, 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    i = i.astype(np.int64) % 6
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.select([i == 0, i == 1, i == 2, i == 3, i == 4, i == 5], [v, q, p, p, t, v])
    g = np.select([i == 0, i == 1, i == 2, i == 3, i == 4, i == 5], [t, v, v, q, p, p])
    b = np.select([i == 0, i == 1, i == 2, i == 3, i == 4, i == 5], [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


# ---------------------------------------------------------------------------
# elementary transforms


def apply_gaussian_noise(img: np.ndarray, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    """Add N(0, sigma2) noise per pixel and clamp to [0, 1]."""
    if sigma2 < 0:
        raise ValueError(f"sigma2 must be >= 0, got {sigma2}")
    noise = gaussian_noise_field(img.shape, sigma2, rng)
    return np.clip(img + noise, 0.0, 1.0)


def gaussian_noise_field(shape, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    """The raw (unclamped) noise field used by ``apply_gaussian_noise``."""
    return rng.normal(0.0, np.sqrt(sigma2), size=shape)


def apply_distortion(img: np.ndarray, params: Distort) -> np.ndarray:
    """Apply hue/saturation/contrast/brightness/JPEG in fixed order.

    Stages with identity parameters are skipped, so an all-identity
    ``Distort`` returns the input unchanged, bit for bit.
    """
    out = img
    if params.hue_delta != 0.0 or params.saturation != 1.0:
        hsv = _rgb_to_hsv(np.clip(out, 0.0, 1.0))
        hsv[..., 0] = (hsv[..., 0] + params.hue_delta / 360.0) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * params.saturation, 0.0, 1.0)
        out = _hsv_to_rgb(hsv)
    if params.contrast != 1.0:
        mean = out.mean(axis=(0, 1), keepdims=True)
        out = mean + (out - mean) * params.contrast
    if params.brightness != 0.0:
        out = out + params.brightness
    if out is not img:
        out = np.clip(out, 0.0, 1.0)
    if params.jpeg_quality is not None:
        out = jpeg_roundtrip(out, params.jpeg_quality)
    return out


@dataclass(frozen=True)
class DistortionRanges:
    """Sampling ranges for distortion noise; defaults are mild, ISP-plausible."""

    hue_delta: tuple[float, float] = (-18.0, 18.0)
    contrast: tuple[float, float] = (0.8, 1.25)
    brightness: tuple[float, float] = (-0.125, 0.125)
    saturation: tuple[float, float] = (0.8, 1.25)
    jpeg_quality: tuple[int, int] | None = (50, 100)  # inclusive


def sample_distort(ranges: DistortionRanges, rng: np.random.Generator) -> Distort:
    """Draw one random ``Distort`` from the ranges (fields in fixed order)."""
    hue = rng.uniform(*ranges.hue_delta)
    saturation = rng.uniform(*ranges.saturation)
    contrast = rng.uniform(*ranges.contrast)
    brightness = rng.uniform(*ranges.brightness)
    quality = None
    if ranges.jpeg_quality is not None:
        quality = int(rng.integers(ranges.jpeg_quality[0], ranges.jpeg_quality[1] + 1))
    return Distort(
        hue_delta=hue,
        contrast=contrast,
        brightness=brightness,
        saturation=saturation,
        jpeg_quality=quality,
    )


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    """Encode to baseline JPEG at ``quality`` and decode back."""
    return dataset.decode_image(dataset.encode_image(img, "jpeg", quality=quality))


def png_roundtrip(img: np.ndarray) -> np.ndarray:
    """Lossless 8-bit round trip; equals the quantized input."""
    return dataset.decode_image(dataset.encode_image(img, "png"))


def bilinear_resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resample with half-pixel centers; identity at equal size."""
    in_h, in_w = img.shape[:2]
    if (in_h, in_w) == (height, width):
        return img
    ys = np.clip((np.arange(height) + 0.5) * in_h / height - 0.5, 0.0, in_h - 1.0)
    xs = np.clip((np.arange(width) + 0.5) * in_w / width - 0.5, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    ty = (ys - y0)[:, None, None]
    tx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1.0 - tx) + img[y0][:, x1] * tx
    bottom = img[y1][:, x0] * (1.0 - tx) + img[y1][:, x1] * tx
    return top * (1.0 - ty) + bottom * ty


# ---------------------------------------------------------------------------
# synthetic raw + software ISP


def mosaic(img: np.ndarray) -> BayerImage:
    """Subsample an RGB image onto an RGGB Bayer plane."""
    h, w = img.shape[:2]
    if h % 2 or w % 2:
        raise ValueError(f"mosaic requires even dimensions, got {h}x{w}")
    plane = np.empty((h, w), dtype=np.float64)
    plane[0::2, 0::2] = img[0::2, 0::2, 0]  # R
    plane[0::2, 1::2] = img[0::2, 1::2, 1]  # G
    plane[1::2, 0::2] = img[1::2, 0::2, 1]  # G
    plane[1::2, 1::2] = img[1::2, 1::2, 2]  # B
    return BayerImage(values=plane)


def _avg2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a + b) * 0.5


def _avg4(a: np.ndarray, b: np.ndarray, c: np.ndarray, d: np.ndarray) -> np.ndarray:
    # paired additions keep constant fields exact in floating point
    return ((a + b) + (c + d)) * 0.25


def demosaic_bilinear(raw: BayerImage) -> np.ndarray:
    """Bilinear RGGB demosaic; exact on constant fields.

    The plane is mirror-padded (excluding the edge sample) so the Bayer
    parity of every virtual neighbor matches a real larger sensor.
    """
    p = np.pad(raw.values, 1, mode="reflect")
    h, w = raw.values.shape
    center = p[1:-1, 1:-1]
    north, south = p[0:-2, 1:-1], p[2:, 1:-1]
    west, east = p[1:-1, 0:-2], p[1:-1, 2:]
    nw, ne = p[0:-2, 0:-2], p[0:-2, 2:]
    sw, se = p[2:, 0:-2], p[2:, 2:]

    cross = _avg4(north, south, east, west)
    diag = _avg4(nw, ne, sw, se)
    horiz = _avg2(west, east)
    vert = _avg2(north, south)

    r = np.empty((h, w), dtype=np.float64)
    g = np.empty((h, w), dtype=np.float64)
    b = np.empty((h, w), dtype=np.float64)

    # R sites (even row, even col)
    r[0::2, 0::2] = center[0::2, 0::2]
    g[0::2, 0::2] = cross[0::2, 0::2]
    b[0::2, 0::2] = diag[0::2, 0::2]
    # G sites in R rows (even row, odd col): R left/right, B above/below
    r[0::2, 1::2] = horiz[0::2, 1::2]
    g[0::2, 1::2] = center[0::2, 1::2]
    b[0::2, 1::2] = vert[0::2, 1::2]
    # G sites in B rows (odd row, even col): R above/below, B left/right
    r[1::2, 0::2] = vert[1::2, 0::2]
    g[1::2, 0::2] = center[1::2, 0::2]
    b[1::2, 0::2] = horiz[1::2, 0::2]
    # B sites (odd row, odd col)
    r[1::2, 1::2] = diag[1::2, 1::2]
    g[1::2, 1::2] = cross[1::2, 1::2]
    b[1::2, 1::2] = center[1::2, 1::2]
    return np.stack([r, g, b], axis=-1)


def simulate_isp(raw: BayerImage, config: IspConfig) -> np.ndarray:
    """Staged ISP: demosaic -> white balance -> color matrix -> gamma ->
    denoise -> sharpen.  Identity stages are skipped exactly."""
    rgb = demosaic_bilinear(raw)
    if tuple(config.wb_gains) != (1.0, 1.0, 1.0):
        rgb = np.clip(rgb * np.asarray(config.wb_gains, dtype=np.float64), 0.0, 1.0)
    ccm = np.asarray(config.ccm, dtype=np.float64)
    if not np.array_equal(ccm, np.eye(3)):
        rgb = np.clip(rgb @ ccm.T, 0.0, 1.0)
    if config.gamma != 1.0:
        rgb = np.power(rgb, 1.0 / config.gamma)
    if config.denoise_sigma > 0.0:
        rgb = gaussian_filter(rgb, sigma=(config.denoise_sigma, config.denoise_sigma, 0.0))
    if config.sharpen_amount > 0.0:
        blurred = gaussian_filter(rgb, sigma=(1.0, 1.0, 0.0))
        rgb = rgb + config.sharpen_amount * (rgb - blurred)
    return np.clip(rgb, 0.0, 1.0)


# Two divergent ISP personalities for studying converter disagreement:
# isp_a is neutral with gamma 2.2 and light denoising; isp_b is warmer,
# gamma 1.8, with a mild cross-channel matrix and sharpening instead.
ISP_A = IspConfig(
    wb_gains=(1.0, 1.0, 1.0),
    ccm=((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)),
    gamma=2.2,
    denoise_sigma=0.6,
    sharpen_amount=0.0,
)
ISP_B = IspConfig(
    wb_gains=(1.12, 1.0, 0.88),
    ccm=((0.92, 0.06, 0.02), (0.04, 0.92, 0.04), (0.02, 0.06, 0.92)),
    gamma=1.8,
    denoise_sigma=0.0,
    sharpen_amount=0.5,
)
ISP_IDENTITY = IspConfig()
ISP_PRESETS = {"identity": ISP_IDENTITY, "isp_a": ISP_A, "isp_b": ISP_B}


# ---------------------------------------------------------------------------
# environments


def apply_transform(img: np.ndarray, transform: Transform, rng: np.random.Generator) -> np.ndarray:
    if isinstance(transform, GaussianNoise):
        return apply_gaussian_noise(img, transform.sigma2, rng)
    if isinstance(transform, Distort):
        return apply_distortion(img, transform)
    if isinstance(transform, JpegRoundtrip):
        return jpeg_roundtrip(img, transform.quality)
    if isinstance(transform, PngRoundtrip):
        return png_roundtrip(img)
    if isinstance(transform, IspPipeline):
        return simulate_isp(mosaic(img), transform.config)
    if isinstance(transform, Resize):
        return bilinear_resize(img, transform.height, transform.width)
    raise TypeError(f"unknown transform {transform!r}")


def apply_environment(img: np.ndarray, spec: EnvironmentSpec, image_id: str) -> np.ndarray:
    """Run the environment's transforms in order on one image.

    The per-image generator is derived from (spec.seed, image_id), so the
    output is the same no matter how many images were processed before
    this one or on which worker.
    """
    rng = derive_rng(spec.seed, image_id)
    out = img
    for transform in spec.transforms:
        out = apply_transform(out, transform, rng)
    return out


def decode_fingerprint(data: bytes) -> str:
    """MD5 digest of the decoded 8-bit pixel buffer (not the file bytes).

    Two files with identical decoded pixels fingerprint identically even
    if their encoded bytes differ; decoder-behavior divergence shows up
    as differing digests.
    """
    pixels = dataset.quantize_u8(dataset.decode_image(data))
    return hashlib.md5(pixels.tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# bundled device presets


def desk_devices(base_seed: int = 9000) -> list[EnvironmentSpec]:
    """Three stock virtual devices: JPEG-50 phone, distorting ISP, noisy sensor."""
    return [
        EnvironmentSpec("dev_jpeg50", (JpegRoundtrip(quality=50),), base_seed + 1),
        EnvironmentSpec(
            "dev_distort",
            (
                Distort(
                    hue_delta=16.0,
                    contrast=1.22,
                    brightness=0.08,
                    saturation=0.8,
                    jpeg_quality=60,
                ),
            ),
            base_seed + 2,
        ),
        EnvironmentSpec("dev_gauss", (GaussianNoise(sigma2=0.04),), base_seed + 3),
    ]


# ---------------------------------------------------------------------------
# JSON (de)serialization for config files and provenance indexes


def transform_to_dict(transform: Transform) -> dict:
    if isinstance(transform, GaussianNoise):
        return {"kind": "gaussian_noise", "sigma2": transform.sigma2}
    if isinstance(transform, Distort):
        return {
            "kind": "distort",
            "hue_delta": transform.hue_delta,
            "contrast": transform.contrast,
            "brightness": transform.brightness,
            "saturation": transform.saturation,
            "jpeg_quality": transform.jpeg_quality,
        }
    if isinstance(transform, JpegRoundtrip):
        return {"kind": "jpeg_roundtrip", "quality": transform.quality}
    if isinstance(transform, PngRoundtrip):
        return {"kind": "png_roundtrip"}
    if isinstance(transform, IspPipeline):
        cfg = transform.config
        for name, preset in ISP_PRESETS.items():
            if preset == cfg:
                return {"kind": "isp", "preset": name}
        return {
            "kind": "isp",
            "wb_gains": list(cfg.wb_gains),
            "ccm": [list(row) for row in cfg.ccm],
            "gamma": cfg.gamma,
            "denoise_sigma": cfg.denoise_sigma,
            "sharpen_amount": cfg.sharpen_amount,
        }
    if isinstance(transform, Resize):
        return {"kind": "resize", "height": transform.height, "width": transform.width}
    raise TypeError(f"unknown transform {transform!r}")


def transform_from_dict(obj: dict) -> Transform:
    kind = obj.get("kind")
    if kind == "gaussian_noise":
        return GaussianNoise(sigma2=float(obj["sigma2"]))
    if kind == "distort":
        quality = obj.get("jpeg_quality")
        return Distort(
            hue_delta=float(obj.get("hue_delta", 0.0)),
            contrast=float(obj.get("contrast", 1.0)),
            brightness=float(obj.get("brightness", 0.0)),
            saturation=float(obj.get("saturation", 1.0)),
            jpeg_quality=None if quality is None else int(quality),
        )
    if kind == "jpeg_roundtrip":
        return JpegRoundtrip(quality=int(obj["quality"]))
    if kind == "png_roundtrip":
        return PngRoundtrip()
    if kind == "isp":
        if "preset" in obj:
            preset = obj["preset"]
            if preset not in ISP_PRESETS:
                raise ValueError(f"unknown isp preset {preset!r}")
            return IspPipeline(config=ISP_PRESETS[preset])
        return IspPipeline(
            config=IspConfig(
                wb_gains=tuple(float(g) for g in obj["wb_gains"]),
                ccm=tuple(tuple(float(v) for v in row) for row in obj["ccm"]),
                gamma=float(obj["gamma"]),
                denoise_sigma=float(obj.get("denoise_sigma", 0.0)),
                sharpen_amount=float(obj.get("sharpen_amount", 0.0)),
            )
        )
    if kind == "resize":
        return Resize(height=int(obj["height"]), width=int(obj["width"]))
    raise ValueError(f"unknown transform kind {kind!r}")


def environment_to_dict(spec: EnvironmentSpec) -> dict:
    return {
        "env_id": spec.env_id,
        "seed": spec.seed,
        "transforms": [transform_to_dict(t) for t in spec.transforms],
    }


def environment_from_dict(obj: dict) -> EnvironmentSpec:
    return EnvironmentSpec(
        env_id=str(obj["env_id"]),
        transforms=tuple(transform_from_dict(t) for t in obj.get("transforms", [])),
        seed=int(obj["seed"]),
    )
