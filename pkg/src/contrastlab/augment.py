"""Image augmentation: the basic five-op pipeline, the auxiliary op pool and view triplets.

Images are ``uint8`` numpy arrays of shape ``(height, width, 3)``. Every op
returns a new array; inputs are never modified.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

FILL = 128
MAX_LEVEL = 30
LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)

AUX_OPS = (
    "rotate", "shear_x", "shear_y", "translate_x", "translate_y",
    "autocontrast", "invert", "equalize", "solarize", "posterize",
    "contrast", "brightness", "color", "sharpness", "cutout",
)
# cutout is supported but left out of the default RandAugment-style pool
DEFAULT_AUX_POOL = tuple(op for op in AUX_OPS if op != "cutout")


class AugmentConfigError(ValueError):
    pass


def check_image(img: np.ndarray) -> np.ndarray:
    if not isinstance(img, np.ndarray) or img.dtype != np.uint8:
        raise TypeError("images must be uint8 numpy arrays")
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"images must have shape (h, w, 3), got {img.shape}")
    return img


def _to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# resampling


def _bilinear(img: np.ndarray, src_x: np.ndarray, src_y: np.ndarray, *, edge: bool) -> np.ndarray:
    """Sample ``img`` at float pixel coordinates.

    ``edge=True`` clamps coordinates into the frame; otherwise taps that fall
    outside the frame read the mid-gray fill value.
    """
    h, w, _ = img.shape
    f = img.astype(np.float32)
    if edge:
        src_x = np.clip(src_x, 0, w - 1)
        src_y = np.clip(src_y, 0, h - 1)
    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    wx = (src_x - x0).astype(np.float32)[..., None]
    wy = (src_y - y0).astype(np.float32)[..., None]
    out = np.zeros(src_x.shape + (3,), dtype=np.float32)
    for dy, wgt_y in ((0, 1 - wy), (1, wy)):
        for dx, wgt_x in ((0, 1 - wx), (1, wx)):
            yy, xx = y0 + dy, x0 + dx
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            tap = f[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            tap = np.where(inside[..., None], tap, float(FILL))
            out += wgt_y * wgt_x * tap
    return out


def _interp_matrix(coords: np.ndarray, n: int) -> np.ndarray:
    """Rows of linear-interpolation weights over ``n`` edge-clamped samples."""
    c = np.clip(coords, 0, n - 1)
    i0 = np.floor(c).astype(np.int64)
    frac = c - i0
    m = np.zeros((len(c), n), dtype=np.float32)
    rows = np.arange(len(c))
    m[rows, i0] += 1 - frac
    m[rows, np.minimum(i0 + 1, n - 1)] += frac
    return m


def resized_crop(img: np.ndarray, top: int, left: int, height: int, width: int, size: int) -> np.ndarray:
    """Crop the box and resize it to ``size x size`` (pixel-centre aligned bilinear)."""
    if height == size and width == size:
        return img[top:top + size, left:left + size].copy()
    h, w, _ = img.shape
    ys = top + (np.arange(size) + 0.5) * (height / size) - 0.5
    xs = left + (np.arange(size) + 0.5) * (width / size) - 0.5
    ay, ax = _interp_matrix(ys, h), _interp_matrix(xs, w)
    # the sampling grid is separable: resample rows, then columns
    rows = (ay @ img.reshape(h, w * 3).astype(np.float32)).reshape(size, w, 3)
    out = ax @ rows
    return _to_uint8(out)


def sample_crop_box(h: int, w: int, scale: tuple[float, float], rng: np.random.Generator,
                    ratio: tuple[float, float] = (3 / 4, 4 / 3)) -> tuple[int, int, int, int]:
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def random_resized_crop(img: np.ndarray, scale: tuple[float, float], size: int,
                        rng: np.random.Generator) -> np.ndarray:
    top, left, ch, cw = sample_crop_box(img.shape[0], img.shape[1], scale, rng)
    return resized_crop(img, top, left, ch, cw, size)


def _warp(img: np.ndarray, inverse: np.ndarray) -> np.ndarray:
    """Apply an affine map given by its inverse (output -> input), about the image centre."""
    h, w, _ = img.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64) - cy, np.arange(w, dtype=np.float64) - cx,
                         indexing="ij")
    src_x = inverse[0, 0] * xx + inverse[0, 1] * yy + inverse[0, 2] + cx
    src_y = inverse[1, 0] * xx + inverse[1, 1] * yy + inverse[1, 2] + cy
    return _to_uint8(_bilinear(img, src_x, src_y, edge=False))


# ---------------------------------------------------------------------------
# pixel ops


def grayscale(img: np.ndarray) -> np.ndarray:
    luma = _to_uint8(img.astype(np.float32) @ LUMA)
    return np.repeat(luma[..., None], 3, axis=2)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def invert(img: np.ndarray) -> np.ndarray:
    return 255 - img


def solarize(img: np.ndarray, threshold: int) -> np.ndarray:
    return np.where(img < threshold, img, 255 - img).astype(np.uint8)


def posterize(img: np.ndarray, bits: int) -> np.ndarray:
    mask = np.uint8((0xFF << (8 - bits)) & 0xFF)
    return img & mask


def autocontrast(img: np.ndarray) -> np.ndarray:
    f = img.astype(np.float32)
    lo = f.min(axis=(0, 1), keepdims=True)
    hi = f.max(axis=(0, 1), keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    out = np.where(hi > lo, (f - lo) * (255.0 / span), f)
    return _to_uint8(out)


def equalize(img: np.ndarray) -> np.ndarray:
    out = np.empty_like(img)
    for c in range(3):
        chan = img[..., c]
        hist = np.bincount(chan.ravel(), minlength=256)
        nonzero = hist[hist > 0]
        step = (hist.sum() - nonzero[-1]) // 255
        if step == 0:
            out[..., c] = chan
            continue
        lut = (np.concatenate([[0], np.cumsum(hist)[:-1]]) + step // 2) // step
        out[..., c] = np.clip(lut, 0, 255).astype(np.uint8)[chan]
    return out


def _blend(degenerate: np.ndarray, img: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return img.copy()
    d = degenerate.astype(np.float32)
    return _to_uint8(d + factor * (img.astype(np.float32) - d))


def adjust_brightness(img: np.ndarray, factor: float) -> np.ndarray:
    return _blend(np.zeros_like(img), img, factor)


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    mean = float(np.rint((img.astype(np.float32) @ LUMA).mean()))
    return _blend(np.full_like(img, int(mean)), img, factor)


def adjust_saturation(img: np.ndarray, factor: float) -> np.ndarray:
    return _blend(grayscale(img), img, factor)


def adjust_sharpness(img: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0 or img.shape[0] < 3 or img.shape[1] < 3:
        return img.copy()
    f = img.astype(np.float32)
    smooth = f.copy()
    acc = np.zeros_like(f[1:-1, 1:-1])
    for dy in range(3):
        for dx in range(3):
            acc += f[dy:dy + f.shape[0] - 2, dx:dx + f.shape[1] - 2] * (5.0 if dy == dx == 1 else 1.0)
    smooth[1:-1, 1:-1] = np.rint(acc / 13.0)
    return _blend(smooth, img, factor)


def adjust_hue(img: np.ndarray, shift: float) -> np.ndarray:
    """Rotate hue by ``shift`` turns (``shift`` in [-0.5, 0.5])."""
    if shift == 0.0:
        return img.copy()
    rgb = img.astype(np.float32) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=2)
    minc = rgb.min(axis=2)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0)
    safe = np.where(delta > 0, delta, 1)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    h = (h + shift) % 1.0
    chroma = (v * s)[..., None]
    k = (np.array([5.0, 3.0, 1.0], dtype=np.float32) + h[..., None] * 6.0) % 6.0
    out = v[..., None] - chroma * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)
    return _to_uint8(out * 255.0)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur; kernel size is ceil(4 sigma) rounded up to odd, reflect padding."""
    size = math.ceil(4 * sigma)
    if size % 2 == 0:
        size += 1
    radius = size // 2
    if radius == 0:
        return img.copy()
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-x * x / (2 * sigma * sigma))
    k = (k / k.sum()).astype(np.float32)
    f = img.astype(np.float32)
    h, w, _ = f.shape
    pad_y, pad_x = min(radius, h - 1), min(radius, w - 1)
    for axis, pad in ((0, pad_y), (1, pad_x)):
        widths = [(0, 0)] * 3
        widths[axis] = (radius, radius)
        mode = "reflect" if pad == radius else "edge"
        padded = np.pad(f, widths, mode=mode)
        acc = np.zeros_like(f)
        n = f.shape[axis]
        for j, kj in enumerate(k):
            sl = [slice(None)] * 3
            sl[axis] = slice(j, j + n)
            acc += kj * padded[tuple(sl)]
        f = acc
    return _to_uint8(f)


def cutout(img: np.ndarray, side: int, center: tuple[int, int] | None = None) -> np.ndarray:
    out = img.copy()
    if side <= 0:
        return out
    h, w, _ = img.shape
    cy, cx = center if center is not None else (h // 2, w // 2)
    y0, y1 = max(0, cy - side // 2), min(h, cy - side // 2 + side)
    x0, x1 = max(0, cx - side // 2), min(w, cx - side // 2 + side)
    out[y0:y1, x0:x1] = FILL
    return out


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    if degrees == 0:
        return img.copy()
    a = math.radians(degrees)
    inv = np.array([[math.cos(a), math.sin(a), 0.0], [-math.sin(a), math.cos(a), 0.0]])
    return _warp(img, inv)


def shear_x(img: np.ndarray, s: float) -> np.ndarray:
    if s == 0:
        return img.copy()
    return _warp(img, np.array([[1.0, s, 0.0], [0.0, 1.0, 0.0]]))


def shear_y(img: np.ndarray, s: float) -> np.ndarray:
    if s == 0:
        return img.copy()
    return _warp(img, np.array([[1.0, 0.0, 0.0], [s, 1.0, 0.0]]))


def translate_x(img: np.ndarray, pixels: float) -> np.ndarray:
    if pixels == 0:
        return img.copy()
    return _warp(img, np.array([[1.0, 0.0, -pixels], [0.0, 1.0, 0.0]]))


def translate_y(img: np.ndarray, pixels: float) -> np.ndarray:
    if pixels == 0:
        return img.copy()
    return _warp(img, np.array([[1.0, 0.0, 0.0], [0.0, 1.0, -pixels]]))


# ---------------------------------------------------------------------------
# auxiliary op pool


def op_parameter(op: str, magnitude: float, img_size: int) -> float:
    """Unsigned strength of ``op`` at ``magnitude`` (0..30, linear)."""
    if op not in AUX_OPS:
        raise AugmentConfigError(f"unsupported augmentation op {op!r}")
    level = float(np.clip(magnitude, 0, MAX_LEVEL)) / MAX_LEVEL
    if op == "rotate":
        return 30.0 * level
    if op in ("shear_x", "shear_y"):
        return 0.3 * level
    if op in ("translate_x", "translate_y"):
        return 0.45 * img_size * level
    if op == "solarize":
        return float(int(round(256 - 256 * level)))
    if op == "posterize":
        return float(8 - int(round(4 * level)))
    if op in ("contrast", "brightness", "color", "sharpness"):
        return 0.9 * level
    if op == "cutout":
        return float(int(round(0.5 * img_size * level)))
    return 0.0


_SIGNED = {"rotate", "shear_x", "shear_y", "translate_x", "translate_y",
           "contrast", "brightness", "color", "sharpness"}


def apply_aux_op(op: str, magnitude: float, img: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply one pool op. With ``rng`` the direction (and cutout position) is random."""
    check_image(img)
    value = op_parameter(op, magnitude, min(img.shape[:2]))
    if op in _SIGNED and rng is not None and rng.random() < 0.5:
        value = -value
    if op == "rotate":
        return rotate(img, value)
    if op == "shear_x":
        return shear_x(img, value)
    if op == "shear_y":
        return shear_y(img, value)
    if op == "translate_x":
        return translate_x(img, value)
    if op == "translate_y":
        return translate_y(img, value)
    if op == "autocontrast":
        return autocontrast(img)
    if op == "invert":
        return invert(img)
    if op == "equalize":
        return equalize(img)
    if op == "solarize":
        return solarize(img, int(value))
    if op == "posterize":
        return posterize(img, int(value))
    if op == "contrast":
        return adjust_contrast(img, 1.0 + value)
    if op == "brightness":
        return adjust_brightness(img, 1.0 + value)
    if op == "color":
        return adjust_saturation(img, 1.0 + value)
    if op == "sharpness":
        return adjust_sharpness(img, 1.0 + value)
    center = None
    if rng is not None:
        center = (int(rng.integers(0, img.shape[0])), int(rng.integers(0, img.shape[1])))
    return cutout(img, int(value), center)


# ---------------------------------------------------------------------------
# policies


@dataclass
class BasicPolicy:
    crop_scale_range: tuple[float, float] = (0.2, 1.0)
    jitter_strength: float = 0.4
    grayscale_prob: float = 0.2
    flip_prob: float = 0.5
    blur_prob: float = 0.5
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    output_size: int = 32

    def __post_init__(self):
        self.crop_scale_range = tuple(self.crop_scale_range)
        self.blur_sigma_range = tuple(self.blur_sigma_range)
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise AugmentConfigError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")
        for name in ("grayscale_prob", "flip_prob", "blur_prob"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise AugmentConfigError(f"{name} must be in [0, 1], got {p}")
        if self.jitter_strength < 0:
            raise AugmentConfigError("jitter_strength must be >= 0")
        if not 0 < self.blur_sigma_range[0] <= self.blur_sigma_range[1]:
            raise AugmentConfigError(f"invalid blur_sigma_range {self.blur_sigma_range}")
        if self.output_size < 1:
            raise AugmentConfigError("output_size must be positive")


class SubPolicyOp(NamedTuple):
    op: str
    probability: float
    magnitude: float


@dataclass
class AuxPolicy:
    """RandAugment-style by default; ``sub_policies`` switches to AutoAugment-style application."""

    num_ops: int = 2
    magnitude: int = 10
    op_pool: tuple[str, ...] = DEFAULT_AUX_POOL
    crop_scale_range: tuple[float, float] = (0.2, 1.0)
    output_size: int = 32
    sub_policies: list[list[SubPolicyOp]] | None = field(default=None)

    def __post_init__(self):
        self.op_pool = tuple(self.op_pool)
        self.crop_scale_range = tuple(self.crop_scale_range)
        if self.num_ops < 1:
            raise AugmentConfigError(f"num_ops must be >= 1, got {self.num_ops}")
        if not 0 <= self.magnitude <= MAX_LEVEL:
            raise AugmentConfigError(f"magnitude must be in [0, {MAX_LEVEL}], got {self.magnitude}")
        if not self.op_pool:
            raise AugmentConfigError("op_pool must not be empty")
        for op in self.op_pool:
            if op not in AUX_OPS:
                raise AugmentConfigError(f"unsupported augmentation op {op!r}; supported: {', '.join(AUX_OPS)}")
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise AugmentConfigError(f"invalid crop_scale_range {self.crop_scale_range}")
        if self.sub_policies is not None:
            self.sub_policies = [[SubPolicyOp(*e) for e in sp] for sp in self.sub_policies]
            if not self.sub_policies:
                raise AugmentConfigError("sub_policies must not be empty")
            for sp in self.sub_policies:
                for e in sp:
                    if e.op not in AUX_OPS:
                        raise AugmentConfigError(f"unsupported augmentation op {e.op!r} in policy")
                    if not 0 <= e.probability <= 1 or not 0 <= e.magnitude <= MAX_LEVEL:
                        raise AugmentConfigError(f"invalid sub-policy entry {tuple(e)}")


def load_autoaugment_policy(path: str | Path) -> list[list[SubPolicyOp]]:
    """Read a JSON list of sub-policies, each a list of ``[op, probability, magnitude]``."""
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, list):
        raise AugmentConfigError(f"{path}: policy file must hold a JSON list of sub-policies")
    policies = []
    for sp in raw:
        if not isinstance(sp, list) or not all(isinstance(e, list) and len(e) == 3 for e in sp):
            raise AugmentConfigError(f"{path}: each sub-policy must be a list of [op, probability, magnitude]")
        policies.append([SubPolicyOp(str(e[0]), float(e[1]), float(e[2])) for e in sp])
    AuxPolicy(sub_policies=policies)  # validates
    return policies


# ---------------------------------------------------------------------------
# pipelines


def basic_augment(img: np.ndarray, policy: BasicPolicy, rng: np.random.Generator) -> np.ndarray:
    """Random resized crop, colour jitter, random grayscale, random flip, random blur.

    Every random draw is made regardless of outcome, so the stream layout is fixed.
    """
    check_image(img)
    out = random_resized_crop(img, policy.crop_scale_range, policy.output_size, rng)
    s = policy.jitter_strength
    brightness, contrast, saturation = rng.uniform(1 - s, 1 + s, size=3) if s > 0 else (1.0, 1.0, 1.0)
    hue = rng.uniform(-s / 4, s / 4) if s > 0 else 0.0
    out = adjust_brightness(out, float(brightness))
    out = adjust_contrast(out, float(contrast))
    out = adjust_saturation(out, float(saturation))
    out = adjust_hue(out, float(hue))
    u_gray, u_flip, u_blur = rng.random(3)
    sigma = rng.uniform(*policy.blur_sigma_range)
    if u_gray < policy.grayscale_prob:
        out = grayscale(out)
    if u_flip < policy.flip_prob:
        out = hflip(out)
    if u_blur < policy.blur_prob:
        out = gaussian_blur(out, float(sigma))
    return out


def sample_aux_ops(policy: AuxPolicy, rng: np.random.Generator) -> list[str]:
    """``num_ops`` identifiers drawn uniformly with replacement from the pool."""
    idx = rng.integers(0, len(policy.op_pool), size=policy.num_ops)
    return [policy.op_pool[i] for i in idx]


def aux_augment(img: np.ndarray, policy: AuxPolicy, rng: np.random.Generator) -> np.ndarray:
    """Pool ops at the policy magnitude, then a random resized crop.

    ``rng`` is split into an op stream and a crop stream, so the crop is the
    same whatever the ops consumed.
    """
    check_image(img)
    op_rng, crop_rng = rng.spawn(2)
    out = img
    if policy.sub_policies is not None:
        chosen = policy.sub_policies[int(op_rng.integers(0, len(policy.sub_policies)))]
        for entry in chosen:
            if op_rng.random() < entry.probability:
                out = apply_aux_op(entry.op, entry.magnitude, out, op_rng)
    else:
        for op in sample_aux_ops(policy, op_rng):
            out = apply_aux_op(op, policy.magnitude, out, op_rng)
    return random_resized_crop(out, policy.crop_scale_range, policy.output_size, crop_rng)


class ViewTriplet(NamedTuple):
    core1: np.ndarray
    core2: np.ndarray
    aux: np.ndarray


def make_triplet(img: np.ndarray, basic: BasicPolicy, aux: AuxPolicy | None,
                 rng: np.random.Generator) -> ViewTriplet:
    """Two basic views plus one auxiliary view, each from its own sub-stream of ``rng``.

    With ``aux=None`` the third view is another basic draw (three-basic-views ablation).
    """
    r1, r2, r3 = rng.spawn(3)
    third = basic_augment(img, basic, r3) if aux is None else aux_augment(img, aux, r3)
    return ViewTriplet(basic_augment(img, basic, r1), basic_augment(img, basic, r2), third)


def image_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-image stream: views are a pure function of (seed, epoch, image index)."""
    return np.random.default_rng([seed, epoch, index])


# ---------------------------------------------------------------------------
# PPM output


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    check_image(img)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None or int(m.group(3)) != 255:
        raise ValueError(f"{path}: only binary 8-bit PPM (P6) is supported")
    w, h = int(m.group(1)), int(m.group(2))
    pixels = raw[m.end():m.end() + w * h * 3]
    if len(pixels) != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).copy()
