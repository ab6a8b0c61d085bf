"""Synthetic benchmark data: smooth low-frequency "real" fields and four
manipulation families, each stamping a distinct spectral signature.

Frequencies below are in cycles per image (the Nyquist limit is H/2).
Real fields live below 0.15 * Nyquist; Blend pastes a soft elliptical
patch of a just-above-band field, Warp displaces coordinates with a
high-frequency sinusoidal field (modulation sidebands), Checker adds a
localized near-Nyquist checkerboard, Texture adds a faint global
mid-band plaid. The LQ tier is a compression proxy: 3x3 Gaussian blur
(sigma 1.0) followed by uniform quantization to 32 levels.

All randomness derives from numpy SeedSequence entropy tuples of
(base_seed, domain, role, family, index), so datasets are pure
functions of their spec.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from . import tnsr
from .autograd import Tensor
from .errors import ContractError, IntegrityError, ProtocolError

# real-field content
REAL_WAVES = 6
REAL_NOISE_STD = 0.02
REAL_AMP_RANGE = (0.35, 1.0)
REAL_FREQ_LO = 0.48      # cycles/image at the 32-px reference, domain 0
REAL_FREQ_HI = 1.84
DOMAIN_FREQ_STEP = 0.36  # per-domain shift of the whole band

# manipulation signatures (cycles/image at the 32-px reference); each family
# owns a radial frequency band so signatures stay pairwise separable, and
# amplitudes are capped so the LQ blur leaves only near-blur-invariant
# structure behind (degrade idempotence stays within one quantization level)
BLEND_FREQ = (2.2, 2.8)
BLEND_ALPHA = 0.8             # patch opacity ceiling
BLEND_RADIUS = (0.30, 0.33)   # fraction of image side
TEXTURE_FREQ = (4.0, 4.8)     # radial
TEXTURE_AMP = (0.05, 0.075)
WARP_FREQ = (6.8, 7.6)        # displacement-field frequency (sidebands 4.9-9.5)
WARP_AMP = (0.75, 0.9)        # displacement in pixels
WARP_RADIUS = (0.40, 0.46)
CHECKER_FREQ = (10.0, 11.0)   # per-axis; radial stays below Nyquist
CHECKER_AMP = (0.16, 0.22)
CHECKER_RADIUS = (0.28, 0.40)

QUANT_LEVELS = 32
BLUR_SIGMA = 1.0

_ROLE_REAL = 0
_ROLE_FAKE_BASE = 1


class ManipulationFamily(Enum):
    BLEND = "Blend"
    WARP = "Warp"
    CHECKER = "Checker"
    TEXTURE = "Texture"


FAMILIES = (ManipulationFamily.BLEND, ManipulationFamily.WARP,
            ManipulationFamily.CHECKER, ManipulationFamily.TEXTURE)

_FAMILY_CODE = {f: i + 1 for i, f in enumerate(FAMILIES)}


def parse_family(text: str) -> ManipulationFamily:
    for f in FAMILIES:
        if f.value.lower() == text.lower():
            return f
    raise ContractError(
        f"unknown manipulation family {text!r}; valid: {', '.join(f.value for f in FAMILIES)}"
    )


class Quality(Enum):
    HQ = "HQ"
    LQ = "LQ"


@dataclass
class Sample:
    image: Tensor  # (C, H, W) float32 in [0, 1]
    label: int     # 1 = real, 0 = fake
    family: ManipulationFamily | None
    quality: Quality
    domain_id: int
    seed: int
    index: int = 0

    def __post_init__(self):
        if (self.label == 0) != (self.family is not None):
            raise ContractError("label fake <=> family present")
        if self.label not in (0, 1):
            raise ContractError(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class DatasetSpec:
    n_real: int
    n_fake_per_family: int
    quality: Quality = Quality.HQ
    domain_id: int = 0
    base_seed: int = 0
    image_size: int = 32
    channels: int = 1

    def __post_init__(self):
        if self.n_real < 0 or self.n_fake_per_family < 0:
            raise ContractError("sample counts must be non-negative")
        if self.image_size < 4 or self.channels < 1:
            raise ContractError("invalid image geometry")
        if self.domain_id < 0 or self.base_seed < 0:
            raise ContractError("domain_id and base_seed must be non-negative")


def _derive_seed(spec: DatasetSpec, role: int, family_code: int, index: int) -> int:
    ss = np.random.SeedSequence((spec.base_seed, spec.domain_id, role, family_code, index))
    return int(ss.generate_state(1, np.uint64)[0])


def _rng_from(seed: int, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, salt)))


def _grids(h: int):
    ys, xs = np.meshgrid(np.arange(h), np.arange(h), indexing="ij")
    return ys.astype(np.float64), xs.astype(np.float64)


def _wave_field(rng, h: int, n_waves: int, freq_lo: float, freq_hi: float,
                amp_lo: float, amp_hi: float):
    """Sum of randomly oriented sinusoids with radial frequency in
    [freq_lo, freq_hi] cycles/image (frequencies scale with h/32)."""
    ys, xs = _grids(h)
    scale = h / 32.0
    field = np.zeros((h, h))
    for _ in range(n_waves):
        f = rng.uniform(freq_lo, freq_hi) * scale
        theta = rng.uniform(0.0, 2.0 * np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(amp_lo, amp_hi)
        field += amp * np.sin(2.0 * np.pi * (f * np.cos(theta) * xs
                                             + f * np.sin(theta) * ys) / h + phase)
    return field


def _normalize01(field):
    lo, hi = field.min(), field.max()
    return (field - lo) / max(hi - lo, 1e-6)


def _real_band(domain_id: int):
    shift = DOMAIN_FREQ_STEP * domain_id
    return REAL_FREQ_LO + shift, REAL_FREQ_HI + shift


def generate_real(spec: DatasetSpec, index: int) -> Sample:
    """One smooth real sample; a pure function of (spec, index)."""
    seed = _derive_seed(spec, _ROLE_REAL, 0, index)
    rng = _rng_from(seed)
    h = spec.image_size
    lo, hi = _real_band(spec.domain_id)
    channels = []
    for _ in range(spec.channels):
        field = _wave_field(rng, h, REAL_WAVES, lo, hi, *REAL_AMP_RANGE)
        field += rng.normal(0.0, REAL_NOISE_STD, size=field.shape)
        channels.append(_normalize01(field))
    image = np.clip(np.stack(channels), 0.0, 1.0).astype(np.float32)
    sample = Sample(Tensor(image), 1, None, Quality.HQ, spec.domain_id, seed, index)
    if spec.quality is Quality.LQ:
        sample = degrade_quality(sample)
    return sample


def _soft_ellipse(rng, h: int, radius_range):
    """Soft-edged elliptical mask with random center and radii."""
    ys, xs = _grids(h)
    cy = rng.uniform(0.42 * h, 0.58 * h)
    cx = rng.uniform(0.42 * h, 0.58 * h)
    ry = rng.uniform(*radius_range) * h
    rx = rng.uniform(*radius_range) * h
    rho = np.sqrt(((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2)
    return 1.0 / (1.0 + np.exp(6.0 * (rho - 1.0)))  # ~3 px soft edge


def _bilinear(img, ys, xs):
    h, w = img.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = ys - y0
    wx = xs - x0
    top = img[y0, x0] * (1.0 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1.0 - wx) + img[y1, x1] * wx
    return top * (1.0 - wy) + bot * wy


def _blend(rng, img, h):
    patch = _normalize01(_wave_field(rng, h, 3, *BLEND_FREQ, 0.8, 1.0))
    alpha = BLEND_ALPHA * _soft_ellipse(rng, h, BLEND_RADIUS)
    return (1.0 - alpha) * img + alpha * patch


def _warp(rng, img, h):
    ys, xs = _grids(h)
    scale = h / 32.0
    f = rng.uniform(*WARP_FREQ) * scale
    amp = rng.uniform(*WARP_AMP) * scale
    ph_u, ph_v = rng.uniform(0.0, 2.0 * np.pi, 2)
    region = _soft_ellipse(rng, h, WARP_RADIUS)
    du = amp * np.sin(2.0 * np.pi * f * ys / h + ph_u) * region
    dv = amp * np.sin(2.0 * np.pi * f * xs / h + ph_v) * region
    return _bilinear(img, ys + du, xs + dv)


def _checker(rng, img, h):
    ys, xs = _grids(h)
    scale = h / 32.0
    fy = rng.uniform(*CHECKER_FREQ) * scale
    fx = rng.uniform(*CHECKER_FREQ) * scale
    ph_y, ph_x = rng.uniform(0.0, 2.0 * np.pi, 2)
    amp = rng.uniform(*CHECKER_AMP)
    region = _soft_ellipse(rng, h, CHECKER_RADIUS)
    pattern = amp * np.cos(2.0 * np.pi * fy * ys / h + ph_y) \
                  * np.cos(2.0 * np.pi * fx * xs / h + ph_x)
    return img + region * pattern


def _texture(rng, img, h):
    ys, xs = _grids(h)
    scale = h / 32.0
    f = rng.uniform(*TEXTURE_FREQ) * scale
    theta = rng.uniform(0.0, 2.0 * np.pi)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    amp = rng.uniform(*TEXTURE_AMP)
    return img + amp * np.sin(
        2.0 * np.pi * f * (np.cos(theta) * xs + np.sin(theta) * ys) / h + phase)


_MANIPULATORS = {
    ManipulationFamily.BLEND: _blend,
    ManipulationFamily.WARP: _warp,
    ManipulationFamily.CHECKER: _checker,
    ManipulationFamily.TEXTURE: _texture,
}


def apply_manipulation(sample: Sample, family: ManipulationFamily) -> Sample:
    """Turn a real sample into a fake of the given family."""
    if sample.label != 1:
        raise ContractError("apply_manipulation requires a real input sample")
    if sample.quality is not Quality.HQ:
        raise ContractError("manipulations apply before quality degradation")
    rng = _rng_from(sample.seed, salt=_FAMILY_CODE[family])
    h = sample.image.shape[-1]
    fn = _MANIPULATORS[family]
    channels = [fn(rng, sample.image.data[c].astype(np.float64), h)
                for c in range(sample.image.shape[0])]
    image = np.clip(np.stack(channels), 0.0, 1.0).astype(np.float32)
    return Sample(Tensor(image), 0, family, Quality.HQ,
                  sample.domain_id, sample.seed, sample.index)


_BLUR_1D = np.exp(-0.5 * (np.arange(-1, 2) / BLUR_SIGMA) ** 2)
_BLUR_1D = _BLUR_1D / _BLUR_1D.sum()


def _blur3(img):
    padded = np.pad(img, 1, mode="symmetric")
    rows = (_BLUR_1D[0] * padded[:-2, :] + _BLUR_1D[1] * padded[1:-1, :]
            + _BLUR_1D[2] * padded[2:, :])
    return (_BLUR_1D[0] * rows[:, :-2] + _BLUR_1D[1] * rows[:, 1:-1]
            + _BLUR_1D[2] * rows[:, 2:])


def degrade_quality(sample: Sample, tier: Quality = Quality.LQ) -> Sample:
    """Compression proxy: blur then quantize to QUANT_LEVELS levels."""
    if tier is not Quality.LQ:
        raise ContractError("degrade_quality only produces the LQ tier")
    if sample.quality is not Quality.HQ:
        raise ContractError("degrade_quality requires an HQ input")
    steps = QUANT_LEVELS - 1
    channels = []
    for c in range(sample.image.shape[0]):
        blurred = _blur3(sample.image.data[c].astype(np.float64))
        channels.append(np.rint(np.clip(blurred, 0.0, 1.0) * steps) / steps)
    image = np.stack(channels).astype(np.float32)
    return Sample(Tensor(image), sample.label, sample.family, Quality.LQ,
                  sample.domain_id, sample.seed, sample.index)


def _finish(sample: Sample, spec: DatasetSpec, index: int) -> Sample:
    if spec.quality is Quality.LQ:
        sample = degrade_quality(sample)
    sample.index = index
    return sample


def _fake_base_index(family: ManipulationFamily, j: int) -> int:
    # fake source fields live in index ranges disjoint from every real stream
    return 1_000_000 * _FAMILY_CODE[family] + j


def generate_fake(spec: DatasetSpec, family: ManipulationFamily, j: int) -> Sample:
    """The j-th fake of a family: a fresh field (never one of the reals)
    pushed through the family's manipulation."""
    hq = replace(spec, quality=Quality.HQ)
    base = generate_real(hq, _fake_base_index(family, j))
    return apply_manipulation(base, family)


def build_dataset(spec: DatasetSpec, families=FAMILIES) -> list[Sample]:
    """n_real reals plus n_fake_per_family fakes for each family."""
    hq = replace(spec, quality=Quality.HQ)
    samples = []
    for i in range(spec.n_real):
        samples.append(_finish(generate_real(hq, i), spec, len(samples)))
    for family in families:
        for j in range(spec.n_fake_per_family):
            samples.append(_finish(generate_fake(spec, family, j), spec, len(samples)))
    return samples


@dataclass(frozen=True)
class SplitProtocol:
    train_families: tuple[ManipulationFamily, ...]
    test_family: ManipulationFamily
    quality: Quality = Quality.HQ
    domain_id: int = 0

    def __post_init__(self):
        if self.test_family in self.train_families:
            raise ProtocolError(
                f"test family {self.test_family.value} overlaps the training families"
            )
        if len(set(self.train_families)) != len(self.train_families):
            raise ProtocolError("duplicate training families")
        if set(self.train_families) | {self.test_family} != set(FAMILIES):
            raise ProtocolError("train and test families must partition all four families")

    @property
    def tag(self) -> str:
        train = ",".join(f.value for f in self.train_families)
        return f"{train}->{self.test_family.value}"


def leave_one_out_protocols(quality: Quality, domain_id: int = 0) -> list[SplitProtocol]:
    """The four cross-manipulation settings, one per held-out family."""
    protocols = []
    for held_out in FAMILIES:
        train = tuple(f for f in FAMILIES if f is not held_out)
        protocols.append(SplitProtocol(train, held_out, quality, domain_id))
    return protocols


def make_split(protocol: SplitProtocol, spec: DatasetSpec):
    """(train, test) sample lists for a leave-one-out setting.

    Train: spec.n_real reals (indices 0..n_real-1) plus n_fake_per_family
    fakes from each training family. Test: n_fake_per_family reals from
    the disjoint index range starting at n_real plus the held-out
    family's fakes (their own base-field stream, offset past the train
    fakes). Real index ranges never overlap between splits.
    """
    spec = replace(spec, quality=protocol.quality, domain_id=protocol.domain_id)
    hq = replace(spec, quality=Quality.HQ)
    n_fake = spec.n_fake_per_family

    train = []
    for i in range(spec.n_real):
        train.append(_finish(generate_real(hq, i), spec, len(train)))
    for family in protocol.train_families:
        for j in range(n_fake):
            train.append(_finish(generate_fake(spec, family, j), spec, len(train)))

    test = []
    for i in range(n_fake):
        test.append(_finish(generate_real(hq, spec.n_real + i), spec, len(test)))
    for j in range(n_fake):
        sample = generate_fake(spec, protocol.test_family, n_fake + j)
        test.append(_finish(sample, spec, len(test)))
    return train, test


def write_dataset(path, samples):
    """Directory with samples.bin (TNSR blobs in index order) and a
    plain-text sidecar index.txt."""
    os.makedirs(path, exist_ok=True)
    ordered = sorted(samples, key=lambda s: s.index)
    if [s.index for s in ordered] != list(range(len(ordered))):
        raise IntegrityError("sample indices must form a dense 0..n-1 range")
    blob_path = os.path.join(path, "samples.bin")
    with open(blob_path, "wb") as fh:
        for sample in ordered:
            fh.write(tnsr.encode_tensor(sample.image))
    lines = ["index,label,family,quality,domain,seed"]
    for s in ordered:
        family = s.family.value if s.family is not None else "-"
        lines.append(f"{s.index},{s.label},{family},{s.quality.value},{s.domain_id},{s.seed}")
    with open(os.path.join(path, "index.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_dataset(path) -> list[Sample]:
    """Load a dataset directory; sidecar rows map to blobs through their
    index column, so a permuted sidecar still resolves correctly."""
    blob_path = os.path.join(path, "samples.bin")
    sidecar_path = os.path.join(path, "index.txt")
    if not os.path.exists(sidecar_path):
        raise IntegrityError(f"missing sidecar index file {sidecar_path}")
    if not os.path.exists(blob_path):
        raise IntegrityError(f"missing sample container {blob_path}")

    with open(blob_path, "rb") as fh:
        buf = fh.read()
    images = []
    offset = 0
    while offset < len(buf):
        tensor, offset = tnsr.decode_tensor(buf, offset)
        images.append(tensor)

    samples = []
    seen = set()
    with open(sidecar_path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "index,label,family,quality,domain,seed":
            raise IntegrityError(f"unexpected sidecar header {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise IntegrityError(f"malformed sidecar row {line!r}")
            index = int(parts[0])
            if index in seen:
                raise IntegrityError(f"duplicate sidecar index {index}")
            seen.add(index)
            if not 0 <= index < len(images):
                raise IntegrityError(
                    f"sidecar index {index} out of range for {len(images)} blobs"
                )
            family = None if parts[2] == "-" else parse_family(parts[2])
            samples.append(Sample(
                image=images[index],
                label=int(parts[1]),
                family=family,
                quality=Quality(parts[3]),
                domain_id=int(parts[4]),
                seed=int(parts[5]),
                index=index,
            ))
    if len(samples) != len(images):
        raise IntegrityError(
            f"sidecar lists {len(samples)} samples but container holds {len(images)}"
        )
    return samples
