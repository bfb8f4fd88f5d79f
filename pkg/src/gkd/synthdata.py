"""Seeded two-domain binary segmentation data and the four perturbation tactics.

Domain A plays the role of the training domain, domain B is only ever used
for generalization testing.  Every generator is a pure function of its seed
and parameters.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import LoadError, ParameterError
from .tensorio import read_json, read_tensor, write_json, write_tensor

TACTICS = ("cutout", "sobel", "gauss_noise", "gauss_blur")
SHAPE_FAMILIES = ("ellipse-blob", "ribbon-curve")
TEXTURES = ("smooth", "striped", "speckled")

CUTOUT_AREA = (0.10, 0.25)
NOISE_SIGMA = (0.01, 0.05)
BLUR_SIGMA = 1.0
BLUR_RADIUS = 2  # 5x5 kernel

FG_FRACTION = (0.05, 0.60)

# Sample seed layout: split offset + index, within one domain seed block.
_SEED_BLOCK = 1_000_000
_TEST_OFFSET = 500_000


@dataclass(frozen=True)
class DomainSpec:
    shape_family: str = "ellipse-blob"
    fg_mean: float = 0.75
    bg_mean: float = 0.25
    noise_sigma: float = 0.03
    texture: str = "smooth"
    irregularity: float = 0.04  # max amplitude of each outline harmonic

    def __post_init__(self):
        if self.shape_family not in SHAPE_FAMILIES:
            raise ParameterError(f"unknown shape_family {self.shape_family!r}")
        if self.texture not in TEXTURES:
            raise ParameterError(f"unknown texture {self.texture!r}")
        if self.fg_mean == self.bg_mean:
            raise ParameterError("fg_mean must differ from bg_mean")
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be >= 0")
        if not 0 <= self.irregularity < 0.5:
            raise ParameterError("irregularity must lie in [0, 0.5)")

    @property
    def intensity_profile(self):
        return {"fg_mean": self.fg_mean, "bg_mean": self.bg_mean, "noise_sigma": self.noise_sigma}


# Training domain: bright, smooth, near-elliptic blobs.  Test domain: lower
# contrast, much noisier, with irregular outlines.
DOMAIN_A = DomainSpec("ellipse-blob", fg_mean=0.75, bg_mean=0.25, noise_sigma=0.03, texture="smooth", irregularity=0.04)
DOMAIN_B = DomainSpec("ellipse-blob", fg_mean=0.60, bg_mean=0.35, noise_sigma=0.12, texture="smooth", irregularity=0.15)


@dataclass
class SegSample:
    image: np.ndarray  # (1, H, W) float32 in [0, 1]
    mask: np.ndarray  # (1, H, W) float32 in {0, 1}
    domain_id: str
    seed: int = -1

    def __post_init__(self):
        if self.image.shape != self.mask.shape or self.image.ndim != 3 or self.image.shape[0] != 1:
            raise ParameterError(f"image {self.image.shape} and mask {self.mask.shape} must both be (1, H, W)")
        if self.domain_id not in ("A", "B"):
            raise ParameterError(f"domain_id must be 'A' or 'B', got {self.domain_id!r}")


@dataclass
class CouplingBundle:
    anchor: SegSample
    augmented: list
    tactics: list

    @property
    def k(self):
        return len(self.augmented)


class Split:
    """An ordered collection of samples that records every read.

    Training code goes through ``__getitem__``/``batch``; the access log lets
    tests prove that a split was never touched by a given phase.
    """

    def __init__(self, name, samples):
        self.name = name
        self.samples = list(samples)
        self.reads: list = []

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, idx):
        self.reads.append(idx)
        return self.samples[idx]

    def batch(self, indices):
        indices = list(indices)
        self.reads.extend(indices)
        images = np.stack([self.samples[i].image for i in indices])
        masks = np.stack([self.samples[i].mask for i in indices])
        return images, masks

    def arrays(self):
        return self.batch(range(len(self)))

    def seeds(self):
        return [s.seed for s in self.samples]


# ---------------------------------------------------------------------------
# rendering

def _shape_mask(rng, family, size, irregularity):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    if family == "ellipse-blob":
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        a, b = rng.uniform(0.14, 0.32, size=2)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        phi = np.arctan2(v / b, u / a)
        # low-order harmonic wobble of the outline
        amps = rng.uniform(0.0, irregularity, size=3)
        phases = rng.uniform(0, 2 * np.pi, size=3)
        radius = 1.0 + sum(amp * np.cos((k + 2) * phi + ph) for k, (amp, ph) in enumerate(zip(amps, phases)))
        return ((u / a) ** 2 + (v / b) ** 2) <= radius**2
    # ribbon-curve: thick sinusoidal band crossing the image at an angle
    theta = rng.uniform(0, np.pi)
    c = rng.uniform(0.35, 0.65)
    amp = rng.uniform(0.05, 0.15)
    freq = rng.uniform(0.5, 2.0)
    ph = rng.uniform(0, 2 * np.pi)
    half = rng.uniform(0.06, 0.14)
    u = (xx - 0.5) * np.cos(theta) + (yy - 0.5) * np.sin(theta)
    v = -(xx - 0.5) * np.sin(theta) + (yy - 0.5) * np.cos(theta) + 0.5
    centre = c + amp * np.sin(2 * np.pi * freq * u + ph)
    return np.abs(v - centre) <= half


def _texture(rng, texture, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    if texture == "smooth":
        fy, fx = rng.uniform(0.5, 1.5, size=2)
        ph = rng.uniform(0, 2 * np.pi)
        return 0.04 * np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)
    if texture == "striped":
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(6, 12)
        ph = rng.uniform(0, 2 * np.pi)
        return 0.08 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + ph)
    speck = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=1.0, mode="reflect")
    return 0.12 * speck / (speck.std() + 1e-12)


def render_sample(seed: int, spec: DomainSpec, size: int = 128, domain_id: str = "A") -> SegSample:
    """Render one (image, mask) pair; deterministic in ``(seed, spec, size)``."""
    if not isinstance(size, (int, np.integer)) or size < 32 or size % 2:
        raise ParameterError(f"size must be an even integer >= 32, got {size!r}")
    rng = np.random.default_rng(seed)
    for _ in range(100):
        mask = _shape_mask(rng, spec.shape_family, size, spec.irregularity)
        if FG_FRACTION[0] <= mask.mean() <= FG_FRACTION[1]:
            break
    else:  # pragma: no cover - the geometry ranges make this unreachable in practice
        raise ParameterError(f"could not place a shape with foreground fraction in {FG_FRACTION}")
    m = mask.astype(np.float64)
    image = spec.bg_mean + (spec.fg_mean - spec.bg_mean) * m
    image = image + _texture(rng, spec.texture, size)
    image = image + spec.noise_sigma * rng.standard_normal((size, size))
    image = np.clip(image, 0.0, 1.0)
    return SegSample(
        image=image[None].astype(np.float32),
        mask=m[None].astype(np.float32),
        domain_id=domain_id,
        seed=int(seed),
    )


def sample_seeds(domain_seed, split, n):
    base = domain_seed * _SEED_BLOCK + (_TEST_OFFSET if split == "test" else 0)
    if n > _TEST_OFFSET:
        raise ParameterError(f"at most {_TEST_OFFSET} samples per split")
    return [base + i for i in range(n)]


def make_dataset(seed_a, seed_b, n_train, n_test, size=128, spec_a=DOMAIN_A, spec_b=DOMAIN_B):
    """Build ``{"train_A", "test_A", "test_B"}`` splits.

    Only domain A has a training split.  Seeds of train/test splits come from
    disjoint ranges so no sample can be shared between them.
    """
    if n_train < 1 or n_test < 1:
        raise ParameterError("n_train and n_test must be >= 1")
    return {
        "train_A": Split("train_A", [render_sample(s, spec_a, size, "A") for s in sample_seeds(seed_a, "train", n_train)]),
        "test_A": Split("test_A", [render_sample(s, spec_a, size, "A") for s in sample_seeds(seed_a, "test", n_test)]),
        "test_B": Split("test_B", [render_sample(s, spec_b, size, "B") for s in sample_seeds(seed_b, "test", n_test)]),
    }


def crop_patch(sample: SegSample, top: int, left: int, size: int) -> SegSample:
    _, h, w = sample.image.shape
    if size < 1 or top < 0 or left < 0 or top + size > h or left + size > w:
        raise ParameterError(f"crop window (top={top}, left={left}, size={size}) outside {h}x{w} image")
    win = (slice(None), slice(top, top + size), slice(left, left + size))
    return SegSample(sample.image[win].copy(), sample.mask[win].copy(), sample.domain_id, sample.seed)


# ---------------------------------------------------------------------------
# perturbation tactics

def cutout_box(shape, rng):
    """Random rectangle ``(top, left, height, width)`` covering 10-25% of the area."""
    h, w = shape
    area = rng.uniform(*CUTOUT_AREA) * h * w
    aspect = rng.uniform(0.5, 2.0)
    bh = int(np.clip(round(np.sqrt(area * aspect)), 1, h))
    bw = int(np.clip(round(area / bh), 1, w))
    # rounding can push the covered area outside the band; nudge the width back in
    lo, hi = CUTOUT_AREA[0] * h * w, CUTOUT_AREA[1] * h * w
    while bh * bw < lo and bw < w:
        bw += 1
    while bh * bw > hi and bw > 1:
        bw -= 1
    top = int(rng.integers(0, h - bh + 1))
    left = int(rng.integers(0, w - bw + 1))
    return top, left, bh, bw


def augment(image: np.ndarray, tactic: str, seed: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ParameterError(f"expected a (C, H, W) image, got shape {image.shape}")
    rng = np.random.default_rng(seed)
    if tactic == "cutout":
        top, left, bh, bw = cutout_box(image.shape[1:], rng)
        out = image.copy()
        out[:, top:top + bh, left:left + bw] = 0.0
        return out
    if tactic == "sobel":
        out = np.empty_like(image)
        for c, plane in enumerate(image.astype(np.float64)):
            gy = ndimage.sobel(plane, axis=0, mode="reflect")
            gx = ndimage.sobel(plane, axis=1, mode="reflect")
            mag = np.hypot(gx, gy)
            peak = mag.max()
            out[c] = mag / peak if peak > 1e-12 else 0.0
        return out
    if tactic == "gauss_noise":
        sigma = rng.uniform(*NOISE_SIGMA)
        return np.clip(image + sigma * rng.standard_normal(image.shape), 0.0, 1.0).astype(np.float32)
    if tactic == "gauss_blur":
        out = np.stack([
            ndimage.gaussian_filter(plane.astype(np.float64), sigma=BLUR_SIGMA, mode="reflect",
                                    truncate=BLUR_RADIUS / BLUR_SIGMA)
            for plane in image
        ])
        return np.clip(out, 0.0, 1.0).astype(np.float32)
    raise ParameterError(f"unknown tactic {tactic!r}; expected one of {TACTICS}")


def tactic_seed(bundle_seed, tactic):
    # keyed by tactic name, so reordering the tactic list leaves each variant unchanged
    return int(np.random.SeedSequence([int(bundle_seed) & 0xFFFFFFFF, zlib.crc32(tactic.encode())]).generate_state(1)[0])


def make_coupling_bundle(sample: SegSample, tactics, seed: int) -> CouplingBundle:
    tactics = list(tactics)
    if not tactics:
        raise ParameterError("tactics must be non-empty")
    if len(set(tactics)) != len(tactics):
        raise ParameterError(f"duplicate tactics in {tactics}")
    augmented = [augment(sample.image, t, tactic_seed(seed, t)) for t in tactics]
    return CouplingBundle(anchor=sample, augmented=augmented, tactics=tactics)


def domain_shift(split_a, split_b):
    """Mean absolute difference between the mean images of two splits."""
    a = np.mean([s.image for s in split_a.samples], axis=0)
    b = np.mean([s.image for s in split_b.samples], axis=0)
    return float(np.abs(a - b).mean())


# ---------------------------------------------------------------------------
# export / import

def save_dataset(dataset, directory) -> None:
    """Write every split as flat tensors plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for split_name, split in dataset.items():
        for i, s in enumerate(split.samples):
            sid = f"{split_name}_{i:05d}"
            write_tensor(directory / f"{sid}_image.bin", s.image)
            write_tensor(directory / f"{sid}_mask.bin", s.mask)
            entries.append({"id": sid, "split": split_name, "domain": s.domain_id, "seed": s.seed})
    write_json(directory / "manifest.json", {"format": "gkd-dataset-v1", "samples": entries})


def load_dataset(directory):
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    if manifest.get("format") != "gkd-dataset-v1":
        raise LoadError(f"{directory}: unsupported dataset format {manifest.get('format')!r}")
    splits: dict = {}
    for e in manifest["samples"]:
        s = SegSample(
            image=read_tensor(directory / f"{e['id']}_image.bin"),
            mask=read_tensor(directory / f"{e['id']}_mask.bin"),
            domain_id=e["domain"],
            seed=int(e["seed"]),
        )
        splits.setdefault(e["split"], []).append(s)
    return {name: Split(name, samples) for name, samples in splits.items()}


def spec_to_dict(spec: DomainSpec):
    return asdict(spec)
