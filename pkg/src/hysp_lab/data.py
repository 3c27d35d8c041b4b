"""Synthetic skeleton sequences, temporal resizing and view augmentations.

Randomness is counter-based: every draw comes from a Philox stream keyed by
``(seed, purpose, sample_id, ...)``, so results never depend on the order in
which samples are visited.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptFile, InvalidInput
from .model import DEFAULT_MIRROR

# stream purposes
GENERATE, VIEWS, ANALYSIS, SPLIT, SHUFFLE, PROBE, INIT = range(7)

# head, torso, l_elbow, l_hand, r_elbow, r_hand, l_foot, r_foot
DEFAULT_BASE_POSE = np.array(
    [
        [0.0, 0.0, -0.35, -0.55, 0.35, 0.55, -0.2, 0.2],
        [1.6, 1.1, 1.2, 0.9, 1.2, 0.9, 0.0, 0.0],
        [0.0, 0.0, 0.05, 0.15, 0.05, 0.15, 0.0, 0.0],
    ]
)
HAND_MASK = (False, False, True, True, True, True, False, False)


def stream(seed: int, *ids: int) -> np.random.Generator:
    """Independent generator for the given integer coordinates."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=tuple(int(i) for i in ids))))


@dataclass
class SkeletonSequence:
    coords: np.ndarray  # (3, T, V)
    class_id: int
    sample_id: int
    actor_scale: float = 1.0

    def __post_init__(self):
        c = np.asarray(self.coords)
        if c.ndim != 3 or c.shape[0] != 3 or c.shape[1] < 2:
            raise InvalidInput(f"coords must be (3, T>=2, V), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise InvalidInput("coords contain non-finite values")

    @property
    def frames(self) -> int:
        return self.coords.shape[1]

    def with_coords(self, coords: np.ndarray) -> "SkeletonSequence":
        return SkeletonSequence(coords, self.class_id, self.sample_id, self.actor_scale)


@dataclass
class SyntheticClassSpec:
    class_id: int
    motion_amplitude: float
    motion_frequency: float = 1.5
    base_pose: np.ndarray = field(default_factory=lambda: DEFAULT_BASE_POSE.copy())
    moving_joint_mask: tuple[bool, ...] = HAND_MASK
    noise_sigma: float = 0.02
    motion_direction: tuple[float, float, float] = (0.6, 0.8, 0.0)

    def validate(self, num_joints: int) -> None:
        if np.shape(self.base_pose) != (3, num_joints) or len(self.moving_joint_mask) != num_joints:
            raise InvalidInput(f"class {self.class_id}: pose/mask do not match {num_joints} joints")
        if self.motion_amplitude < 0 or self.noise_sigma < 0 or self.motion_frequency <= 0:
            raise InvalidInput(f"class {self.class_id}: negative amplitude/noise or non-positive frequency")
        if self.motion_amplitude > 0 and not any(self.moving_joint_mask):
            raise InvalidInput(f"class {self.class_id}: motion requested but no moving joint")


def amplitude_classes(amplitudes=(0.05, 0.3, 1.0), **kwargs) -> list[SyntheticClassSpec]:
    """One class per amplitude, otherwise identical specs."""
    return [SyntheticClassSpec(i, float(a), **kwargs) for i, a in enumerate(amplitudes)]


def generate_dataset(specs, n_per_class: int, frames: int, seed: int) -> list[SkeletonSequence]:
    """Sinusoidal motion on masked joints plus noise, scaled by a per-sample actor size."""
    specs = list(specs)
    if not specs or n_per_class < 1 or frames < 2:
        raise InvalidInput("need at least one class, one sample per class and two frames")
    num_joints = np.shape(specs[0].base_pose)[1]
    t = np.arange(frames) / frames
    out = []
    for k, spec in enumerate(specs):
        spec.validate(num_joints)
        direction = np.asarray(spec.motion_direction, dtype=np.float64)
        direction = direction / np.linalg.norm(direction)
        mask = np.asarray(spec.moving_joint_mask, dtype=np.float64)
        for j in range(n_per_class):
            sample_id = k * n_per_class + j
            rng = stream(seed, GENERATE, sample_id)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            scale = rng.uniform(0.8, 1.2)
            wave = spec.motion_amplitude * np.sin(2.0 * np.pi * spec.motion_frequency * t + phase)
            motion = direction[:, None, None] * wave[None, :, None] * mask[None, None, :]
            noise = rng.normal(0.0, spec.noise_sigma, size=(3, frames, num_joints)) if spec.noise_sigma else 0.0
            coords = scale * (np.asarray(spec.base_pose)[:, None, :] + motion + noise)
            out.append(SkeletonSequence(coords.astype(np.float32), spec.class_id, sample_id, float(scale)))
    return out


def temporal_resize(x, frames_out: int):
    """Linearly interpolate onto ``frames_out`` evenly spaced frames; endpoints are kept."""
    seq = x if isinstance(x, SkeletonSequence) else None
    arr = np.asarray(seq.coords if seq else x)
    if frames_out < 2:
        raise InvalidInput(f"need at least two output frames, got {frames_out}")
    n = arr.shape[1]
    if n < 2:
        raise InvalidInput("need at least two input frames")
    if frames_out == n:
        out = arr.copy()
    else:
        pos = np.linspace(0.0, n - 1, frames_out)
        lo = np.minimum(np.floor(pos).astype(int), n - 2)
        frac = (pos - lo)[None, :, None]
        out = arr[:, lo] * (1.0 - frac) + arr[:, lo + 1] * frac
    return seq.with_coords(out) if seq else out


@dataclass
class AugmentationConfig:
    shear: float = 0.5
    crop_ratio_range: tuple[float, float] = (0.5, 1.0)
    rotate_max_deg: float = 30.0
    axis_mask_prob: float = 0.3
    spatial_flip_prob: float = 0.5
    temporal_flip_prob: float = 0.5
    noise_sigma: float = 0.01
    blur_kernel: tuple[float, ...] = (0.25, 0.5, 0.25)

    def __post_init__(self):
        lo, hi = self.crop_ratio_range
        if not 0 < lo <= hi <= 1:
            raise InvalidInput(f"crop ratio range must satisfy 0 < lo <= hi <= 1, got {self.crop_ratio_range}")
        for p in (self.axis_mask_prob, self.spatial_flip_prob, self.temporal_flip_prob):
            if not 0 <= p <= 1:
                raise InvalidInput(f"probability {p} outside [0, 1]")
        if self.shear < 0 or self.rotate_max_deg < 0 or self.noise_sigma < 0:
            raise InvalidInput("augmentation magnitudes must be non-negative")
        if len(self.blur_kernel) % 2 == 0:
            raise InvalidInput("blur kernel length must be odd")

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(0.0, (1.0, 1.0), 0.0, 0.0, 0.0, 0.0, 0.0, (1.0,))


def shear(x: np.ndarray, s: float, rng: np.random.Generator) -> np.ndarray:
    m = np.eye(3) + (rng.uniform(-s, s, size=(3, 3)) * (1.0 - np.eye(3)) if s else 0.0)
    return np.einsum("ij,jtv->itv", m, x)


def crop(x: np.ndarray, ratio_range, rng: np.random.Generator) -> np.ndarray:
    """Random contiguous crop resized back to the original frame count."""
    n = x.shape[1]
    lo, hi = ratio_range
    ratio = rng.uniform(lo, hi) if hi > lo else lo
    length = min(n, max(2, int(round(ratio * n))))
    start = int(rng.integers(0, n - length + 1))
    return temporal_resize(x[:, start : start + length], n)


def rotate(x: np.ndarray, max_deg: float, rng: np.random.Generator) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(-max_deg, max_deg)) if max_deg else 0.0
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    r = np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)
    return np.einsum("ij,jtv->itv", r, x)


def axis_mask(x: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    axis = int(rng.integers(0, 3))
    if rng.uniform() < prob:
        x = x.copy()
        x[axis] = 0.0
    return x


def spatial_flip(x: np.ndarray, prob: float, rng: np.random.Generator, mirror=DEFAULT_MIRROR) -> np.ndarray:
    return x[:, :, list(mirror)] if rng.uniform() < prob else x


def temporal_flip(x: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    return x[:, ::-1] if rng.uniform() < prob else x


def gaussian_noise(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return x + rng.normal(0.0, sigma, size=x.shape) if sigma else x


def temporal_blur(x: np.ndarray, kernel) -> np.ndarray:
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.size == 1:
        return x * kernel[0]
    pad = kernel.size // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)), mode="edge")
    n = x.shape[1]
    return sum(w * xp[:, i : i + n] for i, w in enumerate(kernel))


def _coords(x) -> tuple[np.ndarray, SkeletonSequence | None]:
    if isinstance(x, SkeletonSequence):
        return np.asarray(x.coords, dtype=np.float64), x
    return np.asarray(x, dtype=np.float64), None


def augment_normal(x, cfg: AugmentationConfig, rng: np.random.Generator):
    """Shear then temporal crop."""
    arr, seq = _coords(x)
    arr = shear(arr, cfg.shear, rng)
    arr = crop(arr, cfg.crop_ratio_range, rng)
    return seq.with_coords(arr) if seq else arr


def augment_extreme(x, cfg: AugmentationConfig, rng: np.random.Generator, mirror=DEFAULT_MIRROR):
    """Shear, spatial flip, rotation, axis mask, crop, temporal flip, noise, blur."""
    arr, seq = _coords(x)
    arr = shear(arr, cfg.shear, rng)
    arr = spatial_flip(arr, cfg.spatial_flip_prob, rng, mirror)
    arr = rotate(arr, cfg.rotate_max_deg, rng)
    arr = axis_mask(arr, cfg.axis_mask_prob, rng)
    arr = crop(arr, cfg.crop_ratio_range, rng)
    arr = temporal_flip(arr, cfg.temporal_flip_prob, rng)
    arr = gaussian_noise(arr, cfg.noise_sigma, rng)
    arr = temporal_blur(arr, cfg.blur_kernel)
    return seq.with_coords(arr) if seq else arr


def make_view_pair(x: SkeletonSequence, cfg: AugmentationConfig, seed: int, epoch: int,
                   mirror=DEFAULT_MIRROR, purpose: int = VIEWS) -> tuple[np.ndarray, np.ndarray]:
    """Extreme view for the online branch, normal view for the target branch."""
    online = augment_extreme(x.coords, cfg, stream(seed, purpose, x.sample_id, epoch, 0), mirror)
    target = augment_normal(x.coords, cfg, stream(seed, purpose, x.sample_id, epoch, 1))
    return online, target


def stack(samples) -> np.ndarray:
    return np.stack([np.asarray(s.coords, dtype=np.float64) for s in samples])


# --- cache file ----------------------------------------------------------------

_MAGIC = b"HYSD"
_VERSION = 1
_HEADER = struct.Struct("<4sHIIIQI")
_RECORD = struct.Struct("<IId")


def save_dataset(path, samples, seed: int) -> None:
    samples = list(samples)
    _, frames, joints = np.shape(samples[0].coords)
    classes = len({s.class_id for s in samples})
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, joints, frames, classes, int(seed), len(samples)))
        for s in samples:
            fh.write(_RECORD.pack(s.sample_id, s.class_id, s.actor_scale))
            fh.write(np.asarray(s.coords, dtype="<f4").tobytes())


def load_dataset(path) -> tuple[list[SkeletonSequence], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptFile(f"{path}: truncated dataset header")
    magic, version, joints, frames, classes, seed, count = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != _VERSION:
        raise CorruptFile(f"{path}: not a dataset cache (magic {magic!r}, version {version})")
    size = 3 * frames * joints * 4
    if len(raw) != _HEADER.size + count * (_RECORD.size + size):
        raise CorruptFile(f"{path}: truncated or oversized dataset cache")
    off = _HEADER.size
    out = []
    for _ in range(count):
        sid, cid, scale = _RECORD.unpack_from(raw, off)
        off += _RECORD.size
        coords = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=off).reshape(3, frames, joints)
        off += size
        out.append(SkeletonSequence(coords.astype(np.float32), cid, sid, scale))
    header = {"version": version, "joints": joints, "frames": frames, "classes": classes, "seed": seed}
    return out, header
