"""Dense H×W×C feature maps and the numerical primitives the codec is built from.

A FeatureMap is a row-major, pixel-major-then-channel container of finite
float64 scalars. The three operations here (per-pixel linear map, group
normalization, rectifier) are pure functions: they never mutate their inputs
and are bitwise deterministic for identical input bits.

The module also owns the raw tensor file format (magic ``RVQT``) used for
corpus ingestion and export; see docs/tensor-format.md for the byte layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError

TENSOR_MAGIC = b"RVQT"
TENSOR_VERSION = 1
TENSOR_DTYPE_F32 = 1
_HEADER = struct.Struct("<4sBBHII")  # magic, version, dtype, reserved, H, W


@dataclass(frozen=True)
class FeatureMap:
    """An H×W×C map of finite real activations.

    ``data`` is stored as a C-contiguous float64 array of shape (H, W, C);
    flattening it yields the canonical row-major, pixel-major-then-channel
    ordering used by the file format and the wire.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ConfigError(f"feature map must be H×W×C, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ConfigError(f"feature map dimensions must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ConfigError("feature map contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def pixels(self) -> np.ndarray:
        """(H·W, C) view of the data, one row per spatial position."""
        return self.data.reshape(-1, self.channels)

    @classmethod
    def from_flat(cls, height: int, width: int, channels: int, flat) -> "FeatureMap":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != height * width * channels:
            raise ConfigError(
                f"flat data length {flat.size} != H·W·C = {height * width * channels}"
            )
        return cls(flat.reshape(height, width, channels))


@dataclass(frozen=True)
class ProjectionWeights:
    """A per-pixel linear map (1×1 convolution): in_channels → out_channels."""

    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        b = np.ascontiguousarray(self.bias, dtype=np.float64)
        if w.ndim != 2:
            raise ConfigError(f"projection weights must be 2-D, got shape {w.shape}")
        if b.shape != (w.shape[0],):
            raise ConfigError(
                f"bias length {b.shape} inconsistent with {w.shape[0]} output channels"
            )
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ConfigError("projection parameters contain non-finite values")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def identity(cls, channels: int) -> "ProjectionWeights":
        return cls(np.eye(channels), np.zeros(channels))


@dataclass(frozen=True)
class GroupNormParams:
    """Per-group normalization statistics config with per-channel affine."""

    channels: int
    groups: int
    gain: np.ndarray = field(default=None)  # type: ignore[assignment]
    shift: np.ndarray = field(default=None)  # type: ignore[assignment]
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.channels < 1 or self.groups < 1:
            raise ConfigError("channels and groups must be positive")
        if self.channels % self.groups != 0:
            raise ConfigError(
                f"groups ({self.groups}) must divide channels ({self.channels})"
            )
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        gain = np.ones(self.channels) if self.gain is None else self.gain
        shift = np.zeros(self.channels) if self.shift is None else self.shift
        gain = np.ascontiguousarray(gain, dtype=np.float64)
        shift = np.ascontiguousarray(shift, dtype=np.float64)
        if gain.shape != (self.channels,) or shift.shape != (self.channels,):
            raise ConfigError("gain/shift must have one entry per channel")
        if not (np.isfinite(gain).all() and np.isfinite(shift).all()):
            raise ConfigError("gain/shift contain non-finite values")
        object.__setattr__(self, "gain", gain)
        object.__setattr__(self, "shift", shift)


def apply_projection(fmap: FeatureMap, w: ProjectionWeights) -> FeatureMap:
    """Apply the linear map independently at every pixel.

    Spatial identity is preserved: output pixel (i, j) depends only on input
    pixel (i, j).
    """
    if fmap.channels != w.in_channels:
        raise ConfigError(
            f"map has {fmap.channels} channels, projection expects {w.in_channels}"
        )
    out = fmap.pixels() @ w.weights.T + w.bias
    return FeatureMap(out.reshape(fmap.height, fmap.width, w.out_channels))


def group_normalize(fmap: FeatureMap, p: GroupNormParams) -> FeatureMap:
    """Normalize each channel group over all spatial positions of the map.

    Statistics (mean, biased variance) are computed per group over
    H·W·(channels/groups) values; the per-channel gain/shift is applied
    afterwards. Single-sample semantics: there is no batch axis.
    """
    if fmap.channels != p.channels:
        raise ConfigError(
            f"map has {fmap.channels} channels, norm params expect {p.channels}"
        )
    per_group = p.channels // p.groups
    x = fmap.pixels().reshape(-1, p.groups, per_group)
    mean = x.mean(axis=(0, 2), keepdims=True)
    var = x.var(axis=(0, 2), keepdims=True)
    norm = (x - mean) / np.sqrt(var + p.epsilon)
    out = norm.reshape(-1, p.channels) * p.gain + p.shift
    return FeatureMap(out.reshape(fmap.data.shape))


def relu(fmap: FeatureMap) -> FeatureMap:
    """Elementwise max(0, x)."""
    return FeatureMap(np.maximum(fmap.data, 0.0))


def save_tensor(fmap: FeatureMap, path) -> None:
    """Write the map in the raw tensor format (float32 payload, magic RVQT)."""
    header = _HEADER.pack(
        TENSOR_MAGIC, TENSOR_VERSION, TENSOR_DTYPE_F32, 0, fmap.height, fmap.width
    )
    body = fmap.data.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<I", fmap.channels))
        fh.write(body)


def load_tensor(path) -> FeatureMap:
    """Read a raw tensor file back into a FeatureMap.

    Values are exactly the stored float32s (widened to float64), so
    save → load is bitwise lossless for maps whose values are
    float32-representable.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size + 4:
        raise FormatError(f"{path}: file too short for tensor header")
    magic, version, dtype, _reserved, height, width = _HEADER.unpack_from(raw, 0)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != TENSOR_VERSION:
        raise FormatError(f"{path}: unsupported tensor version {version}")
    if dtype != TENSOR_DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    (channels,) = struct.unpack_from("<I", raw, _HEADER.size)
    if height < 1 or width < 1 or channels < 1:
        raise FormatError(f"{path}: non-positive dimensions {height}×{width}×{channels}")
    expected = _HEADER.size + 4 + height * width * channels * 4
    if len(raw) != expected:
        raise FormatError(
            f"{path}: size mismatch, expected {expected} bytes, got {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size + 4)
    try:
        return FeatureMap.from_flat(height, width, channels, flat)
    except ConfigError as exc:  # non-finite payload values
        raise FormatError(f"{path}: {exc}") from exc
