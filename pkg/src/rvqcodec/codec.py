"""Residual vector quantization codec.

Sender path: channel reduction (1×1 projection + group norm) followed by an
n_q-stage residual quantizer that emits one codebook index per stage per
pixel. Receiver path: sum the indexed entries across stages, then a
post-affine + rectifier, group norm, and channel expansion back to C.

Only the index map ever crosses the wire; both ends hold the same codebook
stack, identified by a 64-bit content hash.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, CorruptPayloadError, StateError
from .hashing import fnv1a64
from .tensors import (
    FeatureMap,
    GroupNormParams,
    ProjectionWeights,
    apply_projection,
    group_normalize,
    relu,
)

# Pixels per chunk when scanning codebooks; bounds the (chunk × K) distance
# buffer to ~128 MB at K=1024.
_DISTANCE_CHUNK = 16384


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class Codebook:
    """K learned C_r-dimensional entries for one quantization stage.

    ``version`` counts mutations; the owning stack uses it to notice that a
    cached content hash went stale. Helpers that modify ``entries`` in place
    must bump it.
    """

    entries: np.ndarray  # (K, C_r)
    stage: int
    usage_counts: np.ndarray = field(default=None)  # type: ignore[assignment]
    frozen: bool = False
    version: int = 0

    def __post_init__(self):
        e = np.ascontiguousarray(self.entries, dtype=np.float64)
        if e.ndim != 2:
            raise ConfigError(f"codebook entries must be K×C_r, got shape {e.shape}")
        if not _is_power_of_two(e.shape[0]) or e.shape[0] < 2:
            raise ConfigError(f"K must be a power of two ≥ 2, got {e.shape[0]}")
        if not np.isfinite(e).all():
            raise ConfigError("codebook entries contain non-finite values")
        self.entries = e
        if self.usage_counts is None:
            self.usage_counts = np.zeros(e.shape[0], dtype=np.int64)
        else:
            self.usage_counts = np.asarray(self.usage_counts, dtype=np.int64)
            if self.usage_counts.shape != (e.shape[0],):
                raise ConfigError("usage_counts length must equal K")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def has_duplicate_entries(self) -> bool:
        """True if two entries are bitwise identical (tie hazard)."""
        rows = {self.entries[k].tobytes() for k in range(self.size)}
        return len(rows) < self.size


class CodebookStack:
    """Ordered codebooks for the n_q stages, shared by sender and receiver.

    The content hash is computed lazily over the float32 serialization of all
    entries (stage order) and cached until a mutation invalidates it, so the
    in-memory hash always matches the hash of the stack after a bundle
    save/load round trip.
    """

    def __init__(self, stages: list[Codebook], frozen: bool = False, seeded: bool = True):
        if not stages:
            raise ConfigError("codebook stack must have at least one stage")
        k0, d0 = stages[0].size, stages[0].dim
        for cb in stages:
            if cb.size != k0 or cb.dim != d0:
                raise ConfigError("all stages must share K and C_r")
        self.stages = stages
        if frozen:
            for cb in stages:
                cb.frozen = True
        self.seeded = seeded
        self._hash: int | None = None
        self._hash_key: tuple[int, ...] | None = None

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def codebook_size(self) -> int:
        return self.stages[0].size

    @property
    def reduced_channels(self) -> int:
        return self.stages[0].dim

    @property
    def frozen(self) -> bool:
        return all(cb.frozen for cb in self.stages)

    @frozen.setter
    def frozen(self, value: bool) -> None:
        for cb in self.stages:
            cb.frozen = bool(value)

    @property
    def content_hash(self) -> int:
        key = tuple(cb.version for cb in self.stages)
        if self._hash is None or self._hash_key != key:
            h = fnv1a64(b"")
            for cb in self.stages:
                h = fnv1a64(cb.entries.astype("<f4").tobytes(), seed=h)
            self._hash = h
            self._hash_key = key
        return self._hash

    def invalidate_hash(self) -> None:
        """Force a recompute on next access; needed only after mutating
        entries without bumping the codebook version."""
        self._hash = None

    def copy(self) -> "CodebookStack":
        stack = CodebookStack(
            [
                Codebook(
                    cb.entries.copy(),
                    cb.stage,
                    cb.usage_counts.copy(),
                    frozen=cb.frozen,
                    version=cb.version,
                )
                for cb in self.stages
            ],
            seeded=self.seeded,
        )
        return stack


@dataclass(frozen=True)
class CodecConfig:
    """Codec hyperparameters; defaults follow the reference operating point."""

    channels: int = 256
    reduction_ratio: int = 16
    stages: int = 3
    codebook_size: int = 64
    ema_alpha: float = 0.8
    groups: int = 4

    def __post_init__(self):
        if self.channels < 1 or self.reduction_ratio < 1 or self.stages < 1:
            raise ConfigError("channels, reduction_ratio and stages must be positive")
        if self.channels % self.reduction_ratio != 0:
            raise ConfigError(
                f"reduction ratio {self.reduction_ratio} must divide channels {self.channels}"
            )
        if not _is_power_of_two(self.codebook_size) or self.codebook_size < 2:
            raise ConfigError(
                f"codebook size must be a power of two ≥ 2, got {self.codebook_size}"
            )
        if not 0.0 < self.ema_alpha < 1.0:
            raise ConfigError("ema_alpha must lie in (0, 1)")
        if self.reduced_channels % self.groups != 0:
            raise ConfigError(
                f"groups ({self.groups}) must divide reduced channels ({self.reduced_channels})"
            )

    @property
    def reduced_channels(self) -> int:
        return self.channels // self.reduction_ratio

    @property
    def log2_codebook_size(self) -> int:
        return self.codebook_size.bit_length() - 1


@dataclass(frozen=True)
class IndexMap:
    """Per-pixel, per-stage code indices — the only transmitted content."""

    indices: np.ndarray  # (H, W, n_q) int32
    codebook_size: int

    def __post_init__(self):
        idx = np.ascontiguousarray(self.indices, dtype=np.int32)
        if idx.ndim != 3:
            raise ConfigError(f"index map must be H×W×n_q, got shape {idx.shape}")
        if not _is_power_of_two(self.codebook_size) or self.codebook_size < 2:
            raise ConfigError(f"codebook size must be a power of two ≥ 2, got {self.codebook_size}")
        if idx.size and (idx.min() < 0 or idx.max() >= self.codebook_size):
            raise ConfigError(f"indices must lie in [0, {self.codebook_size})")
        object.__setattr__(self, "indices", idx)

    @property
    def height(self) -> int:
        return self.indices.shape[0]

    @property
    def width(self) -> int:
        return self.indices.shape[1]

    @property
    def stages(self) -> int:
        return self.indices.shape[2]

    def flat(self) -> np.ndarray:
        """(H·W, n_q) view, row-major pixel order."""
        return self.indices.reshape(-1, self.stages)


class TrainingHook:
    """Observer for quantizer assignments during training.

    ``observe`` receives, for one stage of one quantize call, the chosen
    entry index and the pre-quantization residual of every pixel, in
    row-major pixel order. Implementations must treat the arrays as
    read-only.
    """

    def observe(self, stage: int, indices: np.ndarray, residuals: np.ndarray) -> None:
        raise NotImplementedError


@dataclass
class CodecModel:
    """Full sender/receiver parameter set around one codebook stack."""

    config: CodecConfig
    reduce_proj: ProjectionWeights  # C → C_r
    reduce_norm: GroupNormParams
    post_affine: ProjectionWeights  # C_r → C_r
    expand_norm: GroupNormParams
    expand_proj: ProjectionWeights  # C_r → C
    codebooks: CodebookStack

    def __post_init__(self):
        c, cr = self.config.channels, self.config.reduced_channels
        chain = [
            (self.reduce_proj.in_channels, c, "reduce_proj input"),
            (self.reduce_proj.out_channels, cr, "reduce_proj output"),
            (self.reduce_norm.channels, cr, "reduce_norm"),
            (self.post_affine.in_channels, cr, "post_affine input"),
            (self.post_affine.out_channels, cr, "post_affine output"),
            (self.expand_norm.channels, cr, "expand_norm"),
            (self.expand_proj.in_channels, cr, "expand_proj input"),
            (self.expand_proj.out_channels, c, "expand_proj output"),
            (self.codebooks.reduced_channels, cr, "codebook dimension"),
            (self.codebooks.num_stages, self.config.stages, "codebook stages"),
            (self.codebooks.codebook_size, self.config.codebook_size, "codebook size"),
        ]
        for got, want, what in chain:
            if got != want:
                raise ConfigError(f"{what}: got {got}, expected {want}")

    @property
    def frozen(self) -> bool:
        return self.codebooks.frozen

    def freeze(self) -> None:
        self.codebooks.frozen = True

    def copy(self) -> "CodecModel":
        return CodecModel(
            config=self.config,
            reduce_proj=copy.deepcopy(self.reduce_proj),
            reduce_norm=copy.deepcopy(self.reduce_norm),
            post_affine=copy.deepcopy(self.post_affine),
            expand_norm=copy.deepcopy(self.expand_norm),
            expand_proj=copy.deepcopy(self.expand_proj),
            codebooks=self.codebooks.copy(),
        )


def init_model(config: CodecConfig, seed: int = 0) -> CodecModel:
    """Fresh unfrozen model with random projections and an unseeded stack.

    Entry 0 of every stage starts at the zero vector (kept through codebook
    seeding as well): a stage that cannot improve a residual can always pick
    it and leave the residual unchanged. Projection scales start away from
    orthonormal so the orthogonality penalty has visible work to do.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    c, cr = config.channels, config.reduced_channels
    reduce_w = rng.normal(0.0, 2.0 / np.sqrt(c), size=(cr, c))
    post_w = np.eye(cr) + rng.normal(0.0, 0.01, size=(cr, cr))
    # Positive bias keeps most of the zero-mean accumulator in the rectifier's
    # linear region at the start of training; the following norm removes it.
    post_b = np.full(cr, 2.0)
    expand_w = rng.normal(0.0, 1.0 / np.sqrt(cr), size=(c, cr))
    expand_b = np.full(c, 0.1)
    stages = []
    for s in range(config.stages):
        entries = rng.normal(0.0, 0.01, size=(config.codebook_size, cr))
        entries[0] = 0.0
        stages.append(Codebook(entries, stage=s))
    return CodecModel(
        config=config,
        reduce_proj=ProjectionWeights(reduce_w, np.zeros(cr)),
        reduce_norm=GroupNormParams(cr, config.groups),
        post_affine=ProjectionWeights(post_w, post_b),
        expand_norm=GroupNormParams(cr, config.groups),
        expand_proj=ProjectionWeights(expand_w, expand_b),
        codebooks=CodebookStack(stages, seeded=False),
    )


def random_stack(
    num_stages: int, codebook_size: int, dim: int, seed: int = 0, scale: float = 1.0
) -> CodebookStack:
    """Random frozen stack for tests and benchmarks."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    stages = [
        Codebook(rng.normal(0.0, scale, size=(codebook_size, dim)), stage=s)
        for s in range(num_stages)
    ]
    return CodebookStack(stages, frozen=True)


def reduce(model: CodecModel, fmap: FeatureMap) -> FeatureMap:
    """Channel reduction: C → C_r via per-pixel projection + group norm."""
    if fmap.channels != model.config.channels:
        raise ConfigError(
            f"map has {fmap.channels} channels, codec expects {model.config.channels}"
        )
    return group_normalize(apply_projection(fmap, model.reduce_proj), model.reduce_norm)


def _nearest_indices(entries: np.ndarray, residual: np.ndarray) -> np.ndarray:
    """Argmin over squared ℓ2 distance; exact ties go to the lowest index.

    Distances are accumulated in float64 via the expanded form
    ‖r‖² − 2 r·e + ‖e‖²; the ‖r‖² term is constant per pixel and dropped.
    """
    entry_sq = np.einsum("kd,kd->k", entries, entries)
    out = np.empty(residual.shape[0], dtype=np.int32)
    for start in range(0, residual.shape[0], _DISTANCE_CHUNK):
        chunk = residual[start : start + _DISTANCE_CHUNK]
        scores = chunk @ entries.T
        scores *= -2.0
        scores += entry_sq
        out[start : start + _DISTANCE_CHUNK] = np.argmin(scores, axis=1)
    return out


def quantize(
    stack: CodebookStack, fr: FeatureMap, hook: TrainingHook | None = None
) -> tuple[IndexMap, np.ndarray]:
    """Run the multi-stage residual quantizer over every pixel.

    Returns the index map and the mean squared residual norm after each stage.
    With a hook, assignments are still computed against the stack as it stood
    at call time; the hook observes (stage, index, pre-quantization residual)
    for every pixel in row-major order and applies its own updates.
    """
    if fr.channels != stack.reduced_channels:
        raise ConfigError(
            f"map has {fr.channels} channels, stack expects {stack.reduced_channels}"
        )
    if hook is not None and stack.frozen:
        raise StateError("cannot attach a training hook to a frozen codebook stack")
    n_px = fr.height * fr.width
    residual = fr.pixels().copy()
    indices = np.empty((n_px, stack.num_stages), dtype=np.int32)
    energy = np.empty(stack.num_stages, dtype=np.float64)
    for s, cb in enumerate(stack.stages):
        idx = _nearest_indices(cb.entries, residual)
        indices[:, s] = idx
        if hook is not None:
            hook.observe(s, idx, residual)
        residual = residual - cb.entries[idx]
        energy[s] = np.mean(np.einsum("nd,nd->n", residual, residual))
    index_map = IndexMap(
        indices.reshape(fr.height, fr.width, stack.num_stages), stack.codebook_size
    )
    return index_map, energy


def lookup_accumulate(stack: CodebookStack, idx: IndexMap) -> FeatureMap:
    """Receiver-side reconstruction of the quantized map: sum of the selected
    entries across stages, per pixel."""
    if idx.stages != stack.num_stages:
        raise CorruptPayloadError(
            f"index map has {idx.stages} stages, stack has {stack.num_stages}"
        )
    if idx.codebook_size != stack.codebook_size:
        raise CorruptPayloadError(
            f"index map encodes K={idx.codebook_size}, stack has K={stack.codebook_size}"
        )
    flat = idx.flat()
    if flat.size and flat.max() >= stack.codebook_size:
        raise CorruptPayloadError("index out of range for this codebook stack")
    acc = np.zeros((flat.shape[0], stack.reduced_channels), dtype=np.float64)
    for s, cb in enumerate(stack.stages):
        acc += cb.entries[flat[:, s]]
    return FeatureMap(acc.reshape(idx.height, idx.width, stack.reduced_channels))


def decompress(model: CodecModel, idx: IndexMap) -> FeatureMap:
    """Receiver path: lookup-accumulate → post-affine + rectifier → group
    norm → channel expansion + rectifier. Deterministic given model and idx."""
    z_q = lookup_accumulate(model.codebooks, idx)
    z_post = relu(apply_projection(z_q, model.post_affine))
    normed = group_normalize(z_post, model.expand_norm)
    return relu(apply_projection(normed, model.expand_proj))


def encode(model: CodecModel, fmap: FeatureMap) -> IndexMap:
    """Sender path: reduce then quantize, no codebook updates."""
    index_map, _ = quantize(model.codebooks, reduce(model, fmap))
    return index_map


def bits_per_pixel(config: CodecConfig) -> int:
    """Transmitted bits per spatial location: n_q · log2 K (exact)."""
    return config.stages * config.log2_codebook_size


def compression_ratio(config: CodecConfig) -> float:
    """Raw 32-bit-float feature bits per pixel (32·C) over transmitted bits.

    Round to the nearest integer for table output.
    """
    return 32.0 * config.channels / bits_per_pixel(config)


def usage_histogram(stack: CodebookStack, idx: IndexMap, stage: int) -> np.ndarray:
    """Fraction of pixels assigned to each code at one stage; sums to 1."""
    if not 0 <= stage < stack.num_stages:
        raise ConfigError(f"stage {stage} out of range [0, {stack.num_stages})")
    if idx.codebook_size != stack.codebook_size:
        raise CorruptPayloadError(
            f"index map encodes K={idx.codebook_size}, stack has K={stack.codebook_size}"
        )
    counts = np.bincount(idx.flat()[:, stage], minlength=stack.codebook_size)
    return counts / counts.sum()
