"""Bit-exact serialization: index payloads and codebook bundles.

These are the only bytes that cross the (simulated) network or land on disk
as codec state. Conventions, fixed once and golden-tested: MSB-first bit
order inside the index stream, little-endian multi-byte header fields.
Byte-level layouts are documented in docs/wire-format.md.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .codec import (
    Codebook,
    CodebookStack,
    CodecConfig,
    CodecModel,
    IndexMap,
)
from .errors import (
    CodebookDesyncError,
    ConfigError,
    CorruptPayloadError,
    FormatError,
    PayloadError,
    TruncationError,
)
from .hashing import fnv1a64
from .tensors import GroupNormParams, ProjectionWeights

PAYLOAD_MAGIC = b"RVQP"
PAYLOAD_VERSION = 1
_PAYLOAD_HEADER = struct.Struct("<4sBHHBBQIH")

BUNDLE_MAGIC = b"RVQC"
BUNDLE_VERSION = 1
_BUNDLE_HEADER = struct.Struct("<4sBHHBHBQ")

MAX_LOG2_K = 16


@dataclass(frozen=True)
class PayloadHeader:
    """Fixed 25-byte header in front of every index bitstream."""

    height: int
    width: int
    stages: int
    log2_codebook_size: int
    codebook_hash: int
    frame_id: int = 0
    agent_id: int = 0
    version: int = PAYLOAD_VERSION

    def __post_init__(self):
        if not 1 <= self.log2_codebook_size <= MAX_LOG2_K:
            raise ConfigError(
                f"log2 codebook size must lie in [1, {MAX_LOG2_K}], got {self.log2_codebook_size}"
            )
        if not (0 < self.height <= 0xFFFF and 0 < self.width <= 0xFFFF):
            raise ConfigError(f"height/width must fit u16, got {self.height}×{self.width}")
        if not 1 <= self.stages <= 0xFF:
            raise ConfigError(f"stage count must fit u8, got {self.stages}")

    def to_bytes(self) -> bytes:
        return _PAYLOAD_HEADER.pack(
            PAYLOAD_MAGIC,
            self.version,
            self.height,
            self.width,
            self.stages,
            self.log2_codebook_size,
            self.codebook_hash,
            self.frame_id,
            self.agent_id,
        )

    @property
    def bitstream_bits(self) -> int:
        return self.height * self.width * self.stages * self.log2_codebook_size

    @property
    def bitstream_bytes(self) -> int:
        return (self.bitstream_bits + 7) // 8


@dataclass(frozen=True)
class Payload:
    """Header plus the bit-packed index stream (zero-padded to a byte)."""

    header: PayloadHeader
    bitstream: bytes

    def to_bytes(self) -> bytes:
        return self.header.to_bytes() + self.bitstream

    @property
    def wire_bits(self) -> int:
        """Bits of index content on the wire (padding included)."""
        return 8 * len(self.bitstream)


def payload_size_bits(height: int, width: int, stages: int, codebook_size: int) -> int:
    """Exact index bit count H·W·n_q·log2 K for one map."""
    if codebook_size < 2 or codebook_size & (codebook_size - 1):
        raise ConfigError(f"codebook size must be a power of two ≥ 2, got {codebook_size}")
    return height * width * stages * (codebook_size.bit_length() - 1)


def pack(
    idx: IndexMap,
    codebook_hash: int,
    frame_id: int = 0,
    agent_id: int = 0,
) -> Payload:
    """Serialize an index map: row-major pixel order, stages innermost, each
    index as exactly log2 K bits, MSB first."""
    bits_per_index = idx.codebook_size.bit_length() - 1
    header = PayloadHeader(
        height=idx.height,
        width=idx.width,
        stages=idx.stages,
        log2_codebook_size=bits_per_index,
        codebook_hash=codebook_hash,
        frame_id=frame_id,
        agent_id=agent_id,
    )
    flat = idx.indices.reshape(-1).astype(np.uint32)
    shifts = np.arange(bits_per_index - 1, -1, -1, dtype=np.uint32)
    bits = ((flat[:, None] >> shifts[None, :]) & 1).astype(np.uint8)
    stream = np.packbits(bits.reshape(-1))  # MSB-first, zero-padded
    assert stream.size == header.bitstream_bytes
    return Payload(header, stream.tobytes())


def parse_payload(raw: bytes) -> Payload:
    """Validate a wire message and split it into header + bitstream."""
    if len(raw) < _PAYLOAD_HEADER.size:
        raise TruncationError(
            f"payload has {len(raw)} bytes, header alone needs {_PAYLOAD_HEADER.size}"
        )
    magic, version, height, width, stages, log2_k, cb_hash, frame_id, agent_id = (
        _PAYLOAD_HEADER.unpack_from(raw, 0)
    )
    if magic != PAYLOAD_MAGIC:
        raise PayloadError(f"bad payload magic {magic!r}")
    if version != PAYLOAD_VERSION:
        raise PayloadError(f"unsupported payload version {version}")
    try:
        header = PayloadHeader(
            height=height,
            width=width,
            stages=stages,
            log2_codebook_size=log2_k,
            codebook_hash=cb_hash,
            frame_id=frame_id,
            agent_id=agent_id,
            version=version,
        )
    except ConfigError as exc:
        raise PayloadError(f"invalid payload header: {exc}") from exc
    body = raw[_PAYLOAD_HEADER.size :]
    if len(body) != header.bitstream_bytes:
        raise TruncationError(
            f"bitstream length {len(body)} != expected {header.bitstream_bytes} bytes"
        )
    return Payload(header, body)


def unpack(payload: Payload | bytes, expected_codebook_hash: int | None = None) -> IndexMap:
    """Exact inverse of pack.

    When ``expected_codebook_hash`` is given (the hash of the local codebook
    stack), a mismatch raises CodebookDesyncError before any index is
    decoded — the actionable "agents disagree on codebooks" failure.
    """
    if isinstance(payload, (bytes, bytearray)):
        payload = parse_payload(bytes(payload))
    header = payload.header
    if len(payload.bitstream) != header.bitstream_bytes:
        raise TruncationError(
            f"bitstream length {len(payload.bitstream)} != expected {header.bitstream_bytes} bytes"
        )
    if expected_codebook_hash is not None and header.codebook_hash != expected_codebook_hash:
        raise CodebookDesyncError(
            f"payload codebook hash {header.codebook_hash:#018x} != local "
            f"{expected_codebook_hash:#018x}"
        )
    b = header.log2_codebook_size
    n_indices = header.height * header.width * header.stages
    bits = np.unpackbits(np.frombuffer(payload.bitstream, dtype=np.uint8))
    if bits[n_indices * b :].any():
        raise CorruptPayloadError("nonzero padding bits in payload")
    weights = 1 << np.arange(b - 1, -1, -1, dtype=np.uint32)
    values = bits[: n_indices * b].reshape(n_indices, b).astype(np.uint32) @ weights
    indices = values.astype(np.int32).reshape(header.height, header.width, header.stages)
    return IndexMap(indices, 1 << b)


# --- codebook bundle (codec state on disk) ---------------------------------

# Parameter serialization order. Everything is little-endian float32; epsilon
# travels as a single float after each norm's gain/shift.
_PARAM_ORDER = (
    "reduce_w",
    "reduce_b",
    "reduce_gain",
    "reduce_shift",
    "reduce_eps",
    "post_w",
    "post_b",
    "expand_gain",
    "expand_shift",
    "expand_eps",
    "expand_w",
    "expand_b",
    "codebooks",
)


def _model_param_arrays(model: CodecModel) -> dict[str, np.ndarray]:
    return {
        "reduce_w": model.reduce_proj.weights,
        "reduce_b": model.reduce_proj.bias,
        "reduce_gain": model.reduce_norm.gain,
        "reduce_shift": model.reduce_norm.shift,
        "reduce_eps": np.array([model.reduce_norm.epsilon]),
        "post_w": model.post_affine.weights,
        "post_b": model.post_affine.bias,
        "expand_gain": model.expand_norm.gain,
        "expand_shift": model.expand_norm.shift,
        "expand_eps": np.array([model.expand_norm.epsilon]),
        "expand_w": model.expand_proj.weights,
        "expand_b": model.expand_proj.bias,
        "codebooks": np.stack([cb.entries for cb in model.codebooks.stages]),
    }


def bundle_bytes(model: CodecModel) -> bytes:
    """Serialize a model to the codebook bundle format (magic RVQC)."""
    cfg = model.config
    if cfg.codebook_size > 0x8000:
        raise ConfigError("bundle format stores K as u16; K > 32768 unsupported")
    params = _model_param_arrays(model)
    body = b"".join(params[name].astype("<f4").tobytes() for name in _PARAM_ORDER)
    header = _BUNDLE_HEADER.pack(
        BUNDLE_MAGIC,
        BUNDLE_VERSION,
        cfg.channels,
        cfg.reduced_channels,
        cfg.stages,
        cfg.codebook_size,
        cfg.groups,
        fnv1a64(body),
    )
    return header + body


def model_from_bundle_bytes(raw: bytes) -> CodecModel:
    """Rebuild a frozen model from bundle bytes, verifying the content hash."""
    if len(raw) < _BUNDLE_HEADER.size:
        raise FormatError("bundle too short for header")
    magic, version, channels, reduced, stages, k, groups, content_hash = (
        _BUNDLE_HEADER.unpack_from(raw, 0)
    )
    if magic != BUNDLE_MAGIC:
        raise FormatError(f"bad bundle magic {magic!r}")
    if version != BUNDLE_VERSION:
        raise FormatError(f"unsupported bundle version {version}")
    if reduced == 0 or channels % reduced != 0:
        raise FormatError(f"inconsistent channel pair C={channels}, C_r={reduced}")
    body = raw[_BUNDLE_HEADER.size :]
    sizes = {
        "reduce_w": reduced * channels,
        "reduce_b": reduced,
        "reduce_gain": reduced,
        "reduce_shift": reduced,
        "reduce_eps": 1,
        "post_w": reduced * reduced,
        "post_b": reduced,
        "expand_gain": reduced,
        "expand_shift": reduced,
        "expand_eps": 1,
        "expand_w": channels * reduced,
        "expand_b": channels,
        "codebooks": stages * k * reduced,
    }
    expected = 4 * sum(sizes.values())
    if len(body) != expected:
        raise FormatError(f"bundle body is {len(body)} bytes, expected {expected}")
    if fnv1a64(body) != content_hash:
        raise FormatError("bundle content hash mismatch (corrupt file)")
    flat = np.frombuffer(body, dtype="<f4").astype(np.float64)
    arrays = {}
    offset = 0
    for name in _PARAM_ORDER:
        arrays[name] = flat[offset : offset + sizes[name]]
        offset += sizes[name]
    try:
        config = CodecConfig(
            channels=channels,
            reduction_ratio=channels // reduced,
            stages=stages,
            codebook_size=k,
            groups=groups,
        )
    except ConfigError as exc:
        raise FormatError(f"bundle header declares an invalid codec config: {exc}") from exc
    entries = arrays["codebooks"].reshape(stages, k, reduced)
    stack = CodebookStack(
        [Codebook(entries[s].copy(), stage=s) for s in range(stages)],
        frozen=True,
    )
    return CodecModel(
        config=config,
        reduce_proj=ProjectionWeights(
            arrays["reduce_w"].reshape(reduced, channels), arrays["reduce_b"]
        ),
        reduce_norm=GroupNormParams(
            reduced, config.groups, arrays["reduce_gain"], arrays["reduce_shift"],
            float(arrays["reduce_eps"][0]),
        ),
        post_affine=ProjectionWeights(
            arrays["post_w"].reshape(reduced, reduced), arrays["post_b"]
        ),
        expand_norm=GroupNormParams(
            reduced, config.groups, arrays["expand_gain"], arrays["expand_shift"],
            float(arrays["expand_eps"][0]),
        ),
        expand_proj=ProjectionWeights(
            arrays["expand_w"].reshape(channels, reduced), arrays["expand_b"]
        ),
        codebooks=stack,
    )


def save_model(model: CodecModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(bundle_bytes(model))


def load_model(path) -> CodecModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        return model_from_bundle_bytes(raw)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc
