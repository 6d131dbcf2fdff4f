"""Spatial-identity-preserving feature codec with index-only messaging.

Per-pixel channel reduction feeds a multi-stage residual vector quantizer;
only the per-stage code indices cross the wire, bit-packed behind a small
header carrying a codebook content hash. A deterministic multi-agent
simulator exchanges payloads over rate-limited links under a bit budget.

Submodule attributes are loaded lazily so that importing the package (e.g.
for the CLI) does not pull in numpy before thread caps are applied.
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    "tensors": [
        "FeatureMap", "ProjectionWeights", "GroupNormParams",
        "apply_projection", "group_normalize", "relu",
        "save_tensor", "load_tensor",
    ],
    "codec": [
        "Codebook", "CodebookStack", "CodecConfig", "CodecModel", "IndexMap",
        "TrainingHook", "init_model", "random_stack", "reduce", "quantize",
        "lookup_accumulate", "decompress", "encode", "bits_per_pixel",
        "compression_ratio", "usage_histogram",
    ],
    "wire": [
        "Payload", "PayloadHeader", "payload_size_bits", "pack", "parse_payload",
        "unpack", "bundle_bytes", "model_from_bundle_bytes", "save_model",
        "load_model",
    ],
    "training": [
        "TrainingConfig", "LossReport", "ema_update", "ema_batch_update",
        "EmaHook", "commitment_loss", "ortho_loss", "ortho_loss_gradient",
        "fit", "kmeans_reference", "seed_codebooks", "save_checkpoint",
        "load_checkpoint",
    ],
    "datagen": [
        "SceneSpec", "generate_scene", "generate_corpus", "FileCorpus",
        "SceneCorpus", "background_fraction_of",
    ],
    "sim": [
        "AgentSpec", "LinkSpec", "BudgetConfig", "RoundReport", "SimWorld",
        "fuse", "run_round", "sweep", "load_world", "report_to_json",
    ],
    "errors": [
        "ConfigError", "StateError", "FormatError", "PayloadError",
        "TruncationError", "CorruptPayloadError", "CodebookDesyncError",
        "TrainingError",
    ],
    "hashing": ["fnv1a64"],
}

_ATTR_TO_MODULE = {name: mod for mod, names in _EXPORTS.items() for name in names}
__all__ = sorted(_ATTR_TO_MODULE)


def __getattr__(name):
    mod = _ATTR_TO_MODULE.get(name)
    if mod is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    value = getattr(import_module(f".{mod}", __name__), name)
    globals()[name] = value
    return value


def __dir__():
    return sorted(set(globals()) | set(__all__))
