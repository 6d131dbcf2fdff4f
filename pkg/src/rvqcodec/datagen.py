"""Synthetic feature corpus: sparse high-magnitude foreground blobs over a
dominant low-magnitude background.

The generator targets the statistical signature the codec is built for: a
configurable fraction of spatial positions (default 97%) carry only faint
background noise, while a handful of compact blobs carry structured
activations concentrated in a random channel subset. Generation is a pure
function of the SceneSpec, so corpora can be regenerated from seeds instead
of held in memory.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, FormatError
from .tensors import FeatureMap, load_tensor, save_tensor

__all__ = [
    "SceneSpec",
    "generate_scene",
    "background_fraction_of",
    "generate_corpus",
    "write_manifest",
    "read_manifest",
    "FileCorpus",
    "SceneCorpus",
    "load_tensor",
    "save_tensor",
    "FOREGROUND_THRESHOLD",
]

# Magnitude separating foreground from background pixels: background noise
# stays well below, blob activations well above.
FOREGROUND_THRESHOLD = 0.25

_BACKGROUND_SIGMA = 0.02


@dataclass(frozen=True)
class SceneSpec:
    """Deterministic recipe for one synthetic scene."""

    height: int = 128
    width: int = 128
    channels: int = 256
    background_fraction: float = 0.97
    n_blobs: int = 6
    blob_scale: float = 1.0
    channel_sparsity: float = 0.12
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ConfigError("scene dimensions must be positive")
        if not 0.0 < self.background_fraction <= 1.0:
            raise ConfigError("background_fraction must lie in (0, 1]")
        if not 0.0 < self.channel_sparsity < 1.0:
            raise ConfigError("channel_sparsity must lie in (0, 1)")
        if self.n_blobs < 0:
            raise ConfigError("n_blobs must be non-negative")
        if self.blob_scale < 0.0:
            raise ConfigError("blob_scale must be non-negative")


def _blob_radii(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Per-blob radii whose total disc area matches the foreground budget.

    blob_scale controls radius spread between blobs (0 → all equal); the
    total is renormalized so the realized foreground fraction tracks
    1 − background_fraction regardless.
    """
    target_px = (1.0 - spec.background_fraction) * spec.height * spec.width
    base_area = target_px / spec.n_blobs
    jitter = 1.0 + 0.35 * spec.blob_scale * rng.uniform(-1.0, 1.0, size=spec.n_blobs)
    areas = base_area * jitter**2
    areas *= target_px / areas.sum()
    radii = np.sqrt(areas / np.pi)
    if radii.max() > min(spec.height, spec.width) / 2.0 - 1.0:
        raise ConfigError(
            f"blob radius {radii.max():.1f} does not fit a {spec.height}×{spec.width} map"
        )
    return radii


def generate_scene(spec: SceneSpec) -> FeatureMap:
    """Generate one scene; bitwise deterministic given the SceneSpec.

    Values are quantized to the float32 grid so the raw tensor file format
    round-trips scenes exactly.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed)))
    data = np.abs(rng.normal(0.0, _BACKGROUND_SIGMA, size=(spec.height, spec.width, spec.channels)))
    if spec.n_blobs > 0 and spec.background_fraction < 1.0:
        radii = _blob_radii(spec, rng)
        centers = _place_centers(spec, radii, rng)
        ys = np.arange(spec.height)[:, None]
        xs = np.arange(spec.width)[None, :]
        n_active = max(1, round(spec.channel_sparsity * spec.channels))
        for (cy, cx), r in zip(centers, radii):
            dist_sq = (ys - cy) ** 2 + (xs - cx) ** 2
            mask = dist_sq <= r * r
            amplitude = rng.uniform(1.2, 3.0)
            active = rng.choice(spec.channels, size=n_active, replace=False)
            # Smooth falloff with a floor: even the disc rim stays clearly
            # above FOREGROUND_THRESHOLD.
            profile = amplitude * (0.35 + 0.65 * np.exp(-2.0 * dist_sq[mask] / (r * r)))
            weights = rng.uniform(0.8, 1.2, size=n_active)
            patch = profile[:, None] * weights[None, :]
            flat = data.reshape(-1, spec.channels)
            px = np.flatnonzero(mask.reshape(-1))
            flat[np.ix_(px, active)] = patch
    return FeatureMap(data.astype(np.float32).astype(np.float64))


def _place_centers(
    spec: SceneSpec, radii: np.ndarray, rng: np.random.Generator
) -> list[tuple[float, float]]:
    """Sample non-overlapping in-bounds blob centers (deterministic rejection)."""
    centers: list[tuple[float, float]] = []
    for i, r in enumerate(radii):
        placed = False
        for _ in range(200):
            cy = rng.uniform(r + 1.0, spec.height - r - 1.0)
            cx = rng.uniform(r + 1.0, spec.width - r - 1.0)
            if all(
                (cy - oy) ** 2 + (cx - ox) ** 2 > (r + radii[j] + 1.0) ** 2
                for j, (oy, ox) in enumerate(centers)
            ):
                centers.append((cy, cx))
                placed = True
                break
        if not placed:
            raise ConfigError(
                f"could not place blob {i} (radius {r:.1f}) without overlap; "
                "map too small for the requested foreground"
            )
    return centers


def background_fraction_of(fmap: FeatureMap, threshold: float = FOREGROUND_THRESHOLD) -> float:
    """Fraction of pixels whose peak channel magnitude stays below threshold."""
    peak = np.abs(fmap.data).max(axis=2)
    return float(np.mean(peak < threshold))


# --- corpus on disk ---------------------------------------------------------


def generate_corpus(base: SceneSpec, count: int, out_dir, first_seed: int = 0,
                    val_fraction: float = 0.0) -> str:
    """Write ``count`` scenes as raw tensor files plus a manifest; returns the
    manifest path. The last ``val_fraction`` of scenes are tagged "val"."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    n_val = int(round(count * val_fraction))
    for i in range(count):
        spec = replace(base, seed=first_seed + i)
        name = f"scene_{i:04d}.rvqt"
        save_tensor(generate_scene(spec), os.path.join(out_dir, name))
        split = "val" if i >= count - n_val else "train"
        entries.append({"path": name, "split": split, "seed": spec.seed})
    manifest_path = os.path.join(out_dir, "manifest.json")
    write_manifest(entries, manifest_path)
    return manifest_path


def write_manifest(entries: list[dict], path) -> None:
    with open(path, "w") as fh:
        json.dump({"scenes": entries}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> list[dict]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "scenes" not in doc:
        raise FormatError(f"{path}: manifest must be an object with a 'scenes' list")
    return doc["scenes"]


class FileCorpus:
    """Sequence of feature maps backed by raw tensor files from a manifest."""

    def __init__(self, manifest_path, split: str | None = None):
        base = os.path.dirname(os.path.abspath(manifest_path))
        entries = read_manifest(manifest_path)
        if split is not None:
            entries = [e for e in entries if e.get("split") == split]
        self.paths = [os.path.join(base, e["path"]) for e in entries]

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, i: int) -> FeatureMap:
        return load_tensor(self.paths[i])


class SceneCorpus:
    """Sequence of feature maps regenerated on demand from scene specs."""

    def __init__(self, specs: list[SceneSpec]):
        self.specs = list(specs)

    @classmethod
    def from_base(cls, base: SceneSpec, count: int, first_seed: int = 0) -> "SceneCorpus":
        return cls([replace(base, seed=first_seed + i) for i in range(count)])

    def __len__(self) -> int:
        return len(self.specs)

    def __getitem__(self, i: int) -> FeatureMap:
        return generate_scene(self.specs[i])
