"""Codec fitting: EMA codebook learning plus analytic-gradient training of
the projection/norm parameters against a reconstruction proxy objective.

The quantizer itself is not differentiated. Gradient flow uses the
straight-through treatment (lookup acts as identity on the backward pass),
codebooks adapt by per-assignment EMA in deterministic pixel order, and the
remaining parameters follow explicit hand-derived gradients (no autodiff
dependency) with Adam and a OneCycle learning-rate shape.

Objective per batch:
    total = recon_mse + commit_loss + ortho_loss
where recon_mse is mean ‖decode(encode(F)) − F‖² over elements, commit_loss
is β · mean ‖sg[z_q] − F_r‖² (z_q held constant), and ortho_loss penalizes
non-orthonormal rows of the reduce projection.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .codec import (
    Codebook,
    CodebookStack,
    CodecModel,
    IndexMap,
    TrainingHook,
    _nearest_indices,
    lookup_accumulate,
    quantize,
)
from .errors import ConfigError, FormatError, StateError, TrainingError
from .tensors import FeatureMap, GroupNormParams, ProjectionWeights

__all__ = [
    "TrainingConfig",
    "LossReport",
    "ema_update",
    "ema_batch_update",
    "EmaHook",
    "commitment_loss",
    "ortho_loss",
    "ortho_loss_gradient",
    "forward_backward",
    "Adam",
    "one_cycle_lr",
    "seed_codebooks",
    "fit",
    "kmeans_reference",
    "write_training_manifest",
    "read_training_manifest",
    "save_checkpoint",
    "load_checkpoint",
]

# OneCycle shape: linear warmup over the first 30% of steps from peak/25,
# then cosine decay back down to peak/25.
_WARMUP_FRACTION = 0.3
_LR_DIV = 25.0

# Parameters moved by gradient steps (codebooks are EMA-only, epsilons fixed).
_TRAINABLE_PARAMS = (
    "reduce_w",
    "reduce_b",
    "reduce_gain",
    "reduce_shift",
    "post_w",
    "post_b",
    "expand_gain",
    "expand_shift",
    "expand_w",
    "expand_b",
)

_SEED_SAMPLE_LIMIT = 20000
_RESEED_POOL_LIMIT = 4096


@dataclass(frozen=True)
class TrainingConfig:
    """Fitting hyperparameters; defaults follow the reference recipe."""

    ema_alpha: float = 0.8
    beta_commit: float = 0.05
    lambda_ortho: float = 1e-4
    epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.ema_alpha < 1.0:
            raise ConfigError("ema_alpha must lie in (0, 1)")
        if self.beta_commit < 0.0 or self.lambda_ortho < 0.0:
            raise ConfigError("loss weights must be non-negative")
        if self.learning_rate <= 0.0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")


@dataclass(frozen=True)
class LossReport:
    """Loss terms averaged over one epoch; total is their exact sum."""

    epoch: int
    recon_mse: float
    commit_loss: float
    ortho_loss: float
    total: float
    per_stage_residual: tuple[float, ...]
    codes_reseeded: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


# --- EMA codebook updates ---------------------------------------------------


def ema_update(cb: Codebook, chosen_k: int, residual: np.ndarray, alpha: float) -> None:
    """Single-assignment update: e_k ← (1−α)·e_k + α·r.

    Bumps the usage count and the codebook version (so any cached stack
    content hash goes stale).
    """
    if cb.frozen:
        raise StateError("cannot update a frozen codebook")
    if not 0 <= chosen_k < cb.size:
        raise ConfigError(f"code {chosen_k} out of range [0, {cb.size})")
    r = np.asarray(residual, dtype=np.float64)
    if r.shape != (cb.dim,):
        raise ConfigError(f"residual shape {r.shape} != ({cb.dim},)")
    cb.entries[chosen_k] *= 1.0 - alpha
    cb.entries[chosen_k] += alpha * r
    cb.usage_counts[chosen_k] += 1
    cb.version += 1


def ema_batch_update(
    entries: np.ndarray, codes: np.ndarray, residuals: np.ndarray, alpha: float
) -> tuple[np.ndarray, np.ndarray]:
    """Closed form of applying ema_update sequentially over ``codes``.

    For a code hit m times with residuals r_1..r_m (in order):
        e' = (1−α)^m · e + α · Σ_j (1−α)^(m−j) · r_j
    Order between different codes is irrelevant (their updates commute), so
    one grouped pass reproduces the sequential pixel-order result.

    Returns (new_entries, per-code hit counts); ``entries`` is not modified.
    """
    codes = np.asarray(codes)
    k = entries.shape[0]
    counts = np.bincount(codes, minlength=k)
    new = entries * (1.0 - alpha) ** counts[:, None]
    if codes.size:
        order = np.argsort(codes, kind="stable")
        sorted_res = residuals[order]
        starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
        rank = np.arange(codes.size) - np.repeat(starts, counts)
        m = np.repeat(counts, counts)
        weights = alpha * (1.0 - alpha) ** (m - 1 - rank)
        hit = counts > 0
        sums = np.add.reduceat(sorted_res * weights[:, None], starts[hit], axis=0)
        new[hit] += sums
    return new, counts


class EmaHook(TrainingHook):
    """Buffers quantizer assignments for one batch, then applies the EMA rule.

    Assignments across the whole batch are computed against the stack as it
    stood at the start of the batch; ``apply`` then replays them in pixel
    order (maps in batch order, pixels row-major) via the closed form above.
    A subsample of the latest residuals per stage is kept around for
    dead-code reseeding.
    """

    def __init__(self, num_stages: int):
        self.num_stages = num_stages
        self._obs: list[list[tuple[np.ndarray, np.ndarray]]] = [[] for _ in range(num_stages)]
        self.residual_pools: list[np.ndarray | None] = [None] * num_stages

    def observe(self, stage: int, indices: np.ndarray, residuals: np.ndarray) -> None:
        self._obs[stage].append((indices, residuals))

    def apply(self, stack: CodebookStack, alpha: float) -> None:
        if stack.frozen:
            raise StateError("cannot apply EMA updates to a frozen codebook stack")
        for s, cb in enumerate(stack.stages):
            if not self._obs[s]:
                continue
            codes = np.concatenate([idx for idx, _ in self._obs[s]])
            res = np.concatenate([r for _, r in self._obs[s]], axis=0)
            new_entries, counts = ema_batch_update(cb.entries, codes, res, alpha)
            cb.entries[:] = new_entries
            cb.usage_counts += counts
            cb.version += 1
            stride = max(1, res.shape[0] // _RESEED_POOL_LIMIT)
            self.residual_pools[s] = res[::stride][:_RESEED_POOL_LIMIT].copy()
        self._obs = [[] for _ in range(self.num_stages)]


# --- loss terms -------------------------------------------------------------


def commitment_loss(z: FeatureMap, z_q: FeatureMap, beta: float) -> float:
    """β · mean squared difference; z_q acts as a constant (stop-gradient)."""
    if z.data.shape != z_q.data.shape:
        raise ConfigError(
            f"shape mismatch: z is {z.data.shape}, z_q is {z_q.data.shape}"
        )
    diff = z_q.data - z.data
    return float(beta * np.mean(diff * diff))


def ortho_loss(w: ProjectionWeights, lam: float) -> float:
    """λ · ‖W Wᵀ − I‖_F² over the reduce projection's rows."""
    gram = w.weights @ w.weights.T
    gram[np.diag_indices_from(gram)] -= 1.0
    return float(lam * np.sum(gram * gram))


def ortho_loss_gradient(w: ProjectionWeights, lam: float) -> np.ndarray:
    """d/dW of ortho_loss: 4λ (W Wᵀ − I) W."""
    gram = w.weights @ w.weights.T
    gram[np.diag_indices_from(gram)] -= 1.0
    return 4.0 * lam * gram @ w.weights


def _ortho_terms(weights: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
    gram = weights @ weights.T
    gram[np.diag_indices_from(gram)] -= 1.0
    return float(lam * np.sum(gram * gram)), 4.0 * lam * gram @ weights


# --- forward/backward over a batch ------------------------------------------


def _gn_forward(x, gain, shift, groups, eps):
    """Group norm over a (B, P, C) batch, statistics per map per group.

    Matches tensors.group_normalize applied to each map independently.
    """
    b, p, c = x.shape
    cg = c // groups
    xg = x.reshape(b, p, groups, cg)
    mu = xg.mean(axis=(1, 3), keepdims=True)
    var = xg.var(axis=(1, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(b, p, c)
    return xhat * gain + shift, xhat, inv


def _gn_backward(dy, xhat, inv, gain, groups):
    b, p, c = dy.shape
    cg = c // groups
    dgain = np.einsum("bpc,bpc->c", dy, xhat)
    dshift = dy.sum(axis=(0, 1))
    dxh = (dy * gain).reshape(b, p, groups, cg)
    xg = xhat.reshape(b, p, groups, cg)
    m1 = dxh.mean(axis=(1, 3), keepdims=True)
    m2 = (dxh * xg).mean(axis=(1, 3), keepdims=True)
    dx = (inv * (dxh - m1 - xg * m2)).reshape(b, p, c)
    return dx, dgain, dshift


def forward_backward(
    params: dict,
    stack: CodebookStack,
    x: np.ndarray,
    height: int,
    width: int,
    *,
    groups: int,
    beta_commit: float,
    lambda_ortho: float,
    reduce_eps: float = 1e-5,
    expand_eps: float = 1e-5,
    bypass_quantizer: bool = False,
    pinned_indices: list[IndexMap] | None = None,
    hook: TrainingHook | None = None,
    want_grads: bool = True,
) -> tuple[dict, dict | None]:
    """One training step's losses and gradients over a (B, H·W, C) batch.

    Quantizer treatment selects what the reconstruction path sees:
      - real (default): nearest-code lookup with straight-through gradients
        (d z_q / d F_r = identity);
      - ``bypass_quantizer``: z_q := F_r, making the whole pipeline smooth —
        used to finite-difference-check every upstream gradient;
      - ``pinned_indices``: codes fixed by the caller, z_q constant w.r.t.
        F_r (no straight-through term) — smooth in all parameters, used to
        finite-difference-check the decoder and commitment gradients.
    """
    if bypass_quantizer and (pinned_indices is not None or hook is not None):
        raise ConfigError("bypass_quantizer excludes pinned indices and hooks")
    b, p, c = x.shape
    cr = params["reduce_w"].shape[0]
    n_stages = stack.num_stages

    h0 = (x.reshape(-1, c) @ params["reduce_w"].T + params["reduce_b"]).reshape(b, p, cr)
    fr, xhat1, inv1 = _gn_forward(h0, params["reduce_gain"], params["reduce_shift"],
                                  groups, reduce_eps)

    energy = np.zeros(n_stages, dtype=np.float64)
    if bypass_quantizer:
        zq = fr
    else:
        zq = np.empty_like(fr)
        for i in range(b):
            fmap = FeatureMap(np.ascontiguousarray(fr[i]).reshape(height, width, cr))
            if pinned_indices is not None:
                idx = pinned_indices[i]
            else:
                idx, e = quantize(stack, fmap, hook)
                energy += e
            zq[i] = lookup_accumulate(stack, idx).pixels()
        energy /= b

    p0 = (zq.reshape(-1, cr) @ params["post_w"].T + params["post_b"]).reshape(b, p, cr)
    p1 = np.maximum(p0, 0.0)
    g2, xhat2, inv2 = _gn_forward(p1, params["expand_gain"], params["expand_shift"],
                                  groups, expand_eps)
    y0 = (g2.reshape(-1, cr) @ params["expand_w"].T + params["expand_b"]).reshape(b, p, c)
    y = np.maximum(y0, 0.0)

    diff = y - x
    recon = float(np.mean(diff * diff))
    cdiff = zq - fr
    commit = float(beta_commit * np.mean(cdiff * cdiff))
    oloss, ograd = _ortho_terms(params["reduce_w"], lambda_ortho)
    losses = {
        "recon_mse": recon,
        "commit_loss": commit,
        "ortho_loss": oloss,
        "total": recon + commit + oloss,
        "per_stage_residual": energy,
    }
    if not want_grads:
        return losses, None

    dy = diff
    dy *= 2.0 / diff.size
    dy[y <= 0.0] = 0.0
    dy2 = dy.reshape(-1, c)
    grads = {
        "expand_w": dy2.T @ g2.reshape(-1, cr),
        "expand_b": dy2.sum(axis=0),
    }
    dg2 = (dy2 @ params["expand_w"]).reshape(b, p, cr)
    dp1, grads["expand_gain"], grads["expand_shift"] = _gn_backward(
        dg2, xhat2, inv2, params["expand_gain"], groups
    )
    dp1[p1 <= 0.0] = 0.0
    dp2 = dp1.reshape(-1, cr)
    grads["post_w"] = dp2.T @ zq.reshape(-1, cr)
    grads["post_b"] = dp2.sum(axis=0)
    dzq = (dp2 @ params["post_w"]).reshape(b, p, cr)

    if bypass_quantizer:
        dfr = dzq
    elif pinned_indices is not None:
        dfr = np.zeros_like(fr)
    else:
        dfr = dzq  # straight-through: lookup is identity on the backward pass
    if beta_commit != 0.0:
        dfr = dfr + (2.0 * beta_commit / cdiff.size) * (fr - zq)

    dh0, grads["reduce_gain"], grads["reduce_shift"] = _gn_backward(
        dfr, xhat1, inv1, params["reduce_gain"], groups
    )
    dh2 = dh0.reshape(-1, cr)
    grads["reduce_w"] = dh2.T @ x.reshape(-1, c) + ograd
    grads["reduce_b"] = dh2.sum(axis=0)
    return losses, grads


# --- optimizer and schedule -------------------------------------------------


class Adam:
    """Standard Adam with bias correction; state keyed like the params dict."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def one_cycle_lr(step: int, total_steps: int, peak_lr: float) -> float:
    """Linear warmup to peak over the first 30% of steps, cosine down to
    peak/25. ``step`` is 0-based."""
    floor = peak_lr / _LR_DIV
    if total_steps <= 1:
        return peak_lr
    warmup = max(1, round(_WARMUP_FRACTION * total_steps))
    if step < warmup:
        return floor + (peak_lr - floor) * step / warmup
    u = (step - warmup) / max(1, total_steps - warmup)
    return floor + (peak_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * u))


# --- codebook seeding and the k-means oracle --------------------------------


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator,
               zero_first: bool) -> np.ndarray:
    """k-means++ D² seeding; optionally pins center 0 at the origin."""
    n, d = points.shape
    centers = np.empty((k, d), dtype=np.float64)
    if zero_first:
        centers[0] = 0.0
    else:
        centers[0] = points[rng.integers(n)]
    d2 = np.einsum("nd,nd->n", points - centers[0], points - centers[0])
    for i in range(1, k):
        total = d2.sum()
        if total > 0:
            j = rng.choice(n, p=d2 / total)
        else:
            j = rng.integers(n)
        centers[i] = points[j]
        delta = points - centers[i]
        np.minimum(d2, np.einsum("nd,nd->n", delta, delta), out=d2)
    return centers


def seed_codebooks(stack: CodebookStack, reduced: np.ndarray,
                   rng: np.random.Generator) -> None:
    """Initialize every stage from the given reduced-space pixel population.

    Stage s is seeded with k-means++ centers of the stage-s residuals
    (entry 0 stays the zero vector), then the residuals are advanced through
    that stage for the next one. Marks the stack seeded.
    """
    if stack.frozen:
        raise StateError("cannot seed a frozen codebook stack")
    pts = np.asarray(reduced, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != stack.reduced_channels:
        raise ConfigError(
            f"seeding points must be N×{stack.reduced_channels}, got {pts.shape}"
        )
    if pts.shape[0] > _SEED_SAMPLE_LIMIT:
        sel = rng.choice(pts.shape[0], size=_SEED_SAMPLE_LIMIT, replace=False)
        residual = pts[sel].copy()
    else:
        residual = pts.copy()
    for cb in stack.stages:
        cb.entries[:] = _kmeans_pp(residual, cb.size, rng, zero_first=True)
        cb.version += 1
        idx = _nearest_indices(cb.entries, residual)
        residual -= cb.entries[idx]
    stack.seeded = True


def kmeans_reference(points: np.ndarray, k: int, iters: int,
                     seed: int = 0) -> np.ndarray:
    """Plain Lloyd k-means (k-means++ init); the distortion oracle the EMA
    codebooks are measured against in tests."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ConfigError(f"points must be N×d, got shape {pts.shape}")
    if k < 1 or k > pts.shape[0]:
        raise ConfigError(f"need 1 ≤ K ≤ #points, got K={k}, #points={pts.shape[0]}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    centers = _kmeans_pp(pts, k, rng, zero_first=False)
    for _ in range(iters):
        idx = _nearest_indices(centers, pts)
        for j in range(k):
            mask = idx == j
            if mask.any():
                centers[j] = pts[mask].mean(axis=0)
    return centers


# --- the fit loop -----------------------------------------------------------


def _params_from_model(model: CodecModel) -> dict:
    return {
        "reduce_w": model.reduce_proj.weights.copy(),
        "reduce_b": model.reduce_proj.bias.copy(),
        "reduce_gain": model.reduce_norm.gain.copy(),
        "reduce_shift": model.reduce_norm.shift.copy(),
        "post_w": model.post_affine.weights.copy(),
        "post_b": model.post_affine.bias.copy(),
        "expand_gain": model.expand_norm.gain.copy(),
        "expand_shift": model.expand_norm.shift.copy(),
        "expand_w": model.expand_proj.weights.copy(),
        "expand_b": model.expand_proj.bias.copy(),
    }


def _assemble_model(config, params, stack, reduce_eps, expand_eps) -> CodecModel:
    cr = config.reduced_channels
    return CodecModel(
        config=config,
        reduce_proj=ProjectionWeights(params["reduce_w"], params["reduce_b"]),
        reduce_norm=GroupNormParams(cr, config.groups, params["reduce_gain"],
                                    params["reduce_shift"], reduce_eps),
        post_affine=ProjectionWeights(params["post_w"], params["post_b"]),
        expand_norm=GroupNormParams(cr, config.groups, params["expand_gain"],
                                    params["expand_shift"], expand_eps),
        expand_proj=ProjectionWeights(params["expand_w"], params["expand_b"]),
        codebooks=stack,
    )


def _reseed_dead_codes(stack, usage_at_epoch_start, pools, rng) -> int:
    """Re-point codes unused for a whole epoch at random recent residuals.

    Entry 0 is structural (the "leave the residual alone" code) and is never
    reseeded.
    """
    total = 0
    for s, cb in enumerate(stack.stages):
        pool = pools[s]
        if pool is None or not len(pool):
            continue
        dead = np.flatnonzero(cb.usage_counts - usage_at_epoch_start[s] == 0)
        dead = dead[dead != 0]
        if not len(dead):
            continue
        picks = rng.integers(0, len(pool), size=len(dead))
        cb.entries[dead] = pool[picks] + rng.normal(0.0, 1e-6, size=(len(dead), cb.dim))
        cb.version += 1
        total += len(dead)
    return total


def fit(
    model: CodecModel, corpus, config: TrainingConfig
) -> tuple[CodecModel, list[LossReport]]:
    """Train a copy of the model on the corpus; returns it frozen, plus the
    per-epoch loss history. Deterministic given config.seed.

    The input model is left untouched. Codebooks are k-means++ seeded from
    the first batch if the stack is unseeded, then adapt by EMA every batch;
    projection/norm parameters take one Adam step per batch under a OneCycle
    schedule.

    Entry 0 of every stage is held at the zero vector throughout (matching
    its role from init_model): a stage can then never increase a pixel's
    residual, which keeps stage-wise residual energy non-increasing on any
    input, trained or not.
    """
    if len(corpus) == 0:
        raise ConfigError("training corpus is empty")
    if model.frozen:
        raise StateError("model is frozen; build a fresh one to retrain")
    first = corpus[0]
    if first.channels != model.config.channels:
        raise ConfigError(
            f"corpus maps have {first.channels} channels, codec expects "
            f"{model.config.channels}"
        )
    height, width = first.height, first.width

    work = model.copy()
    cfg = work.config
    params = _params_from_model(work)
    stack = work.codebooks
    reduce_eps = work.reduce_norm.epsilon
    expand_eps = work.expand_norm.epsilon
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))
    hook = EmaHook(stack.num_stages)
    optimizer = Adam(params)

    n = len(corpus)
    batches_per_epoch = (n + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * batches_per_epoch
    global_step = 0
    reports: list[LossReport] = []

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        usage_start = [cb.usage_counts.copy() for cb in stack.stages]
        sums = {"recon_mse": 0.0, "commit_loss": 0.0, "ortho_loss": 0.0}
        energy_sum = np.zeros(stack.num_stages)
        for b0 in range(0, n, config.batch_size):
            maps = [corpus[int(i)] for i in order[b0 : b0 + config.batch_size]]
            for fmap in maps:
                if (fmap.height, fmap.width, fmap.channels) != (
                    height, width, first.channels,
                ):
                    raise ConfigError("corpus maps must all share one shape")
            x = np.stack([m.pixels() for m in maps])
            if not stack.seeded:
                h0 = (x.reshape(-1, cfg.channels) @ params["reduce_w"].T
                      + params["reduce_b"]).reshape(x.shape[0], -1, cfg.reduced_channels)
                fr, _, _ = _gn_forward(h0, params["reduce_gain"], params["reduce_shift"],
                                       cfg.groups, reduce_eps)
                seed_codebooks(stack, fr.reshape(-1, cfg.reduced_channels), rng)
            losses, grads = forward_backward(
                params, stack, x, height, width,
                groups=cfg.groups,
                beta_commit=config.beta_commit,
                lambda_ortho=config.lambda_ortho,
                reduce_eps=reduce_eps,
                expand_eps=expand_eps,
                hook=hook,
            )
            if not math.isfinite(losses["total"]):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, step {global_step}: "
                    f"recon={losses['recon_mse']:.6g} commit={losses['commit_loss']:.6g} "
                    f"ortho={losses['ortho_loss']:.6g}"
                )
            hook.apply(stack, config.ema_alpha)
            for cb in stack.stages:  # keep the structural zero code in place
                cb.entries[0] = 0.0
                cb.version += 1
            optimizer.step(params, grads, one_cycle_lr(global_step, total_steps,
                                                       config.learning_rate))
            global_step += 1
            for key in sums:
                sums[key] += losses[key]
            energy_sum += losses["per_stage_residual"]
        reseeded = _reseed_dead_codes(stack, usage_start, hook.residual_pools, rng)
        means = {key: val / batches_per_epoch for key, val in sums.items()}
        reports.append(
            LossReport(
                epoch=epoch,
                recon_mse=means["recon_mse"],
                commit_loss=means["commit_loss"],
                ortho_loss=means["ortho_loss"],
                total=means["recon_mse"] + means["commit_loss"] + means["ortho_loss"],
                per_stage_residual=tuple(float(v) for v in energy_sum / batches_per_epoch),
                codes_reseeded=reseeded,
            )
        )

    trained = _assemble_model(cfg, params, stack, reduce_eps, expand_eps)
    trained.freeze()
    return trained, reports


# --- manifest and checkpoint I/O --------------------------------------------


def write_training_manifest(path, config: TrainingConfig,
                            reports: list[LossReport] | None = None,
                            extra: dict | None = None) -> None:
    """Record the exact fitting configuration (and optionally the loss
    history) as human-readable JSON."""
    doc = {"training": asdict(config)}
    if reports is not None:
        doc["epochs"] = [r.to_dict() for r in reports]
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_training_manifest(path) -> TrainingConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "training" not in doc:
        raise FormatError(f"{path}: manifest must be an object with a 'training' key")
    fields = doc["training"]
    allowed = set(TrainingConfig.__dataclass_fields__)
    unknown = set(fields) - allowed
    if unknown:
        raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
    return TrainingConfig(**fields)


CHECKPOINT_MAGIC = b"RVQK"
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = struct.Struct("<4sBIQQ")


def save_checkpoint(path, model: CodecModel, optimizer: Adam, epoch: int) -> None:
    """Model bundle plus training state (epoch, Adam step and moments).

    The RNG position is not captured, so resuming reproduces the optimizer
    trajectory but not the exact batch order of an uninterrupted run.
    """
    from .wire import bundle_bytes

    bundle = bundle_bytes(model)
    parts = [
        _CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, epoch,
                                optimizer.t, len(bundle)),
        bundle,
    ]
    for store in (optimizer.m, optimizer.v):
        for name in _TRAINABLE_PARAMS:
            parts.append(store[name].astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> tuple[CodecModel, Adam, int]:
    """Inverse of save_checkpoint; the returned model is unfrozen."""
    from .wire import model_from_bundle_bytes

    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CHECKPOINT_HEADER.size:
        raise FormatError(f"{path}: checkpoint too short for header")
    magic, version, epoch, adam_t, bundle_len = _CHECKPOINT_HEADER.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    offset = _CHECKPOINT_HEADER.size
    if len(raw) < offset + bundle_len:
        raise FormatError(f"{path}: checkpoint truncated inside model bundle")
    try:
        model = model_from_bundle_bytes(raw[offset : offset + bundle_len])
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    offset += bundle_len
    model.codebooks.frozen = False
    params = _params_from_model(model)
    optimizer = Adam(params)
    optimizer.t = adam_t
    for store in (optimizer.m, optimizer.v):
        for name in _TRAINABLE_PARAMS:
            count = store[name].size
            end = offset + 8 * count
            if len(raw) < end:
                raise FormatError(f"{path}: checkpoint truncated in optimizer state")
            store[name] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(
                store[name].shape
            ).copy()
            offset = end
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes in checkpoint")
    return model, optimizer, epoch
