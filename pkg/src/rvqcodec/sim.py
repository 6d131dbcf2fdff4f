"""Multi-agent exchange simulator.

Each round, every agent encodes its current feature map, packs the index
payload and ships it to each neighbor over a rate-limited, lossy link;
receivers unpack, decode and fuse what arrived with their local features.
The simulator measures the communication budget (sum of transmitted index
bits per round against a bit budget B) and end-to-end feature fidelity.

Everything runs on a simulated clock in a single thread: transmissions are
drawn and committed in deterministic order, so a (world, frame) pair always
yields the same report.

Fidelity compares what an agent actually fused (decoded remote maps) against
the fusion of the same senders' raw maps: it isolates codec damage from
topology and losses. An agent with nothing delivered is reported as
"no collaboration" instead of a number.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .codec import CodecModel, decompress, encode
from .datagen import FileCorpus, SceneCorpus, SceneSpec, save_tensor
from .errors import ConfigError, FormatError, PayloadError
from .tensors import FeatureMap
from .wire import pack, parse_payload, unpack

__all__ = [
    "AgentSpec",
    "LinkSpec",
    "BudgetConfig",
    "RoundReport",
    "SimWorld",
    "fuse",
    "register_fusion",
    "fusion_operator",
    "run_round",
    "sweep",
    "rows_to_csv",
    "rows_to_table",
    "report_to_json",
    "load_world",
]

_ROLES = ("vehicle", "infrastructure")


@dataclass(frozen=True)
class AgentSpec:
    """One participant: its codec and where its per-frame features come from."""

    agent_id: int
    role: str
    codec: CodecModel
    feature_source: object  # sequence of FeatureMap

    def __post_init__(self):
        if not 0 <= self.agent_id <= 0xFFFF:
            raise ConfigError(f"agent_id must fit u16, got {self.agent_id}")
        if self.role not in _ROLES:
            raise ConfigError(f"role must be one of {_ROLES}, got {self.role!r}")
        if not self.codec.frozen:
            raise ConfigError(f"agent {self.agent_id}: codec must be frozen for deployment")
        if len(self.feature_source) == 0:
            raise ConfigError(f"agent {self.agent_id}: empty feature source")


@dataclass(frozen=True)
class LinkSpec:
    """Directed link; rate in bits per simulated second (inf allowed)."""

    src: int
    dst: int
    rate: float
    latency: float = 0.0
    loss_probability: float = 0.0

    def __post_init__(self):
        if self.src == self.dst:
            raise ConfigError(f"link endpoints must differ, got {self.src}→{self.dst}")
        if not self.rate > 0:
            raise ConfigError(f"link rate must be positive, got {self.rate}")
        if self.latency < 0:
            raise ConfigError(f"link latency must be non-negative, got {self.latency}")
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ConfigError("loss_probability must lie in [0, 1]")


@dataclass(frozen=True)
class BudgetConfig:
    """Per-round bit budget over all ordered sender→receiver pairs."""

    total_bits: int
    neighborhoods: dict  # sender id -> iterable of receiver ids

    def __post_init__(self):
        if self.total_bits <= 0:
            raise ConfigError(f"budget must be positive, got {self.total_bits}")
        object.__setattr__(
            self,
            "neighborhoods",
            {int(a): tuple(sorted(int(b) for b in nbrs))
             for a, nbrs in self.neighborhoods.items()},
        )


@dataclass(frozen=True)
class RoundReport:
    """Everything measured in one round; totals are exact integers."""

    frame: int
    link_bits: dict  # (src, dst) -> int
    total_bits: int
    budget_bits: int
    budget_satisfied: bool
    latencies: dict  # (src, dst) -> float, delivered payloads only
    dropped: int
    errors: tuple  # per-link error entries, e.g. codebook desyncs
    fidelity: dict  # agent id -> metrics dict, or None for "no collaboration"


def report_to_json(report: RoundReport) -> str:
    """Canonical JSON rendering (sorted keys); equal reports give equal text."""
    doc = {
        "frame": report.frame,
        "total_bits": report.total_bits,
        "budget_bits": report.budget_bits,
        "budget_satisfied": report.budget_satisfied,
        "dropped": report.dropped,
        "links": {
            f"{s}->{d}": {
                "bits": report.link_bits[(s, d)],
                "latency": report.latencies.get((s, d)),
            }
            for (s, d) in sorted(report.link_bits)
        },
        "errors": list(report.errors),
        "fidelity": {
            str(a): (m if m is not None else "no collaboration")
            for a, m in sorted(report.fidelity.items())
        },
    }
    return json.dumps(doc, indent=2, sort_keys=True)


# --- fusion -----------------------------------------------------------------

_FUSIONS: dict = {}


def register_fusion(name: str, fn) -> None:
    """Register a fusion operator fn(local, remotes) -> FeatureMap."""
    _FUSIONS[name] = fn


def fusion_operator(name: str):
    if name not in _FUSIONS:
        raise ConfigError(f"unknown fusion operator {name!r}; have {sorted(_FUSIONS)}")
    return _FUSIONS[name]


def fuse(local: FeatureMap, remotes: list) -> FeatureMap:
    """Elementwise-maximum fusion (stand-in for a learned fusion module).

    Identity without remotes; commutative and associative over them.
    """
    out = local.data
    for r in remotes:
        if r.data.shape != local.data.shape:
            raise ConfigError(
                f"fusion shape mismatch: {r.data.shape} vs {local.data.shape}"
            )
        out = np.maximum(out, r.data)
    return FeatureMap(out) if remotes else local


register_fusion("max", fuse)


# --- the world --------------------------------------------------------------


@dataclass
class SimWorld:
    """Agents, directed links, a budget and a seed; validated on build."""

    agents: list
    links: list
    budget: BudgetConfig
    seed: int = 0
    fusion: str = "max"
    link_map: dict = field(init=False, repr=False)

    def __post_init__(self):
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate agent ids: {sorted(ids)}")
        known = set(ids)
        self.link_map = {}
        for link in self.links:
            key = (link.src, link.dst)
            if key in self.link_map:
                raise ConfigError(f"duplicate link {link.src}→{link.dst}")
            if link.src not in known or link.dst not in known:
                raise ConfigError(f"link {link.src}→{link.dst} references unknown agent")
            self.link_map[key] = link
        for sender, receivers in self.budget.neighborhoods.items():
            if sender not in known:
                raise ConfigError(f"neighborhood sender {sender} is not an agent")
            for receiver in receivers:
                if (sender, receiver) not in self.link_map:
                    raise ConfigError(
                        f"neighborhood pair {sender}→{receiver} has no link"
                    )
        fusion_operator(self.fusion)

    def agent(self, agent_id: int) -> AgentSpec:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise ConfigError(f"no agent {agent_id}")


def _metrics(reference: np.ndarray, test: np.ndarray) -> dict:
    diff = test - reference
    mse = float(np.mean(diff * diff))
    na = float(np.linalg.norm(reference))
    nb = float(np.linalg.norm(test))
    if na == 0.0 and nb == 0.0:
        cosine = 1.0
    elif na == 0.0 or nb == 0.0:
        cosine = 0.0
    else:
        cosine = float(np.dot(reference.reshape(-1), test.reshape(-1)) / (na * nb))
    peak = float(np.abs(reference).max())
    if mse == 0.0:
        psnr = math.inf
    elif peak == 0.0:
        psnr = -math.inf
    else:
        psnr = 10.0 * math.log10(peak * peak / mse)
    return {"mse": mse, "cosine": cosine, "psnr": psnr}


def run_round(world: SimWorld, frame: int, dump_dir=None) -> RoundReport:
    """Simulate one exchange round; deterministic given (world, frame).

    Transmission bits are the packed index stream (8 × bitstream bytes,
    padding included); the fixed payload header rides outside the budget as
    protocol overhead. Delivery delay is latency + bits/rate, and drops are
    drawn per link from the round's seeded generator. A codebook-hash
    mismatch at a receiver becomes an error entry for that link, never a
    crash.
    """
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence((world.seed, frame)))
    )
    frames = {
        a.agent_id: a.feature_source[frame % len(a.feature_source)]
        for a in world.agents
    }
    payloads = {}
    for agent in world.agents:
        idx = encode(agent.codec, frames[agent.agent_id])
        payloads[agent.agent_id] = pack(
            idx,
            agent.codec.codebooks.content_hash,
            frame_id=frame,
            agent_id=agent.agent_id,
        )

    pairs = sorted(
        (sender, receiver)
        for sender, receivers in world.budget.neighborhoods.items()
        for receiver in receivers
    )
    link_bits: dict = {}
    latencies: dict = {}
    dropped = 0
    deliveries = []  # (arrival_time, sender, receiver, payload bytes)
    for sender, receiver in pairs:
        link = world.link_map[(sender, receiver)]
        payload = payloads[sender]
        bits = payload.wire_bits
        link_bits[(sender, receiver)] = bits
        delay = link.latency + (0.0 if math.isinf(link.rate) else bits / link.rate)
        if rng.random() < link.loss_probability:
            dropped += 1
            continue
        latencies[(sender, receiver)] = delay
        deliveries.append((delay, sender, receiver, payload.to_bytes()))
    deliveries.sort(key=lambda ev: (ev[0], ev[1], ev[2]))

    errors = []
    received: dict = {a.agent_id: [] for a in world.agents}
    for _, sender, receiver, raw in deliveries:
        codec = world.agent(receiver).codec
        try:
            idx = unpack(parse_payload(raw), codec.codebooks.content_hash)
        except PayloadError as exc:
            errors.append(
                {"link": f"{sender}->{receiver}", "error": type(exc).__name__,
                 "detail": str(exc)}
            )
            continue
        received[receiver].append((sender, decompress(codec, idx)))

    op = fusion_operator(world.fusion)
    fidelity: dict = {}
    for agent in world.agents:
        inbound = received[agent.agent_id]
        if not inbound:
            fidelity[agent.agent_id] = None
            continue
        local = frames[agent.agent_id]
        fused = op(local, [fmap for _, fmap in inbound])
        reference = op(local, [frames[sender] for sender, _ in inbound])
        fidelity[agent.agent_id] = _metrics(reference.data, fused.data)
        if dump_dir is not None:
            save_tensor(
                fused, os.path.join(dump_dir, f"agent_{agent.agent_id}_frame_{frame}.rvqt")
            )

    total = sum(link_bits.values())
    return RoundReport(
        frame=frame,
        link_bits=link_bits,
        total_bits=total,
        budget_bits=world.budget.total_bits,
        budget_satisfied=total <= world.budget.total_bits,
        latencies=latencies,
        dropped=dropped,
        errors=tuple(errors),
        fidelity=fidelity,
    )


# --- rate sweep -------------------------------------------------------------


def sweep(
    world: SimWorld,
    models: dict,
    k_values,
    nq_values,
    channels: int = 256,
    frame: int = 0,
) -> list:
    """Rate/fidelity table over a (K, n_q) grid.

    ``models`` maps (codebook_size, stages) to a trained CodecModel; grid
    points without one still get their exact rate columns but are marked
    absent. Fidelity is the mean over agents reporting collaboration in one
    simulated round with every agent running that model.
    """
    rows = []
    for nq in nq_values:
        for k in k_values:
            if k < 2 or k & (k - 1):
                raise ConfigError(f"K must be a power of two ≥ 2, got {k}")
            bpp = nq * (k.bit_length() - 1)
            row = {
                "codebook_size": k,
                "stages": nq,
                "bits_per_pixel": bpp,
                "compression_ratio": round(32 * channels / bpp),
                "status": "absent",
                "mse": None,
                "cosine": None,
                "psnr": None,
            }
            model = models.get((k, nq))
            if model is not None:
                if (model.config.codebook_size, model.config.stages) != (k, nq):
                    raise ConfigError(
                        f"model for (K={k}, n_q={nq}) actually has "
                        f"(K={model.config.codebook_size}, n_q={model.config.stages})"
                    )
                agents = [replace(a, codec=model) for a in world.agents]
                trial = SimWorld(agents, world.links, world.budget, world.seed,
                                 world.fusion)
                report = run_round(trial, frame)
                metrics = [m for m in report.fidelity.values() if m is not None]
                if metrics:
                    row["status"] = "ok"
                    for key in ("mse", "cosine", "psnr"):
                        row[key] = float(np.mean([m[key] for m in metrics]))
                else:
                    row["status"] = "no collaboration"
            rows.append(row)
    return rows


_SWEEP_COLUMNS = (
    "codebook_size", "stages", "bits_per_pixel", "compression_ratio",
    "mse", "cosine", "psnr", "status",
)


def rows_to_csv(rows: list) -> str:
    import csv
    import io

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=_SWEEP_COLUMNS)
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row[k] is None else row[k]) for k in _SWEEP_COLUMNS})
    return buf.getvalue()


def rows_to_table(rows: list) -> str:
    """Aligned text table of the sweep, one line per (K, n_q) point."""
    headers = ("K", "n_q", "bpp", "compr", "mse", "cosine", "psnr", "status")
    lines = []
    for row in rows:
        lines.append((
            str(row["codebook_size"]),
            str(row["stages"]),
            str(row["bits_per_pixel"]),
            str(row["compression_ratio"]),
            "-" if row["mse"] is None else f"{row['mse']:.6f}",
            "-" if row["cosine"] is None else f"{row['cosine']:.4f}",
            "-" if row["psnr"] is None else f"{row['psnr']:.2f}",
            row["status"],
        ))
    widths = [max(len(h), *(len(line[i]) for line in lines)) if lines else len(h)
              for i, h in enumerate(headers)]
    def fmt(cells):
        return "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    out = [fmt(headers), fmt(tuple("-" * w for w in widths))]
    out.extend(fmt(line) for line in lines)
    return "\n".join(out) + "\n"


# --- world description files ------------------------------------------------


def _load_codec(path) -> CodecModel:
    """Load a frozen model from a bundle or a training checkpoint."""
    from .training import load_checkpoint
    from .wire import BUNDLE_MAGIC, load_model
    from .training import CHECKPOINT_MAGIC

    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == CHECKPOINT_MAGIC:
        model, _, _ = load_checkpoint(path)
        model.codebooks.frozen = True
        return model
    if magic == BUNDLE_MAGIC:
        return load_model(path)
    raise FormatError(f"{path}: neither a codebook bundle nor a checkpoint")


def _load_source(doc: dict, base_dir: str):
    if "manifest" in doc:
        return FileCorpus(os.path.join(base_dir, doc["manifest"]), doc.get("split"))
    if "scene" in doc:
        spec = SceneSpec(**doc["scene"])
        return SceneCorpus.from_base(spec, int(doc.get("count", 1)),
                                     first_seed=spec.seed)
    raise FormatError("feature source needs either a 'manifest' or a 'scene' key")


def load_world(path) -> SimWorld:
    """Build a SimWorld from a world description file (JSON).

    Model and corpus paths are resolved relative to the file; agents naming
    the same model path share one in-memory codec (hence one codebook hash).
    """
    base_dir = os.path.dirname(os.path.abspath(path))
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    try:
        agents_doc = doc["agents"]
        links_doc = doc["links"]
        budget_doc = doc["budget"]
    except KeyError as exc:
        raise FormatError(f"{path}: world file is missing the {exc} section") from exc

    codecs: dict = {}
    agents = []
    for entry in agents_doc:
        model_path = entry["model"]
        if model_path not in codecs:
            codecs[model_path] = _load_codec(os.path.join(base_dir, model_path))
        agents.append(
            AgentSpec(
                agent_id=int(entry["id"]),
                role=entry.get("role", "vehicle"),
                codec=codecs[model_path],
                feature_source=_load_source(entry["source"], base_dir),
            )
        )
    links = [
        LinkSpec(
            src=int(entry["from"]),
            dst=int(entry["to"]),
            rate=float(entry.get("rate", math.inf)),
            latency=float(entry.get("latency", 0.0)),
            loss_probability=float(entry.get("loss_probability", 0.0)),
        )
        for entry in links_doc
    ]
    budget = BudgetConfig(
        total_bits=int(budget_doc["total_bits"]),
        neighborhoods=budget_doc["neighborhoods"],
    )
    return SimWorld(
        agents=agents,
        links=links,
        budget=budget,
        seed=int(doc.get("seed", 0)),
        fusion=doc.get("fusion", "max"),
    )
