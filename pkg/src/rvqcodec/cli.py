"""Command-line entry point for the full codec workflow.

Subcommands: gen, train, encode, decode, roundtrip, stats, sweep, simulate.
Every run logs its resolved configuration to stderr and is deterministic
under --seed; machine-readable outputs (CSV, tensors, payloads, JSON) are
byte-identical across reruns.

Exit codes by failure class: 2 bad configuration or flags, 3 file/format
problems, 4 malformed payloads, 5 codebook desync.

This module stays free of numpy imports at the top level so that --threads
can cap the BLAS thread pools before numpy first loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

_THREAD_ENV_VARS = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


def _log_config(name: str, resolved: dict) -> None:
    print(f"# {name} config: {json.dumps(resolved, sort_keys=True, default=str)}",
          file=sys.stderr)


def _out_path(args, default_name: str, explicit=None) -> str:
    if explicit:
        return explicit
    os.makedirs(args.output_dir, exist_ok=True)
    return os.path.join(args.output_dir, default_name)


# --- subcommand implementations ---------------------------------------------


def cmd_gen(args) -> int:
    from .datagen import SceneSpec, generate_corpus

    spec = SceneSpec(
        height=args.height,
        width=args.width,
        channels=args.channels,
        background_fraction=args.background_fraction,
        n_blobs=args.blobs,
        blob_scale=args.blob_scale,
        channel_sparsity=args.channel_sparsity,
        seed=args.seed,
    )
    out_dir = _out_path(args, "corpus", args.out)
    _log_config("gen", {**spec.__dict__, "count": args.count, "out": out_dir,
                        "val_fraction": args.val_fraction})
    manifest = generate_corpus(spec, args.count, out_dir, first_seed=args.seed,
                               val_fraction=args.val_fraction)
    print(f"wrote {args.count} scenes, manifest: {manifest}")
    return 0


def cmd_train(args) -> int:
    from .codec import CodecConfig, init_model
    from .datagen import FileCorpus
    from .training import (
        TrainingConfig,
        fit,
        read_training_manifest,
        write_training_manifest,
    )
    from .wire import save_model

    if args.config:
        tcfg = read_training_manifest(args.config)
        tcfg = TrainingConfig(**{**tcfg.__dict__, "seed": args.seed})
    else:
        tcfg = TrainingConfig(
            ema_alpha=args.ema_alpha,
            beta_commit=args.beta_commit,
            lambda_ortho=args.lambda_ortho,
            epochs=args.epochs,
            learning_rate=args.learning_rate,
            batch_size=args.batch_size,
            seed=args.seed,
        )
    ccfg = CodecConfig(
        channels=args.channels,
        reduction_ratio=args.reduction_ratio,
        stages=args.stages,
        codebook_size=args.codebook_size,
        ema_alpha=tcfg.ema_alpha,
        groups=args.groups,
    )
    _log_config("train", {**tcfg.__dict__, **{f"codec.{k}": v
                                              for k, v in ccfg.__dict__.items()}})
    corpus = FileCorpus(args.corpus, args.split)
    model = init_model(ccfg, seed=args.seed)
    trained, reports = fit(model, corpus, tcfg)
    for r in reports:
        print(
            f"epoch {r.epoch:3d}  recon {r.recon_mse:.6f}  commit {r.commit_loss:.6f}  "
            f"ortho {r.ortho_loss:.6f}  total {r.total:.6f}  reseeded {r.codes_reseeded}"
        )
    model_path = _out_path(args, "model.rvqc", args.out)
    save_model(trained, model_path)
    write_training_manifest(
        _out_path(args, "training.json", args.manifest_out), tcfg, reports,
        extra={"model": model_path},
    )
    print(f"model: {model_path}")
    return 0


def cmd_encode(args) -> int:
    from .codec import bits_per_pixel, compression_ratio, encode
    from .datagen import load_tensor
    from .wire import load_model, pack

    model = load_model(args.model)
    fmap = load_tensor(args.input)
    _log_config("encode", {"model": args.model, "input": args.input,
                           "frame_id": args.frame_id, "agent_id": args.agent_id})
    idx = encode(model, fmap)
    payload = pack(idx, model.codebooks.content_hash,
                   frame_id=args.frame_id, agent_id=args.agent_id)
    out = _out_path(args, "payload.rvqp", args.out)
    with open(out, "wb") as fh:
        fh.write(payload.to_bytes())
    cfg = model.config
    print(f"payload: {out}")
    print(f"index bits: {payload.wire_bits}  bpp: {bits_per_pixel(cfg)}  "
          f"compression: {round(compression_ratio(cfg))}x")
    return 0


def cmd_decode(args) -> int:
    from .codec import decompress
    from .datagen import load_tensor, save_tensor
    from .wire import load_model, parse_payload, unpack

    model = load_model(args.model)
    with open(args.payload, "rb") as fh:
        raw = fh.read()
    _log_config("decode", {"model": args.model, "payload": args.payload})
    idx = unpack(parse_payload(raw), model.codebooks.content_hash)
    recon = decompress(model, idx)
    out = _out_path(args, "recon.rvqt", args.out)
    save_tensor(recon, out)
    print(f"reconstruction: {out}")
    if args.reference:
        import numpy as np

        ref = load_tensor(args.reference)
        mse = float(np.mean((recon.data - ref.data) ** 2))
        print(f"mse vs reference: {mse:.6f}")
    return 0


def cmd_roundtrip(args) -> int:
    import numpy as np

    from .codec import CodecConfig, encode, init_model
    from .datagen import SceneSpec, generate_scene
    from .wire import pack, parse_payload, unpack

    ccfg = CodecConfig(
        channels=args.channels,
        reduction_ratio=args.reduction_ratio,
        stages=args.stages,
        codebook_size=args.codebook_size,
    )
    _log_config("roundtrip", {**ccfg.__dict__, "seed": args.seed})
    if args.model:
        from .wire import load_model

        model = load_model(args.model)
    else:
        model = init_model(ccfg, seed=args.seed)
    spec = SceneSpec(height=args.height, width=args.width,
                     channels=model.config.channels, seed=args.seed)
    scene = generate_scene(spec)
    idx = encode(model, scene)
    payload = pack(idx, model.codebooks.content_hash)
    back = unpack(parse_payload(payload.to_bytes()), model.codebooks.content_hash)
    identical = bool(np.array_equal(idx.indices, back.indices))
    print(f"payload bytes: {len(payload.to_bytes())}")
    print(f"indices identical: {str(identical).lower()}")
    return 0 if identical else 4


def cmd_stats(args) -> int:
    import numpy as np

    from .codec import encode, usage_histogram
    from .datagen import FileCorpus
    from .wire import load_model

    model = load_model(args.model)
    corpus = FileCorpus(args.corpus, args.split)
    _log_config("stats", {"model": args.model, "corpus": args.corpus,
                          "stage": args.stage, "maps": len(corpus)})
    total = np.zeros(model.config.codebook_size)
    for i in range(len(corpus)):
        idx = encode(model, corpus[i])
        total += usage_histogram(model.codebooks, idx, args.stage)
    hist = total / len(corpus)
    out = _out_path(args, f"usage_stage{args.stage}.csv", args.out)
    with open(out, "w") as fh:
        fh.write("code,share\n")
        for code, share in enumerate(hist):
            fh.write(f"{code},{share:.8f}\n")
    top = int(np.argmax(hist))
    print(f"stage {args.stage} usage over {len(corpus)} maps -> {out}")
    print(f"top code: {top}  share: {hist[top]:.4f}")
    return 0


def _parse_int_list(text: str) -> list:
    try:
        return [int(tok) for tok in text.split(",") if tok]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text!r}") from exc


def cmd_sweep(args) -> int:
    from .sim import load_world, rows_to_csv, rows_to_table, sweep

    models = {}
    if args.models_dir:
        from .wire import load_model

        for k in args.K:
            for nq in args.nq:
                path = os.path.join(args.models_dir, f"k{k}_nq{nq}.rvqc")
                if os.path.exists(path):
                    models[(k, nq)] = load_model(path)
    _log_config("sweep", {"K": args.K, "nq": args.nq, "channels": args.channels,
                          "world": args.world, "models": sorted(models)})
    if args.world:
        world = load_world(args.world)
        rows = sweep(world, models, args.K, args.nq, channels=args.channels,
                     frame=args.frame)
    else:
        # No world: rate columns only, every config marked absent.
        rows = []
        for nq in args.nq:
            for k in args.K:
                bpp = nq * (k.bit_length() - 1)
                rows.append({
                    "codebook_size": k, "stages": nq, "bits_per_pixel": bpp,
                    "compression_ratio": round(32 * args.channels / bpp),
                    "status": "absent", "mse": None, "cosine": None, "psnr": None,
                })
    csv_text = rows_to_csv(rows)
    out = _out_path(args, "sweep.csv", args.out)
    with open(out, "w") as fh:
        fh.write(csv_text)
    print(rows_to_table(rows), end="")
    print(f"csv: {out}")
    return 0


def cmd_simulate(args) -> int:
    from .sim import load_world, report_to_json, run_round

    world = load_world(args.world)
    _log_config("simulate", {"world": args.world, "frames": args.frames,
                             "seed": world.seed})
    dump_dir = None
    if args.dump_fidelity:
        dump_dir = _out_path(args, "fidelity")
        os.makedirs(dump_dir, exist_ok=True)
    exit_code = 0
    for frame in range(args.frames):
        report = run_round(world, frame, dump_dir=dump_dir)
        text = report_to_json(report)
        out = _out_path(args, f"round_{frame:04d}.json")
        with open(out, "w") as fh:
            fh.write(text + "\n")
        verdict = "within budget" if report.budget_satisfied else "OVER BUDGET"
        print(f"frame {frame}: {report.total_bits} bits ({verdict}, "
              f"B={report.budget_bits}), dropped {report.dropped}, "
              f"errors {len(report.errors)} -> {out}")
        if report.errors:
            for entry in report.errors:
                print(f"  link {entry['link']}: {entry['error']}: {entry['detail']}")
    return exit_code


# --- argument parsing and dispatch ------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rvqcodec",
        description="Residual-VQ feature codec: train, encode, simulate exchange.",
    )
    parser.add_argument("--seed", type=int, default=0, help="global RNG seed")
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS thread cap (default 1, bit-reproducible)")
    parser.add_argument("--output-dir", default=".", help="directory for outputs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic feature corpus")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--channels", type=int, default=256)
    p.add_argument("--background-fraction", type=float, default=0.97)
    p.add_argument("--blobs", type=int, default=6)
    p.add_argument("--blob-scale", type=float, default=1.0)
    p.add_argument("--channel-sparsity", type=float, default=0.12)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--out", help="corpus directory (default <output-dir>/corpus)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="fit a codec on a corpus")
    p.add_argument("--corpus", required=True, help="corpus manifest path")
    p.add_argument("--split", default="train")
    p.add_argument("--channels", type=int, default=256)
    p.add_argument("--reduction-ratio", type=int, default=16)
    p.add_argument("--stages", type=int, default=3)
    p.add_argument("--codebook-size", type=int, default=64)
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--ema-alpha", type=float, default=0.8)
    p.add_argument("--beta-commit", type=float, default=0.05)
    p.add_argument("--lambda-ortho", type=float, default=1e-4)
    p.add_argument("--config", help="training manifest to read settings from")
    p.add_argument("--out", help="model bundle path (default <output-dir>/model.rvqc)")
    p.add_argument("--manifest-out", help="training manifest output path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode a tensor file to a payload")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="raw tensor file to encode")
    p.add_argument("--frame-id", type=int, default=0)
    p.add_argument("--agent-id", type=int, default=0)
    p.add_argument("--out", help="payload path (default <output-dir>/payload.rvqp)")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a payload back to a tensor file")
    p.add_argument("--model", required=True)
    p.add_argument("--payload", required=True)
    p.add_argument("--reference", help="tensor to report reconstruction MSE against")
    p.add_argument("--out", help="output tensor path (default <output-dir>/recon.rvqt)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("roundtrip", help="encode/pack/unpack a scene, verify indices")
    p.add_argument("--model", help="model bundle (default: fresh seeded model)")
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--channels", type=int, default=256)
    p.add_argument("--reduction-ratio", type=int, default=16)
    p.add_argument("--stages", type=int, default=3)
    p.add_argument("--codebook-size", type=int, default=64)
    p.set_defaults(func=cmd_roundtrip)

    p = sub.add_parser("stats", help="codebook usage histogram over a corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--stage", type=int, default=0)
    p.add_argument("--out", help="histogram CSV path")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("sweep", help="rate table over a (K, n_q) grid")
    p.add_argument("--K", type=_parse_int_list, default=[4, 16, 64, 256, 1024])
    p.add_argument("--nq", type=_parse_int_list, default=[3])
    p.add_argument("--channels", type=int, default=256)
    p.add_argument("--models-dir", help="directory of k{K}_nq{NQ}.rvqc bundles")
    p.add_argument("--world", help="world file for fidelity columns")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--out", help="CSV path (default <output-dir>/sweep.csv)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("simulate", help="run exchange rounds from a world file")
    p.add_argument("--world", required=True)
    p.add_argument("--frames", type=int, default=1)
    p.add_argument("--dump-fidelity", action="store_true",
                   help="write fused maps as tensor files")
    p.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    for var in _THREAD_ENV_VARS:
        os.environ.setdefault(var, str(args.threads))

    from .errors import (
        CodebookDesyncError,
        ConfigError,
        FormatError,
        PayloadError,
        StateError,
        TrainingError,
    )

    try:
        return args.func(args)
    except CodebookDesyncError as exc:
        print(f"error (codebook desync): {exc}", file=sys.stderr)
        return 5
    except PayloadError as exc:
        print(f"error (payload): {exc}", file=sys.stderr)
        return 4
    except (FormatError, OSError) as exc:
        print(f"error (io/format): {exc}", file=sys.stderr)
        return 3
    except (ConfigError, StateError) as exc:
        print(f"error (config): {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"error (training): {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
