"""Command-line surface for the whole pipeline.

Every command is reproducible from (config, seed): all randomness flows
from one seed per command, and the effective configuration is echoed
next to each command's primary outputs. Exit codes: 0 success, 1 usage
or validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import assembly, dataio, metrics, pipeline
from .config import ConfigError, RunConfig
from .dataio import CATALOG


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_config(args) -> RunConfig:
    path = getattr(args, "config", None) or os.environ.get("CELLFLOW_CONFIG")
    cfg = RunConfig.from_file(path) if path else RunConfig()
    overrides = {}
    for key in RunConfig.field_names():
        if getattr(args, f"cfg_{key}", None) is not None:
            overrides[key] = getattr(args, f"cfg_{key}")
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    cfg = cfg.override(**overrides)
    metrics.WORKERS = cfg.threads if cfg.threads > 0 else (os.cpu_count() or 1)
    return cfg


def _workpath(args, path):
    if path is None:
        return None
    workdir = getattr(args, "workdir", None) or "."
    return path if os.path.isabs(path) else os.path.join(workdir, path)


def _echo_config(cfg: RunConfig, out_path) -> None:
    target_dir = out_path if os.path.isdir(out_path) else (os.path.dirname(out_path) or ".")
    os.makedirs(target_dir, exist_ok=True)
    cfg.save(os.path.join(target_dir, "effective-config.json"))


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file (env CELLFLOW_CONFIG)")
    p.add_argument("--seed", type=int, help="command seed")
    p.add_argument("--threads", type=int, help="worker threads (default: cores)")
    p.add_argument("--workdir", help="base directory for relative paths")
    p.add_argument("--set", dest="sets", action="append", default=[],
                   metavar="KEY=VALUE", help="override any config key")


def _apply_sets(cfg: RunConfig, sets) -> RunConfig:
    overrides = {}
    for item in sets:
        if "=" not in item:
            raise UsageError(f"--set needs KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        if key not in RunConfig.field_names():
            raise ConfigError(f"unknown config keys: ['{key}']")
        current = getattr(cfg, key)
        caster = type(current)
        overrides[key] = caster(value) if caster is not bool else value.lower() == "true"
    return cfg.override(**overrides)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _apply_sets(_load_config(args), args.sets)
    kinds = args.kinds.split(",") if args.kinds else list(CATALOG)
    for kind in kinds:
        if kind not in CATALOG:
            raise UsageError(f"unknown kind {kind!r}; catalog: {','.join(CATALOG)}")
    if args.mode not in ("solid", "wireframe"):
        raise UsageError("--mode must be solid or wireframe")
    out = _workpath(args, args.out)
    records = dataio.generate_dataset(kinds, args.count, cfg.seed, mode=args.mode,
                                      cloud_points=cfg.cloud_points)
    dataio.write_records(out, records)
    _echo_config(cfg, out)
    print(f"wrote {len(records)} records to {out}")
    return 0


def cmd_train_vae(args) -> int:
    cfg = _apply_sets(_load_config(args), args.sets)
    records = dataio.read_records(_workpath(args, args.data))
    if not records:
        raise UsageError(f"no records in {args.data}")
    train, _, _ = dataio.split_records(records, cfg.seed,
                                       (cfg.split_train, cfg.split_test, cfg.split_val))
    steps = args.steps or cfg.vae_steps
    model, _, history = pipeline.train_vae(train, cfg, cfg.seed, steps=steps,
                                           log=print)
    out = _workpath(args, args.ckpt_out)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    pipeline.save_vae(out, model, cfg, pipeline.dataset_mode(train))
    dataio.write_jsonl(out + ".log.jsonl", history)
    _echo_config(cfg, out)
    print(f"trained on {len(train)} records, final loss "
          f"{history[-1]['total']:.4f}, checkpoint {out}")
    return 0


def cmd_roundtrip(args) -> int:
    cfg0 = _load_config(args)
    model, cfg, _ = pipeline.load_vae(_workpath(args, args.vae))
    cfg = cfg.override(seed=cfg0.seed)
    records = dataio.read_records(_workpath(args, args.data))
    if args.limit:
        records = records[:args.limit]
    _, summary = pipeline.roundtrip_report(model, records, cfg, seed=cfg.seed)
    for key, value in summary.items():
        print(f"{key}: {value:.4f}" if isinstance(value, float) else f"{key}: {value}")
    return 0


def cmd_encode(args) -> int:
    cfg0 = _load_config(args)
    model, cfg, _ = pipeline.load_vae(_workpath(args, args.vae))
    cfg = cfg.override(seed=cfg0.seed)
    records = dataio.read_records(_workpath(args, args.data))
    latents, meta = pipeline.encode_records(model, records, cfg, cfg.seed)
    out = _workpath(args, args.out)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    pipeline.write_latents(out, latents, meta)
    _echo_config(cfg, out)
    print(f"encoded {len(latents)} records -> {out} "
          f"(median nn dist {meta['median_nn_dist']:.4f})")
    return 0


def cmd_train_flow(args) -> int:
    cfg = _apply_sets(_load_config(args), args.sets)
    latents, meta = pipeline.read_latents(_workpath(args, args.latents))
    steps = args.steps or cfg.flow_steps
    model, opt, history = pipeline.train_flow(latents, cfg, cfg.seed, steps=steps,
                                              log=print)
    tau = pipeline.derive_tau(cfg, meta)
    out = _workpath(args, args.ckpt_out)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    pipeline.save_flow(out, model, opt, cfg, tau, meta.get("mode", "solid"))
    dataio.write_jsonl(out + ".log.jsonl", history)
    _echo_config(cfg, out)
    print(f"trained flow on {len(latents)} latent sets, final loss "
          f"{history[-1]['total']:.4f}, tau_cluster {tau:.4f}, checkpoint {out}")
    return 0


def cmd_sample(args) -> int:
    cfg0 = _apply_sets(_load_config(args), args.sets)
    vae_model, _, vae_meta = pipeline.load_vae(_workpath(args, args.vae))
    flow_model, fcfg, fmeta = pipeline.load_flow(_workpath(args, args.flow))
    cfg = fcfg.override(seed=cfg0.seed)
    particles = args.particles or cfg.budget
    steps = args.steps or cfg.euler_steps
    tau = args.tau or float(fmeta["tau_cluster"])
    mode = args.mode or fmeta.get("mode", vae_meta.get("mode", "solid"))
    models, cluster_counts = pipeline.sample_models(
        vae_model, flow_model, args.count, particles, steps, cfg.seed, tau, mode=mode)
    out = _workpath(args, args.out)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    dataio.write_jsonl(out, [assembly.model_to_dict(m) for m in models])
    _echo_config(cfg, out)
    valid = float(np.mean([m.verdict for m in models])) if models else 0.0
    print(f"sampled {len(models)} models at {particles} particles "
          f"({steps} steps, tau {tau:.4f})")
    print(f"valid: {100 * valid:.1f}%  mean clusters: {np.mean(cluster_counts):.1f} "
          f"(min {min(cluster_counts)}, max {max(cluster_counts)})")
    return 0


def cmd_inpaint(args) -> int:
    cfg0 = _load_config(args)
    fix = set(args.fix.split(","))
    if fix != {"vertices", "edges"}:
        raise UsageError("--fix currently supports exactly 'vertices,edges'")
    vae_model, _, _ = pipeline.load_vae(_workpath(args, args.vae))
    flow_model, fcfg, fmeta = pipeline.load_flow(_workpath(args, args.flow))
    cfg = fcfg.override(seed=cfg0.seed)
    records = dataio.read_records(_workpath(args, args.input))
    if args.limit:
        records = records[:args.limit]
    tau = args.tau or float(fmeta["tau_cluster"])
    out = _workpath(args, args.out)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    rows = []
    results = []
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(records))
    for rec, s in zip(records, seeds):
        model_out, wire_exact, _ = pipeline.inpaint_record(
            vae_model, flow_model, rec, cfg, int(s.generate_state(1)[0] % 2**31), tau)
        rows.append(assembly.model_to_dict(model_out) | {"wire_exact": wire_exact,
                                                         "source": rec.id})
        results.append((model_out.verdict, wire_exact))
    dataio.write_jsonl(out, rows)
    _echo_config(cfg, out)
    valid = float(np.mean([v for v, _ in results]))
    exact = float(np.mean([w for _, w in results]))
    print(f"inpainted {len(records)} records: valid {100 * valid:.1f}%, "
          f"wireframe bit-identical {100 * exact:.1f}%")
    return 0


def cmd_eval(args) -> int:
    cfg = _apply_sets(_load_config(args), args.sets)
    gen_rows = dataio.read_jsonl(_workpath(args, args.gen))
    gen_models = [assembly.model_from_dict(r) for r in gen_rows]
    ref_records = dataio.read_records(_workpath(args, args.ref))
    train_records = dataio.read_records(_workpath(args, args.train)) if args.train else []
    if len(ref_records) > cfg.eval_ref:
        ref_records = ref_records[:cfg.eval_ref]
    report = pipeline.evaluate_models(gen_models, ref_records, train_records, cfg,
                                      cfg.seed)
    out = _workpath(args, args.out)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    _echo_config(cfg, out)
    print(report.table())
    return 0


def cmd_export(args) -> int:
    _load_config(args)
    path = _workpath(args, args.input)
    out = _workpath(args, args.out)
    rows = dataio.read_jsonl(path)
    models = []
    for row in rows:
        if "verdict" in row:
            models.append(assembly.model_from_dict(row))
        else:
            rec = dataio.record_from_dict(row)
            models.append(assembly.fit_and_assemble(rec.complex))
    os.makedirs(out, exist_ok=True)
    for i, model in enumerate(models):
        base = os.path.join(out, f"model-{i:05d}")
        if args.format == "obj":
            assembly.export_obj(model, base + ".obj")
        else:
            with open(base + ".json", "w", encoding="utf-8") as fh:
                json.dump(assembly.model_to_dict(model), fh)
    print(f"exported {len(models)} models as {args.format} to {out}")
    return 0


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="cellflow",
                     description="cell-complex generative modeling pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a procedural dataset")
    p.add_argument("--kinds", help=f"comma list from: {','.join(CATALOG)}")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--mode", default="solid")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-vae", help="train the particle autoencoder")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt-out", required=True)
    p.add_argument("--steps", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("roundtrip", help="reconstruction report on records")
    p.add_argument("--data", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--limit", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_roundtrip)

    p = sub.add_parser("encode", help="dump per-record latent sets")
    p.add_argument("--vae", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train-flow", help="train the latent velocity model")
    p.add_argument("--latents", required=True)
    p.add_argument("--ckpt-out", required=True)
    p.add_argument("--steps", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_train_flow)

    p = sub.add_parser("sample", help="generate, cluster, decode, assemble")
    p.add_argument("--vae", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--particles", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--mode")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("inpaint", help="regenerate faces around fixed wireframes")
    p.add_argument("--input", required=True)
    p.add_argument("--fix", default="vertices,edges")
    p.add_argument("--vae", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--limit", type=int)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("eval", help="metric report for generated models")
    p.add_argument("--gen", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--train")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="export models to obj or json")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", choices=("obj", "json"), default="obj")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError, dataio.DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
