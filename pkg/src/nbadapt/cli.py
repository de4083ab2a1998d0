"""Experiment runner CLI.

Verbs: gen-data, train, adapt, fed, report, gradcheck. Every run is
reproducible from (config file, seed): one experiment writes one output
directory holding a copy of the config, checkpoints, a metrics file
(line-delimited JSON records) and training logs.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import shutil
import statistics
import sys
from pathlib import Path

from . import autodiff as ad
from . import corpus
from . import fedsim
from . import model as M
from .config import (OUTPUT_ROOT_ENV, ConfigError, ExperimentConfig, load_config,
                     write_default_config)
from .selflearn import Method, run_self_learning
from .trainer import TrainLog, TrainMode, train_supervised, validation_cer

METHOD_TABLE_ORDER = ["seed", "supervised", "one_best", "mll", "mtl_shared_aed",
                      "mtl_shared_ae", "fed_one_best", "fed_mll", "fed_mtl_shared_aed",
                      "fed_mtl_shared_ae"]


class CliError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _require_dataset(cfg: ExperimentConfig, name: str) -> corpus.Dataset:
    path = cfg.data_path(name)
    if not path.exists():
        raise CliError(f"dataset file missing: {path} (run gen-data first)", code=2)
    return corpus.load(path)


def _prepare_out_dir(cfg: ExperimentConfig, args, default_name: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = cfg.out_root() / default_name
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    if getattr(args, "config", None):
        shutil.copy(args.config, out / "config.ini")
    return out


def _append_metrics(path: Path, records) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _seed_list(args, cfg: ExperimentConfig):
    if getattr(args, "seeds", None):
        return [int(s) for s in args.seeds.replace(",", " ").split()]
    if getattr(args, "seed", None) is not None:
        return [int(args.seed)]
    return list(cfg.seeds)


def _set_precision(args) -> None:
    ad.set_default_dtype(getattr(args, "precision", None) or "float32")


def _init_checkpoint_path(template: str, seed: int) -> Path:
    return Path(template.replace("{seed}", str(seed)))


def _load_seed_params(init: str | None, cfg: ExperimentConfig, seed: int) -> M.ModelParams:
    template = init or str(cfg.out_root() / "train" / "checkpoints" / "seed{seed}.ckpt")
    path = _init_checkpoint_path(template, seed)
    if not path.exists():
        raise CliError(f"seed checkpoint missing: {path} (run train first)", code=2)
    params, _ = M.load_checkpoint(path)
    return params


# --------------------------------------------------------------------------
# gen-data
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    data_dir = cfg.base_dir / cfg.data.dir
    data_dir.mkdir(parents=True, exist_ok=True)
    spec = cfg.task
    d = cfg.data
    splits = [
        ("seed_train", corpus.Domain.SEED, d.n_seed_train, 0),
        ("seed_val", corpus.Domain.SEED, d.n_seed_val, 1),
        ("adapt", corpus.Domain.SHIFTED, d.n_adapt, 2),
        ("adapt_val", corpus.Domain.SHIFTED, d.n_adapt_val, 3),
    ]
    for name, domain, count, stream in splits:
        ds = corpus.generate(spec, domain, count, n_speakers=d.n_speakers, stream=stream)
        path = cfg.data_path(name)
        nbytes = corpus.save(ds, path)
        print(f"wrote {path} ({count} utterances, {nbytes} bytes)")
    return 0


# --------------------------------------------------------------------------
# train (seed training, and supervised adaptation via --on adapt / --init)
# --------------------------------------------------------------------------


def _train_one_seed(config_path: str, seed: int, on: str, init: str | None,
                    out_dir: str, precision: str):
    ad.set_default_dtype(precision)
    cfg = load_config(config_path)
    if on == "adapt":
        train_ds = _require_dataset(cfg, "adapt")
        val_ds = _require_dataset(cfg, "adapt_val")
        method = "supervised"
    else:
        train_ds = _require_dataset(cfg, "seed_train")
        val_ds = _require_dataset(cfg, "seed_val")
        method = "seed_training"
    if init:
        params, _ = M.load_checkpoint(_init_checkpoint_path(init, seed))
    else:
        params = M.init_params(cfg.model, seed=seed)
    log = TrainLog(Path(out_dir) / f"train_seed{seed}.log.jsonl")
    try:
        train_cfg = dataclasses.replace(cfg.train, mode=TrainMode.SUPERVISED)
        best, history = train_supervised(
            params, list(train_ds), list(val_ds), train_cfg, seed=seed,
            max_decode_len=cfg.selflearn.max_decode_len, target_cer=cfg.target_cer,
            patience=cfg.patience, log=log)
    finally:
        log.close()
    ckpt = Path(out_dir) / "checkpoints" / f"seed{seed}.ckpt"
    M.save_checkpoint(best, ckpt)
    records = [{"experiment": Path(out_dir).name, "method": method, "seed": seed,
                "iteration": h["epoch"], "cer": h["validation_cer"],
                "loss": h["mean_loss"], "final": False} for h in history]
    final_cer = min(h["validation_cer"] for h in history)
    records.append({"experiment": Path(out_dir).name, "method": method, "seed": seed,
                    "iteration": None, "cer": final_cer, "loss": None, "final": True})
    return records, str(ckpt), final_cer


def cmd_train(args) -> int:
    _set_precision(args)
    cfg = load_config(args.config)
    seeds = _seed_list(args, cfg)
    default_name = "train" if args.on == "seed" else "adapt_supervised"
    out = _prepare_out_dir(cfg, args, default_name)
    jobs = [(args.config, s, args.on, args.init, str(out), args.precision or "float32")
            for s in seeds]
    if args.parallel_seeds and len(seeds) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=min(8, len(seeds))) as pool:
            results = list(pool.map(_train_one_seed_star, jobs))
    else:
        results = [_train_one_seed(*job) for job in jobs]
    for (records, ckpt, final_cer), seed in zip(results, seeds):
        _append_metrics(out / "metrics.jsonl", records)
        print(f"seed {seed}: best validation CER {final_cer:.4f}  checkpoint {ckpt}")
    return 0


def _train_one_seed_star(job):
    return _train_one_seed(*job)


# --------------------------------------------------------------------------
# adapt (self-learning)
# --------------------------------------------------------------------------


def _adapt_one_seed(config_path: str, seed: int, method: str, n_best: int | None,
                    init: str | None, out_dir: str, precision: str):
    ad.set_default_dtype(precision)
    cfg = load_config(config_path)
    adapt_ds = _require_dataset(cfg, "adapt")
    val_ds = _require_dataset(cfg, "adapt_val")
    params = _load_seed_params(init, cfg, seed)
    sl_cfg = cfg.selflearn
    overrides = {"method": Method(method), "seed": seed}
    if n_best:
        overrides["n_best"] = n_best
    sl_cfg = dataclasses.replace(sl_cfg, **overrides)
    log = TrainLog(Path(out_dir) / f"adapt_{method}_seed{seed}.log.jsonl")
    try:
        adapted, report = run_self_learning(params, list(adapt_ds), list(val_ds), sl_cfg,
                                            log=log)
    finally:
        log.close()
    ckpt = Path(out_dir) / "checkpoints" / f"{method}_seed{seed}.ckpt"
    M.save_checkpoint(adapted, ckpt)
    records = []
    exp = Path(out_dir).name
    for it in report.iterations:
        records.append({"experiment": exp, "method": method if it.iteration else "seed",
                        "seed": seed, "iteration": it.iteration, "cer": it.validation_cer,
                        "onebest_cer": it.adapt_cer_1best, "oracle_cer": it.adapt_cer_oracle,
                        "final": False})
    records.append({"experiment": exp, "method": "seed", "seed": seed, "iteration": None,
                    "cer": report.iterations[0].validation_cer, "final": True})
    records.append({"experiment": exp, "method": method, "seed": seed, "iteration": None,
                    "cer": report.best_cer, "final": True})
    return records, str(ckpt), report


def cmd_adapt(args) -> int:
    _set_precision(args)
    valid = [m.value for m in Method]
    if args.method not in valid:
        raise CliError(f"unknown method {args.method!r}; valid methods: {', '.join(valid)}",
                       code=2)
    cfg = load_config(args.config)
    seeds = _seed_list(args, cfg)
    out = _prepare_out_dir(cfg, args, f"adapt_{args.method}")
    jobs = [(args.config, s, args.method, args.n_best, args.init, str(out),
             args.precision or "float32") for s in seeds]
    if args.parallel_seeds and len(seeds) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=min(8, len(seeds))) as pool:
            results = list(pool.map(_adapt_one_seed_star, jobs))
    else:
        results = [_adapt_one_seed(*job) for job in jobs]
    for (records, ckpt, report), seed in zip(results, seeds):
        _append_metrics(out / "metrics.jsonl", records)
        print(f"seed {seed}: {args.method} best CER {report.best_cer:.4f} "
              f"(seed CER {report.iterations[0].validation_cer:.4f}, "
              f"stopped: {report.stopping_reason})")
    return 0


def _adapt_one_seed_star(job):
    return _adapt_one_seed(*job)


# --------------------------------------------------------------------------
# fed (federated simulation)
# --------------------------------------------------------------------------


def _fed_one_seed(config_path: str, seed: int, rounds: int | None, init: str | None,
                  out_dir: str, precision: str):
    ad.set_default_dtype(precision)
    cfg = load_config(config_path)
    adapt_ds = _require_dataset(cfg, "adapt")
    val_ds = _require_dataset(cfg, "adapt_val")
    clients = fedsim.partition_by_speaker(adapt_ds)
    fed_cfg = dataclasses.replace(cfg.fed, seed=seed,
                                  **({"total_rounds": rounds} if rounds is not None else {}))
    if fed_cfg.cohort_size > len(clients):
        raise CliError(f"cohort size {fed_cfg.cohort_size} exceeds client count "
                       f"{len(clients)}", code=2)
    params = _load_seed_params(init, cfg, seed)
    seed_cer = validation_cer(params, list(val_ds), max_len=fed_cfg.max_decode_len)
    final, records = fedsim.run_simulation(params, clients, fed_cfg, list(val_ds))
    ckpt = Path(out_dir) / "checkpoints" / f"fed_seed{seed}.ckpt"
    M.save_checkpoint(final, ckpt)
    exp = Path(out_dir).name
    method = f"fed_{fed_cfg.method.value}"
    out_records = [{"experiment": exp, "method": "seed", "seed": seed, "iteration": None,
                    "cer": seed_cer, "final": True}]
    for r in records:
        out_records.append({"experiment": exp, "method": method, "seed": seed,
                            "iteration": r.round_index, "cer": r.validation_cer,
                            "loss": r.validation_loss,
                            "aggregate_delta_norm": r.aggregate_delta_norm,
                            "participants": r.participant_ids, "final": False})
    final_cer = validation_cer(final, list(val_ds), max_len=fed_cfg.max_decode_len)
    out_records.append({"experiment": exp, "method": method, "seed": seed,
                        "iteration": None, "cer": final_cer, "final": True})
    return out_records, str(ckpt), seed_cer, final_cer


def cmd_fed(args) -> int:
    _set_precision(args)
    cfg = load_config(args.config)
    seeds = _seed_list(args, cfg)
    out = _prepare_out_dir(cfg, args, "fed")
    for seed in seeds:
        records, ckpt, seed_cer, final_cer = _fed_one_seed(
            args.config, seed, args.rounds, args.init, str(out),
            args.precision or "float32")
        _append_metrics(out / "metrics.jsonl", records)
        print(f"seed {seed}: fed final CER {final_cer:.4f} (seed CER {seed_cer:.4f})")
    return 0


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


def build_report(metrics_files) -> dict:
    """Aggregate final records: method -> {seed: cer}; medians over seeds."""
    by_method: dict = {}
    for path in metrics_files:
        p = Path(path)
        if not p.exists():
            raise CliError(f"metrics file missing: {p}", code=2)
        with open(p, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                if not rec.get("final"):
                    continue
                by_method.setdefault(rec["method"], {})[rec["seed"]] = rec["cer"]
    rows = []
    known = [m for m in METHOD_TABLE_ORDER if m in by_method]
    extra = sorted(m for m in by_method if m not in METHOD_TABLE_ORDER)
    for method in known + extra:
        seeds = by_method[method]
        cers = [seeds[s] for s in sorted(seeds)]
        rows.append({"method": method, "seeds": sorted(seeds),
                     "cers": cers, "median_cer": statistics.median(cers)})
    return {"rows": rows}


def format_report(report: dict) -> str:
    lines = [f"{'method':<18s} {'seeds':>6s} {'median CER':>11s}  per-seed CER"]
    lines.append("-" * 72)
    for row in report["rows"]:
        per_seed = " ".join(f"{c:.4f}" for c in row["cers"])
        lines.append(f"{row['method']:<18s} {len(row['seeds']):>6d} "
                     f"{row['median_cer']:>11.4f}  {per_seed}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    report = build_report(args.metrics_files)
    text = format_report(report)
    print(text)
    out = Path(args.out) if args.out else Path(args.metrics_files[0]).parent / "report.json"
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    print(f"\nmachine-readable copy: {out}")
    return 0


# --------------------------------------------------------------------------
# gradcheck
# --------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    precision = args.precision or "float64"
    if precision != "float64":
        raise CliError("gradcheck requires --precision float64", code=2)
    ad.set_default_dtype(precision)
    from .gradchecks import run_standard_gradchecks
    reports = run_standard_gradchecks(tol=args.tol)
    ok = True
    for name, rep in reports:
        status = "PASS" if rep.passed else "FAIL"
        print(f"[{status}] {name}: max rel err {rep.max_rel_error:.3e} (tol {rep.tolerance:g})")
        ok = ok and rep.passed
    return 0 if ok else 1


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nbadapt",
        description="Self-learning experiments for attention encoder-decoder models "
                    "on synthetic domain-shift corpora.",
        epilog=f"Default output root comes from ${OUTPUT_ROOT_ENV} when set.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment config (INI)")
        p.add_argument("--seed", type=int, help="single experiment seed")
        p.add_argument("--seeds", help="space/comma-separated experiment seeds")
        p.add_argument("--out", help="output directory for this experiment")
        p.add_argument("--precision", choices=["float32", "float64"])
        p.add_argument("--parallel-seeds", action="store_true",
                       help="run independent seeds in parallel processes")
        p.add_argument("--init", help="initial checkpoint path; {seed} is substituted")

    p = sub.add_parser("gen-data", help="generate the synthetic datasets")
    p.add_argument("--config", required=True)
    p.add_argument("--write-default-config", action="store_true",
                   help="write the default config to --config if it does not exist")
    p.set_defaults(func=_gen_data_entry)

    p = sub.add_parser("train", help="supervised training (seed model or upper bound)")
    common(p)
    p.add_argument("--on", choices=["seed", "adapt"], default="seed",
                   help="train on the labeled SEED set or the labeled SHIFTED set")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="self-learning adaptation of a seed checkpoint")
    common(p)
    p.add_argument("--method", required=True,
                   help="one_best | mll | mtl_shared_aed | mtl_shared_ae")
    p.add_argument("--n-best", type=int, dest="n_best")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("fed", help="federated self-learning simulation")
    common(p)
    p.add_argument("--rounds", type=int, help="override the configured round count")
    p.set_defaults(func=cmd_fed)

    p = sub.add_parser("report", help="method-vs-CER comparison table from metrics files")
    p.add_argument("metrics_files", nargs="+")
    p.add_argument("--out", help="where to write the machine-readable copy")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference checks of all loss gradients")
    p.add_argument("--precision", choices=["float32", "float64"])
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _gen_data_entry(args) -> int:
    if args.write_default_config and not Path(args.config).exists():
        write_default_config(args.config)
        print(f"wrote default config to {args.config}")
    return cmd_gen_data(args)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
