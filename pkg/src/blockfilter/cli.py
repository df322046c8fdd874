"""Command line entry point: ``blockfilter <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .combine import CombinedDraws, CombineSpec, baseline_dpmc, baseline_pie, baseline_wasp, combine
from .em import EmConfig, baum_welch
from .experiment import (
    K_POLICY_ALIASES,
    ExperimentConfig,
    ExperimentError,
    evaluation_columns,
    ingest_series,
    run_experiment,
)
from .hmm_core import HmmModel, choose_k, simulate
from .metrics import accuracy_report
from .partition import block_with_context, partition
from .sampler import DrawSet, PriorSpec, SamplerConfig, run_subset_sampler

logger = logging.getLogger("blockfilter")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_series(path: Path, y, header="y") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        fh.writelines(f"{v!r}\n" for v in map(float, y))


def _emit(args, payload: dict, rows: list[dict] | None = None) -> None:
    if args.format == "json":
        print(json.dumps(payload, indent=2))
    elif rows:
        keys = list(rows[0])
        print(",".join(keys))
        for r in rows:
            print(",".join(str(r[k]) for k in keys))
    else:
        for k, v in payload.items():
            print(f"{k},{v}")


def _config(args) -> ExperimentConfig:
    """File values (or defaults) with any command line flags layered on top."""
    base = ExperimentConfig.from_yaml(args.config) if args.config else ExperimentConfig()
    flags = dict(n=args.n, k=args.k, base_seed=args.seed, workers=args.workers, out_dir=args.out,
                 baselines=args.baselines, detrend=args.detrend)
    overrides = {k: v for k, v in flags.items() if v is not None}
    if args.k is not None:
        overrides["k_policy"] = None
    elif args.k_policy is not None:
        overrides["k_policy"] = K_POLICY_ALIASES[args.k_policy]
        overrides["k"] = None
    return ExperimentConfig(**{**asdict(base), **overrides})


def cmd_simulate(args) -> int:
    model = ExperimentConfig.from_yaml(args.config).model() if args.config else ExperimentConfig().model()
    x, y = simulate(model, args.n, seed=args.seed)
    out = _out_dir(args)
    _write_series(out / "series.csv", y)
    _write_series(out / "states.csv", x, header="x")
    (out / "model.json").write_text(json.dumps(model.to_dict(), indent=2), encoding="utf-8")
    _emit(args, {"n": args.n, "seed": args.seed, "out": str(out)})
    return 0


def cmd_ingest(args) -> int:
    res = ingest_series(args.data, args.detrend)
    out = _out_dir(args)
    _write_series(out / "series.csv", res.values)
    _emit(args, {"n": int(res.values.size), "dropped": res.dropped, "out": str(out / "series.csv")})
    return 0


def cmd_fit_em(args) -> int:
    y = ingest_series(args.data).values
    model, trace = baum_welch(y, args.S, EmConfig(n_restarts=args.restarts, seed=args.seed))
    d = model.to_dict()
    d["loglik"] = trace[-1]
    d["iterations"] = len(trace)
    if args.out:
        out = _out_dir(args)
        (out / "mle.json").write_text(json.dumps(d, indent=2), encoding="utf-8")
    print(json.dumps(d, indent=2))
    return 0


def cmd_sample_subset(args) -> int:
    y = ingest_series(args.data).values
    K = args.k if args.k is not None else choose_k(y.size, K_POLICY_ALIASES[args.k_policy])
    part = partition(y.size, K)
    ctx, blk = block_with_context(part, args.subset, y)
    cfg = SamplerConfig(K, args.iters, args.burn_in, args.thin, args.seed)
    ds = run_subset_sampler(ctx, blk, args.S, PriorSpec.from_data(y), cfg, args.subset)
    out = _out_dir(args)
    path = out / f"subset{args.subset}.csv"
    ds.to_csv(path)
    _emit(args, {"subset": args.subset, "K": K, "draws": ds.T, "out": str(path)})
    return 0


def cmd_combine(args) -> int:
    drawsets = [DrawSet.from_csv(p) for p in args.draws]
    out = _out_dir(args)
    mle = None
    if args.mle:
        mle = HmmModel.from_dict(json.loads(Path(args.mle).read_text(encoding="utf-8"))).pack()
    res = combine(drawsets, CombineSpec(args.center, args.scale, args.transform), full_mle=mle)
    res.to_csv(out / "BFP.csv")
    written = ["BFP.csv"]
    for name in [b for b in (args.baselines or "").split(",") if b]:
        if name == "dpmc":
            baseline_dpmc(drawsets).to_csv(out / "DPMC.csv")
        else:
            fn = {"pie": baseline_pie, "wasp": baseline_wasp}[name]
            d = fn(drawsets, args.seed)
            prov = np.column_stack([np.zeros(len(d), dtype=int), np.arange(len(d))])
            CombinedDraws(d, prov, drawsets[0].S).to_csv(out / f"{name.upper()}.csv")
        written.append(f"{name.upper()}.csv")
    _emit(args, {"out": str(out), "files": " ".join(written), "projected_rows": res.meta["projected_rows"]})
    return 0


def _load_draws(path) -> tuple[np.ndarray, int]:
    cd = CombinedDraws.from_csv(path)
    return cd.draws, cd.S


def cmd_evaluate(args) -> int:
    a, S = _load_draws(args.approx)
    b, S_ref = _load_draws(args.reference)
    if S != S_ref:
        raise ValueError("approximation and reference disagree on the number of states")
    A, em, qn = evaluation_columns(a, S)
    B, _, _ = evaluation_columns(b, S)
    rep = accuracy_report(A, B, em + qn)
    rows = [{"dimension": n, "accuracy": v} for n, v in rep.rows()]
    summary = {
        "acc_emission": float(np.median([rep[n] for n in em])),
        "acc_Q": float(np.median([rep[n] for n in qn])),
    }
    rows += [{"dimension": k, "accuracy": v} for k, v in summary.items()]
    if args.out:
        rep.to_csv(_out_dir(args) / "accuracy.csv")
    _emit(args, {"per_dimension": dict(rep.rows()), **summary}, rows)
    return 0


def cmd_run_experiment(args) -> int:
    cfg = _config(args)
    try:
        table = run_experiment(cfg, fmt=args.format)
    except ExperimentError as exc:
        logger.error("%s", exc)
        return 1
    if args.format == "json":
        print(table.to_json())
    else:
        _emit(args, {}, table.all_rows())
    for f in table.failures:
        logger.warning("replication %s failed at %s: %s", f["replication"], f["stage"], f["error"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blockfilter", description="Block-filtered posterior sampling for Gaussian HMMs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=out_required)
        sp.add_argument("--format", choices=("csv", "json"), default="csv")

    def k_flags(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--k", type=int)
        g.add_argument("--k-policy", choices=sorted(K_POLICY_ALIASES), default=None)

    sp = sub.add_parser("simulate", help="simulate a series from a model")
    sp.add_argument("--config")
    sp.add_argument("--n", type=int, default=10_000)
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("ingest", help="clean and optionally de-trend a series")
    sp.add_argument("--data", required=True)
    sp.add_argument("--detrend", default=None, help="ma:<window>")
    common(sp)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("fit-em", help="maximum likelihood fit by Baum-Welch")
    sp.add_argument("--data", required=True)
    sp.add_argument("--S", type=int, default=3)
    sp.add_argument("--restarts", type=int, default=1)
    common(sp, out_required=False)
    sp.set_defaults(func=cmd_fit_em)

    sp = sub.add_parser("sample-subset", help="run the sampler on one block")
    sp.add_argument("--data", required=True)
    sp.add_argument("--S", type=int, default=3)
    sp.add_argument("--subset", type=int, required=True, help="0-based block index")
    sp.add_argument("--iters", type=int, default=10_000)
    sp.add_argument("--burn-in", type=int, default=5_000)
    sp.add_argument("--thin", type=int, default=5)
    k_flags(sp)
    common(sp)
    sp.set_defaults(func=cmd_sample_subset, k_policy_default="logn")

    sp = sub.add_parser("combine", help="combine subset draw files")
    sp.add_argument("--draws", nargs="+", required=True)
    sp.add_argument("--mle", help="model JSON written by fit-em")
    sp.add_argument("--center", default="full_mle")
    sp.add_argument("--scale", default="average")
    sp.add_argument("--transform", default="raw")
    sp.add_argument("--baselines", default="")
    common(sp)
    sp.set_defaults(func=cmd_combine)

    sp = sub.add_parser("evaluate", help="accuracy of a draw file against a reference")
    sp.add_argument("--approx", required=True)
    sp.add_argument("--reference", required=True)
    common(sp, out_required=False)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("run-experiment", help="full simulation or data study")
    sp.add_argument("--config")
    sp.add_argument("--n", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--baselines")
    sp.add_argument("--detrend")
    k_flags(sp)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp.set_defaults(func=cmd_run_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "k_policy", "x") is None and getattr(args, "k", None) is None and hasattr(args, "k_policy_default"):
        args.k_policy = args.k_policy_default
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
