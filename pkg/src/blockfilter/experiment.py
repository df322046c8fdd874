"""Experiment orchestration: data, subset runs in a worker pool, combination, scoring."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import yaml

from .combine import CombineSpec, baseline_dpmc, baseline_pie, baseline_wasp, combine
from .em import EmConfig, baum_welch
from .hmm_core import HmmModel, choose_k, benchmark_model, simulate, unpack_params
from .metrics import accuracy_report
from .partition import block_with_context, partition
from .sampler import DrawSet, PriorSpec, SamplerConfig, run_subset_sampler

logger = logging.getLogger(__name__)

BASELINES = ("dpmc", "pie", "wasp")
MISSING_TOKENS = {"", "na", "nan", "n/a", "null"}
K_POLICY_ALIASES = {"logn": "log_n", "n14": "n_quarter", "n13": "n_third"}


class ExperimentError(RuntimeError):
    pass


def derive_seed(base_seed: int, *keys: int) -> int:
    """Positional seed for a (replication, role, subset, ...) key."""
    ss = np.random.SeedSequence(base_seed, spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# ---------------------------------------------------------------------------
# ingestion


class IngestResult(NamedTuple):
    values: np.ndarray
    dropped: int


def moving_average_trend(y: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average; the window shrinks symmetrically at the ends."""
    if window < 1:
        raise ValueError("window must be >= 1")
    n = y.size
    h = window // 2
    t = np.arange(n)
    half = np.minimum(h, np.minimum(t, n - 1 - t))
    c = np.concatenate([[0.0], np.cumsum(y)])
    return (c[t + half + 1] - c[t - half]) / (2 * half + 1)


def parse_detrend(spec) -> Optional[int]:
    """``None``/``"none"`` -> None; ``"ma:51"`` or ``("ma", 51)`` -> 51."""
    if spec is None or spec == "none":
        return None
    if isinstance(spec, (tuple, list)):
        kind, w = spec
    else:
        kind, _, w = str(spec).partition(":")
        w = w or 51
    if kind not in ("ma", "moving_average"):
        raise ValueError(f"unknown detrend method {kind!r}")
    return int(w)


def ingest_series(path, detrend=None, min_points: int = 10) -> IngestResult:
    """Read one numeric value per line (optional header, missing tokens dropped).

    Fewer than ``min_points`` usable values is an error.
    """
    window = parse_detrend(detrend)
    values, dropped = [], 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields_ = next(csv.reader([line.rstrip("\r\n")]), None) or [""]
            if len(fields_) > 1:
                raise ValueError(f"{path}:{lineno}: expected a single column, got {len(fields_)}")
            tok = fields_[0].strip()
            if tok.lower() in MISSING_TOKENS:
                dropped += 1
                continue
            try:
                v = float(tok)
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise ValueError(f"{path}:{lineno}: non-numeric value {tok!r}") from None
            if not math.isfinite(v):
                dropped += 1
                continue
            values.append(v)
    y = np.asarray(values, dtype=float)
    if y.size < min_points:
        raise ValueError(f"{path}: only {y.size} usable values (need at least {min_points})")
    if dropped:
        logger.info("%s: dropped %d missing values", path, dropped)
    if window is not None:
        y = y - moving_average_trend(y, window)
    return IngestResult(y, dropped)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    mode: str = "simulate"
    S: int = 3
    Q: Optional[list] = None
    mu: Optional[list] = None
    sigma: Optional[list] = None
    data_path: Optional[str] = None
    detrend: Optional[str] = None
    n: int = 10_000
    k_policy: Optional[str] = "log_n"
    k: Optional[int] = None
    iters: int = 10_000
    burn_in: int = 5_000
    thin: int = 5
    anneal: float = 0.5
    context_iters: Optional[int] = None
    center: str = "full_mle"
    scale: str = "average"
    transform: str = "raw"
    baselines: list = field(default_factory=lambda: list(BASELINES))
    reference: bool = True
    replications: int = 1
    base_seed: int = 0
    out_dir: Optional[str] = None
    workers: int = 1
    em_max_iter: int = 500
    em_tol: float = 1e-8
    em_restarts: int = 1

    def __post_init__(self):
        if self.mode not in ("simulate", "ingest"):
            raise ValueError("mode must be 'simulate' or 'ingest'")
        if self.replications < 1 or self.workers < 1:
            raise ValueError("replications and workers must be >= 1")
        if self.mode == "ingest" and not self.data_path:
            raise ValueError("ingest mode needs data_path")
        if self.mode == "simulate" and self.data_path:
            raise ValueError("simulate mode takes a model, not data_path")
        if self.k is None and self.k_policy is None:
            raise ValueError("give k or k_policy")
        if self.k_policy is not None:
            self.k_policy = K_POLICY_ALIASES.get(self.k_policy, self.k_policy)
            choose_k(16, self.k_policy)
        if isinstance(self.baselines, str):
            self.baselines = [b for b in self.baselines.split(",") if b]
        bad = set(self.baselines) - set(BASELINES)
        if bad:
            raise ValueError(f"unknown baselines {sorted(bad)}")
        # validate eagerly
        self.sampler_config(1, 0)
        self.combine_spec()

    def model(self) -> HmmModel:
        if self.Q is None and self.mu is None and self.sigma is None and self.S == 3:
            return benchmark_model()
        if self.Q is None or self.mu is None or self.sigma is None:
            raise ValueError("simulate mode needs Q, mu and sigma (or none of them for the default model)")
        sd = np.asarray(self.sigma, dtype=float)
        return HmmModel.stationary(self.Q, self.mu, sd**2)

    def sampler_config(self, K_power: int, seed: int) -> SamplerConfig:
        return SamplerConfig(K_power, self.iters, self.burn_in, self.thin, seed, self.context_iters, self.anneal)

    def combine_spec(self) -> CombineSpec:
        return CombineSpec(self.center, self.scale, self.transform)

    def em_config(self, seed: int) -> EmConfig:
        return EmConfig(self.em_max_iter, self.em_tol, self.em_restarts, seed)

    def choose_K(self, n: int) -> int:
        K = self.k if self.k is not None else choose_k(n, self.k_policy)
        return min(K, n)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        """Build from the nested file layout (see README) or a flat mapping."""
        flat = {}
        for key, val in d.items():
            if key == "model":
                flat.update({k: val[k] for k in ("S", "Q", "mu", "sigma") if k in val})
            elif key == "data":
                flat["data_path"] = val.get("path")
                flat["detrend"] = val.get("detrend")
            elif key == "sampler":
                flat.update(val)
            elif key == "combine":
                flat.update(val)
            elif key == "em":
                flat.update({f"em_{k}": v for k, v in val.items()})
            elif key == "seed":
                flat["base_seed"] = val
            elif key == "out":
                flat["out_dir"] = val
            else:
                flat[key] = val
        known = {f.name for f in fields(cls)}
        unknown = set(flat) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**flat)

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})


# ---------------------------------------------------------------------------
# results


COLUMNS = ("method", "n", "K", "replication", "acc_emission", "acc_Q", "wall_time_s")


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def add(self, method, n, K, replication, acc_emission, acc_Q, wall_time_s):
        key = (method, n, K, replication)
        if any((r["method"], r["n"], r["K"], r["replication"]) == key for r in self.rows):
            raise ValueError(f"duplicate result row {key}")
        self.rows.append(dict(zip(COLUMNS, (method, n, K, replication, acc_emission, acc_Q, wall_time_s))))

    def aggregate(self) -> list[dict]:
        out = []
        groups: dict = {}
        for r in self.rows:
            groups.setdefault((r["method"], r["n"], r["K"]), []).append(r)
        for (method, n, K), rs in groups.items():
            agg = {"method": method, "n": n, "K": K, "replication": "mean"}
            for c in ("acc_emission", "acc_Q", "wall_time_s"):
                agg[c] = float(np.mean([r[c] for r in rs]))
            out.append(agg)
        return out

    def all_rows(self) -> list[dict]:
        return self.rows + self.aggregate()

    def get(self, method: str, replication="mean") -> dict:
        for r in self.all_rows():
            if r["method"] == method and r["replication"] == replication:
                return r
        raise KeyError((method, replication))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=COLUMNS)
            w.writeheader()
            w.writerows(self.all_rows())

    def to_json(self) -> str:
        return json.dumps({"rows": self.all_rows(), "failures": self.failures}, indent=2)


def evaluation_columns(draws: np.ndarray, S: int) -> tuple[np.ndarray, list[str], list[str]]:
    """Columns scored against the reference: means, standard deviations, Q.

    Returns (matrix, emission_names, Q_names).
    """
    mu, sigma2, Q, _ = unpack_params(draws, S)
    em_names = [f"mu{a + 1}" for a in range(S)] + [f"sigma{a + 1}" for a in range(S)]
    q_names = [f"Q_{a + 1}_{b + 1}" for a in range(S) for b in range(S)]
    mat = np.column_stack([mu, np.sqrt(sigma2), Q.reshape(draws.shape[0], -1)])
    return mat, em_names, q_names


def score(approx: np.ndarray, ref: np.ndarray, S: int) -> tuple[float, float]:
    a, em, qn = evaluation_columns(approx, S)
    b, _, _ = evaluation_columns(ref, S)
    names = em + qn
    rep = accuracy_report(a, b, names)
    acc_em = float(np.median([rep[n] for n in em]))
    acc_q = float(np.median([rep[n] for n in qn]))
    return acc_em, acc_q


# ---------------------------------------------------------------------------
# orchestration


def _task(args):
    key, context, block, S, prior, cfg, j = args
    t0 = time.perf_counter()
    try:
        ds = run_subset_sampler(context, block, S, prior, cfg, j)
    except Exception as exc:  # reported per replication by the caller
        return key, None, time.perf_counter() - t0, f"{type(exc).__name__}: {exc}"
    return key, ds, time.perf_counter() - t0, None


def _run_tasks(tasks, workers: int):
    if workers == 1:
        return [_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_task, tasks, chunksize=1))


def _load_data(cfg: ExperimentConfig, rep: int) -> np.ndarray:
    if cfg.mode == "ingest":
        return ingest_series(cfg.data_path, cfg.detrend).values
    _, y = simulate(cfg.model(), cfg.n, seed=derive_seed(cfg.base_seed, rep, 0))
    return y


def run_experiment(cfg: ExperimentConfig, fmt: str = "csv") -> ResultTable:
    """Run every replication and return the accuracy/timing table.

    Failures in one replication are recorded and the rest continue; if every
    replication fails an :class:`ExperimentError` is raised.
    """
    S = cfg.S
    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out is not None:
        (out / "draws").mkdir(parents=True, exist_ok=True)
    table = ResultTable()
    prepared = {}

    for rep in range(cfg.replications):
        try:
            y = _load_data(cfg, rep)
            t0 = time.perf_counter()
            mle, _ = baum_welch(y, S, cfg.em_config(derive_seed(cfg.base_seed, rep, 1)))
            em_time = time.perf_counter() - t0
            K = cfg.choose_K(y.size)
            part = partition(y.size, K)
            prepared[rep] = dict(y=y, mle=mle, em_time=em_time, K=K, part=part, prior=PriorSpec.from_data(y))
        except Exception as exc:
            logger.error("replication %d failed during setup: %s", rep, exc)
            table.failures.append({"replication": rep, "stage": "setup", "error": str(exc)})

    tasks = []
    for rep, p in prepared.items():
        sub_seed = derive_seed(cfg.base_seed, rep, 2)
        for j in range(p["K"]):
            ctx, blk = block_with_context(p["part"], j, p["y"])
            tasks.append(((rep, j), ctx, blk, S, p["prior"], cfg.sampler_config(p["K"], sub_seed), j))
        if cfg.reference:
            ref_cfg = cfg.sampler_config(1, derive_seed(cfg.base_seed, rep, 3))
            tasks.append(((rep, "ref"), p["y"][:0], p["y"], S, p["prior"], ref_cfg, 0))
    results = {}
    for key, ds, secs, err in _run_tasks(tasks, cfg.workers):
        results[key] = (ds, secs, err)

    for rep, p in sorted(prepared.items()):
        K, n = p["K"], p["y"].size
        try:
            errs = [results[(rep, j)][2] for j in range(K) if results[(rep, j)][2]]
            if cfg.reference and results[(rep, "ref")][2]:
                errs.append("reference: " + results[(rep, "ref")][2])
            if errs:
                raise ExperimentError("; ".join(errs))
            subsets = [results[(rep, j)][0] for j in range(K)]
            sub_time = max(results[(rep, j)][1] for j in range(K))

            methods = {}
            t0 = time.perf_counter()
            bfp = combine(subsets, cfg.combine_spec(), full_mle=p["mle"].pack())
            methods["BFP"] = (bfp.draws, sub_time + time.perf_counter() - t0)
            for name, fn in (("dpmc", lambda: baseline_dpmc(subsets).draws),
                             ("pie", lambda: baseline_pie(subsets, derive_seed(cfg.base_seed, rep, 4))),
                             ("wasp", lambda: baseline_wasp(subsets, derive_seed(cfg.base_seed, rep, 4)))):
                if name in cfg.baselines:
                    t0 = time.perf_counter()
                    d = fn()
                    methods[name.upper()] = (d, sub_time + time.perf_counter() - t0)

            if out is not None:
                for ds in subsets:
                    ds.to_csv(out / "draws" / f"rep{rep}_subset{ds.subset_index}.csv")
                bfp.to_csv(out / "draws" / f"rep{rep}_BFP.csv")
                with open(out / f"rep{rep}_mle.json", "w", encoding="utf-8") as fh:
                    json.dump(p["mle"].to_dict(), fh, indent=2)

            if cfg.reference:
                ref, ref_time = results[(rep, "ref")][:2]
                if out is not None:
                    ref.to_csv(out / "draws" / f"rep{rep}_DA.csv")
                for name, (d, secs) in methods.items():
                    acc_em, acc_q = score(d, ref.draws, S)
                    table.add(name, n, K, rep, acc_em, acc_q, secs)
                table.add("DA", n, K, rep, float("nan"), float("nan"), ref_time)
            else:
                for name, (d, secs) in methods.items():
                    table.add(name, n, K, rep, float("nan"), float("nan"), secs)
            logger.info("replication %d done (K=%d)", rep, K)
        except Exception as exc:
            logger.error("replication %d failed: %s", rep, exc)
            table.failures.append({"replication": rep, "stage": "combine/evaluate", "error": str(exc)})

    if not table.rows:
        raise ExperimentError(f"all replications failed: {table.failures}")
    if out is not None:
        table.to_csv(out / "results.csv")
        if fmt == "json":
            (out / "results.json").write_text(table.to_json(), encoding="utf-8")
    return table
