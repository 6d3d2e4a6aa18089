"""Run configured experiments and the bundled reproduction suites.

Each experiment writes into ``<out>/<label>/``:

* ``config.json``: the exact configuration that ran;
* ``replica_XXX.csv``: one trace per replica (optimizer and consensus runs);
* ``aggregate.csv``: per-step mean and std over replicas;
* ``summary.json``: scalar results;
* ``*.svg``: figures.

Replica ``r`` uses seed ``seed + r * seed_stride`` for its topology, initial
state, masks and samples. Optimization datasets are drawn once from the base
seed so that all replicas solve the same problem.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .. import theory
from ..engines import EngineConfig, Streams, consensus_run, run_engine
from ..mixing import calibrate_sigma
from ..objectives import centralized_optimum, constants, gen_linreg, gen_logreg
from ..topology import build_joint_topology
from .config import ConfigError, ExperimentConfig, default_config
from .io import SPECTRA_COLUMNS, U_COLUMNS, export_aggregate, export_csv, write_table
from .plots import export_svg

QUANTIZED_NOTE = ("quantized push-sum baselines are not reimplemented; "
                  "their series are intentionally absent from this output")


class StageError(RuntimeError):
    """A module error tagged with the experiment stage that raised it."""

    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"{stage} stage failed: {type(exc).__name__}: {exc}")
        self.stage = stage
        self.__cause__ = exc


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, et, exc, tb):
        if exc is not None and not isinstance(exc, (StageError, ConfigError, KeyboardInterrupt)):
            raise StageError(self.name, exc) from exc
        return False


@dataclasses.dataclass
class ExperimentResult:
    config: ExperimentConfig
    traces: list
    paths: dict
    summary: dict


def _map(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, items))


def _write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not serializable: {type(v).__name__}")


def build_dataset(cfg: ExperimentConfig):
    """Dataset, optimum and constants for an optimizing or theory experiment."""
    dp, n = cfg.data, cfg.topology.n
    rng = Streams(cfg.seed).data
    with _Stage("data"):
        if cfg.kind == "logreg":
            ds = gen_logreg(n, dp.m_i, dp.d, dp.mu_reg, rng, dp.flip_prob)
        else:
            ds, _ = gen_linreg(n, dp.m_i, dp.d, dp.noise_variance, rng, dp.min_abs_row_sum)
        c = constants(ds)
        x_star = centralized_optimum(ds).x_star
    return ds, x_star, c


def _topology(cfg, streams, horizon):
    t = cfg.topology
    with _Stage("topology"):
        return build_joint_topology(t.n, t.p, t.drop, t.B, horizon, streams.topology, t.max_retries)


def _consensus_replica(args):
    cfg_doc, r, seed, path = args
    cfg = ExperimentConfig.from_dict(cfg_doc)
    c = cfg.consensus
    streams = Streams(seed)
    steps = cfg.steps()
    topo = _topology(cfg, streams, steps)
    x0 = streams.init.standard_normal((cfg.topology.n, c.d))
    with _Stage("engine"):
        tr = consensus_run(topo, x0, c.gamma, c.q, steps, streams, c.record_every)
    with _Stage("output"):
        export_csv(tr, path)
    tr.diagnostics = {k: v for k, v in tr.diagnostics.items() if np.isscalar(v)}
    return tr


def _optimizer_replica(args):
    cfg_doc, r, seed, path = args
    cfg = ExperimentConfig.from_dict(cfg_doc)
    ds, x_star, c = build_dataset(cfg)
    streams = Streams(seed)
    topo = _topology(cfg, streams, cfg.steps())
    ecfg = dataclasses.replace(cfg.engine, seed=seed)
    with _Stage("engine"):
        tr = run_engine(topo, ds, ecfg, streams, x_star=x_star, L=c.L)
    with _Stage("output"):
        export_csv(tr, path)
    tr.diagnostics = {k: v for k, v in tr.diagnostics.items() if np.isscalar(v) or isinstance(v, str)}
    return tr


def _trace_experiment(cfg: ExperimentConfig, root: Path) -> ExperimentResult:
    worker = _consensus_replica if cfg.kind == "consensus" else _optimizer_replica
    doc = cfg.to_dict()
    jobs = [(doc, r, s, root / f"replica_{r:03d}.csv") for r, s in enumerate(cfg.replica_seeds())]
    traces = _map(worker, jobs, cfg.workers)
    paths = {f"replica_{r:03d}": j[3] for r, j in enumerate(jobs)}
    with _Stage("output"):
        paths["aggregate"] = export_aggregate(traces, root / "aggregate.csv")
        labels = [f"seed {s}" for s in cfg.replica_seeds()]
        paths["residual_vs_t"] = export_svg(traces, "t", "residual", root / "residual_vs_t.svg",
                                            labels, title=cfg.label)
        paths["residual_vs_comm"] = export_svg(traces, "comm_entries_cum", "residual",
                                               root / "residual_vs_comm.svg", labels, title=cfg.label)
        if cfg.kind != "consensus":
            paths["residual_vs_grad"] = export_svg(traces, "grad_evals_cum", "residual",
                                                   root / "residual_vs_grad.svg", labels,
                                                   title=cfg.label)
    summary = {"kind": cfg.kind, "label": cfg.label, "replicas": []}
    for s, tr in zip(cfg.replica_seeds(), traces):
        row = {"seed": s, "final_residual": tr.final_residual, "wall_time": tr.wall_time,
               "recorded_rows": len(tr)}
        row.update(tr.diagnostics)
        if cfg.kind == "consensus":
            row["steps_to_threshold"] = tr.first_step_below(cfg.consensus.threshold)
        summary["replicas"].append(row)
    return ExperimentResult(cfg, traces, paths, summary)


def _spectra_experiment(cfg: ExperimentConfig, root: Path) -> ExperimentResult:
    sp, B = cfg.spectra, cfg.topology.B
    cols = {c: [] for c in SPECTRA_COLUMNS}
    per_q = {q: [] for q in sp.qs}
    for seed in cfg.replica_seeds():
        streams = Streams(seed)
        topo = _topology(cfg, streams, sp.windows * B)
        for q in sp.qs:
            with _Stage("spectra"):
                cal = calibrate_sigma(topo.adjacency, B, sp.d, q, sp.gamma, streams.masks, sp.windows)
            per_q[q].append(cal)
            w, m = np.meshgrid(np.arange(sp.windows), np.arange(sp.d), indexing="ij")
            cols["seed"].append(np.full(w.size, seed))
            cols["q"].append(np.full(w.size, q))
            cols["window"].append(w.ravel())
            cols["coordinate"].append(m.ravel())
            cols["lambda2_m"].append(cal.lambda2_m.ravel())
            cols["lambda2_b"].append(cal.lambda2_b.ravel())
    table = {c: np.concatenate(v) for c, v in cols.items()}
    summary = {"kind": "spectra", "label": cfg.label, "B": B, "gamma": sp.gamma, "by_q": []}
    for q, cals in per_q.items():
        l2m = np.concatenate([c.lambda2_m.ravel() for c in cals])
        sig = np.concatenate([c.window_sigma for c in cals])
        summary["by_q"].append({
            "q": q,
            "sigma_max": float(sig.max()),
            "sigma_median": float(np.median(sig)),
            "max_lambda2_m": float(l2m.max()),
            "windows": int(sig.size),
            "windows_with_gap": int(np.sum(sig < 1 - 1e-9)),
            "gap_positive_everywhere": bool(np.all(sig < 1 - 1e-9)),
        })
    with _Stage("output"):
        paths = {"spectra_csv": write_table(root / "spectra.csv", table, SPECTRA_COLUMNS),
                 "spectra_json": _write_json(root / "spectra.json", summary)}
    return ExperimentResult(cfg, [], paths, summary)


def _theory_replica(args):
    topo, ds, ecfg, seed, x0, x_star, L = args
    tr = run_engine(topo, ds, ecfg, Streams(seed), x0=x0, x_star=x_star, L=L, backend="numpy")
    return theory.u_from_trace(tr)


def _theory_experiment(cfg: ExperimentConfig, root: Path) -> ExperimentResult:
    th, e, B, n = cfg.theory, cfg.engine, cfg.topology.B, cfg.topology.n
    ds, x_star, c = build_dataset(cfg)
    base = Streams(cfg.seed)
    topo = _topology(cfg, base, cfg.steps())
    with _Stage("spectra"):
        cal = calibrate_sigma(topo.adjacency, B, ds.d, e.q, e.gamma, base.masks, th.calibration_windows)
    report = {"sigma": cal.sigma, "alpha": None, "T": None, "lambda": None,
              "contraction_ok": False, "lti_bound_worst_ratio": None,
              "L": c.L, "mu": c.mu, "q_tilde": c.q_tilde, "n": n, "B": B, "q": e.q,
              "calibration_window_sigma": cal.window_sigma.tolist()}
    paths = {}
    if cal.sigma >= 1.0:
        report["note"] = ("measured sigma is not below 1, so the step-size and rate "
                          "formulas give no guarantee; nothing further was evaluated")
        with _Stage("output"):
            paths["theory_json"] = _write_json(root / "theory.json", report)
        return ExperimentResult(cfg, [], paths, report)

    with _Stage("theory"):
        ti = theory.TheoryInputs(cal.sigma, c.L, c.mu, B, n)
        alpha = th.alpha if th.alpha is not None else theory.guaranteed_step_size(ti)
        T = theory.rate_epoch_length(ti)
        contraction = theory.check_contraction(alpha, ti)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            lti = theory.build_lti(alpha, ti)
    report.update({"alpha": alpha, "T": T, "lambda": theory.lambda_rate(ti, T),
                   "contraction_ok": contraction.ok, "admissible": lti.admissible,
                   "contraction": dataclasses.asdict(contraction)})

    epoch = th.epoch_blocks * B
    S = math.ceil(th.blocks / th.epoch_blocks)
    ecfg = dataclasses.replace(e, alpha=alpha, T=epoch, S=S, keep_states=True,
                               record_blocks=10 ** 9, record_every=10 ** 9)
    x0 = base.init.standard_normal((n, ds.d))
    jobs = [(topo, ds, ecfg, s, x0, x_star, c.L) for s in cfg.replica_seeds()]
    with _Stage("engine"):
        pairs = _map(_theory_replica, jobs, cfg.workers)
        det_cfg = dataclasses.replace(ecfg, kind="full_grad", track_spectra=True)
        det = run_engine(topo, ds, det_cfg, Streams(cfg.seed), x0=x0, x_star=x_star, L=c.L,
                         backend="numpy")
    with _Stage("theory"):
        p1 = theory.verify_lti_bound(pairs, lti, th.slack)
        p1_det = theory.verify_lti_bound([det], lti, th.recursion_slack)
        l2 = theory.consensus_recursion_check(det, alpha, slack=th.recursion_slack)
    report.update({
        "lti_bound_worst_ratio": p1.worst_ratio, "lti_bound_violations": p1.violations,
        "lti_bound_ok": p1.ok, "ensemble_size": len(pairs),
        "full_grad_lti_bound_worst_ratio": p1_det.worst_ratio, "full_grad_lti_bound_ok": p1_det.ok,
        "consensus_recursion_worst_ratio": l2.worst_ratio, "consensus_recursion_ok": l2.ok,
    })
    u = np.mean([p[0] for p in pairs], axis=0)
    ut = np.mean([p[1] for p in pairs], axis=0)
    k = np.arange(u.shape[0])
    table = {"block": k, "t": k * B,
             "u_consensus": u[:, 0], "u_optimality": u[:, 1], "u_tracking": u[:, 2],
             "ut_consensus": ut[:, 0], "ut_optimality": ut[:, 1], "ut_tracking": ut[:, 2]}
    with _Stage("output"):
        paths["u_csv"] = write_table(root / "u_sequences.csv", table, U_COLUMNS)
        paths["theory_json"] = _write_json(root / "theory.json", report)
    return ExperimentResult(cfg, [det], paths, report)


def run_experiment(config: ExperimentConfig, out: str | Path | None = None) -> ExperimentResult:
    """Validate ``config``, run all replicas and write every output file.

    Raises
    ------
    ConfigError
        For invalid configurations (nothing is run).
    StageError
        When a module fails; the message names the stage.
    """
    config.validate()
    root = Path(out if out is not None else config.out) / config.label
    root.mkdir(parents=True, exist_ok=True)
    config.save(root / "config.json")
    start = time.perf_counter()
    if config.kind == "spectra":
        res = _spectra_experiment(config, root)
    elif config.kind == "theory":
        res = _theory_experiment(config, root)
    else:
        res = _trace_experiment(config, root)
    res.summary["wall_time_total"] = time.perf_counter() - start
    res.paths["config"] = root / "config.json"
    with _Stage("output"):
        res.paths["summary"] = _write_json(root / "summary.json", res.summary)
    return res


# ----- reproduction suites -----------------------------------------------------

SUITES = ("consensus", "linreg", "logreg", "spectra", "theory")


def _suite_consensus(out, seed, workers):
    results = {}
    for B, steps in ((1, 1000), (10, 8000)):
        for q in (1.0, 0.078):
            cfg = default_config("consensus")
            cfg.name = f"consensus_B{B}_q{q:g}"
            cfg.seed, cfg.workers = seed, workers
            cfg.topology.B = B
            cfg.consensus.q, cfg.consensus.steps = q, steps
            results[(B, q)] = run_experiment(cfg, out)
    summary = {"note": QUANTIZED_NOTE, "runs": []}
    for B in (1, 10):
        pair = [results[(B, q)] for q in (1.0, 0.078)]
        labels = [f"q={q:g}" for q in (1.0, 0.078)]
        traces = [r.traces[0] for r in pair]
        export_svg(traces, "t", "residual", Path(out) / f"consensus_B{B}_residual_vs_t.svg",
                   labels, title=f"consensus, B={B}")
        export_svg(traces, "comm_entries_cum", "residual",
                   Path(out) / f"consensus_B{B}_residual_vs_comm.svg", labels,
                   title=f"consensus, B={B}")
        hits = [r.summary["replicas"][0]["steps_to_threshold"] for r in pair]
        summary["runs"].append({
            "B": B, "steps_to_1e-12": dict(zip(labels, hits)),
            "ratio": hits[1] / hits[0] if None not in hits else None,
            "max_mass_drift": max(r.summary["replicas"][0]["max_mass_drift"] for r in pair),
        })
    _write_json(Path(out) / "consensus_suite.json", summary)
    return summary


def _suite_optimizer(kind, out, seed, workers, blocks, Bs, qs):
    summary = {"note": QUANTIZED_NOTE, "runs": []}
    for B in Bs:
        traces, labels = [], []
        runs = [("svrg", q) for q in qs] + [("full_grad", 1.0), ("plain_sgd", 1.0)]
        for engine_kind, q in runs:
            cfg = default_config(kind)
            cfg.name = f"{kind}_B{B}_{engine_kind}_q{q:g}"
            cfg.seed, cfg.workers = seed, workers
            cfg.topology.B = B
            epoch_blocks = cfg.engine.T // cfg.engine.B if cfg.engine.T else 2 * cfg.data.m_i
            cfg.engine = dataclasses.replace(
                cfg.engine, kind=engine_kind, q=q, B=B, T=epoch_blocks * B,
                S=max(1, blocks // epoch_blocks), record_every=10 * B,
                record_blocks=max(1, blocks // 200))
            res = run_experiment(cfg, out)
            tr = res.traces[0]
            traces.append(tr)
            labels.append(f"{engine_kind} q={q:g}")
            summary["runs"].append({"B": B, "engine": engine_kind, "q": q,
                                    "final_residual": tr.final_residual,
                                    "wall_time": tr.wall_time})
        for xm, tag in (("t", "t"), ("grad_evals_cum", "grad"), ("comm_entries_cum", "comm")):
            export_svg(traces, xm, "residual", Path(out) / f"{kind}_B{B}_residual_vs_{tag}.svg",
                       labels, title=f"{kind}, B={B}")
    _write_json(Path(out) / f"{kind}_suite.json", summary)
    return summary


def _suite_spectra(out, seed, workers):
    summary = {}
    for B in (1, 10):
        cfg = default_config("spectra")
        cfg.name = f"spectra_B{B}"
        cfg.seed, cfg.repeat, cfg.workers = seed, 20, workers
        cfg.topology.B = B
        cfg.spectra.qs = [1.0, 0.25, 0.078]
        summary[f"B{B}"] = run_experiment(cfg, out).summary["by_q"]
    _write_json(Path(out) / "spectra_suite.json", summary)
    return summary


def _suite_theory(out, seed, workers):
    cfg = default_config("theory")
    cfg.seed, cfg.workers = seed, workers
    return run_experiment(cfg, out).summary


def reproduce(out, suites=SUITES, seed: int = 0, workers: int = 1, quick: bool = False) -> dict:
    """Run the bundled desk-scale reproduction suites and write a combined index.

    ``quick`` shortens the optimization runs (for smoke tests).
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    unknown = set(suites) - set(SUITES)
    if unknown:
        raise ConfigError(f"unknown suites {sorted(unknown)}; choose from {SUITES}")
    blocks = 2000 if quick else 100_000
    index = {"seed": seed, "suites": {}}
    start = time.perf_counter()
    for s in suites:
        t0 = time.perf_counter()
        if s == "consensus":
            res = _suite_consensus(out, seed, workers)
        elif s == "linreg":
            res = _suite_optimizer("linreg", out, seed, workers, blocks, (1, 3, 5), (1.0, 0.08, 0.05))
        elif s == "logreg":
            res = _suite_optimizer("logreg", out, seed, workers, blocks // 6, (1, 5), (1.0, 0.25))
        elif s == "spectra":
            res = _suite_spectra(out, seed, workers)
        else:
            res = _suite_theory(out, seed, workers)
        index["suites"][s] = {"wall_time": time.perf_counter() - t0, "result": res}
    index["wall_time_total"] = time.perf_counter() - start
    _write_json(out / "reproduce.json", index)
    return index
