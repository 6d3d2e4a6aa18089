import json
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dicsopt.engines import TRACE_COLUMNS, EngineConfig
from dicsopt.harness import cli
from dicsopt.harness.config import (
    ConfigError,
    ConsensusParams,
    DataParams,
    ExperimentConfig,
    SpectraParams,
    TheoryParams,
    TopologyParams,
    default_config,
)
from dicsopt.harness.experiments import StageError, run_experiment
from dicsopt.harness.io import (
    AGG_COLUMNS,
    TRACE_HEADER,
    FormatError,
    aggregate,
    export_aggregate,
    export_csv,
    read_csv,
    read_table,
)
from dicsopt.harness.plots import export_svg


def small_consensus(**kw):
    cfg = ExperimentConfig(kind="consensus", topology=TopologyParams(n=4, p=0.8, drop=1),
                           consensus=ConsensusParams(d=3, steps=60, q=0.5))
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


def small_linreg(**kw):
    cfg = ExperimentConfig(kind="linreg", topology=TopologyParams(n=4, p=0.8, drop=1),
                           data=DataParams(m_i=10, d=3),
                           engine=EngineConfig(alpha=0.01, T=20, S=3, record_every=5))
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


def fake_trace(rng, rows=6):
    cols = {c: rng.standard_normal(rows) for c in TRACE_COLUMNS}
    cols["t"] = np.arange(rows, dtype=np.int64) * 10
    return cols


# ---------------------------------------------------------------- config

@pytest.mark.parametrize("kind", ["consensus", "linreg", "logreg", "spectra", "theory"])
def test_default_configs_validate_and_round_trip(kind):
    cfg = default_config(kind).validate()
    back = ExperimentConfig.from_json(cfg.to_json())
    assert back == cfg
    assert back.to_json() == cfg.to_json()


def test_config_file_round_trip(tmp_path):
    cfg = small_linreg(name="mine", repeat=2)
    cfg.save(tmp_path / "c.json")
    assert ExperimentConfig.load(tmp_path / "c.json") == cfg


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        ExperimentConfig.from_dict({"kind": "consensus", "bogus": 1})
    with pytest.raises(ConfigError, match="topology"):
        ExperimentConfig.from_dict({"topology": {"n": 4, "edges": 3}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json("{not json")


@pytest.mark.parametrize("change", [
    dict(kind="bogus"), dict(repeat=0), dict(topology=TopologyParams(n=1)),
    dict(engine=EngineConfig(B=2, T=20)), dict(engine=EngineConfig(alpha=-1, T=20)),
    dict(data=DataParams(flip_prob=2.0)),
])
def test_invalid_configs_fail_before_running(change, tmp_path):
    cfg = small_linreg(**change)
    with pytest.raises(ConfigError):
        run_experiment(cfg, tmp_path)
    assert not any(tmp_path.iterdir())


def test_theory_config_limits():
    cfg = default_config("theory")
    cfg.data = DataParams(d=64)
    with pytest.raises(ConfigError, match="d <= 16"):
        cfg.validate()


# ---------------------------------------------------------------- csv

def test_trace_csv_header_and_rows(tmp_path):
    cols = fake_trace(np.random.default_rng(0))
    path = export_csv(cols, tmp_path / "t.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "t,residual,consensus_error,optimality_error,tracking_error,comm_entries_cum,grad_evals_cum"
    assert lines[0] == TRACE_HEADER
    assert len(lines) == 7


def test_empty_trace_is_header_only(tmp_path):
    path = export_csv({c: np.array([]) for c in TRACE_COLUMNS}, tmp_path / "e.csv")
    assert path.read_text() == TRACE_HEADER + "\n"
    assert len(read_csv(path)["t"]) == 0


@given(arrays(float, (5, 6), elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_csv_round_trip_is_bit_exact(tmp_path_factory, values):
    cols = {c: values[:, j] for j, c in enumerate(TRACE_COLUMNS[1:])}
    cols["t"] = np.arange(5)
    path = export_csv(cols, tmp_path_factory.mktemp("rt") / "r.csv")
    back = read_csv(path)
    for c in TRACE_COLUMNS[1:]:
        assert back[c].tobytes() == np.asarray(cols[c], dtype=float).tobytes()


def test_reader_rejects_malformed_files(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(FormatError, match="header"):
        read_table(bad)
    bad.write_text(TRACE_HEADER + "\n1,2\n")
    with pytest.raises(FormatError, match="fields"):
        read_csv(bad)
    bad.write_text(TRACE_HEADER + "\n" + ",".join(["x"] * 7) + "\n")
    with pytest.raises(FormatError):
        read_csv(bad)


def test_aggregate_matches_arithmetic_mean(tmp_path):
    rng = np.random.default_rng(1)
    traces = [fake_trace(rng) for _ in range(4)]
    agg = aggregate(traces)
    for c in TRACE_COLUMNS[1:]:
        stack = np.stack([t[c] for t in traces])
        assert np.max(np.abs(agg[f"{c}_mean"] - stack.sum(0) / 4)) <= 1e-12
    path = export_aggregate(traces, tmp_path / "a.csv")
    assert tuple(path.read_text().splitlines()[0].split(",")) == AGG_COLUMNS
    other = fake_trace(rng)
    other["t"] = other["t"] + 1
    with pytest.raises(ValueError, match="grid"):
        aggregate([traces[0], other])


# ---------------------------------------------------------------- svg

def test_svg_decade_ticks_and_legend(tmp_path):
    t = np.arange(13)
    a = {"t": t, "residual": 10.0 ** -t}
    b = {"t": t, "residual": 10.0 ** (-t / 2)}
    path = export_svg([a, b], "t", "residual", tmp_path / "p.svg", ["fast", "slow"])
    text = path.read_text()
    assert text.startswith("<svg") or text.startswith("<?xml")
    ticks = [f">1e{k}<" for k in range(-12, 1)]
    assert all(tick in text for tick in ticks)
    legend = text[text.index('class="legend"'):]
    assert legend.count("<text") == 2
    assert text.count("<polyline") == 2


def test_svg_constant_series_is_horizontal(tmp_path):
    path = export_svg([{"t": np.arange(5), "residual": np.full(5, 0.5)}], "t", "residual",
                      tmp_path / "c.svg")
    text = path.read_text()
    pts = text.split('points="')[1].split('"')[0].split()
    ys = {p.split(",")[1] for p in pts}
    assert len(pts) == 5 and len(ys) == 1


def test_svg_errors(tmp_path):
    tr = {"t": np.arange(3), "residual": np.ones(3)}
    with pytest.raises(ValueError):
        export_svg([], "t", "residual", tmp_path / "x.svg")
    with pytest.raises(ValueError):
        export_svg([tr], "t", "nonsense", tmp_path / "x.svg")
    with pytest.raises(ValueError):
        export_svg([{"t": np.arange(0), "residual": np.ones(0)}], "t", "residual", tmp_path / "x.svg")
    with pytest.raises(ValueError):
        export_svg([tr], "t", "residual", tmp_path / "x.svg", labels=["a", "b"])


# ---------------------------------------------------------------- experiments

def test_consensus_experiment_outputs(tmp_path):
    res = run_experiment(small_consensus(repeat=2), tmp_path)
    root = tmp_path / "consensus"
    for name in ("config.json", "summary.json", "aggregate.csv", "replica_000.csv",
                 "replica_001.csv", "residual_vs_t.svg", "residual_vs_comm.svg"):
        assert (root / name).exists(), name
    rows = read_csv(root / "replica_000.csv")
    assert len(rows["t"]) == 61
    assert np.all(np.diff(rows["comm_entries_cum"]) >= 0)
    assert len(res.summary["replicas"]) == 2


def test_equal_seeds_give_identical_replicas(tmp_path):
    run_experiment(small_linreg(repeat=3, seed_stride=0), tmp_path)
    texts = [(tmp_path / "linreg" / f"replica_{r:03d}.csv").read_bytes() for r in range(3)]
    assert texts[0] == texts[1] == texts[2]
    agg = read_table(tmp_path / "linreg" / "aggregate.csv", "aggregate")
    # identical inputs: std is only the rounding of the mean
    assert np.all(agg["residual_std"] <= 1e-15 * agg["residual_mean"])


def test_reruns_are_bit_identical(tmp_path):
    run_experiment(small_linreg(), tmp_path / "a")
    run_experiment(small_linreg(), tmp_path / "b")
    for name in ("replica_000.csv", "aggregate.csv"):
        assert (tmp_path / "a/linreg" / name).read_bytes() == (tmp_path / "b/linreg" / name).read_bytes()


def test_optimizer_counters_are_nondecreasing(tmp_path):
    run_experiment(small_linreg(kind="logreg"), tmp_path)
    rows = read_csv(tmp_path / "logreg" / "replica_000.csv")
    assert np.all(np.diff(rows["comm_entries_cum"]) >= 0)
    assert np.all(np.diff(rows["grad_evals_cum"]) >= 0)
    assert (tmp_path / "logreg" / "residual_vs_grad.svg").exists()


def test_failing_stage_is_named(tmp_path):
    cfg = small_consensus(topology=TopologyParams(n=4, p=0.0, max_retries=3))
    with pytest.raises(StageError, match="topology stage failed") as info:
        run_experiment(cfg, tmp_path)
    assert info.value.stage == "topology"


def test_spectra_experiment_writes_table_and_summary(tmp_path):
    cfg = ExperimentConfig(kind="spectra", topology=TopologyParams(n=4, p=0.9, drop=1), repeat=2,
                           spectra=SpectraParams(d=3, qs=[1.0, 0.5], windows=4))
    res = run_experiment(cfg, tmp_path)
    table = read_table(tmp_path / "spectra" / "spectra.csv", "spectra")
    assert len(table["seed"]) == 2 * 2 * 4 * 3
    doc = json.loads((tmp_path / "spectra" / "spectra.json").read_text())
    assert [row["q"] for row in doc["by_q"]] == [1.0, 0.5]
    assert doc["by_q"][0]["gap_positive_everywhere"]
    assert res.summary["by_q"][0]["sigma_max"] < 1


def test_theory_experiment_report(tmp_path):
    cfg = default_config("theory")
    cfg.repeat = 4
    cfg.theory = TheoryParams(calibration_windows=10, blocks=40, epoch_blocks=20)
    res = run_experiment(cfg, tmp_path)
    doc = json.loads((tmp_path / "theory" / "theory.json").read_text())
    for key in ("sigma", "alpha", "T", "lambda", "contraction_ok", "lti_bound_worst_ratio"):
        assert key in doc
    assert doc["sigma"] < 1 and doc["contraction_ok"]
    u = read_table(tmp_path / "theory" / "u_sequences.csv", "u_sequence")
    assert len(u["block"]) == 41
    assert res.summary["ensemble_size"] == 4


# ---------------------------------------------------------------- cli

def test_cli_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert cli.main(["spectra", "--config", str(missing)]) == 1
    err = capsys.readouterr().err.strip()
    assert str(missing) in err and "\n" not in err


def test_cli_unknown_flag_prints_usage(capsys):
    assert cli.main(["consensus", "--frobnicate"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_cli_kind_mismatch_is_config_error(tmp_path, capsys):
    path = tmp_path / "c.json"
    small_consensus().save(path)
    assert cli.main(["optimize", "--config", str(path)]) == 1


def test_cli_spectra_run_and_env_override(tmp_path, monkeypatch, capsys):
    cfg = ExperimentConfig(kind="spectra", topology=TopologyParams(n=4), out=str(tmp_path / "cfg"),
                           spectra=SpectraParams(d=2, windows=3))
    path = tmp_path / "c.json"
    cfg.save(path)
    monkeypatch.setenv("DICSOPT_OUT", str(tmp_path / "env"))
    assert cli.main(["spectra", "--config", str(path)]) == 0
    assert (tmp_path / "env" / "spectra" / "spectra.csv").exists()
    assert (tmp_path / "env" / "spectra" / "spectra.json").exists()
    assert cli.main(["spectra", "--config", str(path), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "spectra" / "spectra.csv").exists()
    assert not (tmp_path / "cfg").exists()


def test_cli_runtime_failure_exit_code(tmp_path, capsys):
    cfg = small_consensus(topology=TopologyParams(n=4, p=0.0, max_retries=2), out=str(tmp_path))
    path = tmp_path / "c.json"
    cfg.save(path)
    assert cli.main(["consensus", "--config", str(path)]) == 2
    assert "topology stage failed" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dicsopt", "theory", "--config", str(tmp_path / "x.json")],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert "x.json" in proc.stderr
