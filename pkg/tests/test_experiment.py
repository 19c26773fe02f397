import csv
import json

import numpy as np
import pytest

from firedispatch.experiment import (ExperimentSpec, graph_seeds, make_instance, row_columns,
                                     run_experiment, run_graph)


def _read(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_single_graph_cf_only(tmp_path):
    spec = ExperimentSpec(d=4, I=3, graph_count=1, policies=["CF"])
    rows, agg = run_experiment(spec, tmp_path)
    assert len(rows) == 1
    assert not any("delta" in c for c in row_columns(spec))
    csv_rows = _read(tmp_path / "rows.csv")
    assert len(csv_rows) == 1
    assert all(v for v in csv_rows[0].values())
    assert [a["label"] for a in agg] == ["min", "mean", "max"]


def test_gap_columns_need_opt(tmp_path):
    spec = ExperimentSpec(d=4, I=3, graph_count=1, policies=["CF", "OSIA"])
    run_experiment(spec, tmp_path)
    # OSIA gaps need OPT; with OPT missing they are not columns at all
    assert not any("gap" in c for c in _read(tmp_path / "rows.csv")[0])


@pytest.fixture(scope="module")
def ten_graphs(tmp_path_factory):
    out = tmp_path_factory.mktemp("ten")
    spec = ExperimentSpec(d=6, I=4, graph_count=10, seed=5)
    rows, agg = run_experiment(spec, out)
    return spec, rows, agg, out


def test_summary_layout(ten_graphs):
    spec, rows, _, out = ten_graphs
    summary = _read(out / "summary.csv")
    labels = [r["label"] for r in summary]
    assert labels == ["graph"] * 10 + ["min", "mean", "max"]
    assert [int(r["graph"]) for r in summary[:10]] == list(range(10))
    assert summary[-1]["graph"] == "10"
    assert len(_read(out / "rows.csv")) == 10


def test_summary_ordering_and_row_invariants(ten_graphs):
    spec, rows, agg, _ = ten_graphs
    lo, mean, hi = agg
    for col in row_columns(spec):
        if col in ("graph", "seed", "rho"):
            continue
        assert lo[col] <= mean[col] + 1e-12 and mean[col] <= hi[col] + 1e-12
    for r in rows:
        for tag in ("uc", "c"):
            assert r[f"{tag}_delta_opt"] >= -1e-9 and r[f"{tag}_delta_osi"] >= -1e-9
            assert r[f"{tag}_gap_osi"] >= -1e-9 and r[f"{tag}_gap_osia"] >= -1e-9
            assert r[f"{tag}_g_opt"] <= r[f"{tag}_g_cf"] + 1e-12
        assert r["neglect_penalty"] >= -1e-9
        assert r["c_g_cf"] >= r["uc_g_cf"]


def test_floats_have_twelve_digits(ten_graphs):
    _, rows, _, out = ten_graphs
    cell = _read(out / "rows.csv")[0]["uc_g_cf"]
    assert float(cell) == pytest.approx(rows[0]["uc_g_cf"], rel=1e-11)
    assert len(cell.replace(".", "").replace("-", "").lstrip("0").split("e")[0]) <= 12


def test_rows_rerunnable_in_isolation(ten_graphs):
    spec, rows, _, _ = ten_graphs
    seeds = graph_seeds(spec.seed, spec.graph_count)
    assert [r["seed"] for r in rows] == seeds
    alone = run_graph(spec, 7, seeds[7], 0.1)
    for key in ("uc_g_cf", "c_g_opt", "uc_g_osia", "neglect_penalty"):
        assert alone[key] == rows[7][key]


def test_deterministic_and_parallel_order(tmp_path):
    spec = ExperimentSpec(d=4, I=3, graph_count=3, rho=[0.1, 0.3], seed=2)
    serial, _ = run_experiment(spec, tmp_path / "a")
    spec.workers = 2
    parallel, _ = run_experiment(spec, tmp_path / "b")
    for a, b in zip(serial, parallel, strict=True):
        assert {k: v for k, v in a.items() if "_time_" not in k} == {k: v for k, v in b.items() if "_time_" not in k}
    again, _ = run_experiment(spec, tmp_path / "c")
    assert [r["uc_g_osia"] for r in again] == [r["uc_g_osia"] for r in serial]
    assert [(r["rho"], r["graph"]) for r in serial] == [(0.1, 0), (0.1, 1), (0.1, 2), (0.3, 0), (0.3, 1), (0.3, 2)]


def test_state_cap_gates_exact_policies(tmp_path):
    spec = ExperimentSpec(d=4, I=5, graph_count=1, state_cap=16)
    rows, _ = run_experiment(spec, tmp_path)
    r = rows[0]
    assert r["exact"] == 0 and "uc_g_opt" not in r and "uc_g_osi" not in r
    assert "uc_g_osia" in r
    cell = _read(tmp_path / "rows.csv")[0]
    assert cell["uc_delta_opt"] == "" and cell["uc_gap_osia"] == "" and cell["neglect_penalty"] == ""


def test_make_instance_reproducible():
    a = make_instance(5, 3, 0.1, 0.6, False, 77)
    b = make_instance(5, 3, 0.1, 0.6, False, 77)
    assert a == b
    assert make_instance(5, 3, 0.1, 0.6, False, 78).graph != a.graph


@pytest.mark.parametrize("bad", [dict(graph_count=0), dict(policies=["OPT"]), dict(policies=["CF", "XYZ"]),
                                 dict(rho=[]), dict(gamma=0.0), dict(I=40), dict(correlated=[]),
                                 dict(osia_epsilon=0.0)])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        ExperimentSpec(**bad)


def test_spec_json_roundtrip(tmp_path):
    spec = ExperimentSpec(rho=[0.02, 0.4], policies=["cf", "opt"], seed=9)
    spec.to_json(tmp_path / "s.json")
    assert ExperimentSpec.from_json(tmp_path / "s.json") == spec
    data = json.loads((tmp_path / "s.json").read_text())
    data["replications"] = 3
    (tmp_path / "s.json").write_text(json.dumps(data))
    with pytest.raises(ValueError, match="replications"):
        ExperimentSpec.from_json(tmp_path / "s.json")


def test_graph_seeds():
    s = graph_seeds(0, 5)
    assert s == graph_seeds(0, 5) and s[:3] == graph_seeds(0, 3)
    assert len(set(s)) == 5
    assert np.all(np.array(s, dtype=object) < 2 ** 64)
