import json

import numpy as np
import pytest
from scipy import stats

from staf.bench import (
    ExperimentSpec, ResultTable, emit, gradient_image, load_table, read_png, run_cdp_image,
    run_convergence_trace, run_eigengap_sweep, run_init_race, run_noise, run_success_rate,
)
from staf.cli import main


# --- spec and tables ------------------------------------------------------------

def test_spec_round_trip(tmp_path):
    spec = ExperimentSpec("noise", grid=[0.05, 0.1], n=40, trials=3, mu=0.02, seed=9,
                          step_rule="constant", init_fraction=0.2)
    spec.save(tmp_path / "s.json")
    assert ExperimentSpec.load(tmp_path / "s.json") == spec


def test_spec_validation():
    with pytest.raises(ValueError):
        ExperimentSpec("phase-transition")
    with pytest.raises(ValueError):
        ExperimentSpec("trace", trials=0)
    with pytest.raises(ValueError):
        ExperimentSpec.from_dict({"kind": "trace", "bogus": 1})
    assert ExperimentSpec("success-rate").grid[0] == 1.0


def test_empty_table_is_header_only():
    assert emit(ResultTable(), "csv") == "grid_point,statistic,value,spread,trials\n"
    with pytest.raises(ValueError):
        emit(ResultTable(), "xml")


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_table_round_trip(tmp_path, fmt):
    t = ResultTable(spec=ExperimentSpec("trace", n=10))
    t.add(0.1, "a", 1 / 3, 2 / 7, 5)
    t.add(2, "b", 1e-300, float("nan"), 1)
    t.add(3, "c", float("inf"), 0.0, 1)
    path = tmp_path / f"t.{fmt}"
    emit(t, fmt, path)
    back = load_table(path)
    assert len(back.rows) == 3
    for r, s in zip(t.rows, back.rows):
        assert (r.grid_point, r.statistic, r.trials) == (s.grid_point, s.statistic, s.trials)
        assert r.value == s.value
        assert r.spread == s.spread or (np.isnan(r.spread) and np.isnan(s.spread))
    if fmt == "json":
        doc = json.loads(path.read_text())
        assert doc["schema_version"] == 1
        assert back.spec == t.spec


def test_emit_reports_path_on_failure(tmp_path):
    bad = tmp_path / "missing" / "t.csv"
    with pytest.raises(OSError, match="missing"):
        emit(ResultTable(), "csv", bad)


# --- experiments ------------------------------------------------------------------

def test_success_rate_examples():
    t = run_success_rate(ExperimentSpec("success-rate", grid=[1.0, 7.0], n=100, trials=20, seed=3))
    assert t.get(7.0, "success_rate").value == 1.0
    assert t.get(1.0, "success_rate").value <= 0.05
    assert "kaczmarz" in t.extra["resolved_config"]


def test_success_rate_is_deterministic_across_workers():
    spec = ExperimentSpec("success-rate", grid=[2.0, 3.0], n=40, trials=6, seed=5, passes=200)
    a = emit(run_success_rate(spec), "csv")
    spec.workers = 3
    assert emit(run_success_rate(spec), "csv") == a


def test_divergence_counts_as_failure():
    spec = ExperimentSpec("success-rate", grid=[4.0], n=30, trials=3, step_rule="constant",
                          mu=5.0, passes=50)
    t = run_success_rate(spec)
    assert t.get(4.0, "success_rate").value == 0.0


def test_trace_from_truth_is_flat_zero():
    t = run_convergence_trace(ExperimentSpec("trace", grid=[5.0], n=30, trials=3, passes=10,
                                             init_solver="truth"))
    for rule in ("constant", "kaczmarz"):
        _, med = t.series(f"{rule}@m/n=5.median")
        assert med.shape == (11,) and np.all(med <= 1e-14)


def test_trace_noiseless_shape():
    t = run_convergence_trace(ExperimentSpec("trace", grid=[5.0], n=100, trials=20, passes=150, seed=1))
    for rule in ("constant", "kaczmarz"):
        _, med = t.series(f"{rule}@m/n=5.median")
        seg = med[5:]
        seg = seg[: int(np.argmax(seg < 1e-13))] if np.any(seg < 1e-13) else seg
        assert len(seg) > 3 and np.all(np.diff(np.log10(seg)) < 0)
        q25 = t.series(f"{rule}@m/n=5.q25")[1]
        q75 = t.series(f"{rule}@m/n=5.q75")[1]
        assert np.all(q25 <= med) and np.all(med <= q75)
    pk = t.get(150, "kaczmarz@m/n=5.passes_to_1e-5_median").value
    pc = t.get(150, "constant@m/n=5.passes_to_1e-5_median").value
    assert pk < pc


def test_eigengap_sweep_trend():
    grid = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
    t = run_eigengap_sweep(ExperimentSpec("eigengap", grid=grid, n=100, trials=8, seed=2))
    _, deltas = t.series("delta")
    assert np.all((0 <= deltas) & (deltas <= 1))
    assert stats.spearmanr(grid, deltas).statistic > 0


def test_init_race_curves_and_determinism():
    spec = ExperimentSpec("init-race", grid=[2.0], n=200, trials=3, init_passes=200,
                          init_fraction=5 / 6, seed=4)
    t = run_init_race(spec)
    assert emit(run_init_race(spec), "csv") == emit(t, "csv")
    for solver in ("power", "vr_opi"):
        _, med = t.series(f"{solver}@m/n=2.log10_angle_err_median")
        below = np.nonzero(med < -12)[0]
        above_floor = med[: below[0] if below.size else len(med)]
        assert len(above_floor) > 10 and np.all(np.diff(above_floor) <= 1e-9)
    assert t.get(2.0, "delta").value <= 0.05
    assert (t.get(2.0, "vr_opi.passes_to_1e-6_median").value
            < t.get(2.0, "power.passes_to_1e-6_median").value)


def test_noise_zero_sigma_is_noiseless_run():
    kw = dict(n=30, trials=3, passes=20, seed=8)
    a = run_noise(ExperimentSpec("noise", grid=[0.0], m_over_n=5.0, **kw))
    b = run_convergence_trace(ExperimentSpec("trace", grid=[5.0], **kw))
    np.testing.assert_array_equal(a.series("kaczmarz@sigma=0.median")[1],
                                  b.series("kaczmarz@m/n=5.median")[1])


def test_noise_plateau_and_sensitivity():
    t = run_noise(ExperimentSpec("noise", grid=[0.1], m_over_n=5.0, n=100, trials=10,
                                 passes=300, seed=6))
    last = 300
    fk = t.get(last, "kaczmarz@sigma=0.1.final_median").value
    fc = t.get(last, "constant@sigma=0.1.final_median").value
    assert fk <= 0.2 and fc <= 0.2
    assert fk >= fc
    for rule in ("constant", "kaczmarz"):
        assert t.get(last, f"{rule}@sigma=0.1.plateau_change_median").value < 0.1


def test_cdp_image_recovery_and_png(tmp_path):
    out = tmp_path / "rec.png"
    spec = ExperimentSpec("cdp-image", grid=[8], trials=1, passes=300, image_out=str(out), seed=1)
    t = run_cdp_image(spec)
    assert t.get(8, "all_channels.success_rate").value == 1.0
    first = out.read_bytes()
    np.testing.assert_array_equal(read_png(out), gradient_image(64))
    run_cdp_image(spec)
    assert out.read_bytes() == first


def test_cdp_single_mask_fails():
    t = run_cdp_image(ExperimentSpec("cdp-image", grid=[1], trials=1, passes=100, image_size=16))
    for c in range(3):
        assert t.get(1, f"channel{c}.rel_err_median").value > 0.1


# --- command line -----------------------------------------------------------------

def test_cli_writes_csv(tmp_path):
    out = tmp_path / "sr.csv"
    rc = main(["success-rate", "--n", "30", "--m-over-n", "4", "--trials", "2", "--seed", "1",
               "--passes", "100", "--out", str(out)])
    assert rc == 0
    assert out.read_text().startswith("grid_point,statistic,value,spread,trials\n")


def test_cli_json_stdout_and_config(tmp_path, capsys):
    cfg = tmp_path / "spec.json"
    rc = main(["eigengap", "--n", "20", "--m-over-n", "2", "3", "--trials", "2",
               "--format", "json", "--save-config", str(cfg)])
    assert rc == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["spec"]["grid"] == [2.0, 3.0]
    assert ExperimentSpec.load(cfg).n == 20
    assert main(["eigengap", "--config", str(cfg), "--trials", "1"]) == 0
    assert main(["trace", "--config", str(cfg)]) == 1


def test_cli_errors_are_nonzero(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["trace", "--step-rule", "newton"])
    assert exc.value.code != 0
    assert main(["trace", "--trials", "0"]) == 1
    assert main(["trace", "--n", "10", "--trials", "1", "--passes", "2",
                 "--out", str(tmp_path / "no" / "x.csv")]) == 1
    assert main(["cdp-image", "--image", str(tmp_path / "missing.png")]) == 1
