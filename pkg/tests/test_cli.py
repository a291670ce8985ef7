import json
import shutil

import numpy as np
import pytest

from pstrata.artifacts import file_sha256, read_table
from pstrata.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USER, EXIT_WARN, main

FIT = ["--chains", "2", "--iters", "200", "--warmup", "100"]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    sim, fit, est = root / "sim", root / "fit", root / "est"
    assert main(["simulate", "--preset", "sim1_er", "--n", "400", "--seed", "7",
                 "--out", str(sim)]) == EXIT_OK
    code = main(["fit", "--config", str(sim / "config.yaml"), "--out", str(fit), *FIT])
    assert code in (EXIT_OK, EXIT_WARN)
    assert main(["estimate", "--fit", str(fit), "--out", str(est), "--t-max", "4",
                 "--points", "101"]) == EXIT_OK
    return root


def test_simulate_files(run):
    sim = run / "sim"
    assert {p.name for p in sim.iterdir()} == {"data.csv", "truth.csv", "config.yaml"}
    text = (sim / "data.csv").read_text()
    assert "# config_hash:" in text and "# seed: 7" in text


def test_simulate_is_byte_reproducible(run, tmp_path):
    copy = tmp_path / "before"
    shutil.copytree(run / "sim", copy)
    assert main(["simulate", "--preset", "sim1_er", "--n", "400", "--seed", "7",
                 "--out", str(run / "sim")]) == EXIT_OK
    for name in ("data.csv", "truth.csv", "config.yaml"):
        assert file_sha256(copy / name) == file_sha256(run / "sim" / name)


def test_unknown_preset(tmp_path, capsys):
    assert main(["simulate", "--preset", "nope", "--out", str(tmp_path)]) == EXIT_USER
    err = capsys.readouterr().err
    assert "sim1_er" in err and "sim3_aft_noer" in err


def test_missing_data_file(tmp_path, capsys):
    missing = tmp_path / "absent.csv"
    assert main(["fit", "--data", str(missing), "--out", str(tmp_path / "f")]) == EXIT_USER
    assert str(missing) in capsys.readouterr().err


def test_bad_flag_combination(tmp_path):
    code = main(["fit", "--data", "x.csv", "--iters", "10", "--warmup", "20",
                 "--out", str(tmp_path)])
    assert code == EXIT_USER


def test_fit_outputs(run):
    fit = run / "fit"
    names = {p.name for p in fit.iterdir()}
    assert {"draws.csv", "draws.bin", "diagnostics.json", "traces.csv",
            "config.yaml"} <= names
    diag = json.loads((fit / "diagnostics.json").read_text())
    assert diag["chains"] == 2 and diag["draws_per_chain"] == 100
    assert "max_rhat" in diag["diagnostics"]
    _, header, rows = read_table(fit / "traces.csv")
    assert header[:3] == ["chain", "iteration", "phase"] and len(rows) == 400


def test_fit_rerun_is_byte_identical(run, tmp_path):
    before = file_sha256(run / "fit" / "draws.bin")
    main(["fit", "--config", str(run / "sim" / "config.yaml"), "--out", str(run / "fit"), *FIT])
    assert file_sha256(run / "fit" / "draws.bin") == before


def test_forced_step_size_warns(run, tmp_path):
    out = tmp_path / "div"
    code = main(["fit", "--config", str(run / "sim" / "config.yaml"), "--out", str(out),
                 "--chains", "1", "--iters", "60", "--warmup", "30", "--step-size", "2.0"])
    assert code == EXIT_WARN
    diag = json.loads((out / "diagnostics.json").read_text())
    assert sum(diag["divergence_count"]) > 0
    assert any("divergent" in w for w in diag["warnings"])


def test_estimate_outputs(run):
    est = run / "est"
    for s in ("never_taker", "complier", "always_taker"):
        for z in (0, 1):
            _, header, rows = read_table(est / f"survival_{s}_z{z}.csv")
            assert len(rows) == 101 and float(rows[-1][2]) == 4.0
    for s in ("never_taker", "always_taker"):
        _, _, rows = read_table(est / f"spce_{s}.csv")
        assert all(float(r[3]) == float(r[4]) == float(r[5]) == 0.0 for r in rows)
    assert (est / "itt_spce.csv").is_file() and (est / "km.csv").is_file()
    summary = json.loads((est / "summary.json").read_text())
    assert abs(sum(summary["strata_proportions"].values()) - 1) < 1e-12


def test_closed_and_trapezoid_race_agree(run, tmp_path):
    out = tmp_path / "trap"
    assert main(["estimate", "--fit", str(run / "fit"), "--out", str(out), "--t-max", "4",
                 "--points", "101", "--integration", "trapezoid", "--k", "10000"]) == EXIT_OK
    for s in ("never_taker", "complier", "always_taker"):
        _, _, a = read_table(run / "est" / f"race_{s}.csv")
        _, _, b = read_table(out / f"race_{s}.csv")
        diff = np.abs(np.array([[float(v) for v in r[3:]] for r in a])
                      - np.array([[float(v) for v in r[3:]] for r in b]))
        assert diff.max() < 1e-4


def test_estimate_layout_mismatch(run, tmp_path, capsys):
    code = main(["estimate", "--fit", str(run / "fit"), "--no-er", "--out", str(tmp_path)])
    assert code == EXIT_USER
    assert "layout" in capsys.readouterr().err


def test_estimate_missing_fit(tmp_path):
    assert main(["estimate", "--fit", str(tmp_path / "nofit")]) == EXIT_USER


def test_report(run, tmp_path):
    out = tmp_path / "rep"
    assert main(["report", "--estimates", str(run / "est"), "--out", str(out),
                 "--truth", str(run / "sim" / "config.yaml")]) == EXIT_OK
    names = sorted(p.name for p in out.iterdir())
    panels = [n for n in names if n.startswith("panel_")]
    assert len(panels) == 6
    assert {"panels_long.csv", "summary.csv", "summary.txt", "survival_panels.png",
            "effects.png", "km.png"} <= set(names)
    _, header, rows = read_table(out / "panel_complier_z1.csv")
    assert header[-1] == "truth" and len(rows) == 101
    # rerun: same file set, same bytes
    before = {n: file_sha256(out / n) for n in names}
    assert main(["report", "--estimates", str(run / "est"), "--out", str(out),
                 "--truth", str(run / "sim" / "config.yaml")]) == EXIT_OK
    assert sorted(p.name for p in out.iterdir()) == names
    assert {n: file_sha256(out / n) for n in names} == before


def test_report_without_figures(run, tmp_path):
    out = tmp_path / "rep"
    assert main(["report", "--estimates", str(run / "est"), "--out", str(out),
                 "--no-figures"]) == EXIT_OK
    assert not list(out.glob("*.png"))


def test_report_empty_dir(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["report", "--estimates", str(tmp_path / "empty")]) == EXIT_USER


def test_verify(run, tmp_path, capsys):
    dirs = [str(run / d) for d in ("sim", "fit", "est")]
    assert main(["verify", *dirs]) == EXIT_OK
    assert "consistent" in capsys.readouterr().out
    bad = tmp_path / "est"
    shutil.copytree(run / "est", bad)
    path = bad / "strata.csv"
    path.write_text(path.read_text().replace("# config_hash: ", "# config_hash: 0", 1))
    assert main(["verify", str(bad)]) == EXIT_USER
    assert "FAIL" in capsys.readouterr().out


def test_numeric_failure_exit(monkeypatch, run, tmp_path):
    from pstrata import pipeline
    from pstrata.sampler import SamplerError

    def boom(*args, **kwargs):
        raise SamplerError("no finite start")

    monkeypatch.setattr(pipeline, "run_chains", boom)
    code = main(["fit", "--config", str(run / "sim" / "config.yaml"),
                 "--out", str(tmp_path), *FIT])
    assert code == EXIT_NUMERIC


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "pstrata" in capsys.readouterr().out
