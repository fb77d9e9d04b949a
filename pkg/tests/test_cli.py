from __future__ import annotations

import json

import numpy as np
import pytest

from fdbd.cli import EXIT_DATA, EXIT_FAILED, EXIT_OK, EXIT_USAGE, main
from fdbd.geometry import LinearHead
from fdbd.scoring import ScoreTable, fdbd_score, load_stats, msp_score
from fdbd.tensorio import write_array


@pytest.fixture
def toy(tmp_path):
    rng = np.random.default_rng(0)
    C, P = 3, 4
    W, b = rng.normal(size=(C, P)), rng.normal(size=C)
    arrays = {
        "head_weights": W,
        "head_bias": b,
        "id_features": rng.normal(size=(3, P)),
        "train_features": rng.normal(size=(60, P)),
        "train_labels": (np.arange(60) % C).astype(float),
        "ood_a": 3 * rng.normal(size=(4, P)),
        "ood_b": 3 * rng.normal(size=(5, P)),
    }
    for name, arr in arrays.items():
        write_array(tmp_path / f"{name}.npy", arr)
    raw = {k: f"{k}.npy" for k in arrays if not k.startswith("ood_")}
    raw["ood_features"] = {"a": "ood_a.npy", "b": "ood_b.npy"}
    (tmp_path / "manifest.json").write_text(json.dumps(raw))
    no_labels = dict(raw)
    no_labels.pop("train_labels")
    (tmp_path / "nolabels.json").write_text(json.dumps(no_labels))
    return tmp_path, arrays


def test_fit_bundle(toy):
    d, arrays = toy
    assert main(["fit", "--manifest", str(d / "manifest.json"), "--out", str(d / "s1")]) == EXIT_OK
    stats = load_stats(d / "s1")
    np.testing.assert_allclose(stats.mu_train, arrays["train_features"].mean(axis=0))
    assert main(["fit", "--manifest", str(d / "manifest.json"), "--out", str(d / "s2")]) == EXIT_OK
    for f in (d / "s1").iterdir():
        assert f.read_bytes() == (d / "s2" / f.name).read_bytes()


def test_fit_missing_labels(toy, capsys):
    d, _ = toy
    assert main(["fit", "--manifest", str(d / "nolabels.json"), "--out", str(d / "s")]) == EXIT_DATA
    assert "MissingRole" in capsys.readouterr().err


def test_score_fdbd_msp(toy):
    d, arrays = toy
    main(["fit", "--manifest", str(d / "manifest.json"), "--out", str(d / "stats")])
    rc = main(
        ["score", "--manifest", str(d / "manifest.json"), "--stats", str(d / "stats"),
         "--methods", "fdbd,msp", "--out", str(d / "scores")]
    )
    assert rc == EXIT_OK
    t = ScoreTable.read_csv(d / "scores" / "scores_id.csv")
    assert t.methods == ["fdbd", "msp"]
    head = LinearHead(arrays["head_weights"], arrays["head_bias"])
    mu = arrays["train_features"].mean(axis=0)
    Z = arrays["id_features"]
    np.testing.assert_allclose(t.columns["fdbd"], [fdbd_score(head, mu, z) for z in Z], rtol=1e-8)
    np.testing.assert_allclose(t.columns["msp"], [msp_score(head, z) for z in Z], rtol=1e-8)
    assert {p.name for p in (d / "scores").iterdir()} == {
        "scores_id.csv", "scores_a.csv", "scores_b.csv", "flagged.json",
    }


def test_score_knn_without_stats(toy, capsys):
    d, _ = toy
    rc = main(["score", "--manifest", str(d / "manifest.json"), "--methods", "knn", "--out", str(d / "o")])
    assert rc == EXIT_USAGE
    err = capsys.readouterr().err
    assert "knn" in err and "fdbd fit" in err


def test_score_records_shaping(toy):
    d, _ = toy
    rc = main(
        ["score", "--manifest", str(d / "manifest.json"), "--methods", "msp",
         "--shaping", "ash_s:90", "--out", str(d / "o")]
    )
    assert rc == EXIT_OK
    assert "# shaping=ash_s:90" in (d / "o" / "scores_id.csv").read_text().splitlines()


def write_scores(path, **cols):
    ScoreTable({k: np.asarray(v, float) for k, v in cols.items()}).write_csv(path)


def read_eval(path):
    lines = path.read_text().splitlines()
    keys = lines[0].split(",")
    return [dict(zip(keys, ln.split(","))) for ln in lines[1:]]


def test_eval_perfect_and_average(tmp_path):
    write_scores(tmp_path / "id.csv", fdbd=[1, 2, 3, 4], msp=[4, 3, 2, 1])
    write_scores(tmp_path / "o1.csv", fdbd=[0, 0.5], msp=[0, 0.5])
    write_scores(tmp_path / "o2.csv", fdbd=[2.5, 0.5], msp=[9, 9])
    rc = main(["eval", "--id", str(tmp_path / "id.csv"), "--ood", f"x={tmp_path / 'o1.csv'}",
               "--ood", f"y={tmp_path / 'o2.csv'}", "--out", str(tmp_path / "m.csv")])
    assert rc == EXIT_OK
    rows = read_eval(tmp_path / "m.csv")
    by = {(r["ood_set"], r["method"]): r for r in rows}
    assert float(by["x", "fdbd"]["auroc"]) == 1.0 and float(by["x", "fdbd"]["fpr95"]) == 0.0
    for m in ("fdbd", "msp"):
        for key in ("auroc", "fpr95"):
            mean = (float(by["x", m][key]) + float(by["y", m][key])) / 2
            assert float(by["Average", m][key]) == pytest.approx(mean, abs=1e-9)


def test_eval_column_mismatch(tmp_path, capsys):
    write_scores(tmp_path / "id.csv", fdbd=[1, 2])
    write_scores(tmp_path / "o.csv", msp=[0, 1])
    assert main(["eval", "--id", str(tmp_path / "id.csv"), "--ood", str(tmp_path / "o.csv")]) == EXIT_DATA
    assert "ColumnMismatch" in capsys.readouterr().err


def test_oracle(tmp_path, capsys):
    args = ["oracle", "--trials", "5", "--classes", "4", "--dim", "5", "--seed", "2"]
    assert main(args + ["--out", str(tmp_path / "a.json")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b.json")]) == EXIT_OK
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert "max lower-bound violation" in capsys.readouterr().out
    assert main(["oracle", "--trials", "5", "--classes", "2", "--dim", "3"]) == EXIT_OK
    assert main(["oracle", "--trials", "0"]) == EXIT_USAGE


def test_oracle_violation_exits_one(monkeypatch):
    import fdbd.cli as cli
    from fdbd.geometry import BoundCheckReport

    bad = BoundCheckReport(1, 3, 2, 1, 1, 0, 0.5, 0.0, 1e-8, 1e-6)
    monkeypatch.setattr(cli, "verify_distance_bound", lambda *a, **k: bad)
    assert main(["oracle", "--trials", "1"]) == EXIT_FAILED


def test_synth_creates_outputs(tmp_path):
    out = tmp_path / "nested" / "synth"
    rc = main(["synth", "--samples", "5000", "--region-samples", "20000", "--exp-samples", "1000",
               "--out", str(out)])
    assert rc == EXIT_OK
    names = {p.name for p in out.iterdir()}
    assert {"radius_ordering.json", "dense_region.json", "experiments.json"} <= names
    assert "buckets_radial_shift.csv" in names and "scores_isotropic.csv" in names
    prop2 = json.loads((out / "dense_region.json").read_text())["reports"]
    assert [r["r"] for r in prop2] == [0.6, 0.8, 1.0] and all(r["passed"] for r in prop2)


def test_synth_bad_grid(tmp_path, capsys):
    rc = main(["synth", "--sigma", "0.1", "--out", str(tmp_path / "s")])
    assert rc == EXIT_DATA
    assert "0.1 < r < 0.5" in capsys.readouterr().err
    assert not (tmp_path / "s").exists()


def test_bench_empty_sweep(tmp_path):
    assert main(["bench", "--sweep-p", "", "--out", str(tmp_path / "b.json")]) == EXIT_USAGE


def test_bench_small(tmp_path):
    rc = main(["bench", "--methods", "fdbd,knn", "--sweep-p", "32,64", "--sweep-c", "5,10",
               "--sweep-n", "100,2000", "--classes", "5", "--dim", "32", "--samples", "30",
               "--out", str(tmp_path / "b.json")])
    rep = json.loads((tmp_path / "b.json").read_text())
    assert {(r["method"], r["axis"]) for r in rep["reports"]} == {("fdbd", "P"), ("fdbd", "C"), ("knn", "N")}
    assert "super_constant_growth" in rep["flags"]["knn:N"]
    assert rc in (EXIT_OK, EXIT_FAILED)  # timing-dependent on a 2-point toy sweep


def test_hist(toy):
    d, arrays = toy
    assert main(["hist", "--manifest", str(d / "manifest.json"), "--out", str(d / "h")]) == EXIT_OK
    from fdbd.tensorio import read_array

    assert read_array(d / "h" / "rank_dists_id.npy").shape == (3, 2)


def test_help_lists_every_command(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    for cmd in ("fit", "score", "eval", "oracle", "synth", "bench", "hist"):
        assert cmd in out
