import csv
import math
from pathlib import Path

import numpy as np
import pytest

from errquant import cli
from errquant.conformal import BinningScheme, QuantileTable, Records, conformal_quantile, coverage
from errquant.core import DivergenceError
from errquant.imageio import read_grid, write_cif
from errquant.synthetic import shapes_image

FAST = ["--set", "iterations=300", "--set", "tau=1e-4", "--set", "bins=4", "--set", "crop=0"]


def rows(path):
    lines = Path(path).read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    return list(csv.reader(lines[1:]))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    rng = np.random.Generator(np.random.PCG64(3))
    clean = root / "clean"
    clean.mkdir()
    for i in range(4):
        write_cif(clean / f"img{i}.cif", shapes_image((12, 12), rng))
    noisy = root / "noisy"
    assert cli.main(["corrupt", *map(str, sorted(clean.iterdir())), "--out-dir", str(noisy), *FAST]) == 0
    return noisy


def gts(d):
    return [str(p) for p in sorted(Path(d).glob("*_gt.cif"))]


def obs(d):
    return [str(p) for p in sorted(Path(d).glob("*_z.cif"))]


def calibrate(dataset, out, *extra):
    args = ["calibrate", "--truth", *gts(dataset), "--observed", *obs(dataset), "--out-dir", str(out), *FAST, *extra]
    assert cli.main(args) == 0


def test_corrupt_zero_sigma(tmp_path):
    x = np.linspace(0, 1, 30).reshape(5, 6)
    write_cif(tmp_path / "a.cif", x)
    assert cli.main(["corrupt", str(tmp_path / "a.cif"), "--sigma", "0", "--out-dir", str(tmp_path / "o")]) == 0
    np.testing.assert_array_equal(read_grid(tmp_path / "o" / "a_z.cif"), x)
    np.testing.assert_array_equal(read_grid(tmp_path / "o" / "a_gt.cif"), x)


def test_corrupt_noise_level(tmp_path):
    write_cif(tmp_path / "flat.cif", np.full((1000, 1000), 0.5))
    assert cli.main(["corrupt", str(tmp_path / "flat.cif"), "--out-dir", str(tmp_path), "--set", "crop=0"]) == 0
    z = read_grid(tmp_path / "flat_z.cif")
    assert z.std() == pytest.approx(15 / 255, rel=0.01)


def test_corrupt_crops(tmp_path):
    write_cif(tmp_path / "big.cif", np.zeros((100, 90)))
    assert cli.main(["corrupt", str(tmp_path / "big.cif"), "--out-dir", str(tmp_path)]) == 0
    assert read_grid(tmp_path / "big_z.cif").shape == (64, 64)


def test_records_and_single_bin(dataset, tmp_path):
    calibrate(dataset, tmp_path / "one", "--set", "bins=1")
    recs = rows(tmp_path / "one" / "records.csv")
    assert len(recs) - 1 == 4 * 144
    s = np.array([float(r[0]) for r in recs[1:]])
    tab = QuantileTable.from_csv(tmp_path / "one" / "table_q0.9.csv")
    assert tab.bins.n_bins == 1
    assert tab.quantiles[0] == conformal_quantile(s, 0.9, 1.0)


def test_calibrate_predict_deterministic(dataset, tmp_path):
    outs = []
    for run, workers in (("a", "1"), ("b", "1"), ("c", "2")):
        cal, pred = tmp_path / run / "cal", tmp_path / run / "pred"
        calibrate(dataset, cal, "--q", "0.85", "--q", "0.9", "--workers", workers)
        tables = sorted(str(p) for p in cal.glob("table_*.csv"))
        assert cli.main(["predict", "--table", *tables, "--observed", *obs(dataset), "--out-dir", str(pred), *FAST, "--workers", workers]) == 0
        outs.append({p.relative_to(tmp_path / run): p.read_bytes() for p in (tmp_path / run).rglob("*") if p.is_file()})
    assert len(outs[0]) == 2 + 1 + 4 * 4
    assert outs[0] == outs[1] == outs[2]


def test_predict_lookup_closure(dataset, tmp_path):
    calibrate(dataset, tmp_path / "cal")
    tab = QuantileTable.from_csv(tmp_path / "cal" / "table_q0.9.csv")
    assert cli.main(["predict", "--table", str(tmp_path / "cal" / "table_q0.9.csv"), "--observed", *obs(dataset), "--out-dir", str(tmp_path / "p"), *FAST]) == 0
    for f in (tmp_path / "p").glob("*_sq0.9.cif"):
        assert set(np.unique(read_grid(f))) <= set(tab.quantiles) | {tab.ess_sup}


def test_predict_ess_sup_table(dataset, tmp_path):
    tab = QuantileTable(BinningScheme(np.empty(0)), np.array([0]), np.array([0.7]), 0.9, 0.7)
    tab.to_csv(tmp_path / "t.csv")
    assert cli.main(["predict", "--table", str(tmp_path / "t.csv"), "--observed", obs(dataset)[0], "--out-dir", str(tmp_path), *FAST]) == 0
    sq = read_grid(next(tmp_path.glob("*_sq0.9.cif")))
    assert np.all(sq == 0.7)


def test_evaluate_consistency(dataset, tmp_path):
    calibrate(dataset, tmp_path / "cal", "--q", "0.9", "--q", "0.95")
    tables = sorted(str(p) for p in (tmp_path / "cal").glob("table_*.csv"))
    pred = tmp_path / "pred"
    assert cli.main(["predict", "--table", *tables, "--observed", *obs(dataset), "--out-dir", str(pred), *FAST]) == 0
    assert cli.main(["evaluate", "--truth", *gts(dataset), "--pred-dir", str(pred), "--out-dir", str(tmp_path), *FAST]) == 0
    table = rows(tmp_path / "metrics.csv")
    assert table[0] == ["image", "psnr", "ssim", "coverage_q0.9", "coverage_q0.95", "mi"]
    assert [r[0] for r in table[1:]] == ["img0", "img1", "img2", "img3", "mean"]
    covs = []
    for r, gt in zip(table[1:], gts(dataset)):
        x = read_grid(gt)
        s = (read_grid(pred / f"{r[0]}_xhat.cif") - x) ** 2
        cov = coverage(s, read_grid(pred / f"{r[0]}_sq0.9.cif"))
        assert float(r[3]) == cov
        covs.append(cov)
    assert float(table[-1][3]) == pytest.approx(np.mean(covs), abs=1e-15)


def test_evaluate_perfect_prediction(tmp_path):
    x = np.random.default_rng(0).random((16, 16))
    write_cif(tmp_path / "a_gt.cif", x)
    write_cif(tmp_path / "a_xhat.cif", x)
    write_cif(tmp_path / "a_that.cif", np.full_like(x, 0.01))
    write_cif(tmp_path / "a_sq0.9.cif", np.zeros_like(x))
    assert cli.main(["evaluate", "--truth", str(tmp_path / "a_gt.cif"), "--pred-dir", str(tmp_path), "--out-dir", str(tmp_path)]) == 0
    r = rows(tmp_path / "metrics.csv")[1]
    assert math.isinf(float(r[1])) and float(r[2]) == 1.0 and float(r[3]) == 1.0


BP = ["--set", "labels=32", "--set", "iterations=2000", "--set", "crop=0"]


@pytest.fixture(scope="module")
def small_obs(tmp_path_factory):
    d = tmp_path_factory.mktemp("bp")
    rng = np.random.Generator(np.random.PCG64(9))
    write_cif(d / "z.cif", shapes_image((6, 6), rng) + 15 / 255 * rng.standard_normal((6, 6)))
    return d / "z.cif"


def test_bp_compare_and_thinning(small_obs, tmp_path):
    assert cli.main(["bp-compare", "--observed", str(small_obs), "--out-dir", str(tmp_path / "a"), *BP, "--export-marginals", "--slice-row", "2"]) == 0
    body = rows(tmp_path / "a" / "bp_compare.csv")
    assert body[0] == ["samples", "iterations", "md_mean", "md_var"]
    vals = np.array(body[1:], dtype=float)
    assert vals[:, 0].tolist() == [1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2000]
    assert np.all(np.isfinite(vals[:, 2:])) and np.all(vals[:, 2:] > 0)
    assert vals[-1, 2] < vals[0, 2] and vals[-1, 3] < vals[0, 3]
    assert (tmp_path / "a" / "marginal_row2.csv").is_file()
    assert len(list((tmp_path / "a" / "marginals").iterdir())) > 0

    assert cli.main(["thinning-study", "--observed", str(small_obs), "--out-dir", str(tmp_path / "b"), *BP, "--h", "1", "--h", "5"]) == 0
    study = rows(tmp_path / "b" / "thinning_study.csv")
    h1 = [r[1:] for r in study[1:] if r[0] == "1"]
    assert h1 == body[1:]
    h5 = np.array([r[1:] for r in study[1:] if r[0] == "5"], dtype=float)
    assert h5[-1, 0] == 400 and h5[-1, 1] == 2000


def test_bp_compare_rejects_foe(small_obs, tmp_path):
    args = ["bp-compare", "--observed", str(small_obs), "--out-dir", str(tmp_path), "--set", "prior=foe", "--set", "sampler=ula"]
    assert cli.main(args) == 2


def test_toy_command(tmp_path):
    args = ["toy", "--no-density", "--set", "toy_m=20000", "--set", "toy_n=5000", "--set", "bins=8", "--q", "0.9"]
    for d in ("a", "b"):
        assert cli.main([*args, "--out-dir", str(tmp_path / d)]) == 0
    for name in ("toy_coverage.csv", "toy_bins_q0.9.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    cov = float(rows(tmp_path / "a" / "toy_coverage.csv")[1][1])
    assert cov >= 0.9 - 3 * math.sqrt(0.09 / 5000)


def test_exit_codes(dataset, tmp_path, monkeypatch):
    assert cli.main(["toy", "--set", "sampler=ula", "--out-dir", str(tmp_path)]) == 2
    assert cli.main(["toy", "--set", "nonsense=1", "--out-dir", str(tmp_path)]) == 2
    assert cli.main(["toy", "--config", str(tmp_path / "missing.cfg"), "--out-dir", str(tmp_path)]) == 4
    missing = ["predict", "--table", str(tmp_path / "none.csv"), "--observed", obs(dataset)[0], "--out-dir", str(tmp_path)]
    assert cli.main(missing) == 4
    # unpaired inputs are a configuration problem
    assert cli.main(["calibrate", "--truth", gts(dataset)[0], "--observed", obs(dataset)[1], "--out-dir", str(tmp_path)]) == 2

    def boom(*a, **k):
        raise DivergenceError(17)

    monkeypatch.setattr(cli, "run_sampler", boom)
    assert cli.main(["calibrate", "--truth", *gts(dataset), "--observed", *obs(dataset), "--out-dir", str(tmp_path / "d"), *FAST]) == 3


def test_invalid_config_writes_nothing(tmp_path):
    out = tmp_path / "never"
    assert cli.main(["toy", "--set", "sigma_dual=1e9", "--out-dir", str(out)]) == 2
    assert not out.exists()


def test_image_seed_and_helpers():
    assert cli.image_seed(0, 0) != cli.image_seed(0, 1)
    assert cli.image_seed(5, 2) == cli.image_seed(5, 2)
    assert cli.image_stem("a/b_gt.cif") == "b" and cli.image_stem("c_xhat.cif") == "c"
    assert cli.geometric_checkpoints(5) == [1, 2, 4, 5]
    assert cli.geometric_checkpoints(8) == [1, 2, 4, 8]


def test_separate_pooling_roundtrip(dataset, tmp_path):
    calibrate(dataset, tmp_path / "cal", "--pooling", "separate")
    table = str(tmp_path / "cal" / "table_q0.9.csv")
    assert cli.main(["predict", "--table", table, "--observed", *obs(dataset), "--out-dir", str(tmp_path / "p"), *FAST]) == 0
    assert read_grid(tmp_path / "p" / "img0_sq0.9.cif").shape == (12, 12)
