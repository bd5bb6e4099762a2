import json

import numpy as np
import pytest

from spikelab import bench as B
from spikelab.model import ORTHOGONAL_CENTERS, SYMMETRIC_PAIR, Prior
from spikelab.numerics import ContractViolation, RngStream


def small_phase_config(tmp_path, **kw):
    base = dict(kind="phase-curve", k=3, n=60, d=400, trials=2, q_grid=[0.0, 9.0],
                algorithms=["kmeans", "amp", "null"], output_dir=str(tmp_path / "out"))
    base.update(kw)
    return B.ExperimentConfig(**base)


def test_config_roundtrip_and_digest(tmp_path):
    cfg = small_phase_config(tmp_path)
    back = B.ExperimentConfig.loads(cfg.dumps())
    assert back == cfg and back.digest() == cfg.digest()
    path = tmp_path / "c.ini"
    path.write_text(cfg.dumps())
    assert B.ExperimentConfig.load(path) == cfg


def test_config_errors_name_the_line():
    with pytest.raises(ContractViolation, match="line 2"):
        B.ExperimentConfig.loads("[experiment]\nbogus = 1\n")
    with pytest.raises(ContractViolation, match="line 1"):
        B.ExperimentConfig.loads("[nowhere]\n")
    with pytest.raises(ContractViolation, match="line 2"):
        B.ExperimentConfig.loads("[experiment]\ntrials = many\n")
    with pytest.raises(ContractViolation, match="'k'"):
        B.ExperimentConfig.loads("[experiment]\nkind = phase-curve\n")


def test_config_validation():
    with pytest.raises(ContractViolation):
        B.ExperimentConfig(kind="phase-curve", k=1)
    with pytest.raises(ContractViolation):
        B.ExperimentConfig(kind="phase-curve", k=3, algorithms=["magic"])
    with pytest.raises(ContractViolation):
        B.ExperimentConfig(kind="other")


def test_default_grid_and_variant():
    cfg = B.ExperimentConfig(kind="phase-curve", k=4)
    assert cfg.grid[0] == 0.0 and cfg.grid[-1] == 8.0 and len(cfg.grid) == 17
    assert cfg.mixture_variant == ORTHOGONAL_CENTERS
    assert B.ExperimentConfig(kind="phase-curve", k=2).mixture_variant == SYMMETRIC_PAIR


def test_threshold_annotations_and_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("SPIKELAB_CACHE_DIR", str(tmp_path))
    a = B.threshold_annotations(4)
    assert a["q_algo"] == 4 and a["q_info"] == pytest.approx(4.0, abs=1e-6)
    assert list(tmp_path.iterdir())
    assert B.cached_threshold(4).q_info == pytest.approx(a["q_info"])


def test_phase_curve_outputs_and_thread_independence(tmp_path):
    c1 = B.run_phase_curve(small_phase_config(tmp_path, output_dir=str(tmp_path / "a")))
    c2 = B.run_phase_curve(small_phase_config(tmp_path, output_dir=str(tmp_path / "b"), threads=3))
    for name in ("curve.csv", "thresholds.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = (tmp_path / "a" / "curve.csv").read_text().splitlines()
    assert rows[0] == "algorithm,q_theta,mean,std,n_trials" and len(rows) == 7
    assert c1.row("kmeans", 9.0)["mean"] > c1.row("null", 9.0)["mean"]
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["q_grid"] == [0.0, 9.0]
    schema = json.loads((tmp_path / "a" / "schema.json").read_text())
    assert set(schema) == {"curve.csv", "thresholds.csv", "report.json"}


def test_phase_curve_algorithm_order_irrelevant(tmp_path):
    a = B.run_phase_curve(small_phase_config(tmp_path, algorithms=["kmeans", "null"]), write=False)
    b = B.run_phase_curve(small_phase_config(tmp_path, algorithms=["null", "kmeans"]), write=False)
    assert a.row("kmeans", 9.0) == b.row("kmeans", 9.0)


def test_phase_curve_records_failures(tmp_path, monkeypatch):
    real = B._run_algorithm

    def flaky(name, *args):
        if name == "kmeans":
            raise RuntimeError("boom")
        return real(name, *args)

    monkeypatch.setattr(B, "_run_algorithm", flaky)
    curve = B.run_phase_curve(small_phase_config(tmp_path), write=False)
    assert len(curve.failures) == 4
    assert curve.row("kmeans", 0.0)["n_trials"] == 0
    assert curve.row("null", 0.0)["n_trials"] == 2


def test_equivalence_study_structure():
    rows = B.equivalence_study(2.0, Prior.rademacher(), 120, [5], trials=2, rng=RngStream(0), t_max=10)
    (row,) = rows
    assert row["d_over_n"] == 5
    assert 0 < row["symm_mse"] < 1.5 and 0 < row["asym_mse"] < 1.5
    assert row["rs_mmse"] == pytest.approx(1 - 0.9165 ** 2, abs=0.05)
    with pytest.raises(ContractViolation):
        B.equivalence_study(2.0, Prior.simplex(3), 50, [5])


def test_nullity_study_range():
    res = B.theta_nullity_study(1.0, 60, 600, trials=3, rng=RngStream(1))
    assert len(res["correlations"]) == 3
    assert all(0 <= c <= 1 for c in res["correlations"])
    assert res["max_correlation"] == max(res["correlations"])


def test_split_half_protocol(tmp_path):
    g = np.random.default_rng(0)
    labels = np.repeat([0, 1], 100)
    X = g.standard_normal((200, 10))
    X[labels == 1, :3] += 4.0
    res = B.split_half_protocol(X, labels, repeats=4, rng=RngStream(2))
    assert min(res["center_correlation"]) > 0.95
    assert res["overlap_quantiles"]["0.0"] > 0.95
    # row order does not matter
    perm = g.permutation(200)
    again = B.split_half_protocol(X[perm], labels[perm], repeats=4, rng=RngStream(2))
    assert again["center_correlation"] == res["center_correlation"]
    with pytest.raises(ContractViolation):
        B.split_half_protocol(X[:3], subset_size=2)


def test_load_matrix_csv(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("a,b\n1,2\n3,4\n")
    data, meta = B.load_matrix_csv(p, has_header=True, center=True)
    assert np.allclose(data, [[-1, -1], [1, 1]]) and meta["header"] == ["a", "b"]
    p.write_text("1,x\n")
    with pytest.raises(ContractViolation, match="row 1, column 2"):
        B.load_matrix_csv(p)
    p.write_text("1,2\n3\n")
    with pytest.raises(ContractViolation, match="row 2"):
        B.load_matrix_csv(p)
    p.write_text("h,z\n1,0\n2,0\n")
    with pytest.raises(ContractViolation, match="z"):
        B.load_matrix_csv(p, has_header=True, rescale=True)
