import os

import numpy as np
import pytest

from proxytune import sweep as S
from proxytune.errors import ConfigError
from proxytune.trainer import cpt_tune, finetune_plain

SMALL_CFG = {
    "dataset": {"kind": "blobs_shifted", "n_classes": 3, "input_dim": 2, "n_per_class": 15,
                "shift": 2.0},
    "models": {"small": {"name": "mlp", "hidden": [6]},
               "pretrain": {"epochs": 4, "learning_rate": 0.02}},
    "train": {"epochs": 3, "learning_rate": 0.02, "batch_size": 16},
    "alphas": {"train": [0.0, 1.0], "test": [0.5, 1.0], "seeds": [0, 1]},
}


@pytest.fixture(scope="module")
def spec():
    return S.SweepSpec.from_config(SMALL_CFG)


@pytest.fixture(scope="module")
def worlds(spec):
    return [S.build_world(spec, s) for s in spec.seeds]


@pytest.fixture(scope="module")
def grid(spec, worlds):
    return S.run_sweep(spec, worlds=worlds)


def const_grid(values, alphas=(0.2, 0.4, 0.6, 1.4)):
    a = tuple(alphas)
    values = np.asarray(values, dtype=float)
    return S.SweepGrid(a, a, values, np.ones(values.shape, dtype=int))


def test_spec_validation():
    with pytest.raises(ConfigError):
        S.SweepSpec(alpha_train=[])
    with pytest.raises(ConfigError):
        S.SweepSpec(alpha_train=[0.4, 0.2])
    with pytest.raises(ConfigError):
        S.SweepSpec(alpha_test=[0.2, -0.2])
    with pytest.raises(ConfigError):
        S.SweepSpec(seeds=[])
    with pytest.raises(ConfigError):
        S.SweepSpec(train={"epochs": 0})
    with pytest.raises(ConfigError):
        S.SweepSpec.from_config({"alphas": {}, "bogus": 1})
    assert S.SweepSpec().alpha_train == (0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6, 1.8, 2.0)


def test_derive_large():
    assert S.derive_large({"name": "mlp", "hidden": [16]})["hidden"] == [64, 64]


def test_large_model_is_bigger_and_trained_longer(worlds):
    w = worlds[0]
    assert w.large.metadata["epochs"] == 3 * w.small.metadata["epochs"]
    assert w.large.to_model().n_params() > 4 * w.small.to_model().n_params()


def test_grid_shape_and_range(grid, spec):
    assert grid.accuracy.shape == (2, 2)
    assert np.all((grid.accuracy >= 0) & (grid.accuracy <= 1))
    assert np.all(grid.n_seeds == 2)
    assert grid.metadata["failed_cells"] == []


def test_row_reuses_one_checkpoint(grid, spec):
    assert set(grid.digests) == {(i, s) for i in range(2) for s in spec.seeds}


def test_single_cell_grid_equals_direct_run(spec, worlds):
    one = S.spec_with(spec, alpha_train=[1.0], alpha_test=[1.0], seeds=[0])
    g = S.run_sweep(one, worlds=worlds[:1])
    w = worlds[0]
    tri = w.triple()
    ck = cpt_tune(tri, w.train, S.train_config(spec.train, seed=0, alpha_train=1.0))
    assert g.accuracy[0, 0] == S.evaluate(tri.with_tuned(ck.to_model()), w.test, 1.0)
    assert g.digests[(0, 0)] == ck.digest()


def test_alpha_zero_row_is_vanilla_proxy_tuning(grid, spec, worlds):
    accs = []
    for w in worlds:
        tri = w.triple()
        ft = finetune_plain(tri.tuned.model, w.train, S.train_config(spec.train, seed=w.seed))
        accs.append(S.evaluate(tri.with_tuned(ft.to_model()), w.test, 1.0))
    assert grid.cell(0.0, 1.0) == np.mean(accs)


def test_sweep_matches_compare_proxy_entry(spec, worlds, grid):
    rep = S.compare(spec, worlds=worlds)
    assert rep["proxy_tuning"].accuracy == grid.cell(0.0, 1.0)
    assert rep["cpt"].accuracy == grid.cell(1.0, 1.0)
    assert [e.name for e in rep.entries] == [
        "small_pretrained", "small_finetuned", "large_pretrained", "proxy_tuning", "cpt"]
    d = rep.deltas()
    assert d["cpt_vs_proxy_tuning"] == rep["cpt"].accuracy - rep["proxy_tuning"].accuracy
    assert all("seeds=0,1" in e.provenance for e in rep.entries)


def test_parallel_matches_serial(spec, worlds, grid):
    par = S.run_sweep(spec, workers=2, worlds=worlds)
    assert S.grid_csv(par) == S.grid_csv(grid)
    assert par.digests == grid.digests


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_failed_cells_are_missing_not_fabricated(spec, worlds):
    bad = S.spec_with(spec, train={**spec.train, "learning_rate": 1e308, "optimizer": "sgd",
                                   "momentum": 0.0})
    g = S.run_sweep(bad, worlds=worlds)
    failed = g.metadata["failed_cells"]
    assert failed, "expected the absurd learning rate to blow up"
    missing = g.n_seeds == 0
    assert np.all(np.isnan(g.accuracy[missing]))
    assert all(",," in line for line in S.grid_csv(g).splitlines()[1:]
               if line.endswith(",0"))


def test_evaluate_counting(worlds):
    from proxytune import data as D
    w = worlds[0]
    tri = w.triple()
    with pytest.raises(S.EmptyDataset):
        S.evaluate(tri, D.Dataset(np.zeros((0, 2)), np.zeros(0, int), 3), 1.0)
    _, pred = __import__("proxytune").proxy_predict(tri, w.test.X, 1.0)
    perfect = D.Dataset(w.test.X, pred, 3)
    assert S.evaluate(tri, perfect, 1.0) == 1.0
    tuned_only = np.argmax(tri.tuned(w.test.X), axis=1)
    assert S.evaluate(tri, w.test, 0.0) == np.mean(tuned_only == w.test.y)


def test_evaluate_constant_predictor_on_balanced_labels():
    from proxytune import data as D
    from proxytune.models import MlpClassifier, ModelHandle, Role
    from proxytune.proxy import ProxyTriple
    m = MlpClassifier([2, 2])
    m.set_params({"W0": np.zeros((2, 2)), "b0": np.array([1.0, 0.0])})
    tri = ProxyTriple(m, ModelHandle.frozen(m, Role.FROZEN_SMALL), ModelHandle.frozen(m, Role.FROZEN_LARGE))
    ds = D.gen_moons(0, 40, 0.1)
    assert S.evaluate(tri, ds, 1.0) == 0.5


def test_diagonal_dominance_examples():
    n = 4
    mn, mf, dom = S.diagonal_dominance(const_grid(np.full((n, n), 0.8)), 0.2, 0.8)
    assert mn == mf == 0.8 and dom is False
    mn, mf, dom = S.diagonal_dominance(const_grid(np.eye(n)), 0.0, 0.8)
    assert (mn, mf, dom) == (1.0, 0.0, True)
    with pytest.raises(ConfigError):
        S.diagonal_dominance(const_grid(np.eye(n)), 0.2, 5.0)


def test_diagonal_dominance_band_edges_and_missing():
    acc = np.eye(4)
    acc[3, 0] = np.nan
    mn, mf, _ = S.diagonal_dominance(const_grid(acc), 0.2, 0.8)
    # near band: diagonal plus neighbours 0.2 apart (floating error tolerated)
    assert mn == pytest.approx(4 / 8)
    assert mf == 0.0


def test_grid_csv_format(tmp_path):
    g = const_grid([[0.5, 0.25], [1.0, 1 / 3]], alphas=(0.2, 1.0))
    p = tmp_path / "g.csv"
    S.emit_grid_csv(g, p)
    lines = p.read_text().splitlines()
    assert lines == ["alpha_train,alpha_test,mean_accuracy,n_seeds",
                     "0.200000,0.200000,0.500000,1",
                     "0.200000,1.000000,0.250000,1",
                     "1.000000,0.200000,1.000000,1",
                     "1.000000,1.000000,0.333333,1"]
    first = p.read_bytes()
    S.emit_grid_csv(g, p)
    assert p.read_bytes() == first


def test_grid_csv_unwritable_path_leaves_nothing(tmp_path):
    g = const_grid(np.eye(2), alphas=(0.2, 0.4))
    with pytest.raises(OSError):
        S.emit_grid_csv(g, tmp_path / "missing_dir" / "g.csv")
    if os.geteuid() == 0:
        return  # root ignores directory permissions
    ro = tmp_path / "ro"
    ro.mkdir()
    ro.chmod(0o500)
    try:
        with pytest.raises(OSError):
            S.emit_grid_csv(g, ro / "g.csv")
        assert list(ro.iterdir()) == []
    finally:
        ro.chmod(0o700)


def test_report_outputs(tmp_path, spec, worlds):
    rep = S.compare(spec, worlds=worlds)
    S.emit_report(rep, tmp_path / "r.txt", tmp_path / "r.csv")
    txt = (tmp_path / "r.txt").read_text()
    assert "delta cpt_vs_proxy_tuning" in txt
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0] == "model,accuracy,provenance" and len(rows) == 6


def test_dual_encoder_and_csv_datasets(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(80, 3))
    y = (X[:, 0] > 0).astype(int)
    p = tmp_path / "d.csv"
    p.write_text("f1,f2,f3,y\n" + "".join(f"{a},{b},{c},{t}\n" for (a, b, c), t in zip(X, y)))
    cfg = {
        "dataset": {"kind": "csv", "path": str(p), "label_column": "y"},
        "models": {"small": {"name": "dual_encoder", "hidden": [4], "embed_dim": 3},
                   "pretrain": {"epochs": 2}},
        "train": {"epochs": 2},
        "alphas": {"train": [1.0], "test": [1.0], "seeds": [0]},
    }
    g = S.run_sweep(S.SweepSpec.from_config(cfg))
    assert 0 <= g.accuracy[0, 0] <= 1


def test_config_file_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        S.load_config(p)
    with pytest.raises(ConfigError):
        S.build_world(S.SweepSpec(dataset={"kind": "imagenet"}), 0)
    with pytest.raises(ConfigError):
        S.build_world(S.SweepSpec(models={"small": {"name": "transformer"}}), 0)


def test_mean_grid():
    a = const_grid(np.full((4, 4), 0.5))
    b = const_grid(np.eye(4))
    m = S.mean_grid([a, b])
    np.testing.assert_allclose(m.accuracy, (0.5 + np.eye(4)) / 2)
    b.accuracy[0, 1] = np.nan
    assert np.isnan(S.mean_grid([a, b]).accuracy[0, 1])
    with pytest.raises(ConfigError):
        S.mean_grid([a, const_grid(np.eye(3), alphas=(0.2, 0.4, 0.6))])
    with pytest.raises(ConfigError):
        S.mean_grid([])
