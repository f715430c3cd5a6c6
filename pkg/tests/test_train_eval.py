import numpy as np
import pytest

from s2cast import numerics as nx
from s2cast import train_eval
from s2cast.config import ConfigError, TrainConfig
from s2cast.data import Dataset, fit_normalizer, split_bounds, stack_windows, synth_generate, window_starts
from s2cast.model import ModelParams, forward, mae_loss
from s2cast.spatial_graph import StationSet
from s2cast.train_eval import (TrainingDiverged, analytic_cost, complexity_probe, error_metrics, evaluate,
                               preprocess, restore_prepared, run_ablations, train)


def small_cfg(**kw):
    base = dict(d_model=20, levels=2, p0=4, l_max=2, t_in=12, f_out=6, epsilon_knn=[6, 0.9],
                epochs=3, patience=2, batch_size=8, steps_per_epoch=10, seed=0)
    base.update(kw)
    return TrainConfig(**base).validate()


@pytest.fixture(scope="module")
def small_data():
    return synth_generate(16, 400, seed=5)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(p0=6, levels=3, epsilon_km=100.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(d_model=16, l_max=3, epsilon_km=100.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epsilon_km": 1.0, "learning_rate": 0.1})
    with pytest.raises(ConfigError):
        TrainConfig(ablations=["no_thing"], epsilon_km=1.0).validate()
    cfg = TrainConfig(epsilon_km=1.0).with_overrides(p0=16, lr=None)
    assert cfg.p0 == 16 and cfg.lr == 1e-3
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_overfit_single_batch():
    ds = synth_generate(10, 400, seed=0)
    cfg = TrainConfig(d_model=32, p0=4, t_in=48, f_out=24, epsilon_knn=[6, 0.9], lr=5e-3).validate()
    prep = preprocess(ds.stations, cfg)
    z = fit_normalizer(ds, cfg.split).apply(ds.series)
    x, y = stack_windows(z, np.arange(0, 80, 10), cfg.t_in, cfg.f_out)
    params = ModelParams(cfg, 1)
    opt = nx.Adam(params, cfg.lr)
    for _ in range(500):
        with nx.Tape() as tape:
            loss = mae_loss(forward(params, prep.plans, prep.basis, x), y)
        nx.backward(tape, loss)
        opt.step()
        params.zero_grad()
    final = float(mae_loss(forward(params, prep.plans, prep.basis, x), y).value)
    assert final < 0.05


def test_training_deterministic(small_data):
    cfg = small_cfg()
    a = train(cfg, small_data)
    b = train(cfg, small_data)
    assert a[1].val_mae == b[1].val_mae
    assert a[1].to_json() == b[1].to_json()
    for k in a[0].tensors:
        assert a[0][k].value.tobytes() == b[0][k].value.tobytes()


def test_early_stopping_returns_best(small_data):
    cfg = small_cfg(epochs=8, patience=2, lr=3e-2, steps_per_epoch=5)
    params, report, normalizer, prepared = train(cfg, small_data)
    vals = report.val_mae
    assert report.best_epoch == int(np.argmin(vals))
    assert len(vals) <= report.best_epoch + cfg.patience + 1
    spans = split_bounds(small_data.t_total, cfg.split)
    starts = window_starts(spans["val"], cfg.t_in, cfg.f_out)
    z = normalizer.apply(small_data.series)
    assert train_eval._normalised_mae(params, prepared, z, starts) == pytest.approx(min(vals), abs=1e-12)


def test_divergence_keeps_last_good(small_data, monkeypatch):
    cfg = small_cfg()
    initial = ModelParams(cfg, 1)

    def poisoned(pred, target):
        return nx.mul(pred, nx.Tensor(np.full(pred.shape, np.inf)))

    monkeypatch.setattr(train_eval, "mae_loss", poisoned)
    with pytest.raises(TrainingDiverged) as err:
        train(cfg, small_data)
    assert isinstance(err.value, nx.NumericalError)
    for k in initial.tensors:
        np.testing.assert_array_equal(err.value.params[k].value, initial[k].value)


def test_error_metrics_examples():
    rng = np.random.default_rng(0)
    y = rng.standard_normal((4, 5, 6, 2))
    zero = error_metrics(y, y)
    assert zero["mae"] == [0.0, 0.0] and zero["mse_overall"] == 0.0
    mean = y.reshape(-1, 2).mean(axis=0)
    m = error_metrics(np.broadcast_to(mean, y.shape), y)
    for ch in range(2):
        vals = y[..., ch].ravel()
        assert m["mae"][ch] == pytest.approx(sum(abs(v - mean[ch]) for v in vals) / vals.size, abs=1e-12)
        assert m["mse"][ch] == pytest.approx(vals.var(), abs=1e-12)
    assert min(m["mae"]) >= 0 and min(m["mse"]) >= 0


def test_persistence_baseline_on_ramp():
    n, t = 4, 300
    st_ = StationSet.from_arrays(range(n), [0.0, 1.0, 2.0, 3.0], [0.0, 0.5, 1.0, 1.5])
    series = np.broadcast_to(np.arange(t, dtype=np.float32)[None, :, None], (n, t, 1)) * 0.01
    ds = Dataset(st_, series + np.arange(n, dtype=np.float32)[:, None, None], ["v"])
    cfg = small_cfg(epsilon_km=200.0, epsilon_knn=None, p0=2, levels=1)
    params = ModelParams(cfg, 1)
    prep = preprocess(ds.stations, cfg)
    rep = evaluate(params, prep, ds, fit_normalizer(ds, cfg.split), "test")
    # step f ahead is off by 0.01 * (f + 1)
    expected = 0.01 * np.mean(np.arange(1, cfg.f_out + 1))
    assert rep.persistence["mae_overall"] == pytest.approx(expected, rel=1e-5)
    assert rep.n_windows == 30 - cfg.t_in - cfg.f_out + 1


def test_restore_prepared_matches(small_data):
    cfg = small_cfg()
    prep = preprocess(small_data.stations, cfg)
    back = restore_prepared(small_data.stations, cfg, prep.epsilon_km,
                            [lvl.partition.assignment.tolist() for lvl in prep.hierarchy.levels])
    for a, b in zip(prep.plans, back.plans):
        np.testing.assert_array_equal(a.perm, b.perm)
        np.testing.assert_array_equal(a.intra_idx, b.intra_idx)
        np.testing.assert_array_equal(a.coarse_idx, b.coarse_idx)
    with pytest.raises(ValueError):
        restore_prepared(small_data.stations, small_cfg(p0=8), prep.epsilon_km,
                         [lvl.partition.assignment.tolist() for lvl in prep.hierarchy.levels])


def test_ablation_harness_audits(small_data):
    cfg = small_cfg(epochs=1, steps_per_epoch=3)
    res = run_ablations(cfg, small_data, variants=("no_sa", "no_sh"))
    assert set(res) == {"full", "no_sa", "no_sh"}
    assert res["full"].n_params - res["no_sa"].n_params == 2 * (cfg.d_max + 2)
    assert res["full"].n_params == res["no_sh"].n_params
    assert res["full"].persistence == res["no_sa"].persistence


def test_probe_examples():
    res = complexity_probe(1000, [25, 50, 100, 200, 400], measure=False)
    assert res["argmin_P"] == 100
    assert complexity_probe(64, [4, 8, 16, 32], measure=False)["argmin_P"] == 16
    assert analytic_cost(64, 16) == 64 * 64 / 16 + 256
    with pytest.raises(ValueError):
        complexity_probe(10, [11])


def test_probe_measured_matches_identity():
    res = complexity_probe(300, [10, 20, 40], levels=2)
    for row in res["rows"]:
        assert row["measured_entries"] == row["expected_entries"]
    # balanced parts with imbalance 0: M = ceil(N / P)
    row = res["rows"][1]
    assert row["expected_entries"] == 20 * 15 ** 2 + 20 ** 2 + 10 * 30 ** 2 + 10 ** 2


@pytest.mark.parametrize("name", ["desk", "acceptance", "weather5k", "ncei_temp", "ncei_wind"])
def test_shipped_configs_validate(name):
    from pathlib import Path
    cfg = TrainConfig.from_file(Path(__file__).parent.parent / "configs" / f"{name}.json")
    assert cfg.levels == 2 and cfg.l_max == 3 and (cfg.t_in, cfg.f_out) == (48, 24)
