import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from conftest import TINY
from donut.datasets import Dataset, SimSpec, simulate, write_csv
from donut.exceptions import PreconditionError, TrainingError
from donut.experiments import (
    AggregateResult,
    ExperimentSpec,
    RawRow,
    _sim_dataset,
    aggregate,
    read_raw,
    run,
    run_ablation,
    run_bias_sweep,
    run_csv_eval,
    run_lambda_sweep,
    spec_from_dict,
    spec_to_dict,
    write_outputs,
)
from donut.training import TrainConfig

FAST = TrainConfig(learning_rate=3e-3, epochs=15, patience=5, model=TINY, lambda_grid=(0.1, 1.0))
SIM = SimSpec(d=4, n_control=30, n_treated=60)


def tiny_spec(kind, **kw):
    kw = {"replications": 2, "train_cfg": FAST, "sim_spec": SIM, **kw}
    return ExperimentSpec(kind, **kw)


@pytest.fixture(scope="module")
def sweep():
    return run_bias_sweep(tiny_spec("bias_sweep", bias_levels=(0.0, 1.0)))


@pytest.fixture(scope="module")
def csv_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "sim.csv"
    write_csv(simulate(replace(SIM, seed=3).with_kl(0.5)), path)
    return path


class TestSpec:
    def test_synthetic_default_sim(self):
        spec = ExperimentSpec("bias_sweep")
        assert (spec.sim_spec.n_control, spec.sim_spec.n_treated) == (500, 1000)

    @pytest.mark.parametrize("kw", [
        {"kind": "nope"},
        {"kind": "bias_sweep", "replications": 0},
        {"kind": "csv_eval"},
        {"kind": "csv_eval", "data_paths": ("a.csv",), "methods": ("magic",)},
        {"kind": "bias_sweep", "data_paths": ("a.csv",)},
        {"kind": "lambda_sweep", "lambda_values": ()},
        {"kind": "bias_sweep", "metrics": ("accuracy",)},
    ])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            ExperimentSpec(**kw)

    def test_dict_round_trip(self):
        spec = tiny_spec("lambda_sweep", lambda_values=(0.0, 2.5))
        d = json.loads(json.dumps(spec_to_dict(spec)))
        back = spec_from_dict(d)
        assert spec_to_dict(back) == spec_to_dict(spec)
        assert back.train_cfg == spec.train_cfg

    def test_unknown_key(self):
        with pytest.raises(TypeError):
            spec_from_dict({"kind": "bias_sweep", "colour": "blue"})


class TestBiasSweep:
    def test_row_count(self, sweep):
        # per (level, replication): one kl row plus three methods x two scopes
        assert len(sweep.raw) == 2 * 2 * (1 + 3 * 2)
        assert not sweep.failures

    def test_achieved_bias(self, sweep):
        np.testing.assert_array_equal(sweep.values("kl=0", "data", "kl_bias"), 0.0)
        np.testing.assert_allclose(sweep.values("kl=1", "data", "kl_bias"), 1.0, rtol=1e-9)

    def test_errors_non_negative(self, sweep):
        for r in sweep.raw:
            assert r.value >= 0

    def test_without_comparison(self):
        res = run_bias_sweep(tiny_spec("bias_sweep", bias_levels=(0.0,), compare=False, replications=1))
        assert {r.method for r in res.raw} == {"donut", "diff_in_means", "data"}

    def test_deterministic(self, sweep):
        again = run(sweep.spec)
        assert [(r.condition, r.method, r.metric, r.value) for r in again.raw] == \
               [(r.condition, r.method, r.metric, r.value) for r in sweep.raw]

    def test_master_seed_changes_data(self, sweep):
        other = run_bias_sweep(replace(sweep.spec, master_seed=1))
        assert other.values("kl=0", "donut", "eps_ate_mu/out_sample").tolist() != \
               sweep.values("kl=0", "donut", "eps_ate_mu/out_sample").tolist()


class TestPairing:
    def test_levels_share_draws(self):
        spec = tiny_spec("bias_sweep")
        a, b = _sim_dataset(spec, 0, 0.0), _sim_dataset(spec, 0, 2.0)
        np.testing.assert_array_equal(a.T, b.T)
        c = a.T == 0
        np.testing.assert_array_equal(a.X[c], b.X[c])
        shift = b.X[~c] - a.X[~c]
        np.testing.assert_allclose(shift, np.broadcast_to(shift[0], shift.shape), atol=1e-12)

    def test_replications_differ(self):
        spec = tiny_spec("bias_sweep")
        assert not np.array_equal(_sim_dataset(spec, 0, 0.0).X, _sim_dataset(spec, 1, 0.0).X)


@pytest.fixture(scope="module")
def pair():
    abl = run_ablation(tiny_spec("ablation", bias_levels=(1.0,)))
    sw = run_lambda_sweep(tiny_spec("lambda_sweep", bias_levels=(1.0,), lambda_values=(0.0, 0.1, 1.0)))
    return abl, sw


class TestAblationAndLambdaSweep:
    def test_zero_lambda_matches_unregularized_arm(self, pair):
        abl, sw = pair
        m = "eps_ate_mu/out_sample"
        np.testing.assert_array_equal(sw.values("kl=1,lambda=0", "donut", m), abl.values("kl=1", "donut_no_reg", m))

    @pytest.mark.parametrize("lam", ["0.1", "1"])
    def test_grid_members_match_fixed_lambda(self, pair, lam):
        abl, sw = pair
        m = "eps_ate_mu/in_sample"
        np.testing.assert_array_equal(sw.values(f"kl=1,lambda={lam}", "donut", m),
                                      abl.values("kl=1", f"grid[lambda={lam}]", m))

    def test_selected_arm_is_a_grid_member(self, pair):
        abl, _ = pair
        lams = abl.values("kl=1", "donut", "selected_lambda")
        for rep, lam in enumerate(lams):
            sel = [r.value for r in abl.raw if r.replication == rep and r.method == "donut"
                   and r.metric == "eps_ate_mu/out_sample"]
            grid = [r.value for r in abl.raw if r.replication == rep and r.method == f"grid[lambda={lam:g}]"
                    and r.metric == "eps_ate_mu/out_sample"]
            assert sel == grid
        np.testing.assert_array_equal(abl.values("kl=1", "donut", "diverged_grid_members"), 0.0)

    def test_lambda_sweep_row_count(self, pair):
        _, sw = pair
        assert len(sw.raw) == 1 * 2 * 3 * 2


class TestAggregate:
    def test_recomputed_from_raw(self, sweep):
        for a in sweep.aggregates:
            v = sweep.values(a.condition, a.method, a.metric)
            assert a.n == len(v)
            assert a.mean == pytest.approx(np.mean(v), abs=1e-12)
            assert a.std == pytest.approx(np.std(v, ddof=1), abs=1e-12)

    def test_by_hand(self):
        rows = [RawRow(0, "c", "m", "x", 1.0), RawRow(1, "c", "m", "x", 3.0),
                RawRow(2, "c", "m", "x", float("nan"), "boom"), RawRow(0, "c", "m", "y", 5.0)]
        agg = {a.metric: a for a in aggregate(rows)}
        assert (agg["x"].mean, agg["x"].std, agg["x"].n, agg["x"].failures) == (2.0, np.sqrt(2.0), 2, 1)
        assert agg["y"].n == 1 and np.isnan(agg["y"].std)

    def test_mean_lookup(self, sweep):
        a = sweep.aggregates[0]
        assert sweep.mean(a.condition, a.method, a.metric) == a.mean
        with pytest.raises(KeyError):
            sweep.mean("none", "none", "none")


class TestOutputs:
    def test_files_and_round_trip(self, sweep, tmp_path):
        paths = write_outputs(sweep, tmp_path)
        back = read_raw(paths["raw"])
        assert [(r.replication, r.condition, r.method, r.metric, r.value) for r in back] == \
               [(r.replication, r.condition, r.method, r.metric, r.value) for r in sweep.raw]
        with paths["aggregate"].open() as fh:
            agg = list(csv.DictReader(fh))
        assert len(agg) == len(sweep.aggregates)
        assert float(agg[0]["mean"]) == sweep.aggregates[0].mean
        manifest = json.loads(paths["manifest"].read_text())
        assert manifest["rows"] == len(sweep.raw) and manifest["failures"] == 0
        assert spec_from_dict(manifest["spec"]).kind == "bias_sweep"

    def test_byte_identical_reruns(self, sweep, tmp_path):
        write_outputs(sweep, tmp_path / "a")
        write_outputs(run(sweep.spec), tmp_path / "b")
        for name in ("raw.csv", "aggregate.csv", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestFailures:
    def test_record_and_continue(self, monkeypatch):
        import donut.experiments as ex

        real = ex.train
        calls = {"n": 0}

        def flaky(ds, sp, cfg):
            calls["n"] += 1
            if cfg.seed[1] == 1:
                raise TrainingError("diverged at epoch 3", epoch=3)
            return real(ds, sp, cfg)

        monkeypatch.setattr(ex, "train", flaky)
        res = run_bias_sweep(tiny_spec("bias_sweep", bias_levels=(0.0,)))
        assert {r.replication for r in res.failures} == {1}
        assert all("diverged" in r.error and np.isnan(r.value) for r in res.failures)
        agg = {(a.method, a.metric): a for a in res.aggregates}
        assert agg[("donut", "eps_ate_mu/out_sample")].n == 1
        assert agg[("donut", "eps_ate_mu/out_sample")].failures == 1


class TestCsvEval:
    def test_all_methods(self, csv_path):
        spec = ExperimentSpec("csv_eval", replications=1, train_cfg=FAST, data_paths=(str(csv_path),))
        res = run_csv_eval(spec)
        assert not res.failures
        methods = {r.method for r in res.raw}
        assert methods == {"donut", "donut_no_reg", "ols1", "ols2", "diff_in_means", "plr"}
        metrics = {r.metric for r in res.raw}
        assert {"eps_ate_mu/in_sample", "eps_ate_mu/out_sample", "eps_ate_y/out_sample"} <= metrics

    def test_regressions_exact_without_noise(self, tmp_path):
        path = tmp_path / "clean.csv"
        write_csv(simulate(replace(SIM, seed=4, noise_var=0.0).with_kl(0.5)), path)
        spec = ExperimentSpec("csv_eval", replications=1, train_cfg=FAST, data_paths=(str(path),),
                              methods=("ols1", "ols2"))
        res = run_csv_eval(spec)
        for r in res.raw:
            assert r.value == pytest.approx(0.0, abs=1e-9), r

    def test_method_and_metric_subset(self, csv_path):
        spec = ExperimentSpec("csv_eval", replications=2, train_cfg=FAST, data_paths=(str(csv_path),),
                              methods=("ols1",), metrics=("eps_ate_y",))
        res = run_csv_eval(spec)
        assert {(r.method, r.metric) for r in res.raw} == {("ols1", "eps_ate_y/in_sample"),
                                                           ("ols1", "eps_ate_y/out_sample")}
        assert sorted({r.replication for r in res.raw}) == [0, 1]

    def test_missing_ground_truth(self, tmp_path):
        rng = np.random.default_rng(0)
        path = tmp_path / "bare.csv"
        write_csv(Dataset(rng.normal(size=(5, 2)), np.array([1.0, 0, 1, 0, 1]), rng.normal(size=5)), path)
        spec = ExperimentSpec("csv_eval", replications=1, train_cfg=FAST, data_paths=(str(path),),
                              metrics=("eps_ate_mu",))
        with pytest.raises(PreconditionError, match="mu0, mu1"):
            run_csv_eval(spec)
        with pytest.raises(PreconditionError, match="ground-truth"):
            run_csv_eval(replace(spec, metrics=None))

    def test_att_on_five_rows(self, tmp_path):
        ds = Dataset(np.arange(10.0).reshape(5, 2), np.array([1.0, 0, 1, 0, 1]),
                     np.array([3.0, 1.0, 2.0, 0.5, 4.0]), e=np.ones(5))
        path = tmp_path / "five.csv"
        write_csv(ds, path)
        spec = ExperimentSpec("csv_eval", replications=1, train_cfg=FAST, data_paths=(str(path),),
                              methods=("diff_in_means",), split_ratios=(1.0, 0.0, 0.0))
        res = run_csv_eval(spec)
        # all rows train: diff in means is 3 - 0.75, which is the ground-truth ATT
        assert res.values("csv", "diff_in_means", "eps_att/in_sample")[0] == pytest.approx(0.0, abs=1e-12)


def test_result_container():
    res = AggregateResult(tiny_spec("bias_sweep"), [RawRow(0, "c", "m", "x", 1.0, "err")])
    assert res.failures == res.raw and res.values("c", "m", "x").size == 0
