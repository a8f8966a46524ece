import math

import numpy as np
import pytest

from spackle import training as T
from spackle.model import ModelConfig, init_params, save_checkpoint
from spackle.preprocess import median_complete, normalize

from conftest import make_dataset

SMALL = dict(d_k=16, num_layers=1, num_heads=2)


@pytest.fixture(scope="module")
def twenty_spots():
    # 4x5 train slide (20 spots) plus a small validation slide
    ds = make_dataset([(4, 5), (4, 5)], 4, dropout=0.2, seed=1)
    return median_complete(normalize(ds))


def short_config(**kw):
    base = dict(batch_size=20, max_iterations=200, learning_rate=1e-2, val_every=50, seed=0)
    base.update(kw)
    return T.TrainConfig(**base)


class TestAdam:
    def test_matches_reference_update(self):
        p = {"w": np.array([1.0, -2.0])}
        opt = T.Adam(p, lr=0.1)
        g1, g2 = np.array([0.5, -1.0]), np.array([0.1, 0.2])
        opt.step(p, {"w": g1})
        opt.step(p, {"w": g2})
        # independent scalar re-derivation of two Adam steps
        w = [1.0, -2.0]
        for i in range(2):
            m = v = 0.0
            for t, g in enumerate([g1[i], g2[i]], start=1):
                m = 0.9 * m + 0.1 * g
                v = 0.999 * v + 0.001 * g * g
                w[i] -= 0.1 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p["w"], w, rtol=1e-12)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(batch_size=0), dict(learning_rate=0.0), dict(rho=1.5),
                                    dict(max_iterations=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            T.TrainConfig(**kw)


class TestTrain:
    def test_overfit_twenty_spots(self, twenty_spots):
        ds, prov = twenty_spots
        ck = T.train(ds, prov, ModelConfig(g=4, **SMALL), short_config(max_iterations=2000, val_every=500))
        final = ck.extra["history"][-1][1]
        assert final < 0.1 * ck.extra["initial_train_loss"]

    def test_deterministic_bytes(self, twenty_spots, tmp_path):
        ds, prov = twenty_spots
        a = T.train(ds, prov, ModelConfig(g=4, **SMALL), short_config())
        b = T.train(ds, prov, ModelConfig(g=4, **SMALL), short_config())
        assert a.best_val_mse == b.best_val_mse
        save_checkpoint(a, tmp_path / "a")
        save_checkpoint(b, tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_zero_iterations(self, twenty_spots):
        ds, prov = twenty_spots
        cfg = ModelConfig(g=4, **SMALL)
        ck = T.train(ds, prov, cfg, short_config(max_iterations=0))
        assert ck.iteration == 0
        fresh = init_params(cfg, 0)
        assert all(np.array_equal(fresh[k], ck.params[k]) for k in fresh)
        assert ck.best_val_mse == ck.extra["history"][0][2]

    def test_best_val_monotone(self, twenty_spots):
        ds, prov = twenty_spots
        ck = T.train(ds, prov, ModelConfig(g=4, **SMALL), short_config(max_iterations=300))
        vals = [row[2] for row in ck.extra["history"]]
        assert ck.best_val_mse == min(vals)
        running = np.minimum.accumulate(vals)
        assert (np.diff(running) <= 0).all()

    def test_standardization_statistics(self, twenty_spots):
        ds, prov = twenty_spots
        ck = T.train(ds, prov, ModelConfig(g=4, **SMALL), short_config(max_iterations=0))
        rows = ds.spots_in_split("train")
        for j in range(4):
            vals = ds.expression[rows, j][ds.observed[rows, j]]
            assert ck.config.gene_center[j] == pytest.approx(vals.mean(), rel=1e-12)
            assert ck.config.gene_scale[j] == pytest.approx(vals.std(), rel=1e-12)
        plain = T.train(ds, prov, ModelConfig(g=4, **SMALL), short_config(max_iterations=0, standardize=False))
        assert plain.config.gene_center is None

    def test_preconditions(self, twenty_spots):
        ds, prov = twenty_spots
        with pytest.raises(T.TrainingError):
            T.train(ds.replace(completion=None), prov, ModelConfig(g=4), short_config())
        with pytest.raises(T.TrainingError):
            T.train(ds.replace(split={s: "train" for s in ds.slide_ids}), prov, ModelConfig(g=4), short_config())
        with pytest.raises(ValueError):
            T.train(ds, prov, ModelConfig(g=5), short_config())

    def test_divergence_reports_iteration(self, twenty_spots):
        ds, prov = twenty_spots
        with pytest.raises(T.TrainingDiverged) as info:
            T.train(ds, prov, ModelConfig(g=4, **SMALL), short_config(learning_rate=1e2))
        assert info.value.iteration >= 0
        assert "iteration" in str(info.value)


class TestMetrics:
    def test_perfect_oracle(self):
        rng = np.random.default_rng(0)
        truth = rng.normal(size=(50, 3))
        held = rng.random((50, 3)) < 0.4
        r = T.compute_metrics(truth.copy(), truth, held, method="spackle", rho=0.4)
        assert r.mse == 0.0 and r.pcc == pytest.approx(1.0)
        assert r.num_evaluated_entries == int(held.sum())

    def test_constant_mean_predictor_scores_zero(self):
        rng = np.random.default_rng(1)
        truth = rng.normal(size=(40, 2))
        pred = np.tile(truth.mean(axis=0), (40, 1))
        r = T.compute_metrics(pred, truth, np.ones_like(truth, bool), method="median", rho=1.0)
        assert r.per_gene_pcc == [0.0, 0.0] and r.pcc == 0.0

    def test_gene_with_one_entry_excluded(self):
        truth = np.arange(12.0).reshape(6, 2)
        held = np.zeros((6, 2), bool)
        held[:, 0] = True
        held[2, 1] = True
        r = T.compute_metrics(truth, truth, held, method="spackle", rho=0.5)
        assert math.isnan(r.per_gene_pcc[1]) and r.pcc == pytest.approx(1.0)

    def test_no_entries(self):
        with pytest.raises(T.TrainingError):
            T.compute_metrics(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2), bool), method="x", rho=0.1)


@pytest.fixture(scope="module")
def trained(small_completed):
    ds, prov = small_completed
    ck = T.train(ds, prov, ModelConfig(g=ds.g, **SMALL), short_config(batch_size=16, max_iterations=100))
    return ck, ds, prov


class TestEvaluate:
    def test_only_observed_masked_entries_scored(self, trained):
        ck, ds, prov = trained
        case = T.corrupt(ds, prov, 0.3, T.corruption_seed(5, 0.3))
        assert not (case.held_out & ~prov.real).any()
        val = np.zeros(ds.num_spots, bool)
        val[ds.spots_in_split("val")] = True
        assert not case.held_out[~val].any()
        # hidden entries are treated as missing by the re-run median completion
        assert np.array_equal(case.provenance.real, prov.real & ~case.held_out)

    def test_report_fields(self, trained):
        ck, ds, prov = trained
        r = T.evaluate(ck, ds, prov, 0.3, seed=5)
        m = T.evaluate(ck, ds, prov, 0.3, seed=5, method="median")
        assert r.num_evaluated_entries == m.num_evaluated_entries > 0
        assert r.mask_checksum == m.mask_checksum
        assert len(r.per_gene_pcc) == ds.g and math.isfinite(r.mse)

    def test_kept_entries_pass_through(self, trained):
        ck, ds, prov = trained
        spots = ds.spots_in_split("val")
        out = T.model_complete(ck, ds, prov.real, spots)
        keep = prov.real[spots]
        assert np.array_equal(out[keep], ds.expression[spots][keep])

    def test_invalid_rho(self, trained):
        ck, ds, prov = trained
        for rho in (0.0, 1.2):
            with pytest.raises(ValueError):
                T.evaluate(ck, ds, prov, rho, seed=0)

    def test_sweep_shares_masks(self, trained, tmp_path):
        ck, ds, prov = trained
        rhos = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]
        pairs = T.corruption_sweep(ck, ds, prov, rhos, seed=2)
        assert [p[0].rho for p in pairs] == rhos
        for s, m in pairs:
            assert (s.method, m.method) == ("spackle", "median")
            assert s.mask_checksum == m.mask_checksum
            assert s.num_evaluated_entries == m.num_evaluated_entries
        T.write_sweep_tsv(pairs, tmp_path / "sweep.tsv")
        lines = (tmp_path / "sweep.tsv").read_text().splitlines()
        assert lines[0] == "rho\tmethod\tmse\tpcc\tn_entries" and len(lines) == 15
        single = T.corruption_sweep(ck, ds, prov, [0.3], seed=2)
        assert len(single) == 1
        with pytest.raises(ValueError):
            T.corruption_sweep(ck, ds, prov, [], seed=2)

    def test_complete_dataset(self, trained):
        ck, ds, prov = trained
        out, new_prov = T.complete_dataset(ck, ds, prov)
        assert out.completion == "model"
        assert np.array_equal(out.expression[prov.real], ds.expression[prov.real])
        assert (new_prov.source[~prov.real] == T.Source.MODEL).all()
        assert np.array_equal(new_prov.real, prov.real)


class TestLrSearch:
    def test_grid(self, twenty_spots):
        ds, prov = twenty_spots
        best, rows = T.lr_search(ds, prov, ModelConfig(g=4, **SMALL), short_config(), [1e-2, 1e-3, 1e-4],
                                 budget=100)
        assert len(rows) == 3
        assert best == min(rows, key=lambda r: r.val_mse).learning_rate

    def test_singleton(self, twenty_spots):
        ds, prov = twenty_spots
        best, rows = T.lr_search(ds, prov, ModelConfig(g=4, **SMALL), short_config(), [3e-3], budget=20)
        assert best == 3e-3 and len(rows) == 1

    def test_diverged_excluded(self, twenty_spots):
        ds, prov = twenty_spots
        best, rows = T.lr_search(ds, prov, ModelConfig(g=4, **SMALL), short_config(), [1e2, 1e-3], budget=50)
        assert rows[0].diverged and not rows[1].diverged
        assert best == 1e-3

    def test_all_diverge(self, twenty_spots):
        ds, prov = twenty_spots
        with pytest.raises(T.TrainingError):
            T.lr_search(ds, prov, ModelConfig(g=4, **SMALL), short_config(), [1e2], budget=50)
        with pytest.raises(ValueError):
            T.lr_search(ds, prov, ModelConfig(g=4, **SMALL), short_config(), [], budget=50)

    def test_tie_prefers_smaller_rate(self, twenty_spots):
        ds, prov = twenty_spots
        # zero budget: every rate returns the untrained validation MSE
        best, rows = T.lr_search(ds, prov, ModelConfig(g=4, **SMALL), short_config(), [1e-2, 1e-4, 1e-3],
                                 budget=0)
        assert len({r.val_mse for r in rows}) == 1
        assert best == 1e-4
