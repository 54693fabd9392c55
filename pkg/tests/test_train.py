import warnings

import numpy as np
import pytest

from gcmae.config import TrainConfig
from gcmae.graph import SbmSpec, generate_sbm
from gcmae.model import init_params
from gcmae.training import (NumericError, adam_step, parse_trace, train,
                            save_checkpoint, load_checkpoint)


def quick_cfg(**kv):
    base = dict(d_hidden=8, d_proj=8, depth=2, epochs=6, block_size=32,
                probe_every=0, seed=0)
    base.update(kv)
    return TrainConfig(**base).validate()


def quick_ds(seed=0, n=20):
    return generate_sbm(SbmSpec(blocks=2, nodes_per_block=n, p_in=0.3,
                                p_out=0.05, feature_dim=6, seed=seed))


class TestTrainLoop:
    def test_zero_epochs_returns_init(self):
        ds = quick_ds()
        cfg = quick_cfg(epochs=0)
        params, trace = train(ds, cfg)
        fresh = init_params(cfg, ds.feature_dim)
        assert not trace.entries
        for name in fresh.names():
            assert np.array_equal(params[name].values, fresh[name].values)

    def test_bitwise_deterministic(self, tmp_path):
        ds = quick_ds()
        cfg = quick_cfg(epochs=5, probe_every=2, probe_sample_size=8)
        run1 = train(ds, cfg)
        run2 = train(ds, cfg)
        assert run1[1].serialize() == run2[1].serialize()
        p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        save_checkpoint(run1[0], p1)
        save_checkpoint(run2[0], p2)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_loss_decreases_over_training(self):
        ds = quick_ds(n=40)
        cfg = quick_cfg(epochs=50, d_hidden=16, d_proj=16)
        _, trace = train(ds, cfg)
        first = trace.entries[0].breakdown.sce
        last = trace.entries[-1].breakdown.sce
        assert last < first

    def test_mode_ablation_zeroing(self):
        ds = quick_ds()
        _, trace = train(ds, quick_cfg(encoder_mode="mae_only", alpha=0.0))
        assert all(e.breakdown.contrastive == 0.0 for e in trace.entries)
        _, trace = train(ds, quick_cfg(encoder_mode="contrastive_only", lambda_=0.0))
        assert all(e.breakdown.sce == 0.0 for e in trace.entries)
        assert all(e.breakdown.structure_total == 0.0 for e in trace.entries)

    def test_trace_total_is_weighted_sum(self):
        ds = quick_ds()
        cfg = quick_cfg(epochs=4, alpha=0.4, lambda_=0.6, mu=0.2)
        _, trace = train(ds, cfg)
        for e in trace.entries:
            b = e.breakdown
            recompute = (b.sce + cfg.alpha * b.contrastive
                         + cfg.lambda_ * b.structure_total + cfg.mu * b.variance)
            assert b.total == pytest.approx(recompute, rel=1e-5, abs=1e-6)

    def test_nonfinite_loss_aborts_with_epoch(self):
        ds = quick_ds()
        cfg = quick_cfg(lr=1e30, epochs=5)  # first step blows the weights up
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            with pytest.raises(NumericError, match="epoch"):
                train(ds, cfg)

    def test_extreme_temperature_stays_finite(self):
        # log-sum-exp with the diagonal masked before exponentiation cannot
        # overflow at any temperature
        ds = quick_ds()
        _, trace = train(ds, quick_cfg(tau=1e-8, epochs=2))
        assert all(np.isfinite(e.breakdown.total) for e in trace.entries)

    def test_probe_recorded_on_schedule(self):
        # a ring is deep enough for the 5-hop probe
        from gcmae.graph import Dataset, SparseGraph
        n = 24
        g = SparseGraph.from_edges(n, [(i, (i + 1) % n) for i in range(n)])
        rng = np.random.default_rng(0)
        ds = Dataset(g, rng.normal(size=(n, 6)).astype(np.float32))
        cfg = quick_cfg(epochs=6, probe_every=3, probe_sample_size=8)
        _, trace = train(ds, cfg)
        probed = [e.epoch for e in trace.entries if e.probe is not None]
        assert probed == [2, 5]

    def test_probe_skipped_on_shallow_graph(self):
        ds = quick_ds(n=20)  # dense 40-node SBM: no 5-hop pairs
        cfg = quick_cfg(epochs=3, probe_every=1, probe_sample_size=8)
        _, trace = train(ds, cfg)
        assert all(e.probe is None for e in trace.entries)


class TestTraceSerialization:
    def test_round_trip_exact(self):
        ds = quick_ds()
        _, trace = train(ds, quick_cfg(epochs=4, probe_every=2, probe_sample_size=4))
        text = trace.serialize()
        again = parse_trace(text)
        assert again.serialize() == text
        assert [e.epoch for e in again.entries] == [0, 1, 2, 3]

    def test_column_layout(self):
        ds = quick_ds()
        _, trace = train(ds, quick_cfg(epochs=1))
        line = trace.serialize().splitlines()[0]
        parts = line.split("\t")
        assert len(parts) == 10
        assert parts[0] == "0"
        assert parts[8] == "-" and parts[9] == "-"

    def test_timing_column_opt_in(self):
        ds = quick_ds()
        _, trace = train(ds, quick_cfg(epochs=1))
        line = trace.serialize(include_timing=True).splitlines()[0]
        assert line.split("\t")[9] != "-"


class TestAdamStep:
    def make_params(self):
        cfg = quick_cfg()
        return init_params(cfg, feature_dim=4)

    def test_zero_grad_zero_decay_is_identity(self):
        params = self.make_params()
        before = {n: params[n].values.copy() for n in params.names()}
        adam_step(params, {}, lr=0.01, weight_decay=0.0, t=1)
        for name in params.names():
            assert np.array_equal(params[name].values, before[name])

    def test_first_step_is_signlike(self):
        params = self.make_params()
        name = "enc.0.w"
        g = np.random.default_rng(0).normal(size=params[name].shape).astype(np.float32)
        g[np.abs(g) < 0.1] = 0.5
        before = params[name].values.copy()
        adam_step(params, {name: g}, lr=0.01, weight_decay=0.0, t=1)
        delta = params[name].values - before
        # bias correction makes m_hat/(sqrt(v_hat)+eps) ~ sign(g) at step 1
        assert np.allclose(delta, -0.01 * np.sign(g), atol=1e-4)

    def test_quadratic_descent(self):
        cfg = quick_cfg()
        params = init_params(cfg, feature_dim=4)
        name = "dec.w"
        values = [float((params[name].values ** 2).sum())]
        for t in range(1, 11):
            g = 2.0 * params[name].values
            adam_step(params, {name: g}, lr=0.05, weight_decay=0.0, t=t)
            values.append(float((params[name].values ** 2).sum()))
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_decay_shrinks_before_update(self):
        params = self.make_params()
        name = "enc.0.w"
        before = params[name].values.copy()
        adam_step(params, {name: np.zeros_like(before)}, lr=0.1, weight_decay=0.5, t=1)
        assert np.allclose(params[name].values, before * (1 - 0.1 * 0.5), rtol=1e-6)

    def test_grad_shape_mismatch(self):
        from gcmae.tensor import ShapeError
        params = self.make_params()
        with pytest.raises(ShapeError):
            adam_step(params, {"enc.0.w": np.zeros((2, 2), dtype=np.float32)},
                      lr=0.01, weight_decay=0.0, t=1)

    def test_weight_decay_off_matches_textbook_adam(self):
        a = self.make_params()
        b = self.make_params()
        rng = np.random.default_rng(1)
        for t in range(1, 4):
            grads = {n: rng.normal(size=a[n].shape).astype(np.float32)
                     for n in a.names()}
            adam_step(a, grads, lr=0.01, weight_decay=0.0, t=t)
            # textbook reference computed separately
            for name in b.names():
                g = grads[name].astype(np.float64)
                m = 0.9 * b.adam_m[name].astype(np.float64) + 0.1 * g
                v = 0.999 * b.adam_v[name].astype(np.float64) + 0.001 * g * g
                b.adam_m[name] = m.astype(np.float32)
                b.adam_v[name] = v.astype(np.float32)
                m_hat = b.adam_m[name].astype(np.float64) / (1 - 0.9 ** t)
                v_hat = b.adam_v[name].astype(np.float64) / (1 - 0.999 ** t)
                b[name].values = (b[name].values.astype(np.float64)
                                  - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8)).astype(np.float32)
        for name in a.names():
            assert np.array_equal(a[name].values, b[name].values)


class TestCheckpointThroughTraining:
    def test_trained_params_round_trip(self, tmp_path):
        ds = quick_ds()
        params, _ = train(ds, quick_cfg(epochs=3))
        path = str(tmp_path / "t.ckpt")
        save_checkpoint(params, path)
        loaded = load_checkpoint(path)
        assert loaded.step == 3
        for name in params.names():
            assert np.array_equal(loaded[name].values, params[name].values)
