import numpy as np
import pytest

import imtscast.tape as T
from imtscast.config import TrainConfig
from imtscast.data import AlignedTriplet, align, normalize_times
from imtscast.fourier import irfft_mat, rfft_mat
from imtscast.model import (
    ModelParams,
    attention_block,
    attention_maps,
    conv_smooth,
    encode_series,
    expected_param_count,
    forward,
    linear_attention,
    pool_all,
    pool_coefficients,
    pool_summary,
    rff_features,
    time_encode,
)
from imtscast.tape import Tape

from conftest import random_sample


def bound_params(model, tape):
    return model.bind(tape)


def make_te_params(tape, d_te, w_p=None, zero=False):
    n_sin = (d_te - 1) // 2
    n_cos = d_te - 1 - n_sin
    rng = np.random.default_rng(0)

    def arr(shape, fan):
        if zero:
            return np.zeros(shape)
        return rng.uniform(-1, 1, size=shape) / np.sqrt(fan)

    return {
        "te.w_s": tape.const(arr((1, 1), 1)),
        "te.b_s": tape.const(np.zeros((1, 1))),
        "te.w_p": tape.const(w_p if w_p is not None else arr((1, n_sin), 1)),
        "te.b_p": tape.const(np.zeros((1, n_sin))),
        "te.w_c": tape.const(arr((1, n_cos), 1)),
        "te.b_c": tape.const(np.zeros((1, n_cos))),
    }


class TestTimeEncoding:
    def test_zero_time_zero_biases(self):
        tape = Tape()
        p = make_te_params(tape, d_te=7)
        out = time_encode(tape.const([[0.0]]), p).data[0]
        n_sin = 3
        assert out[0] == 0.0
        assert np.all(out[1 : 1 + n_sin] == 0.0)
        assert np.all(out[1 + n_sin :] == 1.0)

    def test_periodic_branches_bounded(self):
        tape = Tape()
        p = make_te_params(tape, d_te=9)
        t = np.linspace(-50, 50, 101)[:, None]
        out = time_encode(tape.const(t), p).data
        assert np.all(np.abs(out[:, 1:]) <= 1.0)

    def test_quarter_period_sin_entry(self):
        tape = Tape()
        p = make_te_params(tape, d_te=3, w_p=np.array([[np.pi / 2]]))
        out = time_encode(tape.const([[1.0]]), p).data[0]
        assert out[1] == pytest.approx(1.0, abs=1e-12)


class TestConvSmoothing:
    def conv_params(self, tape, channels, zero_bias=True, seed=0):
        rng = np.random.default_rng(seed)
        return {
            "conv.w1": tape.const(rng.standard_normal((channels, 3))),
            "conv.b1": tape.const(np.zeros((channels, 1)) if zero_bias
                                  else rng.standard_normal((channels, 1))),
            "conv.w2": tape.const(rng.standard_normal((1, channels))),
            "conv.b2": tape.const(np.zeros((1, 1)) if zero_bias
                                  else rng.standard_normal((1, 1))),
        }

    def test_zero_input_zero_biases_gives_zero(self):
        tape = Tape()
        p = self.conv_params(tape, channels=4)
        p.update(make_te_params(tape, d_te=5, zero=True))
        p["te.w_t"] = tape.const(np.zeros((5, 1)))
        out = encode_series(tape.const(np.zeros((2, 6))), tape.const(np.zeros((6, 1))), p)
        assert np.all(out.data == 0.0)

    def test_length_one_sees_zero_padding(self):
        tape = Tape()
        p = self.conv_params(tape, channels=3, zero_bias=False, seed=1)
        value = 1.7
        out = conv_smooth(tape.const([[value]]), p).data
        w1 = p["conv.w1"].data
        hidden = np.maximum(w1[:, 1] * value + p["conv.b1"].data[:, 0], 0.0)
        expected = p["conv.w2"].data[0] @ hidden + p["conv.b2"].data[0, 0]
        assert out[0, 0] == pytest.approx(expected, abs=1e-14)

    def test_matches_direct_convolution_sum(self):
        rng = np.random.default_rng(2)
        length, channels = 7, 4
        x = rng.standard_normal((1, length))
        tape = Tape()
        p = self.conv_params(tape, channels, zero_bias=False, seed=3)
        out = conv_smooth(tape.const(x), p).data[0]

        w1, b1 = p["conv.w1"].data, p["conv.b1"].data[:, 0]
        w2, b2 = p["conv.w2"].data[0], p["conv.b2"].data[0, 0]
        padded = np.concatenate([[0.0], x[0], [0.0]])
        expected = np.empty(length)
        for pos in range(length):
            acc = np.zeros(channels)
            for c in range(channels):
                for k in range(3):
                    acc[c] += w1[c, k] * padded[pos + k]
                acc[c] += b1[c]
            expected[pos] = w2 @ np.maximum(acc, 0.0) + b2
        assert np.abs(out - expected).max() < 1e-12

    def test_same_filters_for_every_variate(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((3, 9))
        tape = Tape()
        p = self.conv_params(tape, channels=2, zero_bias=False, seed=5)
        stacked = conv_smooth(tape.const(x), p).data
        for row in range(3):
            single = conv_smooth(tape.const(x[row : row + 1]), p).data
            assert np.abs(stacked[row] - single[0]).max() < 1e-14


def pool_params(tape, k, d=None, seed=0):
    rng = np.random.default_rng(seed)
    p = {
        "pool.centers": tape.const(np.linspace(0, 1, k)[None, :]),
        "pool.log_alpha": tape.const(np.log(rng.uniform(0.2, 1.0, size=(1, k)))),
        "pool.gate": tape.const(rng.standard_normal((1, k))),
    }
    if d is not None:
        p["pool.w_proj"] = tape.const(rng.standard_normal((k + 1, d)))
    return p


class TestKernelPooling:
    def test_single_observed_point_normalizes_each_column(self):
        tape = Tape()
        p = pool_params(tape, k=2)
        coeffs = pool_coefficients(tape.const([[0.3]]), tape.const([[1.0]]), p)
        assert np.allclose(coeffs.data, [[1.0, 1.0]], atol=1e-15)

    def test_masked_rows_contribute_nothing(self):
        tape = Tape()
        p = pool_params(tape, k=3)
        t = np.linspace(0, 1, 5)[:, None]
        mask = np.array([[1.0], [0.0], [1.0], [0.0], [1.0]])
        coeffs = pool_coefficients(tape.const(t), tape.const(mask), p).data
        assert np.all(coeffs[mask[:, 0] == 0.0] == 0.0)

    def test_columns_sum_to_one_and_match_elementwise_oracle(self):
        rng = np.random.default_rng(6)
        tape = Tape()
        k = 4
        p = pool_params(tape, k=k, seed=7)
        t = np.sort(rng.uniform(0, 1, size=11))[:, None]
        mask = (rng.uniform(size=(11, 1)) < 0.6).astype(float)
        mask[3, 0] = 1.0
        coeffs = pool_coefficients(tape.const(t), tape.const(mask), p).data
        assert np.abs(coeffs.sum(axis=0) - 1.0).max() < 1e-12

        centers = p["pool.centers"].data[0]
        sigma = np.exp(p["pool.log_alpha"].data[0])
        expected = np.zeros((11, k))
        for l in range(11):
            for j in range(k):
                expected[l, j] = (
                    np.exp(-0.5 * (t[l, 0] - centers[j]) ** 2 / sigma[j] ** 2) * mask[l, 0]
                )
        expected /= expected.sum(axis=0, keepdims=True)
        assert np.abs(coeffs - expected).max() < 1e-12

    def test_constant_signal_is_a_fixed_point(self):
        # Coefficients are a convex combination over observed rows, so a
        # constant series pools to that constant for every kernel.
        rng = np.random.default_rng(8)
        tape = Tape()
        p = pool_params(tape, k=5, seed=9)
        t = np.sort(rng.uniform(0, 1, size=9))[:, None]
        mask = np.ones((9, 1))
        coeffs = pool_coefficients(tape.const(t), tape.const(mask), p)
        pooled = (coeffs.T @ tape.const(np.full((9, 1), 2.75))).data
        assert np.abs(pooled - 2.75).max() < 1e-12

    def test_empty_variate_flag_and_zero_summary(self):
        tape = Tape()
        k, d = 3, 8
        p = pool_params(tape, k=k, d=d, seed=10)
        t = np.linspace(0, 1, 4)[:, None]
        mask = np.zeros((4, 1))
        coeffs = pool_coefficients(tape.const(t), tape.const(mask), p)
        assert np.all(coeffs.data == 0.0)
        z = pool_summary(tape.const(np.ones((4, 1))), coeffs, tape.const(mask), p)
        assert z.data.shape == (1, d)
        assert np.all(z.data == 0.0)  # zero pooled values, zero flag, no bias

    @pytest.mark.parametrize("length", [1, 10, 100])
    def test_summary_width_independent_of_grid_length(self, length):
        rng = np.random.default_rng(length)
        tape = Tape()
        d = 12
        p = pool_params(tape, k=4, d=d, seed=11)
        t = np.sort(rng.uniform(0, 1, size=length))[:, None]
        mask = np.ones((length, 1))
        coeffs = pool_coefficients(tape.const(t), tape.const(mask), p)
        z = pool_summary(tape.const(rng.standard_normal((length, 1))), coeffs,
                         tape.const(mask), p)
        assert z.data.shape == (1, d)

    def test_summary_matches_double_loop_oracle(self):
        rng = np.random.default_rng(12)
        k, d, length = 8, 32, 13
        tape = Tape()
        p = pool_params(tape, k=k, d=d, seed=13)
        t = np.sort(rng.uniform(0, 1, size=length))[:, None]
        mask = (rng.uniform(size=(length, 1)) < 0.7).astype(float)
        mask[0, 0] = 1.0
        x = rng.standard_normal((length, 1))
        coeffs = pool_coefficients(tape.const(t), tape.const(mask), p)
        z = pool_summary(tape.const(x), coeffs, tape.const(mask), p).data[0]

        a = coeffs.data
        gate = 1.0 / (1.0 + np.exp(-p["pool.gate"].data[0]))
        pooled = np.zeros(k)
        for j in range(k):
            for l in range(length):
                pooled[j] += a[l, j] * x[l, 0]
        gated = np.concatenate([pooled * gate, [1.0]])
        expected = np.zeros(d)
        for col in range(d):
            for j in range(k + 1):
                expected[col] += gated[j] * p["pool.w_proj"].data[j, col]
        assert np.abs(z - expected).max() < 1e-12

    def test_vectorized_pooling_equals_per_variate_composition(self):
        rng = np.random.default_rng(14)
        n, length, k, d = 4, 9, 3, 6
        tape = Tape()
        p = pool_params(tape, k=k, d=d, seed=15)
        xhat = tape.const(rng.standard_normal((n, length)))
        mask_rows = (rng.uniform(size=(n, length)) < 0.6).astype(float)
        mask_rows[2] = 0.0  # one empty variate
        t_cols = np.tile(np.sort(rng.uniform(0, 1, size=length))[:, None], (1, n))
        z_fast = pool_all(xhat, mask_rows, t_cols, True, p).data
        for v in range(n):
            coeffs = pool_coefficients(tape.const(t_cols[:, v : v + 1]),
                                       tape.const(mask_rows[v][:, None]), p)
            z_slow = pool_summary(xhat[v : v + 1, :].T, coeffs,
                                  tape.const(mask_rows[v][:, None]), p).data
            assert np.abs(z_fast[v] - z_slow[0]).max() < 1e-12


class TestRandomFeatures:
    def feature_draw(self, d_h, r, seed=0):
        rng = np.random.default_rng(seed)
        return rng.standard_normal((d_h, r // 2)), rng.uniform(0, 2 * np.pi, (1, r // 2))

    def test_feature_norm_is_exactly_half(self):
        tape = Tape()
        omega, phase = self.feature_draw(6, 32, seed=1)
        x = np.random.default_rng(2).standard_normal((10, 6))
        phi = rff_features(tape.const(x), tape.const(omega), tape.const(phase)).data
        assert np.abs((phi * phi).sum(axis=1) - 0.5).max() < 1e-12

    def test_inner_products_ignore_the_phase_draw(self):
        tape = Tape()
        omega, _ = self.feature_draw(5, 64, seed=3)
        rng = np.random.default_rng(4)
        x, y = rng.standard_normal((1, 5)), rng.standard_normal((1, 5))
        dots = []
        for phase_seed in (5, 6):
            phase = np.random.default_rng(phase_seed).uniform(0, 2 * np.pi, (1, 32))
            px = rff_features(tape.const(x), tape.const(omega), tape.const(phase)).data
            py = rff_features(tape.const(y), tape.const(omega), tape.const(phase)).data
            dots.append((px @ py.T).item())
        assert abs(dots[0] - dots[1]) < 1e-12

    def test_inner_product_equals_cosine_average(self):
        tape = Tape()
        omega, phase = self.feature_draw(4, 16, seed=7)
        rng = np.random.default_rng(8)
        x, y = rng.standard_normal((1, 4)), rng.standard_normal((1, 4))
        px = rff_features(tape.const(x), tape.const(omega), tape.const(phase)).data
        py = rff_features(tape.const(y), tape.const(omega), tape.const(phase)).data
        expected = np.cos((x - y) @ omega).sum() / 16
        assert (px @ py.T).item() == pytest.approx(expected, abs=1e-12)


class TestLinearAttention:
    def draw(self, n, d_h, r, seed):
        rng = np.random.default_rng(seed)
        return (
            rng.standard_normal((n, d_h)),
            rng.standard_normal((n, d_h)),
            rng.standard_normal((n, d_h)),
            rng.standard_normal((d_h, r // 2)),
            rng.uniform(0, 2 * np.pi, (1, r // 2)),
        )

    def test_single_key_returns_its_value(self):
        tape = Tape()
        q, k, v, omega, phase = self.draw(1, 4, 16, seed=0)
        out = linear_attention(tape.const(q), tape.const(k), tape.const(v),
                               tape.const(omega), tape.const(phase)).data
        assert np.abs(out - v).max() < 1e-5  # up to the denominator epsilon

    def test_identical_keys_average_the_values(self):
        tape = Tape()
        q, k, v, omega, phase = self.draw(6, 4, 32, seed=1)
        k_same = np.tile(k[:1], (6, 1))
        out = linear_attention(tape.const(q), tape.const(k_same), tape.const(v),
                               tape.const(omega), tape.const(phase)).data
        assert np.abs(out - v.mean(axis=0)).max() < 1e-5

    def test_linear_order_equals_quadratic_order(self):
        for seed in range(10):
            tape = Tape()
            q, k, v, omega, phase = self.draw(6, 8, 32, seed=seed)
            out = linear_attention(tape.const(q), tape.const(k), tape.const(v),
                                   tape.const(omega), tape.const(phase)).data

            def phi(m):
                proj = m @ omega + phase
                return np.concatenate([np.cos(proj), np.sin(proj)], axis=1) / np.sqrt(32)

            raw = phi(q) @ phi(k).T
            expected = (raw @ v) / (raw.sum(axis=1, keepdims=True) + 1e-6)
            assert np.abs(out - expected).max() < 1e-10

    def test_degenerate_denominator_counted(self):
        tape = Tape()
        q, k, v, omega, phase = self.draw(2, 4, 8, seed=2)
        stats = {}
        linear_attention(tape.const(q), tape.const(np.zeros_like(k) * 0 + 1e9),
                         tape.const(v), tape.const(omega * 0), tape.const(phase * 0),
                         stats=stats)
        assert "degenerate_rows" in stats


def block_config(**kw):
    base = dict(hidden=16, heads=2, rff_dim=16, kernels=2, conv_channels=2,
                time_dim=5, blocks=1, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestAttentionBlock:
    def test_pure_residual_identity(self):
        cfg = block_config()
        model = ModelParams.init(cfg, seed=1)
        model.arrays["blocks.0.wv"][:] = 0.0
        model.arrays["blocks.0.mlp_w2"][:] = 0.0
        tape = Tape()
        p = model.bind(tape)
        z = np.random.default_rng(0).standard_normal((5, cfg.hidden))
        out = attention_block(tape.const(z), 0, p, cfg).data
        assert np.abs(out - z).max() < 1e-12

    @pytest.mark.parametrize("n", [1, 2, 7])
    def test_output_shape_contract(self, n):
        cfg = block_config()
        model = ModelParams.init(cfg, seed=2)
        tape = Tape()
        p = model.bind(tape)
        z = np.random.default_rng(n).standard_normal((n, cfg.hidden))
        assert attention_block(tape.const(z), 0, p, cfg).data.shape == (n, cfg.hidden)

    def test_matches_straight_line_reimplementation(self):
        cfg = block_config(hidden=16, heads=2, rff_dim=16)
        model = ModelParams.init(cfg, seed=3)
        arr = {k.removeprefix("blocks.0."): v for k, v in model.arrays.items()
               if k.startswith("blocks.0.")}
        omega = model.buffers["blocks.0.omega"]
        phase = model.buffers["blocks.0.phase"]
        rng = np.random.default_rng(4)
        z = rng.standard_normal((5, 16))

        tape = Tape()
        out = attention_block(tape.const(z), 0, model.bind(tape), cfg).data

        def ln(m):
            mu = m.mean(axis=-1, keepdims=True)
            xc = m - mu
            var = (xc * xc).mean(axis=-1, keepdims=True)
            return xc / np.sqrt(var + 1e-5)

        normed = ln(z) * arr["ln1_g"] + arr["ln1_b"]
        coeff = rfft_mat(normed)
        qa, ka, va = coeff @ arr["wq"], coeff @ arr["wk"], coeff @ arr["wv"]
        heads = []
        for h in range(2):
            sl = slice(h * 8, (h + 1) * 8)
            q, k, v = qa[:, sl], ka[:, sl], va[:, sl]

            def phi(m):
                proj = m @ omega + phase
                return np.concatenate([np.cos(proj), np.sin(proj)], 1) / 4.0

            pq, pk = phi(q), phi(k)
            num = pq @ (pk.T @ v)
            den = pq @ pk.sum(axis=0)[:, None]
            heads.append(num / (den + 1e-6))
        u = z + irfft_mat(np.concatenate(heads, axis=1))
        normed2 = ln(u) * arr["ln2_g"] + arr["ln2_b"]
        mlp = np.maximum(normed2 @ arr["mlp_w1"] + arr["mlp_b1"], 0.0) @ arr["mlp_w2"] + arr["mlp_b2"]
        expected = u + mlp
        assert np.abs(out - expected).max() < 1e-10


class TestForward:
    def sample_and_model(self, seed=0, n_variates=3, **cfg_kw):
        rng = np.random.default_rng(seed)
        sample = random_sample(rng, max_variates=n_variates, allow_empty_variates=False)
        cfg = block_config(**cfg_kw)
        return sample, ModelParams.init(cfg, seed=seed)

    def test_deterministic_bitwise(self):
        sample, model = self.sample_and_model(seed=5)
        triplet = align(sample)
        a = forward(Tape(), model, triplet, sample.query_times).predictions.data
        b = forward(Tape(), model, triplet, sample.query_times).predictions.data
        assert np.array_equal(a, b)
        assert np.isfinite(a).all()

    def test_variate_permutation_equivariance(self):
        rng = np.random.default_rng(6)
        n = 5
        length = 12
        times = np.sort(rng.uniform(0, 1, size=length))
        values = rng.standard_normal((length, n))
        mask = (rng.uniform(size=(length, n)) < 0.7).astype(float)
        values *= mask
        triplet = AlignedTriplet(times=times, values=values, mask=mask)
        queries = [np.sort(rng.uniform(1.0, 1.5, size=2)) for _ in range(n)]
        cfg = block_config()
        model = ModelParams.init(cfg, seed=7)

        base = forward(Tape(), model, triplet, queries)
        perm = np.random.default_rng(8).permutation(n)
        permuted = AlignedTriplet(times=times, values=values[:, perm], mask=mask[:, perm])
        out = forward(Tape(), model, permuted, [queries[i] for i in perm])

        base_by_var = base.per_variate()
        perm_by_var = out.per_variate()
        for new_col, old_col in enumerate(perm):
            assert np.abs(perm_by_var[new_col] - base_by_var[old_col]).max() < 1e-10

    def test_zero_parameters_collapse_to_head_bias(self):
        sample, model = self.sample_and_model(seed=9)
        for arr in model.arrays.values():
            arr[:] = 0.0
        model.arrays["head.b3"][:] = 0.625
        res = forward(Tape(), model, align(sample), sample.query_times)
        assert np.all(res.predictions.data == 0.625)

    def test_queries_map_back_to_variates(self):
        sample, model = self.sample_and_model(seed=10)
        res = forward(Tape(), model, align(sample), sample.query_times)
        assert res.counts == [q.size for q in sample.query_times]
        assert res.variate_index.size == sum(res.counts)

    def test_full_model_gradients(self, tiny_config):
        from imtscast.datasets import SynthSpec, generate
        from imtscast.tape import grad_check
        from imtscast.train import build_loss

        spec = SynthSpec(n_variates=3, n_samples=1, mean_observations=4.0,
                         queries_per_variate=2, seed=21, noise_std=0.1)
        sample = generate(spec)[0]
        triplet = align(sample)
        cfg = block_config(blocks=1)
        model = ModelParams.init(cfg, seed=11)
        targets = np.concatenate(sample.query_targets)

        def build(tape, bound):
            res = forward(tape, model, triplet, sample.query_times, bound=bound)
            return build_loss(res, targets)

        report = grad_check(build, model.arrays, step=1e-4, tol=1e-4)
        assert report.ok, "\n".join(report.lines())


class TestModelParams:
    @pytest.mark.parametrize("cfg_kw", [
        dict(),
        dict(hidden=32, heads=4, rff_dim=64, kernels=8, conv_channels=16, time_dim=16),
        dict(blocks=3, hidden=8, heads=2, rff_dim=8, kernels=2, conv_channels=2, time_dim=4),
    ])
    def test_param_count_matches_closed_form(self, cfg_kw):
        cfg = block_config(**cfg_kw)
        model = ModelParams.init(cfg)
        assert model.param_count() == expected_param_count(cfg)

    def test_serialization_round_trips_bitwise(self, tmp_path):
        cfg = block_config()
        model = ModelParams.init(cfg, seed=13)
        path = tmp_path / "ck.json"
        model.save(path)
        loaded = ModelParams.load(path)
        assert set(loaded.arrays) == set(model.arrays)
        for name in model.arrays:
            assert np.array_equal(loaded.arrays[name], model.arrays[name])
        for name in model.buffers:
            assert np.array_equal(loaded.buffers[name], model.buffers[name])
        assert loaded.cfg == cfg
        # And the reloaded model predicts bitwise identically.
        rng = np.random.default_rng(14)
        sample = random_sample(rng, allow_empty_variates=False)
        triplet = align(sample)
        a = forward(Tape(), model, triplet, sample.query_times).predictions.data
        b = forward(Tape(), loaded, triplet, sample.query_times).predictions.data
        assert np.array_equal(a, b)

    def test_frozen_feature_draws_are_standard_normal_scale(self):
        cfg = block_config(rff_dim=512, hidden=32, heads=2)
        model = ModelParams.init(cfg, seed=15)
        omega = model.buffers["blocks.0.omega"]
        assert abs(omega.std() - 1.0) < 0.05
        phase = model.buffers["blocks.0.phase"]
        assert 0.0 <= phase.min() and phase.max() < 2 * np.pi


class TestAttentionMaps:
    def test_maps_normalized_and_consistent_with_linear_path(self):
        cfg = block_config(blocks=2)
        model = ModelParams.init(cfg, seed=16)
        rng = np.random.default_rng(17)
        sample = random_sample(rng, max_variates=6, allow_empty_variates=False)
        maps = attention_maps(model, align(sample), sample.query_times)
        assert len(maps) == cfg.blocks * cfg.heads
        for amap in maps:
            if amap.degenerate_rows == 0:
                assert np.abs(amap.weights.sum(axis=1) - 1.0).max() < 1e-8
            assert np.abs(amap.quadratic_out - amap.linear_out).max() < 1e-10
