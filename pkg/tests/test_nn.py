import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import central_difference, numpy_mlp, random_mlp_case, relative_error
from offline_pretrain.nn import (GaussianPolicyHead, MLPConfig, Network, OptimizerState,
                                 ParamTree, StaleTapeError, Tape, adam_step, apply_mlp, backward,
                                 forward, init_mlp, input_gradient, layernorm, load_checkpoint,
                                 polyak_update, sample_squashed_gaussian, save_checkpoint,
                                 squashed_log_prob)
from offline_pretrain.nn import autograd as ag
from offline_pretrain.nn.policy import log_prob, rsample, split_head


class TestForward:
    def test_zero_network(self):
        cfg = MLPConfig(3, (4,), 2)
        p = init_mlp(cfg, np.random.default_rng(0))
        for k in p:
            p[k][...] = 0.0
        assert np.array_equal(forward(p, cfg, np.ones(3))[0], np.zeros(2))

    def test_identity_layer(self):
        cfg = MLPConfig(3, (3,), 3, layernorm=False)
        p = init_mlp(cfg, np.random.default_rng(0))
        p["W0"][...] = np.eye(3)
        p["b0"][...] = 0
        p["W1"][...] = np.eye(3)
        p["b1"][...] = 0
        x = np.array([0.5, 1.0, 2.0])  # positive, so the ReLU passes it through
        np.testing.assert_array_equal(forward(p, cfg, x)[0], x)

    def test_deterministic(self):
        cfg, p, x, _ = random_mlp_case(np.random.default_rng(1))
        a, b = forward(p, cfg, x)[0], forward(p, cfg, x)[0]
        assert np.array_equal(a, b)

    def test_matches_numpy_reference(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            cfg, p, x, _ = random_mlp_case(rng)
            np.testing.assert_allclose(forward(p, cfg, x)[0], numpy_mlp(p, cfg, x), atol=1e-12)

    def test_shape_mismatch(self):
        cfg = MLPConfig(3, (4,), 1)
        with pytest.raises(ValueError):
            forward(init_mlp(cfg, np.random.default_rng(0)), cfg, np.ones(4))

    def test_empty_hidden(self):
        with pytest.raises(ValueError):
            MLPConfig(3, (), 1)

    def test_layernorm_placement(self):
        p = init_mlp(MLPConfig(3, (4, 5), 2), np.random.default_rng(0))
        assert {"g0", "g1", "beta0", "beta1"} <= set(p) and "g2" not in p


class TestLayerNorm:
    def test_example(self):
        np.testing.assert_allclose(layernorm([1, 2, 3], eps=0.0), [-1.22474487, 0, 1.22474487],
                                   atol=1e-6)

    def test_constant(self):
        assert np.array_equal(layernorm(np.full(5, 3.3), eps=1e-5), np.zeros(5))

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=20).filter(
        lambda v: np.std(v) > 1e-3))
    def test_moments(self, v):
        y = layernorm(v, eps=0.0)
        assert abs(y.mean()) < 1e-6 and abs(y.var() - 1) < 1e-6

    def test_hidden_layers_normalised(self):
        rng = np.random.default_rng(3)
        cfg = MLPConfig(4, (8, 6), 2, ln_eps=1e-12)
        tape = Tape()
        keep = []
        apply_mlp(tape.constants(init_mlp(cfg, rng)), cfg, tape.const(rng.normal(size=(5, 4))),
                  keep=keep)
        for _, n in keep:
            np.testing.assert_allclose(n.data.mean(-1), 0, atol=1e-6)
            np.testing.assert_allclose(n.data.var(-1), 1, atol=1e-6)

    def test_shift_invariant_gradient(self):
        rng = np.random.default_rng(4)
        tape = Tape()
        x = tape.variable(rng.normal(size=(1, 6)))
        g = tape.const(rng.normal(size=(1, 6)))
        out = ag.layernorm(x, g, tape.const(np.zeros((1, 6))))
        tape.backward(out, rng.normal(size=(1, 6)), leaves=[x])
        assert abs(tape.grad(x).sum()) < 1e-10


class TestBackward:
    def test_square(self):
        tape = Tape()
        w = tape.variable(3.0)
        tape.backward(ag.square(w), leaves=[w])
        assert tape.grad(w) == 6.0

    def test_stale_tape(self):
        cfg = MLPConfig(2, (3,), 1)
        p = init_mlp(cfg, np.random.default_rng(0))
        y, tape = forward(p, cfg, np.ones(2))
        polyak_update(p, p.copy(), 0.5)
        with pytest.raises(StaleTapeError):
            backward(tape, np.ones(1))

    @pytest.mark.parametrize("seed", range(10))
    def test_gradient_check(self, seed):
        cfg, p, x, up = random_mlp_case(np.random.default_rng(seed))
        _, tape = forward(p, cfg, x)
        grads = backward(tape, up)
        fd = central_difference(lambda: float((numpy_mlp(p, cfg, x) * up).sum()), p)
        for k in p:
            assert grads[k].shape == p[k].shape
            assert relative_error(grads[k], fd[k]) <= 1e-4, k

    @pytest.mark.parametrize("seed", range(5))
    def test_input_gradient(self, seed):
        cfg, p, x, up = random_mlp_case(np.random.default_rng(100 + seed))
        tape = Tape()
        g = input_gradient(tape.constants(p), cfg, tape.const(x), up).data
        g = g.sum(0) if cfg.ensemble_size else g
        xv = ParamTree(x=x.copy())
        fd = central_difference(lambda: float((numpy_mlp(p, cfg, xv["x"]) * up).sum()), xv)["x"]
        assert relative_error(g, fd) <= 1e-4

    def test_input_gradient_is_differentiable(self):
        # d/dW of sum(dy/dx) for a one-hidden-layer net, checked by finite differences
        rng = np.random.default_rng(7)
        cfg = MLPConfig(3, (5,), 1)
        p = init_mlp(cfg, rng)
        p["g0"] += rng.normal(0, 0.3, p["g0"].shape)
        x = rng.normal(size=(4, 3))

        def value(params):
            tape = Tape()
            return tape, tape.watch(params), input_gradient

        tape = Tape()
        leaves = tape.watch(p)
        gx = input_gradient(leaves, cfg, tape.const(x), np.ones((4, 1)))
        loss = ag.tsum(ag.square(gx))
        tape.backward(loss)
        grads = tape.grads_for(p)

        def f():
            t = Tape()
            return float((input_gradient(t.constants(p), cfg, t.const(x), np.ones((4, 1))).data ** 2).sum())

        fd = central_difference(f, p)
        for k in p:
            assert relative_error(grads[k], fd[k], floor=1e-5) <= 1e-4, k

    @pytest.mark.parametrize("op", ["tanh", "exp", "softplus", "logsumexp", "min_over", "div",
                                    "concat", "getitem", "abs_", "log"])
    def test_elementwise_ops(self, op):
        rng = np.random.default_rng(5)
        x0 = rng.uniform(0.2, 2.0, size=(3, 4))
        y0 = rng.uniform(0.5, 1.5, size=(3, 4))
        build = {
            "tanh": lambda x, y: ag.tanh(x * y),
            "exp": lambda x, y: ag.exp(x) * y,
            "softplus": lambda x, y: ag.softplus(x - y),
            "logsumexp": lambda x, y: ag.logsumexp(x * y, axis=-1),
            "min_over": lambda x, y: ag.min_over(x * y, axis=0),
            "div": lambda x, y: x / y,
            "concat": lambda x, y: ag.concat([x, y * x], axis=-1),
            "getitem": lambda x, y: x[:, 1:3] * y[:, :2],
            "abs_": lambda x, y: ag.abs_(x - y),
            "log": lambda x, y: ag.log(x + y),
        }[op]
        tape = Tape()
        xs = ParamTree(x=x0, y=y0)
        leaves = tape.watch(xs)
        out = build(leaves["x"], leaves["y"])
        up = rng.normal(size=out.shape)
        tape.backward(out, up)
        grads = tape.grads_for(xs)

        def f():
            t = Tape()
            c = t.constants(xs)
            return float((build(c["x"], c["y"]).data * up).sum())

        fd = central_difference(f, xs)
        for k in xs:
            assert relative_error(grads[k], fd[k]) <= 1e-6

    def test_determinism(self):
        cfg, p, x, up = random_mlp_case(np.random.default_rng(11))
        g1 = backward(forward(p, cfg, x)[1], up)
        g2 = backward(forward(p, cfg, x)[1], up)
        for k in p:
            assert np.array_equal(g1[k], g2[k])


class TestAdam:
    def test_first_step_is_sign(self):
        p = ParamTree(w=np.array([1.0, -2.0, 3.0]))
        st_ = OptimizerState.for_params(p, learning_rate=0.1)
        adam_step(st_, p, {"w": np.array([0.5, -4.0, 0.0])})
        np.testing.assert_allclose(p["w"], [0.9, -1.9, 3.0], atol=1e-6)

    def test_zero_gradient(self):
        p = ParamTree(w=np.array([1.0, 2.0]))
        adam_step(OptimizerState.for_params(p), p, {"w": np.zeros(2)})
        assert p["w"].tolist() == [1.0, 2.0]

    def test_reduces_quadratic(self):
        p = ParamTree(w=np.array([2.0]))
        st_ = OptimizerState.for_params(p, learning_rate=0.1)
        losses = []
        for _ in range(3):
            losses.append(float(p["w"][0] ** 2))
            adam_step(st_, p, {"w": 2 * p["w"]})
        assert losses[2] < losses[1] < losses[0]

    def test_non_finite_names_leaf(self):
        p = ParamTree(a=np.zeros(2), b=np.zeros(2))
        with pytest.raises(FloatingPointError, match="'b'"):
            adam_step(OptimizerState.for_params(p), p, {"a": np.zeros(2), "b": np.array([1, np.nan])})
        assert p["a"].tolist() == [0, 0]

    def test_step_count(self):
        p = ParamTree(w=np.zeros(1))
        s = OptimizerState.for_params(p)
        for i in range(3):
            adam_step(s, p, {"w": np.ones(1)})
            assert s.step == i + 1


class TestPolyak:
    def test_examples(self):
        t = ParamTree(w=np.zeros(2))
        polyak_update(t, ParamTree(w=np.ones(2)), 0.9)
        np.testing.assert_allclose(t["w"], 0.1)
        t = ParamTree(w=np.zeros(2))
        polyak_update(t, ParamTree(w=np.ones(2)), 1.0)
        assert t["w"].tolist() == [0, 0]
        polyak_update(t, ParamTree(w=np.ones(2)), 0.0)
        assert t["w"].tolist() == [1, 1]

    @given(st.floats(0, 1), st.integers(0, 1000))
    def test_between_inputs(self, tau, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=5), rng.normal(size=5)
        t = ParamTree(w=a.copy())
        polyak_update(t, ParamTree(w=b), tau)
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        assert np.all(t["w"] >= lo - 1e-12) and np.all(t["w"] <= hi + 1e-12)
        np.testing.assert_allclose(t["w"], tau * a + (1 - tau) * b, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            polyak_update(ParamTree(w=np.zeros(2)), ParamTree(w=np.zeros(3)), 0.5)

    def test_tau_range(self):
        with pytest.raises(ValueError):
            polyak_update(ParamTree(w=np.zeros(2)), ParamTree(w=np.zeros(2)), 1.5)


class TestPolicyHead:
    def test_small_std_limit(self):
        head = GaussianPolicyHead(np.array([0.3, -1.0]), np.full(2, -5.0))
        a, _ = sample_squashed_gaussian(head, seed=0)
        np.testing.assert_allclose(a, np.tanh(head.mean), atol=0.05)

    def test_clamp(self):
        head = GaussianPolicyHead(np.zeros(2), np.array([-20.0, 20.0]))
        assert head.log_std.tolist() == [-5.0, 2.0]

    def test_bounds_and_seed(self):
        head = GaussianPolicyHead(np.zeros((1000, 3)), np.full((1000, 3), 2.0))
        a, lp = sample_squashed_gaussian(head, seed=4)
        b, lp2 = sample_squashed_gaussian(head, seed=4)
        assert np.array_equal(a, b) and np.array_equal(lp, lp2)
        assert np.all(np.abs(a) < 1.0)

    def test_density_matches_samples(self):
        head = GaussianPolicyHead(np.full((1_000_000, 1), 0.4), np.full((1_000_000, 1), -0.5))
        a, _ = sample_squashed_gaussian(head, seed=0)
        a = a[:, 0]
        h = 0.01
        for x in (-0.2, 0.1, 0.4, 0.7):
            empirical = np.mean(np.abs(a - x) < h) / (2 * h)
            density = np.exp(squashed_log_prob(GaussianPolicyHead([0.4], [-0.5]), [x]))
            assert abs(empirical / density - 1) < 0.05

    def test_log_prob_consistent(self):
        head = GaussianPolicyHead(np.array([[0.2, -0.3]]), np.array([[-1.0, 0.5]]))
        a, lp = sample_squashed_gaussian(head, seed=3)
        np.testing.assert_allclose(squashed_log_prob(head, a), lp, atol=1e-8)

    def test_tape_versions_match(self):
        rng = np.random.default_rng(0)
        out = rng.normal(size=(6, 4))
        noise = rng.standard_normal((6, 2))
        tape = Tape()
        mean, log_std = split_head(tape.const(out), 2)
        a, lp = rsample(mean, log_std, noise)
        head = GaussianPolicyHead(mean.data, log_std.data)
        np.testing.assert_allclose(lp.data, squashed_log_prob(head, a.data), atol=1e-6)
        np.testing.assert_allclose(log_prob(mean, log_std, a.data).data, lp.data, atol=1e-6)


def test_checkpoint_roundtrip(tmp_path):
    cfg = MLPConfig(3, (4, 4), 2, ensemble_size=2)
    p = init_mlp(cfg, np.random.default_rng(0))
    opt = OptimizerState.for_params(p)
    adam_step(opt, p, {k: np.ones_like(v) for k, v in p.items()})
    cfg2, p2, opt2 = load_checkpoint(save_checkpoint(tmp_path / "c.json", cfg, p, opt))
    assert cfg2 == cfg and opt2.step == 1
    for k in p:
        assert np.array_equal(p[k], p2[k])
    x = np.ones((2, 3))
    assert np.array_equal(Network(cfg, p)(x), Network(cfg2, p2)(x))


def test_checkpoint_rejects_bad_shapes(tmp_path):
    cfg = MLPConfig(3, (4,), 1)
    p = init_mlp(cfg, np.random.default_rng(0))
    p["W0"] = np.zeros((2, 4))
    path = save_checkpoint(tmp_path / "c.json", cfg, p)
    with pytest.raises(ValueError):
        load_checkpoint(path)
