"""Optimizer: closed-form single steps, decay decoupling, clipping, grad_check."""
import numpy as np
import pytest

from toksep import optim
from toksep.tensor import NonFiniteError, Tensor, tsum, mul, pow_const


def params_with_grad(values, grads):
    out = {}
    for name, (val, g) in zip(("a", "b"), zip(values, grads)):
        p = Tensor(np.asarray(val, dtype=float), requires_grad=True)
        p.grad = np.asarray(g, dtype=float)
        out[name] = p
    return out


class TestAdamWUpdate:
    def test_decay_only_step(self):
        theta = np.array([2.0, -3.0])
        new, m, v = optim.adamw_update(theta, np.zeros(2), np.zeros(2), np.zeros(2),
                                       step=1, lr=0.1, beta1=0.9, beta2=0.999,
                                       eps=1e-8, weight_decay=0.5)
        np.testing.assert_allclose(new, theta * (1 - 0.1 * 0.5), atol=1e-15)
        np.testing.assert_array_equal(m, 0.0)
        np.testing.assert_array_equal(v, 0.0)

    def test_first_step_closed_form(self):
        # bias correction makes m_hat = g and v_hat = g^2 on step one,
        # so the update is exactly -lr * g / (|g| + eps)
        g = np.array([0.3, -1.7, 4.0])
        theta = np.zeros(3)
        lr, eps = 1e-3, 1e-8
        new, _, _ = optim.adamw_update(theta, g, np.zeros(3), np.zeros(3),
                                       step=1, lr=lr, beta1=0.9, beta2=0.999,
                                       eps=eps, weight_decay=0.0)
        np.testing.assert_allclose(new, -lr * g / (np.abs(g) + eps), atol=1e-15)

    def test_decay_is_decoupled_from_gradient(self):
        # with decay folded into the gradient the two runs would differ
        g = np.array([1.0])
        theta = np.array([10.0])
        with_decay, _, _ = optim.adamw_update(theta, g, np.zeros(1), np.zeros(1),
                                              step=1, lr=0.01, beta1=0.9, beta2=0.999,
                                              eps=1e-8, weight_decay=0.1)
        without, _, _ = optim.adamw_update(theta, g, np.zeros(1), np.zeros(1),
                                           step=1, lr=0.01, beta1=0.9, beta2=0.999,
                                           eps=1e-8, weight_decay=0.0)
        np.testing.assert_allclose(with_decay - without, theta * (-0.01 * 0.1), atol=1e-15)


class TestAdamW:
    def test_step_matches_functional_update(self):
        p = params_with_grad([[1.0, 2.0], [3.0]], [[0.5, -0.5], [1.0]])
        opt = optim.AdamW(p, lr=0.01, weight_decay=0.2)
        expect = {}
        for name, t in p.items():
            expect[name] = optim.adamw_update(
                t.data.copy(), t.grad, np.zeros_like(t.data), np.zeros_like(t.data),
                1, 0.01, 0.9, 0.999, 1e-8, 0.2)[0]
        opt.step()
        for name, t in p.items():
            np.testing.assert_array_equal(t.data, expect[name])
        assert opt.step_count == 1

    def test_two_optimizers_bitwise_identical(self):
        runs = []
        for _ in range(2):
            rng = np.random.default_rng(42)
            p = {"w": Tensor(rng.standard_normal(8), requires_grad=True)}
            opt = optim.AdamW(p, lr=3e-4, weight_decay=0.01)
            for step in range(20):
                opt.zero_grad()
                tsum(pow_const(p["w"], 2)).backward()
                opt.step()
            runs.append(p["w"].data.tobytes())
        assert runs[0] == runs[1]

    def test_state_dict_round_trip_resumes_identically(self):
        def make():
            rng = np.random.default_rng(7)
            p = {"w": Tensor(rng.standard_normal(6), requires_grad=True)}
            return p, optim.AdamW(p, lr=1e-2, weight_decay=0.05)

        def run(opt, p, n):
            for _ in range(n):
                opt.zero_grad()
                tsum(mul(pow_const(p["w"], 2), 0.5)).backward()
                opt.step()

        p1, opt1 = make()
        run(opt1, p1, 10)

        p2, opt2 = make()
        run(opt2, p2, 4)
        state = opt2.state_dict()
        p3, opt3 = make()
        p3["w"].data[:] = p2["w"].data
        opt3.load_state_dict(state)
        assert opt3.step_count == 4
        run(opt3, p3, 6)
        np.testing.assert_array_equal(p1["w"].data, p3["w"].data)

    def test_missing_grad_treated_as_zero(self):
        p = {"w": Tensor(np.array([5.0]), requires_grad=True)}
        opt = optim.AdamW(p, lr=0.1, weight_decay=0.0)
        opt.step()
        np.testing.assert_array_equal(p["w"].data, [5.0])

    def test_nonfinite_gradient_aborts_naming_parameter(self):
        p = {"bad.w": Tensor(np.array([1.0]), requires_grad=True)}
        p["bad.w"].grad = np.array([np.inf])
        opt = optim.AdamW(p, lr=0.1)
        with pytest.raises(NonFiniteError, match="bad.w"):
            opt.step()

    def test_negative_lr_rejected(self):
        with pytest.raises(ValueError):
            optim.AdamW({}, lr=-1e-3)

    def test_zero_lr_is_allowed_and_freezes_params(self):
        p = {"w": Tensor(np.array([2.0]), requires_grad=True)}
        p["w"].grad = np.array([1.0])
        optim.AdamW(p, lr=0.0, weight_decay=0.3).step()
        np.testing.assert_array_equal(p["w"].data, [2.0])


class TestClipGlobalNorm:
    def test_below_threshold_untouched(self):
        p = params_with_grad([[0.0, 0.0], [0.0]], [[3.0, 0.0], [4.0]])
        norm, clipped = optim.clip_global_norm(p, 10.0)
        assert norm == 5.0 and not clipped
        np.testing.assert_array_equal(p["a"].grad, [3.0, 0.0])

    def test_above_threshold_scaled_to_max(self):
        p = params_with_grad([[0.0, 0.0], [0.0]], [[3.0, 0.0], [4.0]])
        norm, clipped = optim.clip_global_norm(p, 1.0)
        assert norm == 5.0 and clipped
        total = float(sum((t.grad ** 2).sum() for t in p.values()))
        np.testing.assert_allclose(np.sqrt(total), 1.0, atol=1e-12)

    def test_zero_grads_no_divide_by_zero(self):
        p = params_with_grad([[1.0], [1.0]], [[0.0], [0.0]])
        norm, clipped = optim.clip_global_norm(p, 1.0)
        assert norm == 0.0 and not clipped


class TestGradCheck:
    def test_quadratic(self):
        p = {"x": Tensor(np.array([3.0]), requires_grad=True)}
        err = optim.grad_check(lambda q: tsum(pow_const(q["x"], 2)), p)
        assert err < 1e-6

    def test_linear_nearly_exact(self):
        p = {"x": Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)}
        err = optim.grad_check(lambda q: tsum(mul(q["x"], 3.0)), p)
        assert err < 1e-8

    def test_per_group_reporting(self):
        p = {
            "x": Tensor(np.array([2.0]), requires_grad=True),
            "y": Tensor(np.array([0.3]), requires_grad=True),
        }
        err, per_group = optim.grad_check(
            lambda q: tsum(pow_const(q["x"], 2)) + tsum(pow_const(q["y"], 3)),
            p, per_group=True)
        assert set(per_group) == {"x", "y"}
        assert err == max(per_group.values())

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ValueError):
            optim.grad_check(lambda q: tsum(q["x"]), {"x": Tensor([1.0])}, h=0.0)

    def test_rejects_nonscalar_function(self):
        p = {"x": Tensor(np.array([1.0, 2.0]), requires_grad=True)}
        with pytest.raises(ValueError):
            optim.grad_check(lambda q: mul(q["x"], 2.0), p)
