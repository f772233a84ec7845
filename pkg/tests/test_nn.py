import numpy as np
import pytest

from gridflow import autodiff as ad, errors, nn
from gridflow.autodiff import Tensor
from gridflow.nn import (
    Adam, FcnnModel, GnnClassifier, GnnModel, LossConfig, composite_loss,
    fr_penalty, hard_projection, latent_chain_ac, latent_chain_dc,
    soft_projection,
)


def fd_grad(fn, arr, h=1e-5):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = fn()
        arr[i] = old - h
        fm = fn()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


class TestGnnForward:
    def test_identity_stack_preserves_input(self, grid3):
        model = GnnModel(np.ones((3, 3), dtype=bool), widths=[2, 2], seed=0)
        W, H, b = model.layers[0]
        W.data[...] = np.eye(3)
        H.data[...] = np.eye(2)
        b.data[...] = 0.0
        x = np.abs(np.random.default_rng(0).normal(size=(4, 3, 2)))
        out = model.trunk(Tensor(x))
        assert np.allclose(out.data, x)

    def test_one_hop_locality(self):
        # path 1-2-3: node 1's embedding ignores node 3 after one layer
        mask = np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]], dtype=bool)
        model = GnnModel(mask, widths=[2, 3], seed=1)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 3, 2))
        y0 = model.trunk(Tensor(x)).data
        x2 = x.copy()
        x2[0, 2, :] = rng.normal(size=2)
        y1 = model.trunk(Tensor(x2)).data
        assert np.allclose(y0[0, 0], y1[0, 0])
        assert not np.allclose(y0[0, 2], y1[0, 2])

    def test_mask_exterior_zero_after_init(self, grid14):
        model = GnnModel.for_grid(grid14, widths=[4, 5, 3], seed=0)
        for W, _, _ in model.layers:
            assert np.all(W.data[~model.mask] == 0.0)

    def test_shape_mismatch(self, grid3):
        model = GnnModel.for_grid(grid3, widths=[4, 3], seed=0)
        with pytest.raises(errors.ShapeMismatch):
            model.forward(Tensor(np.zeros((2, 3, 5))))
        with pytest.raises(errors.ShapeMismatch):
            model.forward(Tensor(np.zeros((2, 5, 4))))

    def test_118_widths_run_and_count(self, grid118):
        model = GnnModel.for_grid(grid118, widths=[4, 5, 10, 10, 5, 5], seed=0)
        out = model.forward(Tensor(np.zeros((2, 118, 4))))
        assert out.shape == (2, 118, 1)
        masked, dense, per_layer = model.parameter_counts()
        fcnn = FcnnModel(118, widths=[4, 5, 10, 10, 5, 5], seed=0)
        total_fc, _, _ = fcnn.parameter_counts()
        assert masked < total_fc / 10.0


class TestFcnnForward:
    def test_zero_weights_zero_output(self):
        model = FcnnModel(3, widths=[2, 4], seed=0)
        for p in model.parameters():
            p.data[...] = 0.0
        out = model.forward(Tensor(np.random.default_rng(0).normal(size=(2, 3, 2))))
        assert np.allclose(out.data, 0.0)

    def test_single_linear_layer_equals_matmul(self):
        model = FcnnModel(3, widths=[2], out_channels=1, seed=0)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 3, 2))
        out = model.forward(Tensor(x)).data
        expect = (x.reshape(4, 6) @ model.head_w.data
                  + model.head_b.data).reshape(4, 3, 1)
        assert np.allclose(out, expect, atol=1e-12)


class TestProjection:
    def test_hard_interior(self):
        p = hard_projection(Tensor(np.array([[4.0]])), np.array([[1.0]]),
                            np.array([[0.0]]), np.array([[0.0]]),
                            np.array([[3.0]]))
        assert p.data[0, 0] == pytest.approx(2.0)

    def test_hard_upper_clamp(self):
        p = hard_projection(Tensor(np.array([[10.0]])), np.array([[1.0]]),
                            np.array([[0.0]]), np.array([[0.0]]),
                            np.array([[3.0]]))
        assert p.data[0, 0] == pytest.approx(3.0)

    def test_hard_fixed_bypass(self):
        p = hard_projection(Tensor(np.array([[5.0, 5.0]])),
                            np.array([[1.0, 0.0]]), np.zeros((1, 2)),
                            np.array([[0.0, -0.7]]), np.array([[2.0, -0.7]]))
        assert p.data[0, 1] == pytest.approx(-0.7)

    def test_hard_matches_scalar_argmin_oracle(self, rng):
        """argmin of a p^2 + b p - pi p over [lo, hi] by dense grid search."""
        for _ in range(30):
            a = rng.uniform(0.2, 3.0)
            b = rng.uniform(-2.0, 2.0)
            pi = rng.uniform(-4.0, 4.0)
            lo = rng.uniform(-2.0, 0.0)
            hi = lo + rng.uniform(0.2, 3.0)
            grid_pts = np.arange(lo, hi + 1e-4, 1e-4)
            obj = a * grid_pts ** 2 + b * grid_pts - pi * grid_pts
            expect = grid_pts[np.argmin(obj)]
            got = hard_projection(Tensor(np.array([[pi]])),
                                  np.array([[a]]), np.array([[b]]),
                                  np.array([[lo]]), np.array([[hi]])).data[0, 0]
            assert abs(got - expect) < 2e-4

    def test_soft_saturates_to_input(self):
        # far inside the box the sigmoid blend is the identity
        p = soft_projection(Tensor(np.array([[2.0]])), np.array([[1.0]]),
                            np.array([[0.0]]), np.array([[-10.0]]),
                            np.array([[10.0]]), sharpness=100.0)
        assert p.data[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_soft_at_upper_limit_formula(self):
        # r == p_max: the second blend evaluates sigmoid(0)*(0) + p_max
        a, b, lo, hi = 1.0, 0.0, -10.0, 1.5
        pi = 2 * a * hi + b
        p = soft_projection(Tensor(np.array([[pi]])), np.array([[a]]),
                            np.array([[b]]), np.array([[lo]]),
                            np.array([[hi]]), sharpness=50.0)
        r = (pi - b) / (2 * a)
        sig = lambda t: 1 / (1 + np.exp(-50.0 * t))
        r1 = sig(lo - r) * (lo - r) + r
        expect = r1 + sig(r1 - hi) * (hi - r1)
        assert p.data[0, 0] == pytest.approx(expect, abs=1e-12)

    def test_soft_to_hard_monotone_in_sharpness(self):
        rs = np.linspace(-3.0, 3.0, 400).reshape(1, -1)
        a = np.ones_like(rs)
        b = np.zeros_like(rs)
        lo = np.full_like(rs, -1.0)
        hi = np.full_like(rs, 1.0)
        pi = 2 * rs
        hard = hard_projection(Tensor(pi), a, b, lo, hi).data
        gaps = []
        for k in (10.0, 20.0, 40.0, 80.0, 160.0):
            soft = soft_projection(Tensor(pi), a, b, lo, hi, sharpness=k).data
            gaps.append(np.abs(soft - hard).max())
        assert all(g1 >= g2 for g1, g2 in zip(gaps, gaps[1:]))


class TestLatentChains:
    def test_dc_chain_recovers_solution(self, grid3):
        from gridflow import opf
        from tests.conftest import load_case
        case = load_case("case3")
        inst = opf.instance_from_case(case, grid3)
        sol = opf.solve_dcopf(inst)
        p_hat, f_hat = latent_chain_dc(
            Tensor(sol.pi_star[None, :]), grid3,
            inst.a[None, :], inst.b[None, :],
            inst.p_min[None, :], inst.p_max[None, :], soft=False)
        assert np.abs(p_hat.data[0] - sol.p_star).max() < 1e-6
        assert np.abs(f_hat.data[0] - sol.f_star).max() < 1e-6

    def test_fixed_nodes_contribute_constants(self, grid3):
        p_min = np.array([[0.0, 0.0, -1.0]])
        p_max = np.array([[2.0, 2.0, -1.0]])
        a = np.array([[1.0, 1.0, 0.0]])
        b = np.zeros((1, 3))
        for pi in (np.zeros((1, 3)), np.full((1, 3), 9.0)):
            p_hat, _ = latent_chain_dc(Tensor(pi), grid3, a, b, p_min, p_max,
                                       soft=False)
            assert p_hat.data[0, 2] == pytest.approx(-1.0)

    def test_ac_chain_angles(self, grid3):
        # injections [_, 1, -1] at buses 2, 3 with unit reactances
        p = np.array([[0.0, 1.0, -1.0]])
        p_hat, theta, s_f, s_t = latent_chain_ac(
            Tensor(np.zeros((1, 3))), Tensor(np.ones((1, 3))), grid3,
            np.zeros((1, 3)), np.zeros((1, 3)), p, p, soft=False)
        assert np.allclose(theta.data[0][1:], np.array([1.0, -1.0]) / 3.0)
        assert theta.data[0, 0] == 0.0

    def test_ac_chain_flat_is_zero_flow(self, grid3):
        fixed = np.zeros((1, 3))
        _, theta, s_f, s_t = latent_chain_ac(
            Tensor(np.zeros((1, 3))), Tensor(np.ones((1, 3))), grid3,
            fixed, fixed, fixed, fixed, soft=False)
        assert np.allclose(s_f.data, 0.0)
        assert np.allclose(s_t.data, 0.0)

    def test_dc_chain_gradient_vs_fd(self, grid3, rng):
        a = np.abs(rng.normal(1.0, 0.3, (2, 3))) + 0.3
        b = rng.normal(size=(2, 3))
        p_min = np.full((2, 3), -1.0)
        p_max = np.full((2, 3), 1.0)
        pi0 = rng.normal(size=(2, 3))

        def value():
            _, f = latent_chain_dc(Tensor(pi0), grid3, a, b, p_min, p_max,
                                   soft=True, sharpness=20.0)
            return f.sum().data.item()

        pi = Tensor(pi0, requires_grad=True)
        _, f = latent_chain_dc(pi, grid3, a, b, p_min, p_max, soft=True,
                               sharpness=20.0)
        f.sum().backward()
        num = fd_grad(value, pi0)
        assert np.allclose(pi.grad, num, rtol=1e-4, atol=1e-7)

    def test_ac_chain_gradient_vs_fd(self, grid3, rng):
        a = np.abs(rng.normal(1.0, 0.3, (1, 3))) + 0.3
        b = rng.normal(size=(1, 3))
        p_min = np.full((1, 3), -1.0)
        p_max = np.full((1, 3), 1.0)
        pi0 = rng.normal(size=(1, 3))
        v0 = rng.uniform(0.95, 1.05, size=(1, 3))

        def value():
            _, _, sf, st = latent_chain_ac(Tensor(pi0), Tensor(v0), grid3,
                                           a, b, p_min, p_max, soft=True,
                                           sharpness=20.0)
            return (sf.sum() + st.sum()).data.item()

        pi = Tensor(pi0, requires_grad=True)
        v = Tensor(v0, requires_grad=True)
        _, _, sf, st = latent_chain_ac(pi, v, grid3, a, b, p_min, p_max,
                                       soft=True, sharpness=20.0)
        (sf.sum() + st.sum()).backward()
        assert np.allclose(pi.grad, fd_grad(value, pi0), rtol=1e-4, atol=1e-7)
        assert np.allclose(v.grad, fd_grad(value, v0), rtol=1e-4, atol=1e-7)


class TestFrPenalty:
    def test_under_limits_zero(self):
        flows = Tensor(np.array([[0.1, -0.2, 0.3]]))
        out = fr_penalty(flows, np.array([1.0, 1.0, 1.0]))
        assert out.data == pytest.approx(0.0)

    def test_l1_sum(self):
        flows = Tensor(np.array([[1.1, -1.3, 0.0]]))
        out = fr_penalty(flows, np.ones(3))
        assert out.data == pytest.approx(0.4)

    def test_active_line_restriction(self):
        flows = Tensor(np.array([[1.1, -1.3, 2.0]]))
        out = fr_penalty(flows, np.ones(3), active_lines=(0, 1))
        assert out.data == pytest.approx(0.4)

    def test_smooth_converges_to_hinge(self):
        z = np.linspace(-2, 2, 801).reshape(1, -1)
        limits = np.zeros(z.shape[1])
        hard = fr_penalty(Tensor(z), limits, two_sided=False).data
        gap_prev = np.inf
        for k in (1e2, 1e3, 1e4):
            smooth = fr_penalty(Tensor(z), limits, smooth=True, sharpness=k,
                                two_sided=False).data
            gap = abs(smooth - hard)
            assert gap <= gap_prev
            gap_prev = gap
        assert gap_prev < 1e-3


class TestCompositeLoss:
    def test_zero_when_exact(self):
        pred = Tensor(np.ones((2, 3, 1)))
        labels = Tensor(np.ones((2, 3, 1)))
        cfg = LossConfig()
        assert composite_loss(pred, labels, cfg).data == pytest.approx(0.0)

    def test_hand_value(self):
        pred = Tensor(np.array([[[0.1], [-0.2]]]))
        labels = Tensor(np.zeros((1, 2, 1)))
        cfg = LossConfig(gamma_pi=1.0)
        assert composite_loss(pred, labels, cfg).data == pytest.approx(0.05)

    def test_missing_channel(self):
        pred = Tensor(np.zeros((1, 2, 1)))
        cfg = LossConfig(gamma_v=1.0)
        with pytest.raises(errors.MissingChannel):
            composite_loss(pred, Tensor(np.zeros((1, 2, 1))), cfg)

    def test_fr_requires_chain(self):
        cfg = LossConfig(gamma_fr=0.5, fr_mode="dc")
        with pytest.raises(errors.MissingChannel):
            composite_loss(Tensor(np.zeros((1, 2, 1))),
                           Tensor(np.zeros((1, 2, 1))), cfg)

    def test_loss_decreases_under_adam(self, grid3, rng):
        model = GnnModel.for_grid(grid3, widths=[4, 4], seed=0)
        x = rng.normal(size=(2, 3, 4))
        y = rng.normal(size=(2, 3, 1))
        opt = Adam(model.parameters(), lr=1e-2)
        losses = []
        for _ in range(10):
            opt.zero_grad()
            loss = composite_loss(model.forward(Tensor(x)), Tensor(y),
                                  LossConfig())
            losses.append(loss.data.item())
            loss.backward()
            opt.step()
            model.apply_mask()
        assert all(b < a for a, b in zip(losses, losses[1:]))


class TestBackwardFullModel:
    def test_full_gnn_ac_fr_gradcheck(self, grid3, rng):
        """Every parameter of the GNN + ac-FR composite, against central
        finite differences."""
        model = GnnModel.for_grid(grid3, widths=[6, 4, 3], out_channels=2,
                                  seed=11)
        x = rng.normal(size=(2, 3, 6))
        y = rng.normal(size=(2, 3, 2))
        a = np.abs(rng.normal(1.0, 0.2, (2, 3))) + 0.2
        b = rng.normal(size=(2, 3))
        p_min = np.full((2, 3), -1.5)
        p_max = np.full((2, 3), 1.5)
        limits = grid3.rate_a * 0.01
        cfg = LossConfig(gamma_pi=1.0, gamma_v=0.5, gamma_fr=0.4, fr_mode="ac",
                         linf_pi_weight=0.2, sigmoid_sharpness=25.0)

        def compute_loss():
            pred = model.forward(Tensor(x))
            pi_hat = nn.select_channel(pred, 0)
            v_hat = nn.select_channel(pred, 1)
            _, _, sf, st = latent_chain_ac(pi_hat, v_hat, grid3, a, b, p_min,
                                           p_max, soft=True, sharpness=25.0)
            pen = fr_penalty(sf, limits, two_sided=False) + \
                fr_penalty(st, limits, two_sided=False)
            return composite_loss(pred, Tensor(y), cfg, chain_penalty=pen)

        for p in model.parameters():
            p.zero_grad()
        compute_loss().backward()
        grads = [p.grad.copy() for p in model.parameters()]
        # W gradient vanishes exactly outside the mask
        assert np.all(grads[0][~model.mask] == 0.0)
        check_rng = np.random.default_rng(3)
        for p, g in zip(model.parameters(), grads):
            flat = p.data.reshape(-1)
            for ix in check_rng.choice(flat.size, size=min(5, flat.size),
                                       replace=False):
                old = flat[ix]
                flat[ix] = old + 1e-5
                fp = compute_loss().data.item()
                flat[ix] = old - 1e-5
                fm = compute_loss().data.item()
                flat[ix] = old
                fd = (fp - fm) / 2e-5
                assert abs(fd - g.reshape(-1)[ix]) <= max(1e-4 * abs(fd), 1e-7)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt = Adam([p], lr=0.1)
        p.grad = np.zeros(2)
        before = p.data.copy()
        opt.step()
        assert np.array_equal(p.data, before)

    def test_quadratic_convergence(self):
        # standard Adam reaches ~1e-2 after 500 steps at lr 1e-2 and needs
        # a few thousand more to hit 1e-6 on a 1-D quadratic
        p = Tensor(np.array([5.0]), requires_grad=True)
        opt = Adam([p], lr=1e-2)
        errs = {}
        for step in range(1, 5001):
            opt.zero_grad()
            loss = ((p - 3.0) * (p - 3.0)).sum()
            loss.backward()
            opt.step()
            if step in (500, 5000):
                errs[step] = abs(p.data[0] - 3.0)
        assert errs[500] < 2e-2
        assert errs[5000] < 1e-6

    def test_bitwise_determinism(self, grid3, rng):
        def run():
            model = GnnModel.for_grid(grid3, widths=[4, 3], seed=9)
            opt = Adam(model.parameters(), lr=1e-2)
            x = np.random.default_rng(5).normal(size=(4, 3, 4))
            y = np.random.default_rng(6).normal(size=(4, 3, 1))
            for _ in range(5):
                opt.zero_grad()
                loss = composite_loss(model.forward(Tensor(x)), Tensor(y),
                                      LossConfig())
                loss.backward()
                opt.step()
                model.apply_mask()
            return [p.data.copy() for p in model.parameters()]

        for a, b in zip(run(), run()):
            assert np.array_equal(a, b)

    def test_mask_preserved_after_steps(self, grid14, rng):
        model = GnnModel.for_grid(grid14, widths=[4, 4], seed=0)
        opt = Adam(model.parameters(), lr=1e-2)
        x = rng.normal(size=(4, 14, 4))
        y = rng.normal(size=(4, 14, 1))
        for _ in range(20):
            opt.zero_grad()
            loss = composite_loss(model.forward(Tensor(x)), Tensor(y),
                                  LossConfig())
            loss.backward()
            opt.step()
            model.apply_mask()
        for W, _, _ in model.layers:
            assert np.all(W.data[~model.mask] == 0.0)


class TestParameterCountLaw:
    def test_affine_in_n_for_gnn(self, grid14, grid118, case300):
        from gridflow import grid_model
        grid300 = grid_model.build_linalg(case300)
        widths = [4, 5, 10, 10, 5, 5]
        ns, counts, fc_counts = [], [], []
        for g in (grid14, grid118, grid300):
            model = GnnModel.for_grid(g, widths, seed=0)
            _, _, per_layer = model.parameter_counts()
            ns.append(g.n_buses)
            counts.append(np.mean(per_layer))
            total_fc, _, per_fc = FcnnModel(g.n_buses, widths, seed=0).parameter_counts()
            fc_counts.append(np.mean(per_fc))
        ns = np.array(ns, dtype=float)
        counts = np.array(counts)
        # least-squares affine fit; unexplained variance below 1%
        A = np.stack([ns, np.ones_like(ns)], axis=1)
        coef, *_ = np.linalg.lstsq(A, counts, rcond=None)
        resid = counts - A @ coef
        assert resid @ resid / ((counts - counts.mean()) ** 2).sum() < 0.01
        # FCNN counts grow quadratically
        Aq = np.stack([ns ** 2, np.ones_like(ns)], axis=1)
        coefq, *_ = np.linalg.lstsq(Aq, np.array(fc_counts), rcond=None)
        residq = fc_counts - Aq @ coefq
        assert residq @ residq / ((fc_counts - np.mean(fc_counts)) ** 2).sum() < 0.01


class TestBceWithLogits:
    def test_matches_reference(self, rng):
        logits = rng.normal(size=(6, 4))
        targets = (rng.uniform(size=(6, 4)) > 0.5).astype(float)
        out = nn.bce_with_logits(Tensor(logits), targets).data
        q = 1 / (1 + np.exp(-logits))
        ref = -(targets * np.log(q) + (1 - targets) * np.log(1 - q)).mean()
        assert out == pytest.approx(ref, rel=1e-9)

    def test_gradient(self, rng):
        logits0 = rng.normal(size=(3, 2))
        targets = (rng.uniform(size=(3, 2)) > 0.5).astype(float)
        t = Tensor(logits0, requires_grad=True)
        nn.bce_with_logits(t, targets).backward()
        num = fd_grad(lambda: nn.bce_with_logits(Tensor(logits0), targets)
                      .data.item(), logits0)
        assert np.allclose(t.grad, num, rtol=1e-5, atol=1e-8)
