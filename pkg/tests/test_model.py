import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tfda import diffcore as dc
from tfda.diffcore import ContractError, Tensor
from tfda.model import (
    Arch,
    TeacherStudent,
    branch_input,
    build_model,
    ema_update,
    forward_branch,
    fuse_predictions,
    fusion_weight,
    load_model,
    predict,
    pretrain_source,
    project_joint,
    save_model,
    supervised_loss,
)
from tfda.trainer import evaluate

from conftest import TINY, rand_probs


class TestBuild:
    def test_deterministic(self):
        a, b = build_model(TINY, 3), build_model(TINY, 3)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
        c = build_model(TINY, 4)
        assert not np.array_equal(a.params["time.cls.w"].data, c.params["time.cls.w"].data)

    def test_default_shapes(self):
        m = build_model(Arch(1, 128, 6), 0)
        assert m.params["time.cls.w"].shape == (128, 6)
        assert m.params["freq.cls.w"].shape == (128, 6)
        assert m.params["time.enc.0.conv.w"].shape == (64, 1, 8)
        assert m.params["freq.enc.2.conv.w"].shape == (128, 128, 8)
        assert m.params["time.proj.1.w"].shape == (128, 128)
        assert m.arch.feature_dim == 128

    def test_init_values(self):
        m = build_model(TINY, 1)
        np.testing.assert_array_equal(m.params["time.enc.1.bn.gamma"].data, 1.0)
        np.testing.assert_array_equal(m.params["freq.enc.0.bn.beta"].data, 0.0)
        np.testing.assert_array_equal(m.params["time.enc.0.conv.b"].data, 0.0)
        bound = np.sqrt(6 / (2 * 3))
        assert np.abs(m.params["time.enc.0.conv.w"].data).max() <= bound

    def test_zero_input_finite(self):
        m = build_model(Arch(2, 64, 3), 0)
        pred = predict(m, np.zeros((2, 2, 64)))
        assert np.all(np.isfinite(pred.fused))

    def test_length_too_small(self):
        with pytest.raises(ValueError, match="too small"):
            build_model(Arch(1, 8, 2), 0)

    def test_smallest_supported_length(self):
        build_model(Arch(1, 32, 2), 0)


class TestForward:
    def test_empty_batch(self, tiny_model):
        z, p = forward_branch(tiny_model, "time", np.zeros((0, 2, 48)))
        assert z.shape == (0, 8) and p.shape == (0, 3)
        z, p = forward_branch(tiny_model, "freq", np.zeros((0, 2, 25)))
        assert z.shape == (0, 8) and p.shape == (0, 3)

    def test_duplicate_rows_identical(self, tiny_model):
        x = np.random.default_rng(0).normal(size=(1, 2, 48))
        z, p = forward_branch(tiny_model, "time", np.concatenate([x, x, x]), "eval")
        np.testing.assert_array_equal(p.data[0], p.data[1])
        np.testing.assert_array_equal(z.data[0], z.data[2])

    def test_probs_sum_to_one(self, tiny_model):
        x = np.random.default_rng(1).normal(size=(5, 2, 48))
        pred = predict(tiny_model, x)
        for p in (pred.time_probs, pred.freq_probs, pred.fused):
            np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_wrong_length(self, tiny_model):
        with pytest.raises(ContractError, match="freq"):
            forward_branch(tiny_model, "freq", np.zeros((1, 2, 48)))
        with pytest.raises(ContractError):
            forward_branch(tiny_model, "time", np.zeros((1, 3, 48)))

    def test_grad_check_through_branch(self, tiny_model):
        x = np.random.default_rng(2).normal(size=(4, 2, 48))
        names = ["time.enc.0.conv.w", "time.enc.1.bn.gamma", "time.cls.w", "time.cls.b"]
        params = {n: Tensor(tiny_model.params[n].data.copy(), requires_grad=True) for n in names}

        def fn(p):
            tiny_model.params.update(p)
            _, probs = forward_branch(tiny_model, "time", x, "train")
            return dc.sum_(dc.log(probs) * np.eye(3)[[0, 1, 2, 0]])

        rep = dc.grad_check(fn, params, tol=1e-4)
        assert rep.passed, rep.errors

    def test_train_mode_updates_running_stats_eval_does_not(self, tiny_model):
        x = np.random.default_rng(3).normal(2.0, 1.0, size=(4, 2, 48))
        rs = tiny_model.buffers["time.enc.0.bn"]
        before = rs.mean.copy()
        forward_branch(tiny_model, "time", x, "eval")
        np.testing.assert_array_equal(rs.mean, before)
        forward_branch(tiny_model, "time", x, "train")
        assert not np.array_equal(rs.mean, before)

    def test_dropout_only_with_rng(self, tiny_model):
        x = np.random.default_rng(4).normal(size=(4, 2, 48))
        a = forward_branch(tiny_model.copy(), "time", x, "train")[1].data
        b = forward_branch(tiny_model.copy(), "time", x, "train")[1].data
        c = forward_branch(tiny_model.copy(), "time", x, "train", np.random.default_rng(0))[1].data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)


class TestFusion:
    def test_equal_inputs(self):
        p = np.array([0.2, 0.5, 0.3])
        np.testing.assert_allclose(fuse_predictions(p, p), p)

    def test_hand_example_1(self):
        p, pf = np.array([0.7, 0.3]), np.array([0.6, 0.4])
        np.testing.assert_allclose(fusion_weight(p, pf), 7 / 13)
        np.testing.assert_allclose(fuse_predictions(p, pf), [0.65385, 0.34615], atol=1e-5)

    def test_hand_example_2(self):
        p, pf = np.array([1.0, 0.0]), np.array([0.5, 0.5])
        np.testing.assert_allclose(fusion_weight(p, pf), 2 / 3)
        np.testing.assert_allclose(fuse_predictions(p, pf), [0.83333, 0.16667], atol=1e-5)

    def test_degenerate_zero_maxima(self):
        z = np.zeros(3)
        np.testing.assert_allclose(fusion_weight(z, z), 0.5)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 8))
    def test_convex_and_argmax(self, seed, C):
        rng = np.random.default_rng(seed)
        p, pf = rand_probs(rng, 1, C)[0], rand_probs(rng, 1, C)[0]
        f = fuse_predictions(p, pf)
        assert abs(f.sum() - 1) <= 1e-9
        assert np.all(f >= np.minimum(p, pf) - 1e-15) and np.all(f <= np.maximum(p, pf) + 1e-15)
        pf_shared = pf.copy()
        c = int(np.argmax(p))
        pf_shared[[c, int(np.argmax(pf))]] = pf_shared[[int(np.argmax(pf)), c]]
        assert np.argmax(fuse_predictions(p, pf_shared)) == c

    def test_fuse_tensors_matches_numpy(self):
        from tfda.model import fuse_tensors

        rng = np.random.default_rng(5)
        p, pf = rand_probs(rng, 4, 3), rand_probs(rng, 4, 3)
        np.testing.assert_allclose(fuse_tensors(Tensor(p), Tensor(pf)).data, fuse_predictions(p, pf), atol=1e-15)


class TestProjection:
    def test_unit_norm_and_pure(self, tiny_model):
        z = Tensor(np.random.default_rng(6).normal(size=(5, 8)))
        a = project_joint(tiny_model, z, "time").data
        b = project_joint(tiny_model, z, "time").data
        assert a.shape == (5, 6)
        np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-9)
        np.testing.assert_array_equal(a, b)

    def test_grad_check(self, tiny_model):
        z = np.random.default_rng(7).normal(size=(4, 8))
        w = np.random.default_rng(8).normal(size=(4, 6))
        names = [n for n in tiny_model.params if n.startswith("freq.proj")]
        params = {n: Tensor(tiny_model.params[n].data.copy(), requires_grad=True) for n in names}

        def fn(p):
            tiny_model.params.update(p)
            return dc.sum_(project_joint(tiny_model, Tensor(z), "freq") * w)

        rep = dc.grad_check(fn, params, tol=1e-4)
        assert rep.passed, rep.errors


class TestEma:
    def _ts(self, t0, s, alpha):
        teacher, student = build_model(TINY, 0), build_model(TINY, 0)
        for p in teacher.params.values():
            p.data = np.full(p.shape, t0)
        for p in student.params.values():
            p.data = np.full(p.shape, s)
        return TeacherStudent(teacher, student, alpha)

    def test_alpha_one(self):
        ts = ema_update(self._ts(0.3, 5.0, 1.0))
        np.testing.assert_array_equal(ts.teacher.params["time.cls.w"].data, 0.3)

    def test_scalar_example(self):
        ts = ema_update(self._ts(1.0, 0.0, 0.999))
        np.testing.assert_allclose(ts.teacher.params["time.cls.b"].data, 0.999, atol=1e-15)

    def test_closed_form(self):
        ts = self._ts(2.0, -1.0, 0.9)
        for _ in range(25):
            ema_update(ts)
        np.testing.assert_allclose(ts.teacher.params["freq.proj.0.w"].data, 0.9 ** 25 * 3.0 - 1.0, atol=1e-12)

    def test_linear(self):
        a = ema_update(self._ts(1.5, 0.5, 0.7)).teacher.params["time.cls.w"].data
        b = ema_update(self._ts(3.0, 1.0, 0.7)).teacher.params["time.cls.w"].data
        np.testing.assert_allclose(b, 2 * a, atol=1e-15)

    def test_default_alpha(self):
        assert TeacherStudent.from_source(build_model(TINY, 0)).ema_alpha == 0.999

    def test_shape_mismatch(self):
        other = build_model(Arch(2, 48, 4, (3, 3, 3), (4, 8, 8), 8, 6), 0)
        with pytest.raises(ContractError):
            TeacherStudent(build_model(TINY, 0), other)

    def test_invalid_alpha(self):
        with pytest.raises(ValueError):
            TeacherStudent.from_source(build_model(TINY, 0), 1.5)


class TestPretrain:
    def test_loss_decreases(self):
        rng = np.random.default_rng(9)
        t = np.arange(32) / 32
        x = np.stack([np.stack([np.sin(2 * np.pi * (2 + 4 * (i % 2)) * t)] * 2) for i in range(8)])
        x += 0.01 * rng.normal(size=x.shape)
        y = np.arange(8) % 2
        model = build_model(Arch(2, 32, 2, (3, 3, 3), (4, 8, 8), 8, 6), 0)
        for p in model.params.values():
            p.requires_grad = True
        opt = dc.Adam(model.params, 1e-3)
        losses = []
        for _ in range(5):
            opt.zero_grad()
            loss = supervised_loss(model, x, y, None)
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_deterministic(self, tiny_data):
        a = pretrain_source(build_model(TINY, 1), tiny_data, 2, 1e-3, seed=4)
        b = pretrain_source(build_model(TINY, 1), tiny_data, 2, 1e-3, seed=4)
        assert dc.serialize_params(a.state_arrays()) == dc.serialize_params(b.state_arrays())

    def test_non_finite_aborts(self, tiny_data):
        model = build_model(TINY, 0)
        model.params["time.cls.b"].data[:] = np.nan
        with pytest.raises(FloatingPointError, match="non-finite"):
            pretrain_source(model, tiny_data, 1, 1e-3)

    def test_needs_labels(self, tiny_data):
        with pytest.raises(ValueError):
            pretrain_source(build_model(TINY, 0), tiny_data.unlabeled(), 1)

    def test_synthetic_source_accuracy(self, pretrained0, bench0):
        assert evaluate(pretrained0, bench0.source_test) >= 0.95
        assert evaluate(pretrained0, bench0.source_train) >= 0.95


class TestModelFiles:
    def test_round_trip(self, tmp_path, tiny_data):
        model = pretrain_source(build_model(TINY, 2), tiny_data, 1, 1e-3)
        save_model(model, tmp_path / "m.bin")
        back = load_model(tmp_path / "m.bin")
        assert back.arch == model.arch
        x = tiny_data.samples[:5]
        np.testing.assert_array_equal(predict(back, x).fused, predict(model, x).fused)
        save_model(back, tmp_path / "m2.bin")
        assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "m2.bin").read_bytes()

    def test_header_encodes_arch(self, tmp_path):
        save_model(build_model(TINY, 0), tmp_path / "m.bin")
        header, _ = dc.deserialize_params((tmp_path / "m.bin").read_bytes(), with_header=True)
        assert header[:3] == [2, 48, 3]
        assert Arch.from_header(header) == TINY

    def test_corrupt_file(self, tmp_path):
        save_model(build_model(TINY, 0), tmp_path / "m.bin")
        blob = (tmp_path / "m.bin").read_bytes()
        (tmp_path / "bad.bin").write_bytes(blob[: len(blob) // 2])
        with pytest.raises(ContractError):
            load_model(tmp_path / "bad.bin")

    def test_branch_input(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 10))
        assert branch_input(x, "time") is x
        assert branch_input(x, "freq").shape == (2, 1, 6)
