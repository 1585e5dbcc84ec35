"""Random gradient-check fixtures for every differentiable op and loss.

Each builder takes a numpy Generator and returns ``(fn, params)`` suitable for
:func:`tfda.diffcore.grad_check`.  Inputs are drawn away from the kinks of
non-smooth ops (relu at 0, max ties, log clamps) so central differences are
meaningful.
"""

from __future__ import annotations

from typing import Callable, Dict, Tuple

import numpy as np

from . import diffcore as dc
from . import losses
from .diffcore import Tensor
from .model import Arch, build_model, forward_branch, fuse_tensors, project_joint

Builder = Callable[[np.random.Generator], Tuple[Callable, Dict[str, Tensor]]]


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng, shape, lo=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, 1.5, size=shape)


def _distinct(rng, shape):
    """Values with pairwise gaps >= 0.05 (no near-ties for max-type ops)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.05 + rng.uniform(0, 0.01, n)).reshape(shape) - 0.025 * n


def _probs(rng, n, C):
    return dc.softmax(Tensor(rng.normal(size=(n, C)))).data


def _elementwise(rng):
    a, b = _t(rng.normal(size=(3, 4))), _t(rng.uniform(0.5, 2.0, size=(3, 4)))
    return (lambda p: dc.sum_(((p["a"] + p["b"]) * p["a"] - p["b"] / (p["a"] * p["a"] + 1.0)) - p["b"] * 0.5),
            {"a": a, "b": b})


def _broadcast(rng):
    a, b = _t(rng.normal(size=(3, 1, 4))), _t(rng.normal(size=(2, 1)))
    return lambda p: dc.sum_((p["a"] * p["b"] + p["b"]) ** 2), {"a": a, "b": b}


def _pow_exp_log_sqrt(rng):
    a = _t(rng.uniform(0.3, 2.0, size=(2, 5)))
    return lambda p: dc.sum_(dc.exp(p["a"] * 0.5) + dc.log(p["a"]) + dc.sqrt(p["a"]) + p["a"] ** 1.7), {"a": a}


def _relu(rng):
    a = _t(_away_from_zero(rng, (3, 6)))
    return lambda p: dc.sum_(dc.relu(p["a"]) * p["a"]), {"a": a}


def _reductions(rng):
    a = _t(rng.normal(size=(2, 3, 4)))
    w = rng.normal(size=(2, 4))
    return lambda p: dc.sum_(dc.mean(p["a"], axis=1) * w) + dc.sum_(dc.sum_(p["a"], axis=(0, 2)) ** 2), {"a": a}


def _amax(rng):
    a = _t(_distinct(rng, (4, 5)))
    w = rng.normal(size=4)
    return lambda p: dc.sum_(dc.amax(p["a"], axis=1) * w), {"a": a}


def _shape_ops(rng):
    a, b = _t(rng.normal(size=(2, 3, 4))), _t(rng.normal(size=(2, 3, 2)))
    w = rng.normal(size=(4, 2, 6))
    idx = (np.array([0, 1, 1, 0]), np.array([2, 0, 1, 2]))

    def fn(p):
        c = dc.concat([p["a"], p["b"]], axis=2)
        t = dc.reshape(dc.transpose(c, (2, 0, 1)), (6, 6))
        picked = dc.take(dc.reshape(p["a"], (6, 4)), idx)
        return dc.sum_(t * w.reshape(6, 8)[:, :6]) + dc.sum_(picked * picked)

    return fn, {"a": a, "b": b}


def _matmul(rng):
    a, b = _t(rng.normal(size=(3, 4))), _t(rng.normal(size=(4, 2)))
    w = rng.normal(size=(3, 2))
    return lambda p: dc.sum_(dc.matmul(p["a"], p["b"]) * w), {"a": a, "b": b}


def _softmax_family(rng):
    a = _t(rng.normal(size=(3, 5)))
    w = rng.normal(size=(3, 5))
    mask = rng.random((3, 5)) < 0.6
    mask[:, 0] = True
    return (lambda p: dc.sum_(dc.softmax(p["a"]) * w) + dc.sum_(dc.log_softmax(p["a"]) * w)
            + dc.sum_(dc.logsumexp(p["a"], axis=1, where=mask)), {"a": a})


def _normalize(rng):
    a = _t(rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 4))
    return lambda p: dc.sum_(dc.l2_normalize(p["a"]) * w) + dc.sum_(dc.l2_norm(p["a"], axis=1)), {"a": a}


def _conv1d(rng):
    B, Ch, S, F, k = 2, 2, 9, 3, int(rng.integers(2, 5))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 3))
    x, w, b = _t(rng.normal(size=(B, Ch, S))), _t(rng.normal(size=(F, Ch, k))), _t(rng.normal(size=F))
    S_out = (S + 2 * pad - k) // stride + 1
    g = rng.normal(size=(B, F, S_out))
    return lambda p: dc.sum_(dc.conv1d(p["x"], p["w"], p["b"], stride, pad) * g), {"x": x, "w": w, "b": b}


def _maxpool(rng):
    x = _t(_distinct(rng, (2, 3, 7)))
    g = rng.normal(size=(2, 3, 3))
    return lambda p: dc.sum_(dc.maxpool1d(p["x"]) * g), {"x": x}


def _batchnorm_train(rng):
    x = _t(rng.normal(size=(3, 2, 5)) * 2 + 1)
    gm, bt = _t(rng.uniform(0.5, 1.5, 2)), _t(rng.normal(size=2))
    g = rng.normal(size=(3, 2, 5))
    return lambda p: dc.sum_(dc.batchnorm1d(p["x"], p["gamma"], p["beta"], "train") * g), \
        {"x": x, "gamma": gm, "beta": bt}


def _batchnorm_eval(rng):
    x = _t(rng.normal(size=(3, 2, 5)))
    gm, bt = _t(rng.uniform(0.5, 1.5, 2)), _t(rng.normal(size=2))
    rs = dc.RunningStats(rng.normal(size=2), rng.uniform(0.5, 2.0, 2))
    g = rng.normal(size=(3, 2, 5))
    return lambda p: dc.sum_(dc.batchnorm1d(p["x"], p["gamma"], p["beta"], "eval", rs) * g), \
        {"x": x, "gamma": gm, "beta": bt}


def _dropout(rng):
    x = _t(rng.normal(size=(4, 5)))
    seed = int(rng.integers(1 << 31))
    g = rng.normal(size=(4, 5))
    return lambda p: dc.sum_(dc.dropout(p["x"], 0.5, np.random.default_rng(seed)) * g), {"x": x}


def _class_balanced_ce(rng):
    logits = _t(rng.normal(size=(6, 3)))
    labels = rng.integers(0, 3, 6)
    counts = np.bincount(labels, minlength=3)
    return lambda p: losses.class_balanced_ce(dc.softmax(p["z"]), labels, counts), {"z": logits}


def _label_propagation(rng):
    logits = _t(rng.normal(size=(5, 3)))
    targets = rng.integers(0, 3, 5)
    return lambda p: losses.label_propagation(dc.softmax(p["z"]), targets), {"z": logits}


def _info_nce(rng):
    B, Q, D = 3, 5, 4
    q, k, keys = _t(rng.normal(size=(B, D))), _t(rng.normal(size=(B, D))), _t(rng.normal(size=(Q, D)))
    mask = rng.random((B, Q)) < 0.7
    tau = float(rng.uniform(0.2, 1.0))

    def fn(p):
        return losses.info_nce_masked(dc.l2_normalize(p["q"]), dc.l2_normalize(p["k"]),
                                      dc.l2_normalize(p["keys"]), mask, tau)

    return fn, {"q": q, "k": k, "keys": keys}


def _consistency(rng):
    a, b = _t(rng.normal(size=(4, 3))), _t(rng.normal(size=(4, 3)))
    return lambda p: losses.consistency_kl(dc.softmax(p["a"]), dc.softmax(p["b"])), {"a": a, "b": b}


def _tsallis(rng):
    z = _t(rng.normal(size=(5, 3)))
    h0 = dc.softmax(Tensor(z.data.copy())).data
    eta, col = losses.entropy_weights(h0), h0.sum(axis=0)  # constants of the objective
    a = float(rng.choice([1.5, 2.0, 3.0]))
    return lambda p: losses.tsallis_uncertainty(dc.softmax(p["z"]), a, eta, col), {"z": z}


def _fusion(rng):
    a, b = _t(rng.normal(size=(4, 3)) * 2), _t(rng.normal(size=(4, 3)) * 2)
    w = rng.normal(size=(4, 3))
    return lambda p: dc.sum_(fuse_tensors(dc.softmax(p["a"]), dc.softmax(p["b"])) * w), {"a": a, "b": b}


def _total(rng):
    z = _t(rng.normal(size=(4, 3)))
    y = rng.integers(0, 3, 4)
    mu = rng.uniform(0.1, 1.0, 4)

    def fn(p):
        pr = dc.softmax(p["z"])
        ce = losses.class_balanced_ce(pr, y, np.bincount(y, minlength=3))
        lp = losses.label_propagation(pr, y)
        cons = losses.consistency_kl(pr, dc.softmax(p["z"] * 0.5))
        return losses.total_loss(ce, lp, ce * 0.3, cons, dc.sum_(pr * pr), *mu)

    return fn, {"z": z}


_TINY = Arch(channels=2, length=16, classes=3, kernels=(3, 3, 3), filters=(3, 4, 4),
             proj_hidden=4, proj_dim=3, dropout=0.0)


def _model_path(rng):
    """Both branches, fusion and the joint projection of a tiny network."""
    model = build_model(_TINY, int(rng.integers(1 << 31)))
    x = rng.normal(size=(3, 2, 16))
    xf = np.abs(rng.normal(size=(3, 2, 9))) + 0.1
    y = rng.integers(0, 3, 3)
    names = [n for n in model.params if n.endswith(".cls.w") or ".proj." in n or n.endswith("enc.2.conv.w")]
    params = {n: _t(model.params[n].data) for n in names}

    def fn(p):
        model.params.update(p)
        z, pt = forward_branch(model, "time", x, "eval")
        zf, pf = forward_branch(model, "freq", xf, "eval")
        fused = fuse_tensors(pt, pf)
        joint = losses.info_nce_masked(project_joint(model, z, "time"), project_joint(model, zf, "freq"),
                                       np.zeros((0, 3)), None, 0.5)
        return losses.class_balanced_ce(fused, y, np.bincount(y, minlength=3)) + joint

    return fn, params


FIXTURES: Dict[str, Builder] = {
    "add/sub/mul/div": _elementwise,
    "broadcast": _broadcast,
    "pow/exp/log/sqrt": _pow_exp_log_sqrt,
    "relu": _relu,
    "sum/mean": _reductions,
    "amax": _amax,
    "reshape/transpose/take/concat": _shape_ops,
    "matmul": _matmul,
    "softmax/log_softmax/logsumexp": _softmax_family,
    "l2_normalize/l2_norm": _normalize,
    "conv1d": _conv1d,
    "maxpool1d": _maxpool,
    "batchnorm1d[train]": _batchnorm_train,
    "batchnorm1d[eval]": _batchnorm_eval,
    "dropout": _dropout,
    "class_balanced_ce": _class_balanced_ce,
    "label_propagation": _label_propagation,
    "info_nce_masked": _info_nce,
    "consistency_kl": _consistency,
    "tsallis_uncertainty": _tsallis,
    "fusion": _fusion,
    "total_loss": _total,
    "model": _model_path,
}


def run_fixtures(instances: int = 1, seed: int = 0, tol: float = 1e-4) -> Dict[str, float]:
    """Max relative error per fixture over ``instances`` random draws (inf on failure)."""
    out = {}
    for i, (name, build) in enumerate(FIXTURES.items()):
        worst = 0.0
        for j in range(instances):
            fn, params = build(np.random.default_rng([seed, i, j]))
            rep = dc.grad_check(fn, params, tol=tol)
            worst = max(worst, float("inf") if rep.failure else rep.max_error)
        out[name] = worst
    return out
