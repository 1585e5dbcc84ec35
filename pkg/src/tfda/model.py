"""Dual-branch (time + frequency) convolutional classifier and mean teacher."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ParamSet, RunningStats, Tensor
from .spectral import magnitude_input

log = logging.getLogger(__name__)

BRANCHES = ("time", "freq")


@dataclass(frozen=True)
class Arch:
    channels: int
    length: int
    classes: int
    kernels: tuple = (8, 8, 8)
    filters: tuple = (64, 128, 128)
    proj_hidden: int = 128
    proj_dim: int = 128
    dropout: float = 0.5

    @property
    def feature_dim(self) -> int:
        return self.filters[-1]

    def input_length(self, branch: str) -> int:
        return self.length if branch == "time" else self.length // 2 + 1

    def header(self) -> list[int]:
        return [self.channels, self.length, self.classes, len(self.kernels), *self.kernels,
                *self.filters, self.proj_hidden, self.proj_dim, int(round(self.dropout * 1000))]

    @classmethod
    def from_header(cls, h: Sequence[int]) -> "Arch":
        ch, s, c, nb = h[:4]
        ks = tuple(h[4:4 + nb])
        fs = tuple(h[4 + nb:4 + 2 * nb])
        hid, pd, drop = h[4 + 2 * nb:7 + 2 * nb]
        return cls(ch, s, c, ks, fs, hid, pd, drop / 1000)


def _block_lengths(n: int, kernels) -> list[int]:
    lengths = []
    for k in kernels:
        lengths.append(n)
        n = (n + 2 * (k // 2) - k + 1) // 2
    lengths.append(n)
    return lengths


@dataclass
class DualBranchModel:
    arch: Arch
    params: ParamSet
    buffers: Dict[str, RunningStats] = field(default_factory=dict)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {k: v.data for k, v in sorted(self.params.items())}
        for k, rs in sorted(self.buffers.items()):
            out[f"{k}.running_mean"] = rs.mean
            out[f"{k}.running_var"] = rs.var
        return out

    def copy(self) -> "DualBranchModel":
        return DualBranchModel(
            self.arch,
            dc.copy_params(self.params),
            {k: RunningStats(v.mean.copy(), v.var.copy(), v.momentum) for k, v in self.buffers.items()},
        )


def build_model(arch: Arch, init_seed: int = 0) -> DualBranchModel:
    """He-uniform weights, zero biases, unit BN scale."""
    if min(arch.channels, arch.length, arch.classes) < 1:
        raise ValueError("channels, length and classes must all be >= 1")
    if len(arch.kernels) != len(arch.filters):
        raise ValueError("kernels and filters must have the same number of blocks")
    for branch in BRANCHES:
        lengths = _block_lengths(arch.input_length(branch), arch.kernels)
        for n, k in zip(lengths, arch.kernels):
            # each block must see at least half a kernel of real samples
            if n < max(1, (k + 1) // 2):
                raise ValueError(
                    f"length {arch.length} too small for the kernel stack "
                    f"({branch} branch reaches {n} samples before a size-{k} kernel)"
                )
    rng = np.random.default_rng(init_seed)

    def he(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params: ParamSet = {}
    buffers: Dict[str, RunningStats] = {}
    for branch in BRANCHES:
        cin = arch.channels
        for i, (k, f) in enumerate(zip(arch.kernels, arch.filters)):
            pre = f"{branch}.enc.{i}"
            params[f"{pre}.conv.w"] = Tensor(he((f, cin, k), cin * k))
            params[f"{pre}.conv.b"] = Tensor(np.zeros(f))
            params[f"{pre}.bn.gamma"] = Tensor(np.ones(f))
            params[f"{pre}.bn.beta"] = Tensor(np.zeros(f))
            buffers[f"{pre}.bn"] = RunningStats(np.zeros(f), np.ones(f))
            cin = f
        D = arch.feature_dim
        params[f"{branch}.cls.w"] = Tensor(he((D, arch.classes), D))
        params[f"{branch}.cls.b"] = Tensor(np.zeros(arch.classes))
        params[f"{branch}.proj.0.w"] = Tensor(he((D, arch.proj_hidden), D))
        params[f"{branch}.proj.0.b"] = Tensor(np.zeros(arch.proj_hidden))
        params[f"{branch}.proj.1.w"] = Tensor(he((arch.proj_hidden, arch.proj_dim), arch.proj_hidden))
        params[f"{branch}.proj.1.b"] = Tensor(np.zeros(arch.proj_dim))
    return DualBranchModel(arch, params, buffers)


def branch_input(x: np.ndarray, branch: str) -> np.ndarray:
    return x if branch == "time" else magnitude_input(x)


def encode(model: DualBranchModel, branch: str, x, mode: str = "eval",
           rng: Optional[np.random.Generator] = None) -> Tensor:
    """Run one branch's conv stack and global average pooling -> B x D features.

    ``mode="train"`` normalises with batch statistics (updating running stats);
    dropout is applied only when ``rng`` is supplied.
    """
    a, p = model.arch, model.params
    x = dc.as_tensor(x)
    if x.ndim != 3 or x.shape[1] != a.channels or x.shape[2] != a.input_length(branch):
        raise dc.ContractError(
            f"{branch} branch expects B x {a.channels} x {a.input_length(branch)} input, got {x.shape}"
        )
    if x.shape[0] == 0:
        return Tensor(np.zeros((0, a.feature_dim)))
    h = dc.transpose(x, (0, 2, 1))  # channels-last inside the stack
    for i, k in enumerate(a.kernels):
        pre = f"{branch}.enc.{i}"
        h = dc.conv1d_nlc(h, p[f"{pre}.conv.w"], p[f"{pre}.conv.b"], stride=1, padding=k // 2)
        h = dc.batchnorm_nlc(h, p[f"{pre}.bn.gamma"], p[f"{pre}.bn.beta"], mode, model.buffers[f"{pre}.bn"])
        h = dc.relu(h)
        h = dc.maxpool_nlc(h)
        h = dc.dropout(h, a.dropout, rng)
    return dc.mean(h, axis=1)


def classify(model: DualBranchModel, branch: str, features: Tensor) -> Tensor:
    p = model.params
    return dc.matmul(features, p[f"{branch}.cls.w"]) + p[f"{branch}.cls.b"]


def forward_branch(model: DualBranchModel, branch: str, x, mode: str = "eval",
                   rng: Optional[np.random.Generator] = None) -> tuple[Tensor, Tensor]:
    """Features (B x D) and class probabilities (B x C) for one branch."""
    z = encode(model, branch, x, mode, rng)
    if z.shape[0] == 0:
        return z, Tensor(np.zeros((0, model.arch.classes)))
    return z, dc.softmax(classify(model, branch, z))


def project_joint(model: DualBranchModel, features: Tensor, branch: str) -> Tensor:
    """Map branch features into the shared time-frequency space (unit rows)."""
    p = model.params
    h = dc.relu(dc.matmul(features, p[f"{branch}.proj.0.w"]) + p[f"{branch}.proj.0.b"])
    h = dc.matmul(h, p[f"{branch}.proj.1.w"]) + p[f"{branch}.proj.1.b"]
    return dc.l2_normalize(h)


def fusion_weight(p: np.ndarray, p_f: np.ndarray) -> np.ndarray:
    mp, mf = np.max(p, axis=-1), np.max(p_f, axis=-1)
    tot = mp + mf
    return np.where(tot > 0, mp / np.where(tot > 0, tot, 1.0), 0.5)


def fuse_predictions(p: np.ndarray, p_f: np.ndarray) -> np.ndarray:
    """Confidence-weighted mixture: weight of each branch is its peak probability."""
    p, p_f = np.asarray(p, dtype=np.float64), np.asarray(p_f, dtype=np.float64)
    a = fusion_weight(p, p_f)[..., None]
    return a * p + (1 - a) * p_f


def fuse_tensors(p: Tensor, p_f: Tensor) -> Tensor:
    """Differentiable :func:`fuse_predictions` for B x C probability tensors."""
    mp, mf = dc.amax(p, axis=-1), dc.amax(p_f, axis=-1)
    a = dc.reshape(mp / (mp + mf), (-1, 1))
    return a * p + (1.0 - a) * p_f


@dataclass
class Prediction:
    time_probs: np.ndarray
    freq_probs: np.ndarray
    fused: np.ndarray
    features: np.ndarray
    freq_features: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.fused, axis=-1)


def predict(model: DualBranchModel, x: np.ndarray, mode: str = "eval", use_freq: bool = True,
            batch_size: int = 256) -> Prediction:
    """Gradient-free forward of both branches in chunks."""
    parts = []
    with dc.no_grad():
        for s in range(0, max(len(x), 1), batch_size):
            xb = x[s:s + batch_size]
            z, p = forward_branch(model, "time", xb, mode)
            if use_freq:
                zf, pf = forward_branch(model, "freq", branch_input(xb, "freq"), mode)
                fused = fuse_predictions(p.data, pf.data)
            else:
                zf, pf, fused = Tensor(np.zeros_like(z.data)), Tensor(np.zeros_like(p.data)), p.data
            parts.append((p.data, pf.data, fused, z.data, zf.data))
    return Prediction(*(np.concatenate(c) for c in zip(*parts)))


# -- mean teacher -----------------------------------------------------------

@dataclass
class TeacherStudent:
    teacher: DualBranchModel
    student: DualBranchModel
    ema_alpha: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ValueError("ema_alpha must lie in [0, 1]")
        if not dc.shape_compatible(self.teacher.params, self.student.params):
            raise dc.ContractError("teacher and student parameter sets are not shape-compatible")

    @classmethod
    def from_source(cls, source: DualBranchModel, ema_alpha: float = 0.999) -> "TeacherStudent":
        return cls(source.copy(), source.copy(), ema_alpha)


def ema_update(ts: TeacherStudent) -> TeacherStudent:
    """teacher <- alpha * teacher + (1 - alpha) * student, parameter-wise, in place."""
    if not dc.shape_compatible(ts.teacher.params, ts.student.params):
        raise dc.ContractError("teacher and student parameter sets are not shape-compatible")
    a = ts.ema_alpha
    for name, t in ts.teacher.params.items():
        t.data = a * t.data + (1.0 - a) * ts.student.params[name].data
    return ts


# -- source pretraining -----------------------------------------------------

def supervised_loss(model: DualBranchModel, xb: np.ndarray, yb: np.ndarray,
                    rng: Optional[np.random.Generator]) -> Tensor:
    """CE on the fused prediction plus CE on each branch."""
    onehot = np.eye(model.arch.classes)[yb]
    _, p = forward_branch(model, "time", xb, "train", rng)
    _, pf = forward_branch(model, "freq", branch_input(xb, "freq"), "train", rng)
    fused = fuse_tensors(p, pf)
    total = None
    for probs in (fused, p, pf):
        ce = -dc.mean(dc.sum_(dc.log(probs, clamp=1e-12) * onehot, axis=1))
        total = ce if total is None else total + ce
    return total


def pretrain_source(model: DualBranchModel, dataset, epochs: int = 10, lr: float = 1e-3,
                    seed: int = 0, batch_size: int = 32) -> DualBranchModel:
    """Supervised training on the labelled source set; returns the trained model."""
    from .data import batches

    if dataset.labels is None:
        raise ValueError("source pretraining needs a labelled dataset")
    if dataset.meta.channels != model.arch.channels or dataset.meta.length != model.arch.length:
        raise dc.ContractError("dataset does not match the model architecture")
    for p in model.params.values():
        p.requires_grad = True
    opt = dc.Adam(model.params, lr)
    for epoch in range(epochs):
        losses = []
        for bi, idx in enumerate(batches(len(dataset), batch_size, seed, epoch)):
            if len(idx) < 2:
                continue
            rng = np.random.default_rng([seed, epoch, bi])
            opt.zero_grad()
            loss = supervised_loss(model, dataset.samples[idx], dataset.labels[idx], rng)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite source loss at epoch {epoch}, batch {bi}")
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        log.info("pretrain epoch %d loss %.4f", epoch, float(np.mean(losses)) if losses else float("nan"))
    opt.zero_grad()
    return model


# -- model files ------------------------------------------------------------

def save_model(model: DualBranchModel, path) -> None:
    Path(path).write_bytes(dc.serialize_params(model.state_arrays(), header=model.arch.header()))


def load_model(path) -> DualBranchModel:
    header, arrays = dc.deserialize_params(Path(path).read_bytes(), with_header=True)
    arch = Arch.from_header(header)
    model = build_model(arch, 0)
    for name in list(model.params):
        if name not in arrays:
            raise dc.ContractError(f"model file lacks parameter {name!r}")
        if arrays[name].shape != model.params[name].shape:
            raise dc.ContractError(f"parameter {name!r} has shape {arrays[name].shape}")
        model.params[name] = Tensor(arrays[name])
    for name, rs in model.buffers.items():
        rs.mean[:] = arrays[f"{name}.running_mean"]
        rs.var[:] = arrays[f"{name}.running_var"]
    return model
