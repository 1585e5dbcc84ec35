"""Source-free adaptation loop and the scaling bench."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, fields, replace
from typing import List, Optional, Sequence

import numpy as np

from . import diffcore as dc
from .augment import AugPolicy, augment_batch, mix
from .curriculum import CurriculumState, advance
from .data import Dataset, batches
from .losses import (
    LossBundle,
    class_balanced_ce,
    combined_contrastive,
    consistency_kl,
    info_nce_masked,
    label_propagation,
    total_loss,
    tsallis_uncertainty,
)
from .metrics import macro_f1
from .model import (
    DualBranchModel,
    TeacherStudent,
    branch_input,
    ema_update,
    encode,
    classify,
    forward_branch,
    fuse_predictions,
    fuse_tensors,
    predict,
    project_joint,
)
from .pseudo import MemoryBank, TemporalQueue, exclusion_mask, refine_pseudo_label
from .select import confidence_spread, partition, thresholds
from .spectral import Spectrum, freq_augment

log = logging.getLogger(__name__)

# view indices fed to the stream-id hash
_STRONG_TIME_Q, _STRONG_TIME_K, _STRONG_FREQ_Q, _STRONG_FREQ_K, _DROPOUT = 100, 101, 102, 103, 104


@dataclass
class AdaptConfig:
    epochs: int = 40
    batch_size: int = 32
    bank_capacity: int = 0  # 0 -> min(N, 1024)
    queue_capacity: int = 512
    T: int = 5
    K: int = 10
    L: int = 4
    temperature: float = 0.07
    lr: float = 1e-6
    ema_alpha: float = 0.999
    seed: int = 0
    weak_jitter: float = 0.05
    weak_scale_low: float = 0.9
    weak_scale_high: float = 1.1
    strong_jitter: float = 0.1
    max_segments: int = 5
    freq_remove: int = 4
    freq_add: int = 2
    freq_amplitude: float = 0.1
    alpha1: float = 0.5
    alpha2: float = 0.5
    tsallis_a: float = 2.0
    mu_r0: float = 1.0
    mu_c0: float = 0.5
    mu_cons0: float = 0.5
    mu_u0: float = 0.5
    curriculum_alpha: float = 0.005
    curriculum_beta: float = 1e-4
    use_freq: bool = True
    record_timing: bool = False

    def validate(self):
        for name in ("batch_size", "queue_capacity", "T", "K", "L"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.L < 2:
            raise ValueError("L must be >= 2")
        if self.epochs < 0 or self.bank_capacity < 0:
            raise ValueError("epochs and bank_capacity must be >= 0")
        if self.bank_capacity and self.K > self.bank_capacity:
            raise ValueError("K must not exceed bank_capacity")
        if self.temperature <= 0 or self.lr <= 0:
            raise ValueError("temperature and lr must be > 0")
        if not 0 <= self.ema_alpha <= 1:
            raise ValueError("ema_alpha must lie in [0, 1]")

    def weak_policy(self) -> AugPolicy:
        return AugPolicy("weak", self.weak_jitter, self.weak_scale_low, self.weak_scale_high, 1, self.seed)

    def strong_policy(self) -> AugPolicy:
        return AugPolicy("strong", self.strong_jitter, 1.0, 1.0, self.max_segments, self.seed)

    def curriculum(self) -> CurriculumState:
        return CurriculumState(self.mu_r0, self.mu_c0, self.mu_cons0, self.mu_u0, 0,
                               self.curriculum_alpha, self.curriculum_beta)


REPORT_HEADER = ["epoch", *LossBundle.names(), "mu_r", "mu_c", "mu_cons", "mu_u", "macro_f1", "seconds"]


@dataclass
class AdaptReport:
    losses: List[LossBundle] = field(default_factory=list)
    coefficients: List[CurriculumState] = field(default_factory=list)
    macro_f1: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)
    record_timing: bool = False

    def __len__(self):
        return len(self.losses)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for e, (lb, cs, f1, sec) in enumerate(zip(self.losses, self.coefficients, self.macro_f1, self.seconds)):
            w.writerow([e + 1, *(f"{v:.10g}" for v in lb.values()),
                        *(f"{v:.10g}" for v in (cs.mu_r, cs.mu_c, cs.mu_cons, cs.mu_u)),
                        "" if np.isnan(f1) else f"{f1:.6f}",
                        f"{sec:.3f}" if self.record_timing else ""])
        return buf.getvalue()


@dataclass
class AdaptState:
    ts: TeacherStudent
    bank: MemoryBank
    queues: dict
    curriculum: CurriculumState
    optimizer: dc.Adam


def _teacher_fused(ts: TeacherStudent, x: np.ndarray, use_freq: bool, need_feat: bool = False):
    """Teacher forward with batch statistics and no dropout."""
    z, p = forward_branch(ts.teacher, "time", x, "train")
    if use_freq:
        _, pf = forward_branch(ts.teacher, "freq", branch_input(x, "freq"), "train")
        fused = fuse_predictions(p.data, pf.data)
    else:
        fused = p.data
    return (z.data, fused) if need_feat else fused


def _strong_freq(x: np.ndarray, idx: np.ndarray, cfg: AdaptConfig, epoch: int, view: int) -> np.ndarray:
    mags = branch_input(x, "freq")
    out = np.empty_like(mags)
    for j, (m, i) in enumerate(zip(mags, idx)):
        sid = mix(cfg.seed, epoch, int(i), view)
        spec = freq_augment(Spectrum(m, x.shape[-1]), "remove", cfg.freq_remove, seed=sid)
        spec = freq_augment(spec, "add", cfg.freq_add, cfg.freq_amplitude, seed=sid + 1)
        out[j] = spec.magnitudes
    return out


def _query_histories(queue: TemporalQueue, idx, labels, epoch: int):
    out = []
    for i, y in zip(idx, labels):
        h = queue.history(int(i))
        h[epoch] = int(y)
        out.append(h)
    return out


def adapt_batch(state: AdaptState, x: np.ndarray, idx: np.ndarray, cfg: AdaptConfig, epoch: int):
    """One optimisation step on a target batch; returns (LossBundle, tau_c, tau_u)."""
    ts, C = state.ts, state.ts.student.arch.classes
    use_freq = cfg.use_freq
    weak, strong = cfg.weak_policy(), cfg.strong_policy()

    # (1) pseudo labels from the teacher on a weak view, refined against the bank
    with dc.no_grad():
        views = [augment_batch(x, weak, [mix(cfg.seed, epoch, int(i), v) for i in idx]) for v in range(cfg.L)]
        z_w, p_w = _teacher_fused(ts, views[0], use_freq, need_feat=True)
        refined = refine_pseudo_label(state.bank, z_w, cfg.K)
        y_hat = np.atleast_1d(refined.label)

        # (2) confidence on the clean batch, spread over the L weak views
        conf = _teacher_fused(ts, x, use_freq).max(axis=1)
        view_conf = np.stack([p_w.max(axis=1)] + [_teacher_fused(ts, v, use_freq).max(axis=1) for v in views[1:]])
    unc = confidence_spread(view_conf)
    tau_c, tau_u = thresholds(conf, unc)
    part = partition(conf, unc, tau_c, tau_u, predicted=y_hat)

    # student forward on the clean batch
    student = ts.student
    drop = np.random.default_rng(mix(cfg.seed, epoch, int(idx[0]), _DROPOUT))
    z_s, p_s = forward_branch(student, "time", x, "train", drop)
    if use_freq:
        zf_s, pf_s = forward_branch(student, "freq", branch_input(x, "freq"), "train", drop)
        fused_s = fuse_tensors(p_s, pf_s)
    else:
        fused_s = p_s

    # (3) reliable / non-reliable objectives
    counts = np.bincount(y_hat[part.reliable], minlength=C)
    l_ce = class_balanced_ce(dc.take(fused_s, part.reliable), y_hat[part.reliable], counts)
    l_lp = label_propagation(dc.take(fused_s, part.non_reliable), y_hat[part.non_reliable])

    # (4) contrastive terms with history-based negative exclusion
    xq = augment_batch(x, strong, [mix(cfg.seed, epoch, int(i), _STRONG_TIME_Q) for i in idx])
    xk = augment_batch(x, strong, [mix(cfg.seed, epoch, int(i), _STRONG_TIME_K) for i in idx])
    q_t = dc.l2_normalize(encode(student, "time", xq, "train", drop))
    with dc.no_grad():
        k_t = dc.l2_normalize(encode(ts.teacher, "time", xk, "train")).data
    qt_queue = state.queues["time"]
    mask = exclusion_mask(qt_queue, _query_histories(qt_queue, idx, y_hat, epoch), epoch)
    l_time = info_nce_masked(q_t, k_t, qt_queue.keys[: qt_queue.size], mask, cfg.temperature)
    if use_freq:
        fq = _strong_freq(x, idx, cfg, epoch, _STRONG_FREQ_Q)
        fk = _strong_freq(x, idx, cfg, epoch, _STRONG_FREQ_K)
        q_f = dc.l2_normalize(encode(student, "freq", fq, "train", drop))
        with dc.no_grad():
            k_f = dc.l2_normalize(encode(ts.teacher, "freq", fk, "train")).data
        fq_queue = state.queues["freq"]
        mask = exclusion_mask(fq_queue, _query_histories(fq_queue, idx, y_hat, epoch), epoch)
        l_freq = info_nce_masked(q_f, k_f, fq_queue.keys[: fq_queue.size], mask, cfg.temperature)
        q_j = project_joint(student, z_s, "time")
        k_j = project_joint(student, zf_s, "freq")
        j_queue = state.queues["joint"]
        mask = exclusion_mask(j_queue, _query_histories(j_queue, idx, y_hat, epoch), epoch)
        l_tf = info_nce_masked(q_j, k_j, j_queue.keys[: j_queue.size], mask, cfg.temperature)
        # (5) output-space agreement between the branches
        l_cons = consistency_kl(p_s, pf_s)
    else:
        l_freq = l_tf = l_cons = dc.Tensor(0.0)
    l_cl_t, l_cl_f, l_cl_tf, l_cl = combined_contrastive(l_time, l_freq, l_tf, cfg.alpha1, cfg.alpha2)

    # (6) uncertainty reduction, (7) total objective and updates
    l_ul = tsallis_uncertainty(fused_s, cfg.tsallis_a)
    cs = state.curriculum
    loss = total_loss(l_ce, l_lp, l_cl, l_cons, l_ul, cs.mu_r, cs.mu_c, cs.mu_cons, cs.mu_u)
    parts = dict(ce=l_ce, lp=l_lp, cl_time=l_cl_t, cl_freq=l_cl_f, cl_tf=l_cl_tf, cl=l_cl,
                 cons=l_cons, ul=l_ul, total=loss)
    bundle = LossBundle(**{k: float(dc.as_tensor(v).data) for k, v in parts.items()})
    bad = [k for k, v in bundle.__dict__.items() if not np.isfinite(v)]
    if bad:
        raise FloatingPointError(f"non-finite adaptation loss at epoch {epoch}: {', '.join(bad)}")
    state.optimizer.zero_grad()
    if loss.requires_grad:
        loss.backward()
        state.optimizer.step()
    ema_update(ts)

    # (8) queues and bank
    state.queues["time"].record(k_t, y_hat, epoch, idx)
    if use_freq:
        state.queues["freq"].record(k_f, y_hat, epoch, idx)
        state.queues["joint"].record(k_j.data, y_hat, epoch, idx)
    state.bank.update(z_w, p_w)
    return bundle, tau_c, tau_u


def adapt_epoch(state: AdaptState, target: Dataset, cfg: AdaptConfig, epoch: int):
    """Run every batch of one epoch, then advance the curriculum.

    Returns the epoch-mean LossBundle.
    """
    if len(state.bank) < cfg.K:
        raise ValueError("memory bank holds fewer than K entries; run the warm-up sweep first")
    bundles, taus = [], []
    for idx in batches(len(target), cfg.batch_size, cfg.seed, epoch):
        b, tc, tu = adapt_batch(state, target.samples[idx], idx, cfg, epoch)
        bundles.append(b)
        taus.append((tc, tu))
    tc, tu = np.mean(taus, axis=0)
    state.curriculum = advance(state.curriculum, float(tc), float(tu))
    mean = np.mean([b.values() for b in bundles], axis=0)
    return LossBundle(*mean)


def warm_up_bank(ts: TeacherStudent, target: Dataset, capacity: int, use_freq: bool = True) -> MemoryBank:
    """Fill the bank from a clean eval-mode sweep of the teacher."""
    arch = ts.teacher.arch
    bank = MemoryBank(capacity, arch.feature_dim, arch.classes)
    pred = predict(ts.teacher, target.samples[:capacity], mode="eval", use_freq=use_freq)
    return bank.update(pred.features, pred.fused)


def evaluate(model: DualBranchModel, data: Dataset, use_freq: bool = True) -> float:
    if data.labels is None:
        return float("nan")
    pred = predict(model, data.samples, mode="eval", use_freq=use_freq)
    return macro_f1(data.labels, pred.labels, model.arch.classes).macro_f1


def run_adaptation(source_model: DualBranchModel, target: Dataset, config: AdaptConfig,
                   eval_data: Optional[Dataset] = None) -> tuple[TeacherStudent, AdaptReport]:
    """Adapt a source model to unlabelled target data.

    Only the model and the target samples are used; target labels, when
    present, feed the reported macro-F1 (on ``eval_data`` if given).
    """
    config.validate()
    arch = source_model.arch
    m = target.meta
    if (m.channels, m.length, m.classes) != (arch.channels, arch.length, arch.classes):
        raise dc.ContractError(
            f"model expects {arch.channels} x {arch.length} with {arch.classes} classes; "
            f"target is {m.channels} x {m.length} with {m.classes}"
        )
    ts = TeacherStudent.from_source(source_model, config.ema_alpha)
    report = AdaptReport(record_timing=config.record_timing)
    if config.epochs == 0:
        return ts, report
    unlabeled = target.unlabeled()
    capacity = config.bank_capacity or min(len(unlabeled), 1024)
    if config.K > capacity:
        raise ValueError(f"K={config.K} exceeds the memory bank capacity {capacity}")
    bank = warm_up_bank(ts, unlabeled, capacity, config.use_freq)
    D, P = arch.feature_dim, arch.proj_dim
    queues = {
        "time": TemporalQueue(config.queue_capacity, D, config.T),
        "freq": TemporalQueue(config.queue_capacity, D, config.T),
        "joint": TemporalQueue(config.queue_capacity, P, config.T),
    }
    for p in ts.student.params.values():
        p.requires_grad = True
    state = AdaptState(ts, bank, queues, config.curriculum(), dc.Adam(ts.student.params, config.lr))
    scored = eval_data if eval_data is not None else target
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        bundle = adapt_epoch(state, unlabeled, config, epoch)
        elapsed = time.perf_counter() - t0
        f1 = evaluate(ts.teacher, scored, config.use_freq)
        report.losses.append(bundle)
        report.coefficients.append(state.curriculum)
        report.macro_f1.append(f1)
        report.seconds.append(elapsed)
        log.info("epoch %d total %.4f macro-F1 %.4f (%.1fs)", epoch + 1, bundle.total, f1, elapsed)
    state.optimizer.zero_grad()
    return ts, report


# -- scaling bench ----------------------------------------------------------

@dataclass
class BenchRow:
    n: int
    seconds: float
    per_sample: float


def bench_complexity(make_target, source_model: DualBranchModel, sizes: Sequence[int],
                     config: AdaptConfig) -> tuple[List[BenchRow], bool]:
    """Time adaptation for each target size with E and M held fixed.

    ``make_target(n)`` returns a dataset of n samples.  The flag is True when
    per-sample time at the largest size exceeds that at the smallest by > 25%.
    """
    rows = []
    for n in sizes:
        target = make_target(n)
        t0 = time.perf_counter()
        run_adaptation(source_model, target, config)
        sec = time.perf_counter() - t0
        rows.append(BenchRow(n, sec, sec / n))
    flag = False
    if len(rows) > 1:
        lo = min(rows, key=lambda r: r.n)
        hi = max(rows, key=lambda r: r.n)
        flag = hi.per_sample > 1.25 * lo.per_sample
    return rows, flag
