"""Confidence-aware fine-tuning against denoised copies.

For each clean sample we draw M noise-and-denoise copies, keep the ones the
current classifier still assigns to the true label (the non-hallucinated
set), and train with two terms:

* a selective cross-entropy over the kept copies, divided by M regardless
  of how many were kept (with a min-CE fallback when none were, so training
  never stalls at the start), and
* a masked adversarial consistency term: only when *all* M copies were kept,
  run a projected-gradient ascent inside an L2 ball around each copy's
  offset from the clean point, maximizing KL to the average softmax of the
  copies, and take the worst case over copies.

The total objective is sce + lambda * madv.  All randomness flows through
derived streams, so a full fine-tuning run is bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import net
from .net import (AdamHyper, Classifier, MlpSpec, NonFiniteError, accumulate_grads,
                  cross_entropy_rows, forward, init_adam_state, init_classifier,
                  kl_to_target_rows, optimizer_step, softmax)
from .numerics import RngStream
from .world import Dataset, DiffusionSchedule, MixtureSpec, noise_and_denoise_batch

ADV_VARIANTS = ("ours", "hard_label_max", "soft_label_avg", "hard_label_avg", "none")


@dataclass
class FinetuneConfig:
    sigma: float
    m_copies: int = 4
    lambda_adv: float = 2.0
    epsilon: float = 0.25
    t_steps: int = 4
    epochs: int = 10
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 32              # clean samples accumulated per optimizer step
    cold_start: bool = True
    update_selection: bool = True     # False: freeze each sample's selection after epoch 0
    adv_variant: str = "ours"
    sce_selection: bool = True        # False: plain mean CE over all copies in the sce slot
    madv_mask: bool = True            # False: drop the all-copies-kept gate (ablation only)
    eps_double_after_epoch: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.m_copies < 1:
            raise ValueError(f"m_copies must be >= 1, got {self.m_copies}")
        if self.t_steps < 1:
            raise ValueError(f"t_steps must be >= 1, got {self.t_steps}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.lambda_adv < 0:
            raise ValueError(f"lambda_adv must be >= 0, got {self.lambda_adv}")
        if self.adv_variant not in ADV_VARIANTS:
            raise ValueError(f"adv_variant must be one of {ADV_VARIANTS}, got {self.adv_variant!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------

@dataclass
class SelectionResult:
    """Which of the M denoised copies of one clean sample are trusted.

    ``n_correct`` counts copies whose argmax matches y before any fallback;
    the adversarial mask keys off it.  ``nh_indices`` is the contributing
    set: equal to the correct copies, except that when none are correct and
    cold start is on it holds exactly the min-CE copy (``cold_start_used``).
    """

    denoised: np.ndarray        # (M, d)
    ce_losses: np.ndarray       # (M,)
    nh_indices: np.ndarray      # 0-based contributing indices
    n_correct: int
    cold_start_used: bool


def select_non_hallucinated(clf: Classifier, denoised: np.ndarray, y: int,
                            cold_start: bool = True) -> SelectionResult:
    """Split copies into kept/rejected by the classifier's own argmax."""
    denoised = np.atleast_2d(np.asarray(denoised, dtype=float))
    logit_rows = forward(clf, denoised).zs[-1]
    ce = cross_entropy_rows(logit_rows, y)
    correct = np.flatnonzero(np.argmax(logit_rows, axis=1) == y)
    cold_used = False
    nh = correct
    if correct.size == 0 and cold_start:
        nh = np.array([int(np.argmin(ce))])
        cold_used = True
    return SelectionResult(denoised=denoised, ce_losses=ce, nh_indices=nh,
                           n_correct=int(correct.size), cold_start_used=cold_used)


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

@dataclass
class LossTerm:
    """A scalar loss with parameter gradients and per-copy input gradients."""

    value: float
    param_grads: dict[str, np.ndarray]
    input_grads: np.ndarray
    empty_selection: bool = False
    mask_active: bool = False


def _zero_term(m: int, dim: int, **flags) -> LossTerm:
    return LossTerm(value=0.0, param_grads={}, input_grads=np.zeros((m, dim)), **flags)


def sce_loss(clf: Classifier, selection: SelectionResult, y: int) -> LossTerm:
    """Selective cross-entropy: sum of CE over contributing copies, divided by M.

    The divisor is always M, so keeping fewer copies shrinks the term rather
    than re-normalizing it.  CE is recomputed against the current parameters
    (the selection may be frozen from an earlier pass).  An empty selection
    with cold start disabled contributes exactly zero, flagged.
    """
    m, dim = selection.denoised.shape
    contributing = selection.nh_indices
    if selection.cold_start_used:
        trace_all = forward(clf, selection.denoised)
        ce_now = cross_entropy_rows(trace_all.zs[-1], y)
        contributing = np.array([int(np.argmin(ce_now))])
    if contributing.size == 0:
        return _zero_term(m, dim, empty_selection=True)
    trace = forward(clf, selection.denoised)
    ce = cross_entropy_rows(trace.zs[-1], y)
    row_weights = np.zeros(m)
    row_weights[contributing] = 1.0 / m
    grads = net.backward(clf, trace, "cross_entropy", y=np.full(m, y), weights=row_weights)
    return LossTerm(value=float(ce[contributing].sum() / m),
                    param_grads=grads.param_grads, input_grads=grads.input_grad)


def ce_baseline_loss(clf: Classifier, denoised: np.ndarray, y: int) -> LossTerm:
    """Plain mean cross-entropy over all M copies, hallucinated or not."""
    denoised = np.atleast_2d(np.asarray(denoised, dtype=float))
    m = denoised.shape[0]
    trace = forward(clf, denoised)
    ce = cross_entropy_rows(trace.zs[-1], y)
    grads = net.backward(clf, trace, "cross_entropy", y=np.full(m, y),
                         weights=np.full(m, 1.0 / m))
    return LossTerm(value=float(ce.mean()), param_grads=grads.param_grads,
                    input_grads=grads.input_grad)


def consistency_target(clf: Classifier, denoised: np.ndarray) -> np.ndarray:
    """Average softmax over the copies; used as a constant adversarial target."""
    denoised = np.atleast_2d(np.asarray(denoised, dtype=float))
    return softmax(forward(clf, denoised).zs[-1]).mean(axis=0)


def pgd_attack(clf: Classifier, x: np.ndarray, eta_init: np.ndarray, y_hat: np.ndarray,
               epsilon: float, t_steps: int) -> np.ndarray:
    """L2 projected gradient ascent on KL(y_hat || softmax(clf(x + eta))).

    T steps of length 2*epsilon/T along the normalized input gradient, each
    followed by projection onto the ball of radius epsilon around eta_init.
    A zero gradient leaves eta unchanged for that step.  ``eta_init`` may be
    one offset (d,) or a row-stacked batch of independent attacks (m, d).
    """
    if epsilon <= 0 or t_steps < 1:
        raise ValueError(f"need epsilon > 0 and t_steps >= 1, got {epsilon}, {t_steps}")
    x = np.asarray(x, dtype=float)
    eta0 = np.asarray(eta_init, dtype=float)
    single = eta0.ndim == 1
    eta = np.atleast_2d(eta0).copy()
    step = 2.0 * epsilon / t_steps
    for _ in range(t_steps):
        trace = forward(clf, x[None, :] + eta)
        g = net.backward(clf, trace, "kl_to_target", target=y_hat,
                         with_param_grads=False).input_grad
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        scale = np.where(norms > 0.0, step / np.where(norms > 0.0, norms, 1.0), 0.0)
        eta = eta + scale * g
        off = eta - np.atleast_2d(eta0)
        off_norm = np.linalg.norm(off, axis=1, keepdims=True)
        shrink = np.where(off_norm > epsilon, epsilon / np.where(off_norm > 0, off_norm, 1.0), 1.0)
        eta = np.atleast_2d(eta0) + shrink * off
    return eta[0] if single else eta


def combine_adv_values(kl_values: np.ndarray, variant: str) -> tuple[float, np.ndarray]:
    """Reduce per-copy adversarial KL values to one loss; returns (value, row weights)."""
    kl_values = np.asarray(kl_values, dtype=float)
    m = kl_values.size
    if variant in ("ours", "hard_label_max"):
        i_star = int(np.argmax(kl_values))
        w = np.zeros(m)
        w[i_star] = 1.0
        return float(kl_values[i_star]), w
    if variant in ("soft_label_avg", "hard_label_avg"):
        return float(kl_values.mean()), np.full(m, 1.0 / m)
    raise ValueError(f"no adversarial reduction for variant {variant!r}")


def madv_loss(clf: Classifier, x: np.ndarray, selection: SelectionResult, y: int,
              config: FinetuneConfig, epsilon: float | None = None) -> LossTerm:
    """Masked adversarial consistency loss.

    Exactly zero (value and gradients) unless every copy was kept.  Otherwise
    each copy's offset eta_i = denoised_i - x seeds a PGD ascent, and the
    per-copy KL values are reduced per the configured variant (worst case for
    "ours").  The soft target is the consistency average; hard variants use
    the one-hot label instead, in the attack and in the loss.
    """
    m, dim = selection.denoised.shape
    x = np.asarray(x, dtype=float)
    if config.madv_mask and selection.n_correct < m:
        return _zero_term(m, dim)
    eps = config.epsilon if epsilon is None else epsilon
    if config.adv_variant in ("hard_label_max", "hard_label_avg"):
        target = np.zeros(clf.spec.num_classes)
        target[y] = 1.0
    else:
        target = consistency_target(clf, selection.denoised)
    eta0 = selection.denoised - x[None, :]
    eta_star = pgd_attack(clf, x, eta0, target, eps, config.t_steps)
    trace = forward(clf, x[None, :] + eta_star)
    kl = kl_to_target_rows(trace.zs[-1], target)
    value, row_weights = combine_adv_values(kl, config.adv_variant)
    grads = net.backward(clf, trace, "kl_to_target", target=target, weights=row_weights)
    return LossTerm(value=value, param_grads=grads.param_grads,
                    input_grads=grads.input_grad, mask_active=True)


# ---------------------------------------------------------------------------
# Full per-sample objective
# ---------------------------------------------------------------------------

@dataclass
class StepResult:
    value: float
    param_grads: dict[str, np.ndarray]
    selection: SelectionResult
    sce: float
    madv: float
    mask_active: bool
    cold_start_used: bool
    n_correct: int


def ftcadis_step_loss(clf: Classifier, x: np.ndarray, y: int, config: FinetuneConfig,
                      rng: RngStream, world: MixtureSpec, schedule: DiffusionSchedule,
                      frozen_selection: SelectionResult | None = None,
                      epsilon: float | None = None) -> StepResult:
    """Loss and gradients for one clean sample: sce + lambda * madv.

    Draws M fresh noise-and-denoise copies from the stream unless a frozen
    selection (copies included) is supplied.  The adversarial term is skipped
    entirely when the variant is "none" or lambda is zero.
    """
    x = np.asarray(x, dtype=float)
    if frozen_selection is not None:
        selection = frozen_selection
    else:
        denoised = noise_and_denoise_batch(x, config.sigma, config.m_copies,
                                           rng.child("noise"), world, schedule)
        selection = select_non_hallucinated(clf, denoised, y, cold_start=config.cold_start)

    if config.sce_selection:
        sce = sce_loss(clf, selection, y)
    else:
        sce = ce_baseline_loss(clf, selection.denoised, y)

    total = sce.value
    grads = dict(sce.param_grads)
    madv_value = 0.0
    mask_active = False
    if config.adv_variant != "none" and config.lambda_adv > 0.0:
        madv = madv_loss(clf, x, selection, y, config, epsilon=epsilon)
        madv_value = madv.value
        mask_active = madv.mask_active
        if madv.mask_active:
            total += config.lambda_adv * madv.value
            accumulate_grads(grads, madv.param_grads, scale=config.lambda_adv)
    return StepResult(value=total, param_grads=grads, selection=selection,
                      sce=sce.value, madv=madv_value, mask_active=mask_active,
                      cold_start_used=selection.cold_start_used,
                      n_correct=selection.n_correct)


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    sce: float
    madv: float
    total: float
    mask_ratio: float
    cold_start_ratio: float
    nh_histogram: list[int]


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)

    @property
    def mask_ratios(self) -> list[float]:
        return [e.mask_ratio for e in self.epochs]

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "kind": "train-report",
            "epochs": [vars(e) for e in self.epochs],
        }


def pretrain(dataset: Dataset, spec: MlpSpec, epochs: int, lr: float, seed: int,
             weight_decay: float = 0.0, batch_size: int = 32) -> tuple[Classifier, float]:
    """Standard cross-entropy training on clean samples.

    Returns the classifier and its final clean train accuracy.  Aborts with
    a diagnostic if the loss goes non-finite.
    """
    if len(dataset) < 1:
        raise ValueError("dataset is empty")
    clf = init_classifier(spec, seed)
    state = init_adam_state(clf)
    hyper = AdamHyper(lr=lr, weight_decay=weight_decay)
    root = RngStream(seed).child("pretrain")
    n = len(dataset)
    for epoch in range(epochs):
        order = root.child("order", epoch).generator().permutation(n)
        for start in range(0, n, batch_size):
            rows = order[start:start + batch_size]
            trace = forward(clf, dataset.x[rows])
            ce = cross_entropy_rows(trace.zs[-1], dataset.y[rows])
            if not np.all(np.isfinite(ce)):
                raise NonFiniteError(f"pretrain loss went non-finite at epoch {epoch}")
            grads = net.backward(clf, trace, "cross_entropy", y=dataset.y[rows],
                                 weights=np.full(rows.size, 1.0 / rows.size))
            clf, state = optimizer_step(clf, net.GradientBundle(grads.param_grads,
                                                                grads.input_grad),
                                        state, hyper)
    accuracy = float(np.mean(net.predict_labels(clf, dataset.x) == dataset.y))
    return clf, accuracy



class NonFiniteLossError(NonFiniteError):
    """Raised when fine-tuning diverges; carries the last good classifier."""

    def __init__(self, message: str, last_good: Classifier):
        super().__init__(message)
        self.last_good = last_good


def finetune(clf: Classifier, dataset: Dataset, config: FinetuneConfig,
             world: MixtureSpec, schedule: DiffusionSchedule) -> tuple[Classifier, TrainReport]:
    """Fine-tune against denoised copies with the combined objective.

    Gradients are accumulated over ``batch_size`` clean samples per optimizer
    step.  Fresh noise is drawn per epoch per sample; with selection updates
    disabled, each sample's epoch-0 copies and selection are reused for the
    rest of the run.  If the loss goes non-finite the last epoch-boundary
    snapshot is attached to the raised error.
    """
    clf = clf.copy()
    state = init_adam_state(clf)
    root = RngStream(config.seed).child("finetune")
    n = len(dataset)
    report = TrainReport()
    frozen: dict[int, SelectionResult] = {}
    last_good = clf.copy()
    hyper = AdamHyper(lr=config.lr, weight_decay=config.weight_decay)
    for epoch in range(config.epochs):
        epsilon = config.epsilon
        if (config.eps_double_after_epoch is not None
                and epoch >= config.eps_double_after_epoch):
            epsilon = 2.0 * config.epsilon
        order = root.child("order", epoch).generator().permutation(n)
        acc_grads: dict[str, np.ndarray] = {}
        acc_count = 0
        sums = {"sce": 0.0, "madv": 0.0, "total": 0.0}
        mask_hits = 0
        cold_hits = 0
        nh_hist = np.zeros(config.m_copies + 1, dtype=int)
        for idx in order:
            idx = int(idx)
            frozen_sel = frozen.get(idx) if not config.update_selection else None
            step = ftcadis_step_loss(clf, dataset.x[idx], int(dataset.y[idx]), config,
                                     root.child("step", epoch, idx), world, schedule,
                                     frozen_selection=frozen_sel, epsilon=epsilon)
            if not math.isfinite(step.value):
                raise NonFiniteLossError(
                    f"fine-tuning loss went non-finite at epoch {epoch}, sample {idx}",
                    last_good=last_good)
            if not config.update_selection and epoch == 0:
                frozen[idx] = step.selection
            accumulate_grads(acc_grads, step.param_grads)
            acc_count += 1
            sums["sce"] += step.sce
            sums["madv"] += step.madv
            sums["total"] += step.value
            mask_hits += int(step.n_correct == config.m_copies)
            cold_hits += int(step.cold_start_used)
            nh_hist[step.n_correct] += 1
            if acc_count == config.batch_size:
                for key in acc_grads:
                    acc_grads[key] /= acc_count
                clf, state = optimizer_step(clf, net.GradientBundle(acc_grads, None),
                                            state, hyper)
                acc_grads = {}
                acc_count = 0
        if acc_count > 0:
            for key in acc_grads:
                acc_grads[key] /= acc_count
            clf, state = optimizer_step(clf, net.GradientBundle(acc_grads, None), state, hyper)
        report.epochs.append(EpochStats(
            epoch=epoch, sce=sums["sce"] / n, madv=sums["madv"] / n,
            total=sums["total"] / n, mask_ratio=mask_hits / n,
            cold_start_ratio=cold_hits / n, nh_histogram=nh_hist.tolist()))
        last_good = clf.copy()
    return clf, report


def ce_baseline_config(config: FinetuneConfig) -> FinetuneConfig:
    """The plain mean-CE objective expressed as a configuration of this trainer."""
    return replace(config, sce_selection=False, cold_start=False,
                   adv_variant="none", lambda_adv=0.0)
