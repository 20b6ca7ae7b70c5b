"""Synthetic worlds: Gaussian-mixture data, a diffusion-style noise schedule,
and the analytic one-shot denoiser.

The data distribution is a class-labeled Gaussian mixture.  Because the
mixture is known exactly, the posterior mean E[x | noisy x] is available in
closed form and stands in for a trained generative denoiser; it exhibits
genuine mode-flipping (hallucination) at high noise, which is what the
fine-tuning scheme has to cope with.  A Bayes oracle over the same mixture
provides ground-truth labels for hallucination diagnostics.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import RngStream, gaussian_matrix

DATASET_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Mixture world
# ---------------------------------------------------------------------------

@dataclass
class MixtureSpec:
    """Class-labeled isotropic Gaussian mixture in R^d.

    ``means`` is (n_modes, d); ``labels`` assigns each mode to a class;
    ``priors`` are the mode weights; ``tau`` is the within-mode std.
    """

    means: np.ndarray
    labels: np.ndarray
    priors: np.ndarray
    tau: float

    def __post_init__(self) -> None:
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.labels = np.asarray(self.labels, dtype=int)
        self.priors = np.asarray(self.priors, dtype=float)
        n_modes = self.means.shape[0]
        if self.labels.shape != (n_modes,) or self.priors.shape != (n_modes,):
            raise ValueError("means, labels, and priors must have one entry per mode")
        if abs(self.priors.sum() - 1.0) > 1e-12 or np.any(self.priors <= 0):
            raise ValueError(f"priors must be positive and sum to 1, got {self.priors}")
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValueError(f"tau must be positive and finite, got {self.tau}")
        k = self.num_classes
        if k < 2:
            raise ValueError("need at least 2 classes")
        present = np.unique(self.labels)
        if not np.array_equal(present, np.arange(k)):
            raise ValueError(f"class labels must cover 0..{k - 1}, got {present}")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "tau": self.tau,
            "modes": [
                {"mean": self.means[m].tolist(), "label": int(self.labels[m]),
                 "prior": float(self.priors[m])}
                for m in range(self.means.shape[0])
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MixtureSpec":
        modes = doc["modes"]
        return cls(
            means=np.array([m["mean"] for m in modes], dtype=float),
            labels=np.array([m["label"] for m in modes], dtype=int),
            priors=np.array([m["prior"] for m in modes], dtype=float),
            tau=float(doc["tau"]),
        )


@dataclass
class Dataset:
    """Row-stacked labeled samples."""

    x: np.ndarray  # (n, d)
    y: np.ndarray  # (n,)

    def __post_init__(self) -> None:
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.y = np.asarray(self.y, dtype=int)
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("x and y row counts differ")

    def __len__(self) -> int:
        return self.x.shape[0]


def sample_dataset(world: MixtureSpec, n: int, rng: RngStream) -> Dataset:
    """Draw n labeled samples: mode by prior, then N(mean, tau^2 I)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    gen = rng.generator()
    idx = gen.choice(world.means.shape[0], size=n, p=world.priors)
    x = world.means[idx] + gen.normal(0.0, world.tau, size=(n, world.dim))
    return Dataset(x=x, y=world.labels[idx])


def save_datasets(path: str | Path, world: MixtureSpec, splits: dict[str, Dataset]) -> None:
    doc = {
        "format_version": DATASET_FORMAT_VERSION,
        "kind": "dataset",
        "world": world.to_dict(),
        "splits": {
            name: {"x": ds.x.tolist(), "y": ds.y.tolist()} for name, ds in sorted(splits.items())
        },
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_datasets(path: str | Path) -> tuple[MixtureSpec, dict[str, Dataset]]:
    doc = json.loads(Path(path).read_text())
    version = doc.get("format_version")
    if version != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format_version {version!r}, "
                         f"expected {DATASET_FORMAT_VERSION}")
    world = MixtureSpec.from_dict(doc["world"])
    splits = {name: Dataset(np.asarray(s["x"], dtype=float), np.asarray(s["y"], dtype=int))
              for name, s in doc["splits"].items()}
    return world, splits


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------

@dataclass
class DiffusionSchedule:
    """Cumulative signal-retention constants of a stepwise noising process.

    ``alpha_bar[t-1]`` is the cumulative product of (1 - beta) up to step t
    (1-based t).  The matching noise std at step t is
    ``sqrt((1 - alpha_bar_t) / alpha_bar_t)``, strictly increasing in t.
    """

    alpha_bar: np.ndarray
    noise_levels: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=float)
        if self.alpha_bar.ndim != 1 or self.alpha_bar.size < 1:
            raise ValueError("alpha_bar must be a non-empty 1-D array")
        if np.any(self.alpha_bar <= 0) or np.any(self.alpha_bar >= 1):
            raise ValueError("alpha_bar entries must lie strictly in (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        self.noise_levels = np.sqrt((1.0 - self.alpha_bar) / self.alpha_bar)

    @property
    def t_max(self) -> int:
        return self.alpha_bar.size

    @classmethod
    def linear(cls, t_max: int = 1000, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "DiffusionSchedule":
        if t_max < 1:
            raise ValueError(f"t_max must be >= 1, got {t_max}")
        betas = np.linspace(beta_start, beta_end, t_max)
        return cls(alpha_bar=np.cumprod(1.0 - betas))


def get_timestep(schedule: DiffusionSchedule, sigma: float) -> tuple[int, float]:
    """Timestep whose noise level best matches sigma: argmin_t |sigma^2 - (1-ab_t)/ab_t|.

    Ties break toward the smaller t.  Returns (t, alpha_bar_t) with 1-based t.
    """
    if not (sigma > 0 and math.isfinite(sigma)):
        raise ValueError(f"sigma must be positive and finite, got {sigma}")
    levels = schedule.noise_levels
    if sigma < levels[0] or sigma > levels[-1]:
        raise ValueError(
            f"sigma={sigma} outside schedule range [{levels[0]}, {levels[-1]}]"
        )
    residual = np.abs(sigma * sigma - levels * levels)
    t_idx = int(np.argmin(residual))  # first minimum = smallest t
    return t_idx + 1, float(schedule.alpha_bar[t_idx])


# ---------------------------------------------------------------------------
# Analytic denoiser
# ---------------------------------------------------------------------------

def posterior_mean_denoise(world: MixtureSpec, x_noisy: np.ndarray, sigma: float) -> np.ndarray:
    """E[x | x + noise] under the mixture, for noise std ``sigma``.

    Mode responsibilities are computed in log space; the output is the
    responsibility-weighted combination of per-mode conjugate posterior
    means (tau^2 * x_noisy + sigma^2 * mean) / (tau^2 + sigma^2).
    Accepts a single vector or a row-stacked batch.
    """
    if not (sigma > 0 and math.isfinite(sigma)):
        raise ValueError(f"sigma must be positive and finite, got {sigma}")
    x = np.asarray(x_noisy, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    s2 = world.tau ** 2 + sigma ** 2
    diff = x[:, None, :] - world.means[None, :, :]          # (n, modes, d)
    logw = np.log(world.priors)[None, :] - (diff * diff).sum(axis=2) / (2.0 * s2)
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=1, keepdims=True)
    out = (world.tau ** 2 * x + sigma ** 2 * (w @ world.means)) / s2
    return out[0] if single else out


def one_shot_denoise(world: MixtureSpec, schedule: DiffusionSchedule,
                     x_t: np.ndarray, t: int) -> np.ndarray:
    """Denoiser interface: receives a scaled noisy point and its timestep.

    Recovers the unscaled noisy point x_t / sqrt(alpha_bar_t) and the
    effective noise std from t, then applies the posterior-mean denoiser.
    """
    if not (1 <= t <= schedule.t_max):
        raise ValueError(f"timestep {t} outside schedule 1..{schedule.t_max}")
    ab = schedule.alpha_bar[t - 1]
    sigma_eff = float(schedule.noise_levels[t - 1])
    return posterior_mean_denoise(world, np.asarray(x_t, dtype=float) / math.sqrt(ab), sigma_eff)


def noise_and_denoise_batch(x: np.ndarray, sigma: float, n: int, rng: RngStream,
                            world: MixtureSpec, schedule: DiffusionSchedule) -> np.ndarray:
    """n independent noise-and-denoise copies of one clean point.

    Each copy: delta ~ N(0, sigma^2 I); x_t = sqrt(alpha_bar_t*) (x + delta);
    the denoiser gets (x_t, t*) and returns its posterior-mean estimate.
    """
    x = np.asarray(x, dtype=float)
    t_star, ab = get_timestep(schedule, sigma)
    delta = gaussian_matrix(rng, n, x.size, sigma)
    x_t = math.sqrt(ab) * (x[None, :] + delta)
    return one_shot_denoise(world, schedule, x_t, t_star)


def noise_and_denoise(x: np.ndarray, sigma: float, rng: RngStream,
                      world: MixtureSpec, schedule: DiffusionSchedule) -> np.ndarray:
    """One noise-and-denoise draw; deterministic given the stream."""
    return noise_and_denoise_batch(x, sigma, 1, rng, world, schedule)[0]


# ---------------------------------------------------------------------------
# Bayes oracle and hallucination diagnostics
# ---------------------------------------------------------------------------

def _class_log_scores(world: MixtureSpec, x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - world.means[None, :, :]
    log_mode = np.log(world.priors)[None, :] - (diff * diff).sum(axis=2) / (2.0 * world.tau ** 2)
    k = world.num_classes
    scores = np.full((x.shape[0], k), -np.inf)
    for c in range(k):
        cols = log_mode[:, world.labels == c]
        m = cols.max(axis=1)
        scores[:, c] = m + np.log(np.exp(cols - m[:, None]).sum(axis=1))
    return scores


def bayes_classify_batch(world: MixtureSpec, x: np.ndarray) -> np.ndarray:
    """Most probable class per row; ties break toward the smallest class index."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return np.argmax(_class_log_scores(world, x), axis=1)


def bayes_classify(world: MixtureSpec, x: np.ndarray) -> int:
    return int(bayes_classify_batch(world, np.asarray(x, dtype=float)[None, :])[0])


def bayes_accuracy(world: MixtureSpec, dataset: Dataset) -> float:
    return float(np.mean(bayes_classify_batch(world, dataset.x) == dataset.y))


def hallucination_rate(world: MixtureSpec, dataset: Dataset, sigma: float, n_noise: int,
                       rng: RngStream, schedule: DiffusionSchedule) -> float:
    """Fraction of noise-and-denoise outputs whose Bayes label flips away from y.

    Monte-Carlo over dataset x n_noise draws with per-sample derived streams,
    so the estimate is independent of iteration order.
    """
    if n_noise < 1:
        raise ValueError(f"n_noise must be >= 1, got {n_noise}")
    flips = 0
    for i in range(len(dataset)):
        denoised = noise_and_denoise_batch(dataset.x[i], sigma, n_noise,
                                           rng.child("hall", i), world, schedule)
        flips += int(np.sum(bayes_classify_batch(world, denoised) != dataset.y[i]))
    return flips / (len(dataset) * n_noise)
