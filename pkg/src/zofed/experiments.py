"""Desk-scale analyses: estimator identities, covariance rates, toy training ablations, loss-difference distributions."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import prng
from .config import FedSGDMode, RunConfig, Seeds
from .data import DatasetConfig, load_dataset
from .errors import ConfigError
from .estimator import EstimatorConfig, PerturbationStream, cosine, covariance_diagnostics, estimate, loss_diffs
from .federation import PartitionSpec, run_fedsgd
from .nn import Batch, ModelSpec, mlp
from .oracle import OracleConfig, exact_gradient, exact_gradient_dense

TAG_LINEAR = 0x4C494E45
TAG_COVARIANCE = 0x434F5641
TAG_PRIVACY = 0x50524956
TAG_ESTIMATE = 0x45535449


# -- two-layer linear networks ---------------------------------------------------------------


@dataclass(frozen=True)
class DeepLinearFixture:
    """Score ``h = w2[y] @ w1 @ x`` of an activation-free two-layer network."""

    w1: np.ndarray  # (n, m)
    w2: np.ndarray  # (L, n)
    x: np.ndarray  # (m,)
    y: int

    def __post_init__(self):
        n, m = self.w1.shape
        if self.w2.ndim != 2 or self.w2.shape[1] != n:
            raise ConfigError(f"w2 must be (L, {n}), got {self.w2.shape}")
        if self.x.shape != (m,):
            raise ConfigError(f"x must be ({m},), got {self.x.shape}")
        if not 0 <= self.y < self.w2.shape[0]:
            raise ConfigError(f"label {self.y} outside [0, {self.w2.shape[0]})")
        if not np.isfinite(self.score()):
            raise ConfigError("fixture score is not finite")

    def score(self, d1=None, d2=None) -> float:
        w1 = self.w1 if d1 is None else self.w1 + d1
        w2y = self.w2[self.y] if d2 is None else self.w2[self.y] + d2
        return float(w2y @ (w1 @ self.x))


def random_fixture(seed: int, m: int = 6, n: int = 5, classes: int = 3) -> DeepLinearFixture:
    rng = np.random.default_rng(seed)
    return DeepLinearFixture(
        w1=rng.normal(size=(n, m)),
        w2=rng.normal(size=(classes, n)),
        x=rng.normal(size=m),
        y=int(rng.integers(classes)),
    )


@dataclass(frozen=True)
class LinearIdentityReport:
    """Max relative deviations over the trials of one fixture.

    ``scheme`` compares forward/sigma^2 with central/(2 sigma^2);
    ``closed_form_central`` and ``closed_form_forward`` compare each against
    the first-order expression ``(w2[y] d1 x + d2 w1 x) / sigma^2``;
    ``sigma_independence`` compares the per-sample gradient term
    ``delta * central / (2 sigma^2)`` across two sigmas sharing the same
    standard-normal draws; ``forward_cross_term`` checks that forward minus
    central equals the second-order term ``d2 d1 x / sigma^2``.
    """

    scheme: float
    closed_form_central: float
    closed_form_forward: float
    sigma_independence: float
    forward_cross_term: float


def _rel(a, b, eps_abs):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)) / (np.abs(b) + eps_abs)))


def linear_scheme_identity(
    fixture: DeepLinearFixture,
    sigma: float = 1e-4,
    trials: int = 16,
    seed: int = 0,
    sigma_alt: float = 1e-1,
    eps_rel: float = 1e-2,
) -> LinearIdentityReport:
    """Deviations of the finite-difference identities over ``trials`` shared draws.

    Relative errors use the denominator ``|reference| + eps_abs`` with
    ``eps_abs = eps_rel * ||grad h|| / sigma``, the typical size of a
    normalized difference. Without that floor a draw nearly orthogonal to the
    gradient turns plain rounding (about 1e-16 * |h| / sigma^2) into an
    arbitrarily large relative error.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1", key="trials")
    n, m = fixture.w1.shape
    f = fixture
    h0 = f.score()
    grad_norm = float(np.hypot(np.linalg.norm(np.outer(f.w2[f.y], f.x)), np.linalg.norm(f.w1 @ f.x)))
    worst = dict(scheme=0.0, closed_form_central=0.0, closed_form_forward=0.0, sigma_independence=0.0, forward_cross_term=0.0)
    for t in range(trials):
        z = prng.standard_normal(prng.derive_key(TAG_LINEAR, seed, t), n * m + n)
        z1 = z[: n * m].reshape(n, m)
        z2 = z[n * m :]
        terms = []
        for s in (sigma, sigma_alt):
            eps_abs = eps_rel * grad_norm / s
            d1, d2 = s * z1, s * z2
            fwd = (f.score(d1, d2) - h0) / s**2
            ctr = (f.score(d1, d2) - f.score(-d1, -d2)) / (2 * s**2)
            closed = (f.w2[f.y] @ d1 @ f.x + d2 @ f.w1 @ f.x) / s**2
            cross = (d2 @ d1 @ f.x) / s**2
            if s == sigma:
                worst["scheme"] = max(worst["scheme"], _rel(fwd, ctr, eps_abs))
                worst["closed_form_central"] = max(worst["closed_form_central"], _rel(ctr, closed, eps_abs))
                worst["closed_form_forward"] = max(worst["closed_form_forward"], _rel(fwd, closed, eps_abs))
                worst["forward_cross_term"] = max(
                    worst["forward_cross_term"], abs((fwd - ctr) - cross) / (abs(ctr) + eps_abs)
                )
            # gradient contribution for the stacked perturbation vector
            terms.append(np.concatenate([d1.ravel(), d2]) * ctr)
        # the gradient terms are sigma-free, so their floor is eps_rel * ||grad h|| * |z|
        floor = eps_rel * grad_norm * np.abs(np.concatenate([z1.ravel(), z2]))
        dev = np.max(np.abs(terms[0] - terms[1]) / (np.abs(terms[1]) + floor))
        worst["sigma_independence"] = max(worst["sigma_independence"], float(dev))
    return LinearIdentityReport(**worst)


def linear_identity_sweep(fixtures: int = 1000, sigma: float = 1e-4, trials: int = 4, seed: int = 0) -> LinearIdentityReport:
    """Worst case of every deviation over many random fixtures."""
    reports = [linear_scheme_identity(random_fixture(prng.derive_key(seed, i)), sigma, trials, seed=i) for i in range(fixtures)]
    return LinearIdentityReport(
        **{k: max(getattr(r, k) for r in reports) for k in LinearIdentityReport.__dataclass_fields__}
    )


# -- covariance of the perturbation set ------------------------------------------------------


@dataclass(frozen=True)
class CovarianceStudy:
    n: int
    k_grid: tuple
    mean_dev: tuple
    std_dev: tuple
    slope: float

    def rows(self) -> list:
        return [
            {"n": self.n, "k": k, "mean_spec_dev": m, "std_spec_dev": s}
            for k, m, s in zip(self.k_grid, self.mean_dev, self.std_dev)
        ]


def covariance_convergence_study(n: int, k_grid: Sequence[int], trials: int = 50, seed: int = 0) -> CovarianceStudy:
    """Mean spectral deviation of the empirical covariance per K, with a log-log fitted slope."""
    k_grid = tuple(int(k) for k in k_grid)
    if list(k_grid) != sorted(k_grid) or len(set(k_grid)) != len(k_grid):
        raise ConfigError("k_grid must be strictly ascending", key="k_grid")
    if trials < 1:
        raise ConfigError("trials must be >= 1", key="trials")
    means, stds = [], []
    for k in k_grid:
        devs = [
            covariance_diagnostics(PerturbationStream(prng.derive_key(TAG_COVARIANCE, seed, n, k), trial, 1.0, n), k).spec_dev
            for trial in range(trials)
        ]
        means.append(float(np.mean(devs)))
        stds.append(float(np.std(devs)))
    slope = float(np.polyfit(np.log(k_grid), np.log(means), 1)[0]) if len(k_grid) > 1 else float("nan")
    return CovarianceStudy(n, k_grid, tuple(means), tuple(stds), slope)


# -- one-shot estimate against the exact gradient --------------------------------------------


@dataclass(frozen=True)
class EstimateReport:
    num_params: int
    repeats: int
    cosine_single: float
    cosine_mean: float
    relative_error_mean: float


def estimate_vs_oracle(
    spec: ModelSpec,
    params: np.ndarray,
    batch: Batch,
    cfg: EstimatorConfig,
    repeats: int = 1,
    seed: int = 0,
    oracle: OracleConfig = OracleConfig(),
    precision: str = "f64",
) -> EstimateReport:
    """Average ``repeats`` independent estimates and compare with the exact gradient."""
    if repeats < 1:
        raise ConfigError("repeats must be >= 1", key="repeats")
    n = spec.num_params
    g_true = exact_gradient(spec, params, batch, oracle)
    total = np.zeros(n)
    first = None
    for r in range(repeats):
        stream = PerturbationStream(prng.derive_key(TAG_ESTIMATE, seed), r, cfg.sigma, n)
        g = estimate(spec, params, stream, cfg, batch, precision)
        first = g if first is None else first
        total += g
    mean = total / repeats
    return EstimateReport(
        num_params=n,
        repeats=repeats,
        cosine_single=cosine(first, g_true),
        cosine_mean=cosine(mean, g_true),
        relative_error_mean=float(np.linalg.norm(mean - g_true) / np.linalg.norm(g_true)),
    )


# -- toy federated training ------------------------------------------------------------------


@dataclass(frozen=True)
class ToyTask:
    """Two-spirals classification trained by FedSGD over iid clients."""

    sizes: tuple = (2, 32, 32, 2)
    turns: float = 0.9
    noise_std: float = 0.05
    n_train: int = 1000
    n_test: int = 1000
    data_seed: int = 0
    clients: int = 10
    rounds: int = 300
    batch_size: int = 32
    sigma: float = 1e-4
    ema_coeff: float = 0.995

    def datasets(self):
        return load_dataset(self.dataset_config())

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(
            kind="spirals",
            n_train=self.n_train,
            n_test=self.n_test,
            seed=self.data_seed,
            turns=self.turns,
            noise_std=self.noise_std,
        )


@dataclass(frozen=True)
class Variant:
    """One training configuration of the toy task; ``k`` is the central-scheme count.

    ``scheme="twice_fd"`` spends the same 2K forwards on 2K forward-scheme
    samples. ``ema=False`` evaluates the raw parameters.
    """

    name: str
    k: int = 100
    scheme: str = "central"
    activation: str = "hardswish"
    ema: bool = True
    backprop: bool = False


SCHEME_VARIANTS = ("central", "twice_fd")


def toy_run_config(task: ToyTask, variant: Variant, seed: int) -> RunConfig:
    if variant.scheme == "twice_fd":
        est = EstimatorConfig(sigma=task.sigma, k=2 * variant.k, scheme="forward")
    elif variant.scheme == "central":
        est = EstimatorConfig(sigma=task.sigma, k=variant.k, scheme="central")
    else:
        raise ConfigError(f"scheme must be one of {SCHEME_VARIANTS}", key="scheme")
    return RunConfig(
        model=mlp(task.sizes, activation=variant.activation),
        dataset=task.dataset_config(),
        rounds=task.rounds,
        partition=PartitionSpec("iid", task.clients, seed=seed),
        estimator=est,
        mode=FedSGDMode(batch_size=task.batch_size),
        ema_coeff=task.ema_coeff if variant.ema else 0.0,
        seeds=Seeds(master=seed, partition=seed, mask=seed, init=seed),
    )


def _backprop_gradient(spec, params, batch):
    return exact_gradient_dense(spec, params, batch)


def train_variant(task: ToyTask, variant: Variant, seed: int, data=None) -> list:
    """Metric rows of one seeded run, starting at round 0; wall time is zeroed so reruns are identical."""
    cfg = toy_run_config(task, variant, seed)
    train, test = data if data is not None else task.datasets()
    grad_fn = _backprop_gradient if variant.backprop else None
    return list(run_fedsgd(cfg, train, test, gradient_fn=grad_fn, wall_clock=False, include_initial=True))


@dataclass(frozen=True)
class VariantResult:
    name: str
    seeds: tuple
    final_acc: tuple
    tail_var: tuple

    @property
    def mean(self) -> float:
        return float(np.mean(self.final_acc))

    @property
    def std(self) -> float:
        return float(np.std(self.final_acc))

    @property
    def mean_tail_var(self) -> float:
        return float(np.mean(self.tail_var))

    def row(self) -> dict:
        return {
            "variant": self.name,
            "seeds": len(self.seeds),
            "mean_acc": self.mean,
            "std_acc": self.std,
            "tail_var": self.mean_tail_var,
        }


def compare_variants(task: ToyTask, variants: Sequence[Variant], seeds: Sequence[int] = (0, 1, 2), tail: int = 20) -> list:
    """Final EMA test accuracy (mean over seeds) and the variance over the last ``tail`` rounds."""
    data = task.datasets()
    results = []
    for v in variants:
        finals, tails = [], []
        for s in seeds:
            rows = train_variant(task, v, s, data)
            accs = np.array([r.test_acc for r in rows[1:]])
            finals.append(float(accs[-1]) if accs.size else rows[0].test_acc)
            tails.append(float(np.var(accs[-tail:])) if accs.size else 0.0)
        results.append(VariantResult(v.name, tuple(seeds), tuple(finals), tuple(tails)))
    return results


def ablation_variants(k: int = 100) -> list:
    """Guideline baseline followed by one change per variant, all at 2K forwards per batch."""
    base = Variant("twice_fd-hardswish-ema", k=k, scheme="twice_fd")
    return [
        base,
        replace(base, name="central-hardswish-ema", scheme="central"),
        replace(base, name="twice_fd-relu-ema", activation="relu"),
        replace(base, name="twice_fd-selu-ema", activation="selu"),
        replace(base, name="twice_fd-hardswish-noema", ema=False),
    ]


def ablation_run(task: ToyTask, variants: Optional[Sequence[Variant]] = None, seeds=(0, 1, 2)) -> list:
    return compare_variants(task, variants if variants is not None else ablation_variants(), seeds)


def k_trend_variants(ks=(100, 500), backprop: bool = True) -> list:
    out = [Variant(f"central-k{k}", k=k) for k in ks]
    if backprop:
        out.append(Variant("backprop", k=1, backprop=True))
    return out


# -- loss-difference distributions -----------------------------------------------------------


@dataclass(frozen=True)
class DistributionReport:
    sample_count: int
    mean: float
    std: float
    bin_edges: tuple
    counts: tuple
    ks_statistic: float

    def summary(self) -> dict:
        return {
            "sample_count": self.sample_count,
            "mean": self.mean,
            "std": self.std,
            "ks_statistic": self.ks_statistic,
            "bin_edges": list(self.bin_edges),
            "counts": list(self.counts),
        }


def _report(values, edges, ks) -> DistributionReport:
    counts, _ = np.histogram(values, bins=edges)
    # np.histogram drops nothing inside [edges[0], edges[-1]]; edges span both samples
    return DistributionReport(
        sample_count=int(values.size),
        mean=float(values.mean()),
        std=float(values.std(ddof=1)) if values.size > 1 else 0.0,
        bin_edges=tuple(float(e) for e in edges),
        counts=tuple(int(c) for c in counts),
        ks_statistic=ks,
    )


def noise_batch(like: Batch, num_classes: int, seed: int) -> Batch:
    """Standard-normal inputs shaped like ``like`` with uniformly drawn labels."""
    rng = np.random.default_rng(prng.derive_key(TAG_PRIVACY, seed))
    return Batch(rng.standard_normal(like.inputs.shape), rng.integers(0, num_classes, like.labels.shape[0]))


def privacy_distribution_experiment(
    spec: ModelSpec,
    params: np.ndarray,
    real: Batch,
    k: int = 500,
    sigma: float = 1e-4,
    seed: int = 0,
    bins: int = 40,
    noise: Optional[Batch] = None,
    precision: str = "f64",
):
    """Central loss differences on a real batch and on a noise batch under the same K perturbations.

    Returns ``(real_report, noise_report)``; both carry the two-sample KS statistic.
    """
    if k < 100:
        raise ConfigError("k must be >= 100", key="k")
    if noise is None:
        noise = noise_batch(real, spec.num_classes, seed)
    cfg = EstimatorConfig(sigma=sigma, k=k, scheme="central")
    stream = PerturbationStream(prng.derive_key(TAG_PRIVACY, seed, 1), 0, sigma, spec.num_params)
    a = loss_diffs(spec, params, stream, cfg, real, precision)
    b = loss_diffs(spec, params, stream, cfg, noise, precision)
    ks = float(stats.ks_2samp(a, b).statistic)
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    return _report(a, edges, ks), _report(b, edges, ks)
