"""Forward-only gradient estimation from Gaussian parameter perturbations.

For perturbations ``delta_k ~ N(0, sigma^2 I)`` the gradient of the smoothed
loss is estimated as::

    g_hat = (1/K) * sum_k  c * delta_k * dL_k

with ``dL_k = L(W + delta_k) - L(W - delta_k)`` and ``c = 1 / (2 sigma^2)`` for
the central scheme, or ``dL_k = L(W + delta_k) - L(W)`` and ``c = 1 / sigma^2``
for the forward scheme. Perturbations are never transmitted or stored in bulk;
both sides regenerate them from ``(master_seed, round, k)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from collections import OrderedDict

import numpy as np

from . import prng
from .errors import CapabilityError, ConfigError, ProtocolError
from .nn import Batch, ModelSpec, _values, forward_loss, forward_losses

SCHEMES = ("central", "forward")


@dataclass(frozen=True)
class EstimatorConfig:
    sigma: float = 1e-4
    k: int = 100
    scheme: str = "central"
    # perturbations materialized at once; bounds live memory to chunk * n floats
    chunk: int = 64

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError("sigma must be > 0", key="estimator.sigma")
        if self.k < 1:
            raise ConfigError("k must be >= 1", key="estimator.k")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}", key="estimator.scheme")
        if self.chunk < 1:
            raise ConfigError("chunk must be >= 1", key="estimator.chunk")

    @property
    def coefficient(self) -> float:
        if self.scheme == "central":
            return 1.0 / (2.0 * self.sigma**2)
        return 1.0 / self.sigma**2

    @property
    def forwards_per_batch(self) -> int:
        return 2 * self.k if self.scheme == "central" else self.k + 1


def twice_fd(cfg: EstimatorConfig) -> EstimatorConfig:
    """Forward scheme with the same forward budget as ``cfg`` under the central scheme."""
    return EstimatorConfig(sigma=cfg.sigma, k=2 * cfg.k, scheme="forward", chunk=cfg.chunk)


_BLOCK_CACHE: "OrderedDict[tuple, np.ndarray]" = OrderedDict()
_BLOCK_CACHE_BYTES = 256 * 2**20


def _normal_block(key_seed: int, round_: int, dim: int, start: int, stop: int) -> np.ndarray:
    # clients and server regenerate identical blocks within a round; keep recent ones
    cache_key = (key_seed, round_, dim, start, stop)
    block = _BLOCK_CACHE.get(cache_key)
    if block is not None:
        _BLOCK_CACHE.move_to_end(cache_key)
        return block
    block = np.empty((stop - start, dim))
    for row, k in enumerate(range(start, stop)):
        block[row] = prng.standard_normal(prng.derive_key(prng.TAG_PERTURB, key_seed, round_, k), dim)
    block.setflags(write=False)
    _BLOCK_CACHE[cache_key] = block
    total = sum(b.nbytes for b in _BLOCK_CACHE.values())
    while total > _BLOCK_CACHE_BYTES and len(_BLOCK_CACHE) > 1:
        _, old = _BLOCK_CACHE.popitem(last=False)
        total -= old.nbytes
    return block


@dataclass(frozen=True)
class PerturbationStream:
    """Deterministic ``delta(t, k)`` generator; ``delta`` is a pure function of its fields and k."""

    master_seed: int
    round: int
    sigma: float
    dim: int

    def delta(self, k: int) -> np.ndarray:
        if k < 0:
            raise ConfigError("perturbation index must be >= 0")
        return self.sigma * _normal_block(self.master_seed, self.round, self.dim, k, k + 1)[0]

    def block(self, start: int, stop: int) -> np.ndarray:
        """Perturbations ``start .. stop - 1`` as rows of a ``(stop - start, dim)`` matrix."""
        if not 0 <= start <= stop:
            raise ConfigError(f"invalid perturbation range [{start}, {stop})")
        return self.sigma * _normal_block(self.master_seed, self.round, self.dim, start, stop)

    def chunks(self, k: int, chunk: int):
        for start in range(0, k, chunk):
            stop = min(start + chunk, k)
            yield start, stop, self.block(start, stop)


def sample_perturbation(stream: PerturbationStream, k: int) -> np.ndarray:
    return stream.delta(k)


def loss_diff_central(spec: ModelSpec, params, delta, batch: Batch, precision: str = "f64") -> float:
    w = _values(params)
    return forward_loss(spec, w + delta, batch, precision) - forward_loss(spec, w - delta, batch, precision)


def loss_diff_forward(spec: ModelSpec, params, delta, batch: Batch, baseline_loss: float, precision: str = "f64") -> float:
    w = _values(params)
    return forward_loss(spec, w + delta, batch, precision) - baseline_loss


def loss_diffs(
    spec: ModelSpec,
    params,
    stream: PerturbationStream,
    cfg: EstimatorConfig,
    batch: Batch,
    precision: str = "f64",
) -> np.ndarray:
    """All K loss differences for one batch, evaluated chunkwise in batched forwards."""
    w = _values(params)
    if stream.dim != w.shape[0]:
        raise ProtocolError(f"stream dimension {stream.dim} != parameter count {w.shape[0]}")
    out = np.empty(cfg.k)
    if cfg.scheme == "forward":
        baseline = forward_loss(spec, w, batch, precision)
    for start, stop, d in stream.chunks(cfg.k, cfg.chunk):
        if cfg.scheme == "central":
            losses = forward_losses(spec, np.concatenate([w + d, w - d]), batch, precision)
            m = stop - start
            out[start:stop] = losses[:m] - losses[m:]
        else:
            out[start:stop] = forward_losses(spec, w + d, batch, precision) - baseline
    return out


def estimate_gradient(diffs, stream: PerturbationStream, cfg: EstimatorConfig) -> np.ndarray:
    diffs = np.asarray(diffs, dtype=np.float64)
    if diffs.shape != (cfg.k,):
        raise ProtocolError(f"expected {cfg.k} loss differences, got shape {diffs.shape}")
    g = np.zeros(stream.dim)
    weights = cfg.coefficient * diffs
    # chunks are reduced in ascending k for reproducible rounding
    for start, stop, d in stream.chunks(cfg.k, cfg.chunk):
        g += weights[start:stop] @ d
    return g / cfg.k


def estimate(spec, params, stream, cfg, batch, precision="f64") -> np.ndarray:
    return estimate_gradient(loss_diffs(spec, params, stream, cfg, batch, precision), stream, cfg)


@dataclass(frozen=True)
class CovarianceDiag:
    sigma_hat: np.ndarray
    delta_hat: np.ndarray
    frob_dev: float
    spec_dev: float


def spectral_norm_sym(a: np.ndarray, rtol: float = 1e-6, max_iter: int = 20000) -> float:
    """Largest |eigenvalue| of a symmetric matrix by power iteration on ``a @ a``."""
    n = a.shape[0]
    v = np.ones(n) / np.sqrt(n) + prng.standard_normal(prng.derive_key(n), n) * 1e-3
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = a @ (a @ v)
        new = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        converged = abs(new - lam) <= 1e-2 * rtol * abs(new)
        lam = new
        if converged:
            break
    return float(np.sqrt(max(lam, 0.0)))


def covariance_diagnostics(stream: PerturbationStream, k: int, max_dim: int = 2000, chunk: int = 256) -> CovarianceDiag:
    if k < 1:
        raise ConfigError("k must be >= 1")
    n = stream.dim
    if n > max_dim:
        raise CapabilityError(
            f"n={n} exceeds max_dim={max_dim} for a dense covariance; use frobenius_deviation_streamed"
        )
    acc = np.zeros((n, n))
    mean = np.zeros(n)
    for _, _, d in stream.chunks(k, chunk):
        acc += d.T @ d
        mean += d.sum(axis=0)
    sigma_hat = acc / (k * stream.sigma**2)
    sigma_hat = 0.5 * (sigma_hat + sigma_hat.T)
    dev = sigma_hat - np.eye(n)
    return CovarianceDiag(
        sigma_hat=sigma_hat,
        delta_hat=mean / k,
        frob_dev=float(np.linalg.norm(dev, "fro")),
        spec_dev=spectral_norm_sym(dev),
    )


def frobenius_deviation_streamed(stream: PerturbationStream, k: int, chunk: int = 256) -> float:
    """``||Sigma_hat - I||_F`` through the K x K Gram matrix, never forming n x n."""
    s2 = stream.sigma**2
    cross = 0.0
    sq_norms = 0.0
    for a0, a1, da in stream.chunks(k, chunk):
        sq_norms += float((da * da).sum()) / s2
        for b0, b1, db in stream.chunks(k, chunk):
            gram = (da @ db.T) / s2
            cross += float((gram * gram).sum())
    total = cross / k**2 - 2.0 * sq_norms / k + stream.dim
    return float(np.sqrt(max(total, 0.0)))


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
