"""Simulated backprop-free federated training.

One FedSGD round:

1. the server broadcasts ``W_t`` and a round seed;
2. each client regenerates ``delta_1..delta_K``, computes K loss differences
   on one local mini-batch, adds its zero-sum mask share scaled by ``N / N_c``
   and uploads K float32 scalars;
3. the server forms the ``N_c / N`` weighted sum (masks cancel), turns it into
   a gradient estimate and takes an optimizer step; an EMA shadow of the
   parameters is what gets evaluated.

FedAvg rounds instead run local estimated-gradient steps on each client and
upload parameter deltas.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Callable, Iterator, Optional, Sequence

import numpy as np

from . import prng
from .data import Dataset
from .errors import ConfigError, NumericError, ProtocolError
from .estimator import EstimatorConfig, PerturbationStream, estimate_gradient, loss_diffs
from .nn import Batch, ModelSpec, ParamVector, evaluate, init_params
from .wire import HEADER_BYTES, KIND_LOSS_DIFFS, KIND_PARAM_DELTA, WireRecord, encode_record

if TYPE_CHECKING:
    from .config import RunConfig

PARTITION_KINDS = ("iid", "dirichlet")
TAG_BATCH = 0x42415443
TAG_PARTICIPATION = 0x50415254

GradientFn = Callable[[ModelSpec, np.ndarray, Batch], np.ndarray]


@dataclass(frozen=True)
class PartitionSpec:
    kind: str = "iid"
    clients: int = 10
    alpha: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PARTITION_KINDS:
            raise ConfigError(f"kind must be one of {PARTITION_KINDS}", key="partition.kind")
        if self.clients < 1:
            raise ConfigError("clients must be >= 1", key="partition.clients")
        if not self.alpha > 0:
            raise ConfigError("alpha must be > 0", key="partition.alpha")


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    indices: np.ndarray

    @property
    def n_c(self) -> int:
        return int(self.indices.shape[0])


def partition(labels, spec: PartitionSpec) -> list:
    """Split sample indices across ``spec.clients`` shards.

    ``labels`` may be a :class:`Dataset` or an integer label array.
    """
    if isinstance(labels, Dataset):
        labels = labels.labels
    labels = np.asarray(labels)
    n = labels.shape[0]
    if n == 0:
        raise ConfigError("cannot partition an empty dataset")
    if spec.clients > n:
        raise ConfigError(f"{spec.clients} clients for {n} samples", key="partition.clients")
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "iid":
        parts = np.array_split(rng.permutation(n), spec.clients)
    else:
        parts = _dirichlet_parts(labels, spec.clients, spec.alpha, rng)
    return [ClientShard(c, np.sort(p).astype(np.int64)) for c, p in enumerate(parts)]


def _dirichlet_parts(labels, clients, alpha, rng):
    buckets: list = [[] for _ in range(clients)]
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        props = rng.dirichlet(np.full(clients, alpha))
        cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
        for c, chunk in enumerate(np.split(idx, cuts)):
            buckets[c].extend(chunk.tolist())
    # every client keeps at least one sample: take one from the current largest shard
    for c in range(clients):
        if not buckets[c]:
            donor = max(range(clients), key=lambda j: len(buckets[j]))
            buckets[c].append(buckets[donor].pop())
    return [np.array(b, dtype=np.int64) for b in buckets]


@dataclass(frozen=True)
class MaskShareSet:
    eps: np.ndarray  # (C, K)

    def share(self, c: int) -> np.ndarray:
        return self.eps[c]


def make_masks(c: int, k: int, round_: int, mask_seed: int, scale: float = 1.0) -> MaskShareSet:
    """Zero-sum mask shares: C-1 Gaussian shares, the last one is minus their sum."""
    if c < 1:
        raise ConfigError("mask set needs at least one client")
    eps = np.zeros((c, k))
    for i in range(c - 1):
        eps[i] = scale * prng.standard_normal(prng.derive_key(prng.TAG_MASK, mask_seed, round_, i), k)
    if c > 1:
        eps[c - 1] = -eps[: c - 1].sum(axis=0)
    return MaskShareSet(eps)


@dataclass(frozen=True)
class LossDiffUpload:
    round: int
    client_id: int
    values: np.ndarray

    def to_record(self) -> WireRecord:
        return WireRecord(self.round, self.client_id, KIND_LOSS_DIFFS, self.values)


def local_batch(shard: ClientShard, dataset: Dataset, batch_size: int, key: int) -> Batch:
    """A uniform mini-batch without replacement (the whole shard if it is smaller)."""
    if batch_size <= 0 or batch_size >= shard.n_c:
        return dataset.batch(shard.indices)
    rng = np.random.default_rng(key)
    pick = np.sort(rng.choice(shard.n_c, size=batch_size, replace=False))
    return dataset.batch(shard.indices[pick])


def client_round(
    shard: ClientShard,
    spec: ModelSpec,
    params,
    stream: PerturbationStream,
    cfg: EstimatorConfig,
    mask: np.ndarray,
    batch: Batch,
    n_total: int,
    precision: str = "f64",
) -> LossDiffUpload:
    diffs = loss_diffs(spec, params, stream, cfg, batch, precision)
    values = diffs + (n_total / shard.n_c) * np.asarray(mask, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NumericError(f"client {shard.client_id}: non-finite loss differences")
    return LossDiffUpload(stream.round, shard.client_id, values)


def server_aggregate(uploads: Sequence[LossDiffUpload], shards: Sequence[ClientShard]) -> np.ndarray:
    """``sum_c (N_c / N) * values_c`` over the given shards, in ascending client id."""
    by_id = {}
    for up in uploads:
        if up.client_id in by_id:
            raise ProtocolError(f"duplicate upload from client {up.client_id}")
        by_id[up.client_id] = up
    expected = {s.client_id for s in shards}
    if set(by_id) != expected:
        missing = sorted(expected - set(by_id))
        extra = sorted(set(by_id) - expected)
        raise ProtocolError(f"upload set mismatch: missing {missing}, unexpected {extra}")
    rounds = {up.round for up in uploads}
    if len(rounds) > 1:
        raise ProtocolError(f"uploads from several rounds: {sorted(rounds)}")
    n_total = sum(s.n_c for s in shards)
    k = len(uploads[0].values)
    agg = np.zeros(k)
    for s in sorted(shards, key=lambda s: s.client_id):
        values = np.asarray(by_id[s.client_id].values, dtype=np.float64)
        if values.shape != (k,):
            raise ProtocolError(f"client {s.client_id} uploaded {values.shape[0]} values, expected {k}")
        agg += (s.n_c / n_total) * values
    return agg


@dataclass(frozen=True)
class SGD:
    lr: float = 0.01

    def init_state(self, n: int):
        return None

    def step(self, params, grad, state):
        return params - self.lr * grad, state


@dataclass(frozen=True)
class Adam:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8

    def init_state(self, n: int):
        return (np.zeros(n), np.zeros(n), 0)

    def step(self, params, grad, state):
        m, v, t = state
        t += 1
        m = self.beta1 * m + (1 - self.beta1) * grad
        v = self.beta2 * v + (1 - self.beta2) * grad * grad
        m_hat = m / (1 - self.beta1**t)
        v_hat = v / (1 - self.beta2**t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps), (m, v, t)


@dataclass(frozen=True)
class ServerState:
    params: np.ndarray
    ema_params: np.ndarray
    optimizer_state: object
    round: int = 0
    ema_coeff: float = 0.995

    @classmethod
    def initial(cls, params, optimizer, ema_coeff: float = 0.995) -> "ServerState":
        w = np.array(params.values if isinstance(params, ParamVector) else params, dtype=np.float64)
        return cls(w, w.copy(), optimizer.init_state(w.shape[0]), 0, ema_coeff)


def _ema(state: ServerState, new_params: np.ndarray) -> np.ndarray:
    a = state.ema_coeff
    return a * state.ema_params + (1.0 - a) * new_params


def server_update(state: ServerState, grad, optimizer) -> ServerState:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.params.shape:
        raise ProtocolError(f"gradient length {grad.shape} != parameter count {state.params.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"round {state.round}: non-finite gradient estimate")
    params, opt_state = optimizer.step(state.params, grad, state.optimizer_state)
    return replace(state, params=params, ema_params=_ema(state, params), optimizer_state=opt_state, round=state.round + 1)


def apply_delta(state: ServerState, delta) -> ServerState:
    delta = np.asarray(delta, dtype=np.float64)
    if not np.all(np.isfinite(delta)):
        raise NumericError(f"round {state.round}: non-finite aggregated update")
    params = state.params + delta
    return replace(state, params=params, ema_params=_ema(state, params), round=state.round + 1)


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    wall_ms: float
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    uplink_bytes_total: int
    downlink_bytes_total: int
    uplink_overhead_bytes: int = 0


METRIC_COLUMNS = (
    "round",
    "wall_ms",
    "train_loss",
    "train_acc",
    "test_loss",
    "test_acc",
    "uplink_bytes_total",
    "downlink_bytes_total",
)


@dataclass
class WireLog:
    """Collects every encoded upload and download announcement of a run."""

    uploads: list = field(default_factory=list)
    downloads: list = field(default_factory=list)


def _metrics(spec, state, train, test, round_, t0, up, down, overhead, precision, wall_clock):
    train_loss, train_acc = evaluate(spec, state.ema_params, train.inputs, train.labels, precision)
    test_loss, test_acc = evaluate(spec, state.ema_params, test.inputs, test.labels, precision)
    wall = (time.perf_counter() - t0) * 1000.0 if wall_clock else 0.0
    return RoundMetrics(round_, wall, train_loss, train_acc, test_loss, test_acc, up, down, overhead)


def _participants(shards, fraction, master, t):
    if fraction >= 1.0:
        return list(shards)
    m = max(1, int(round(fraction * len(shards))))
    rng = np.random.default_rng(prng.derive_key(TAG_PARTICIPATION, master, t))
    pick = np.sort(rng.choice(len(shards), size=m, replace=False))
    return [shards[i] for i in pick]


def _setup(cfg: "RunConfig", train: Dataset):
    spec = cfg.model
    if tuple(train.input_shape) != spec.input_shape:
        raise ConfigError(f"dataset inputs {train.input_shape} do not match model input {spec.input_shape}", key="model")
    shards = partition(train.labels, cfg.partition)
    w0 = init_params(spec, cfg.seeds.init)
    state = ServerState.initial(w0, cfg.optimizer, cfg.ema_coeff)
    return spec, shards, state


def run_fedsgd(
    cfg: "RunConfig",
    train: Dataset,
    test: Dataset,
    gradient_fn: Optional[GradientFn] = None,
    wire_log: Optional[WireLog] = None,
    wall_clock: bool = True,
    on_state: Optional[Callable[[ServerState], None]] = None,
    include_initial: bool = False,
) -> Iterator[RoundMetrics]:
    """Batch-level training; yields one metrics row per round (round 0 on request).

    With ``gradient_fn`` (an exact-gradient callable) clients upload full local
    gradients instead of loss differences, which is the backprop baseline.
    """
    spec, shards, state = _setup(cfg, train)
    est = cfg.estimator
    n = spec.num_params
    master = cfg.seeds.master
    precision = cfg.precision
    batch_size = cfg.mode.batch_size
    mask_scale = cfg.mask_scale
    up_total = down_total = overhead = 0
    t0 = time.perf_counter()
    if include_initial:
        yield _metrics(spec, state, train, test, 0, t0, 0, 0, 0, precision, wall_clock)

    for t in range(cfg.rounds):
        active = _participants(shards, cfg.mode.participation, master, t)
        n_total = sum(s.n_c for s in active)
        # downlink: parameters plus an 8-byte round seed (seed is skipped for the BP baseline)
        down_total += len(active) * (4 * n + (0 if gradient_fn else 8))
        if wire_log is not None:
            wire_log.downloads.append({"round": t, "seed": master, "params": 4 * n})
        batches = {
            s.client_id: local_batch(s, train, batch_size, prng.derive_key(TAG_BATCH, master, t, s.client_id))
            for s in active
        }

        if gradient_fn is not None:
            grad = np.zeros(n)
            for s in active:
                g_c = gradient_fn(spec, state.params, batches[s.client_id])
                rec = WireRecord(t, s.client_id, KIND_PARAM_DELTA, g_c)
                up_total += rec.payload_bytes
                overhead += HEADER_BYTES
                if wire_log is not None:
                    wire_log.uploads.append(encode_record(rec))
                grad += (s.n_c / n_total) * g_c
        else:
            stream = PerturbationStream(master, t, est.sigma, n)
            if mask_scale is None:
                # warm-up: mask std is 10x the spread of one client's unmasked differences
                first = active[0]
                sd = float(np.std(loss_diffs(spec, state.params, stream, est, batches[first.client_id], precision)))
                mask_scale = 10.0 * sd if sd > 0 else 1.0
            masks = make_masks(len(active), est.k, t, cfg.seeds.mask, mask_scale)
            uploads = []
            for i, s in enumerate(active):
                up = client_round(s, spec, state.params, stream, est, masks.share(i), batches[s.client_id], n_total, precision)
                rec = up.to_record()
                up_total += rec.payload_bytes
                overhead += HEADER_BYTES
                if wire_log is not None:
                    wire_log.uploads.append(encode_record(rec))
                uploads.append(up)
            agg = server_aggregate(uploads, active)
            grad = estimate_gradient(agg, stream, est)

        state = server_update(state, grad, cfg.optimizer)
        if on_state is not None:
            on_state(state)
        yield _metrics(spec, state, train, test, t + 1, t0, up_total, down_total, overhead, precision, wall_clock)


def run_fedavg(
    cfg: "RunConfig",
    train: Dataset,
    test: Dataset,
    gradient_fn: Optional[GradientFn] = None,
    wire_log: Optional[WireLog] = None,
    wall_clock: bool = True,
    on_state: Optional[Callable[[ServerState], None]] = None,
    include_initial: bool = False,
) -> Iterator[RoundMetrics]:
    """Epoch-level training: local estimated-gradient steps, parameter-delta uploads.

    Each client starts every round with a fresh copy of the configured
    optimizer. Local perturbations are keyed by ``(master seed, round, client)``
    and the local step index.
    """
    spec, shards, state = _setup(cfg, train)
    n = spec.num_params
    master = cfg.seeds.master
    precision = cfg.precision
    mode = cfg.mode
    if mode.local_epochs < 1:
        raise ConfigError("local_epochs must be >= 1", key="mode.local_epochs")
    up_total = down_total = overhead = 0
    t0 = time.perf_counter()
    if include_initial:
        yield _metrics(spec, state, train, test, 0, t0, 0, 0, 0, precision, wall_clock)

    for t in range(cfg.rounds):
        active = _participants(shards, mode.participation, master, t)
        n_total = sum(s.n_c for s in active)
        down_total += len(active) * (4 * n + (0 if gradient_fn else 8))
        if wire_log is not None:
            wire_log.downloads.append({"round": t, "seed": master, "params": 4 * n})
        delta = np.zeros(n)
        for s in active:
            d_c = _local_training(spec, state.params, s, train, cfg, t, gradient_fn)
            rec = WireRecord(t, s.client_id, KIND_PARAM_DELTA, d_c)
            up_total += rec.payload_bytes
            overhead += HEADER_BYTES
            if wire_log is not None:
                wire_log.uploads.append(encode_record(rec))
            delta += (s.n_c / n_total) * d_c
        state = apply_delta(state, delta)
        if on_state is not None:
            on_state(state)
        yield _metrics(spec, state, train, test, t + 1, t0, up_total, down_total, overhead, precision, wall_clock)


def _local_training(spec, w_global, shard, train, cfg, t, gradient_fn):
    mode = cfg.mode
    est = cfg.estimator
    opt = cfg.optimizer
    w = w_global.copy()
    opt_state = opt.init_state(w.shape[0])
    local_seed = prng.derive_key(prng.TAG_FEDAVG, cfg.seeds.master, t, shard.client_id)
    rng = np.random.default_rng(local_seed)
    bs = mode.local_batch if mode.local_batch > 0 else shard.n_c
    step = 0
    for _ in range(mode.local_epochs):
        order = shard.indices[rng.permutation(shard.n_c)]
        for start in range(0, shard.n_c, bs):
            batch = train.batch(np.sort(order[start : start + bs]))
            if gradient_fn is not None:
                g = gradient_fn(spec, w, batch)
            else:
                stream = PerturbationStream(local_seed, step, est.sigma, w.shape[0])
                g = estimate_gradient(loss_diffs(spec, w, stream, est, batch, cfg.precision), stream, est)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"round {t} client {shard.client_id}: non-finite local gradient")
            w, opt_state = opt.step(w, g, opt_state)
            step += 1
    return w - w_global


def run(cfg: "RunConfig", train: Dataset, test: Dataset, **kwargs) -> Iterator[RoundMetrics]:
    if cfg.mode.kind == "fedsgd":
        return run_fedsgd(cfg, train, test, **kwargs)
    return run_fedavg(cfg, train, test, **kwargs)
