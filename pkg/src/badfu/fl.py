"""Cross-silo federated training: local updates, aggregation rules, round loop.

Every client participates in every round.  Local mini-batch order comes from
``make_rng(round_seed, "client", client_id)`` so results do not depend on the
order in which client updates finish.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import Dataset
from .errors import ConfigError, NumericError, ShapeError
from .nn import Architecture, ParamVector, _param_grads_into, init_params
from .rng import derive_seed, make_rng

log = logging.getLogger(__name__)

RULES = ("fedsgd", "fedavg", "fedprox", "median", "trimean")
SENSITIVITY_EPS = 1e-12


@dataclass
class ClientState:
    client_id: int
    data: Dataset
    weight: float = 0.0
    is_malicious: bool = False

    @property
    def n_samples(self) -> int:
        return len(self.data)


def reweight(clients: Sequence[ClientState]) -> list[ClientState]:
    """Return copies with ``weight = n_k / sum n_j`` (clients without data get 0)."""
    total = sum(c.n_samples for c in clients)
    if total == 0:
        raise ConfigError("no client holds any data")
    return [replace(c, weight=c.n_samples / total) for c in clients]


def make_clients(parts: Sequence[Dataset], malicious: Sequence[int] = ()) -> list[ClientState]:
    """Clients numbered ``1..K`` in partition order."""
    clients = [ClientState(k + 1, ds, is_malicious=(k + 1) in malicious) for k, ds in enumerate(parts)]
    return reweight(clients)


@dataclass(frozen=True)
class LocalHyper:
    lr: float = 0.01
    batch_size: int = 32
    local_epochs: int = 5
    prox_mu: float = 0.01

    def __post_init__(self) -> None:
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")
        if self.prox_mu < 0:
            raise ConfigError("prox_mu must be non-negative")


@dataclass(frozen=True)
class AggregationRule:
    """``global_lr`` is the FedSGD server step; ``trim_fraction`` is for trimean."""

    name: str = "fedavg"
    global_lr: float = 0.01
    trim_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.name not in RULES:
            raise ConfigError(f"unknown aggregation rule {self.name!r}; expected one of {RULES}")
        if not 0.0 <= self.trim_fraction < 0.5:
            raise ConfigError("trim_fraction must lie in [0, 0.5)")

    @property
    def update_kind(self) -> str:
        return "gradient" if self.name == "fedsgd" else "weights"


@dataclass(eq=False)
class ClientUpdate:
    client_id: int
    kind: str
    payload: np.ndarray
    sample_count: int


@dataclass(eq=False)
class RoundRecord:
    round: int
    global_before: ParamVector
    updates: list[ClientUpdate]
    global_after: ParamVector
    sensitivities: dict[int, float]
    metrics: dict[str, float] = field(default_factory=dict)


@dataclass(eq=False)
class FederatedSetup:
    """Everything needed to (re)run federated training."""

    arch: Architecture
    clients: list[ClientState]
    hp: LocalHyper = LocalHyper()
    rule: AggregationRule = AggregationRule()
    n_rounds: int = 30
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_rounds < 0:
            raise ConfigError("n_rounds must be >= 0")
        ids = [c.client_id for c in self.clients]
        if len(set(ids)) != len(ids):
            raise ConfigError("client ids must be unique")
        for c in self.clients:
            if len(c.data) and c.data.d != self.arch.input_dim:
                raise ConfigError(f"client {c.client_id} features have dim {c.data.d}, "
                                  f"model expects {self.arch.input_dim}")

    def client(self, client_id: int) -> ClientState:
        for c in self.clients:
            if c.client_id == client_id:
                return c
        raise KeyError(client_id)

    def with_client_data(self, client_id: int, data: Dataset) -> FederatedSetup:
        clients = [replace(c, data=data) if c.client_id == client_id else c for c in self.clients]
        return replace(self, clients=reweight(clients))


@dataclass(eq=False)
class TrainingHistory:
    setup: FederatedSetup
    seed: int
    init: ParamVector
    final: ParamVector
    records: list[RoundRecord] = field(default_factory=list)
    metrics: list[dict[str, float]] = field(default_factory=list)

    def snapshot(self, round_index: int) -> ParamVector:
        """Global model after ``round_index`` rounds (0 = init)."""
        if round_index == 0:
            return self.init
        return self.records[round_index - 1].global_after


# --- client side -------------------------------------------------------------

def _full_gradient(p: ParamVector, data: Dataset, chunk: int = 2048) -> np.ndarray:
    """Mean gradient over all of ``data``, accumulated chunkwise."""
    n = len(data)
    total = np.zeros_like(p.values)
    buf = np.empty_like(p.values)
    for start in range(0, n, chunk):
        x = data.features[start:start + chunk]
        _param_grads_into(p, x, data.labels[start:start + chunk], buf)
        total += buf * (x.shape[0] / n)
    return total


def local_update(global_p: ParamVector, client: ClientState, hp: LocalHyper, rule: AggregationRule | str,
                 round_seed: int) -> ClientUpdate:
    """Run one client's local computation for a round.

    FedSGD returns the mean gradient over the client's data at ``global_p``;
    every other rule returns weights after ``hp.local_epochs`` epochs of
    shuffled mini-batch SGD (FedProx adds ``prox_mu * (theta - global)`` to
    each step's gradient).
    """
    rule_name = rule.name if isinstance(rule, AggregationRule) else rule
    data = client.data
    if len(data) == 0:
        raise ConfigError(f"client {client.client_id} has no data")
    if rule_name == "fedsgd":
        try:
            grad = _full_gradient(global_p, data)
        except NumericError as exc:
            raise NumericError(f"client {client.client_id}: {exc}") from exc
        return ClientUpdate(client.client_id, "gradient", grad, len(data))

    rng = make_rng(round_seed, "client", client.client_id)
    theta = global_p.copy()
    values = theta.values
    anchor = global_p.values
    mu = hp.prox_mu if rule_name == "fedprox" else 0.0
    grad = np.empty_like(values)
    n, bs = len(data), hp.batch_size
    for epoch in range(hp.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            try:
                _param_grads_into(theta, data.features[idx], data.labels[idx], grad)
            except NumericError as exc:
                raise NumericError(f"client {client.client_id}, epoch {epoch}: {exc}") from exc
            if mu:
                grad += mu * (values - anchor)
            grad *= hp.lr
            values -= grad
    if not np.all(np.isfinite(values)):
        raise NumericError(f"client {client.client_id}: local weights diverged")
    return ClientUpdate(client.client_id, "weights", values, n)


# --- server side -------------------------------------------------------------

def client_weights(updates: Sequence[ClientUpdate]) -> np.ndarray:
    counts = np.array([u.sample_count for u in updates], dtype=np.float64)
    return counts / counts.sum()


def aggregate(updates: Sequence[ClientUpdate], global_p: ParamVector, rule: AggregationRule) -> ParamVector:
    """Combine client updates into the next global model.

    fedsgd: ``theta - global_lr * sum p_k g_k``; fedavg/fedprox: ``sum p_k theta_k``;
    median: coordinate-wise median (mean of middle two for even K); trimean:
    coordinate-wise mean after dropping ``ceil(trim_fraction * K)`` values at
    each end.  Robust rules ignore the sample weights.
    """
    if not updates:
        raise ConfigError("no updates to aggregate")
    updates = sorted(updates, key=lambda u: u.client_id)
    kinds = {u.kind for u in updates}
    if len(kinds) != 1:
        raise ConfigError(f"mixed update kinds {sorted(kinds)}")
    (kind,) = kinds
    if kind != rule.update_kind:
        raise ConfigError(f"rule {rule.name} expects {rule.update_kind} updates, got {kind}")
    for u in updates:
        if u.payload.shape != global_p.values.shape:
            raise ShapeError(f"client {u.client_id} update has shape {u.payload.shape}")

    if rule.name in ("fedsgd", "fedavg", "fedprox"):
        p = client_weights(updates)
        acc = np.zeros_like(global_p.values)
        for pk, u in zip(p, updates):
            acc += pk * u.payload
        if rule.name == "fedsgd":
            return global_p.with_values(global_p.values - rule.global_lr * acc)
        return global_p.with_values(acc)

    stacked = np.stack([u.payload for u in updates])
    if rule.name == "median":
        return global_p.with_values(np.median(stacked, axis=0))
    K = len(updates)
    trim = int(np.ceil(rule.trim_fraction * K - 1e-12))
    if K - 2 * trim < 1:
        raise ConfigError(f"trim fraction {rule.trim_fraction} leaves no clients out of {K}")
    ordered = np.sort(stacked, axis=0)
    return global_p.with_values(ordered[trim:K - trim].mean(axis=0))


def update_displacement(u: ClientUpdate, global_before: ParamVector, rule: AggregationRule) -> np.ndarray:
    """How far the client alone would move the global model."""
    if u.kind == "gradient":
        return -rule.global_lr * u.payload
    return u.payload - global_before.values


def sensitivities(updates: Sequence[ClientUpdate], before: ParamVector, after: ParamVector,
                  rule: AggregationRule) -> dict[int, float]:
    """``||client displacement|| / (||global displacement|| + eps)`` per client."""
    denom = float(np.linalg.norm(after.values - before.values)) + SENSITIVITY_EPS
    return {u.client_id: float(np.linalg.norm(update_displacement(u, before, rule))) / denom
            for u in updates}


def run_round(global_p: ParamVector, clients: Sequence[ClientState], hp: LocalHyper,
              rule: AggregationRule, round_seed: int, threads: int = 1) -> tuple[list[ClientUpdate], ParamVector]:
    active = sorted((c for c in clients if c.n_samples > 0), key=lambda c: c.client_id)
    if not active:
        raise ConfigError("no client holds any data")

    updates = client_updates(global_p, active, hp, rule, round_seed, threads)
    return updates, aggregate(updates, global_p, rule)


def client_updates(global_p: ParamVector, clients: Sequence[ClientState], hp: LocalHyper,
                   rule: AggregationRule, round_seed: int, threads: int = 1) -> list[ClientUpdate]:
    """Local updates of ``clients`` in the given order, optionally on a thread pool."""

    def work(c: ClientState) -> ClientUpdate:
        return local_update(global_p, c, hp, rule, round_seed)

    if threads > 1 and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(work, clients))
    return [work(c) for c in clients]


Evaluator = Callable[[ParamVector], dict[str, float]]


def run_training(setup: FederatedSetup, *, seed: int | None = None, init: ParamVector | None = None,
                 evaluator: Evaluator | None = None, eval_every: int = 1, threads: int = 1,
                 record: bool = True, tag: str = "train") -> TrainingHistory:
    """Run ``setup.n_rounds`` rounds of federated training.

    The initial model comes from ``derive_seed(seed, "init")`` unless ``init``
    is given; round ``i`` uses ``derive_seed(seed, "round", i)``.  With
    ``record=False`` only the final model and metrics are kept.
    """
    seed = setup.seed if seed is None else seed
    theta = init if init is not None else init_params(setup.arch, derive_seed(seed, "init"))
    history = TrainingHistory(setup=setup, seed=seed, init=theta, final=theta)
    for i in range(1, setup.n_rounds + 1):
        updates, after = run_round(theta, setup.clients, setup.hp, setup.rule,
                                   derive_seed(seed, "round", i), threads)
        metrics: dict[str, float] = {}
        if evaluator is not None and (i % eval_every == 0 or i == setup.n_rounds):
            metrics = {"round": i, **evaluator(after)}
            history.metrics.append(metrics)
            log.info("%s round %d: %s", tag, i,
                     ", ".join(f"{k}={v:.4f}" for k, v in metrics.items() if k != "round"))
        if record:
            history.records.append(RoundRecord(
                round=i,
                global_before=theta,
                updates=updates,
                global_after=after,
                sensitivities=sensitivities(updates, theta, after, setup.rule),
                metrics=metrics,
            ))
        theta = after
    history.final = theta
    return history
