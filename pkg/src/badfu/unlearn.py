"""Sample-level federated unlearning: exact retraining and three approximations.

All methods keep the requesting client in the federation with its retained
data; only the forgotten sample ids disappear.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, UnlearnRequestRejected
from .fl import (AggregationRule, ClientState, ClientUpdate, FederatedSetup, TrainingHistory,
                 _full_gradient, aggregate, client_updates, run_training,
                 update_displacement)
from .nn import ParamVector, _param_grads_into
from .rng import derive_seed, make_rng

METHODS = ("retrain", "federaser", "fedu", "sifu")
DIRECTION_EPS = 1e-12


@dataclass(frozen=True)
class ForgetSpec:
    requesting_client_id: int
    forget_ids: frozenset[int]

    def __post_init__(self) -> None:
        object.__setattr__(self, "forget_ids", frozenset(int(i) for i in self.forget_ids))
        if not self.forget_ids:
            raise UnlearnRequestRejected("forget set is empty")

    def id_array(self) -> np.ndarray:
        return np.array(sorted(self.forget_ids), dtype=np.int64)


@dataclass(eq=False)
class UnlearnResult:
    model: ParamVector
    method: str
    rounds_executed: int
    duration: float


def validate_request(setup: FederatedSetup, f: ForgetSpec) -> ClientState:
    """Enforce that every requested id was trained on by the requester."""
    try:
        client = setup.client(f.requesting_client_id)
    except KeyError:
        raise UnlearnRequestRejected(f"unknown client {f.requesting_client_id}") from None
    missing = np.setdiff1d(f.id_array(), client.data.ids)
    if missing.size:
        raise UnlearnRequestRejected(
            f"{missing.size} requested ids were never in client {client.client_id}'s training data"
        )
    return client


def retained_setup(setup: FederatedSetup, f: ForgetSpec) -> FederatedSetup:
    client = validate_request(setup, f)
    return setup.with_client_data(client.client_id, client.data.without_ids(f.forget_ids))


def _weights_update(theta_k: np.ndarray, global_p: ParamVector, rule: AggregationRule,
                    client_id: int, n: int) -> ClientUpdate:
    """Express a locally trained model in the update kind ``rule`` consumes."""
    if rule.update_kind == "gradient":
        return ClientUpdate(client_id, "gradient", (global_p.values - theta_k) / rule.global_lr, n)
    return ClientUpdate(client_id, "weights", theta_k, n)


# --- exact ---------------------------------------------------------------------

def unlearn_retrain(history: TrainingHistory, f: ForgetSpec, *, threads: int = 1) -> UnlearnResult:
    """Retrain from scratch without the forgotten ids.

    Uses ``derive_seed(history.seed, "retrain")`` as the new master seed, so
    the result equals ``run_training`` on the reduced setup with that seed.
    """
    start = time.perf_counter()
    setup = retained_setup(history.setup, f)
    out = run_training(setup, seed=derive_seed(history.seed, "retrain"), threads=threads,
                       record=False, tag="retrain")
    return UnlearnResult(out.final, "retrain", setup.n_rounds, time.perf_counter() - start)


# --- FedEraser -----------------------------------------------------------------

def calibrate_update(recorded: np.ndarray, fresh: np.ndarray) -> np.ndarray:
    """Recorded magnitude along the fresh direction (fresh itself if it has no direction)."""
    norm = float(np.linalg.norm(fresh))
    if norm < DIRECTION_EPS:
        return fresh.copy()
    return fresh * (float(np.linalg.norm(recorded)) / norm)


def federaser_from_setup(history: TrainingHistory, setup: FederatedSetup, cal_epochs: int = 1,
                         threads: int = 1) -> ParamVector:
    """Calibrated replay of ``history`` on ``setup`` (no request validation)."""
    if cal_epochs < 1:
        raise ConfigError("cal_epochs must be >= 1")
    if len(history.records) != history.setup.n_rounds:
        raise ConfigError("FedEraser needs every round's recorded updates")
    rule = setup.rule
    cal_hp = replace(setup.hp, local_epochs=cal_epochs)
    active = [c for c in setup.clients if c.n_samples > 0]
    theta = history.init
    for rec in history.records:
        recorded = {u.client_id: update_displacement(u, rec.global_before, rule) for u in rec.updates}
        round_seed = derive_seed(history.seed, "federaser", rec.round)
        fresh = client_updates(theta, active, cal_hp, rule, round_seed, threads)
        updates = []
        for c, u in zip(active, fresh):
            step = calibrate_update(recorded[c.client_id], update_displacement(u, theta, rule))
            updates.append(_weights_update(theta.values + step, theta, rule, c.client_id, c.n_samples))
        theta = aggregate(updates, theta, rule)
    return theta


def unlearn_federaser(history: TrainingHistory, f: ForgetSpec, cal_epochs: int = 1, *,
                      threads: int = 1) -> UnlearnResult:
    """Calibrated replay of the recorded training trajectory.

    Starting from the original initial model, each recorded round is
    replayed: every client runs ``cal_epochs`` local epochs from the
    calibrated global (the requester on its retained data), and its update
    is rescaled to the norm of the update it recorded in that round.
    """
    start = time.perf_counter()
    setup = retained_setup(history.setup, f)
    model = federaser_from_setup(history, setup, cal_epochs, threads)
    return UnlearnResult(model, "federaser", len(history.records), time.perf_counter() - start)


# --- FedU ----------------------------------------------------------------------

def fedu_influence_step(history: TrainingHistory, f: ForgetSpec, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Requester's corrected model and the forget-set mean gradient at the final global."""
    client = validate_request(history.setup, f)
    theta = history.final
    forget = client.data.select_ids(f.forget_ids)
    g_f = _full_gradient(theta, forget)
    lr = history.setup.hp.lr
    return theta.values + lam * lr * len(forget) * g_f, g_f


def unlearn_fedu(history: TrainingHistory, f: ForgetSpec, lam: float = 0.5, beta: float = 0.5) -> UnlearnResult:
    """First-order influence removal followed by one utility-preserving round.

    The requester ascends the summed forget-set loss (``lam * lr * |F| *
    g_f``), then takes one mini-batch step on its retained data scaled by
    ``beta``; every other client takes one ordinary mini-batch step from the
    final global.  The server aggregates once.
    """
    start = time.perf_counter()
    setup = retained_setup(history.setup, f)
    theta = history.final
    corrected, _ = fedu_influence_step(history, f, lam)
    hp, rule = setup.hp, setup.rule
    round_seed = derive_seed(history.seed, "fedu")
    grad = np.empty_like(theta.values)
    updates = []
    for c in setup.clients:
        if c.n_samples == 0:
            continue
        rng = make_rng(round_seed, "client", c.client_id)
        idx = rng.choice(c.n_samples, size=min(hp.batch_size, c.n_samples), replace=False)
        if c.client_id == f.requesting_client_id:
            base, step = ParamVector(corrected, theta.arch), beta * hp.lr
        else:
            base, step = theta, hp.lr
        _param_grads_into(base, c.data.features[idx], c.data.labels[idx], grad)
        updates.append(_weights_update(base.values - step * grad, theta, rule, c.client_id, c.n_samples))
    model = aggregate(updates, theta, rule)
    return UnlearnResult(model, "fedu", 1, time.perf_counter() - start)


# --- SIFU ----------------------------------------------------------------------

def sifu_rollback_round(n_rounds: int) -> int:
    if n_rounds < 2:
        raise ConfigError("SIFU needs at least 2 recorded rounds")
    return n_rounds // 2


def sifu_noise_std(history: TrainingHistory, client_id: int, sigma_scale: float) -> float:
    """``sigma_scale * RMS(theta_Tu) * mean requester sensitivity after T_u``."""
    t_u = sifu_rollback_round(len(history.records))
    snapshot = history.snapshot(t_u)
    tail = [rec.sensitivities[client_id] for rec in history.records[t_u:]
            if client_id in rec.sensitivities]
    s_f = float(np.mean(tail)) if tail else 0.0
    rms = float(np.sqrt(np.mean(snapshot.values ** 2)))
    return sigma_scale * rms * s_f


def sifu_from_setup(history: TrainingHistory, setup: FederatedSetup, client_id: int,
                    sigma_scale: float, recovery_rounds: int, threads: int = 1) -> ParamVector:
    """Rollback, perturb and recover on ``setup`` (no request validation)."""
    t_u = sifu_rollback_round(len(history.records))
    if recovery_rounds < 0:
        raise ConfigError("recovery_rounds must be >= 0")
    snapshot = history.snapshot(t_u)
    sigma = sifu_noise_std(history, client_id, sigma_scale)
    noise = make_rng(history.seed, "sifu", "noise").normal(0.0, 1.0, size=snapshot.values.shape)
    start_model = snapshot.with_values(snapshot.values + sigma * noise)
    recovery = replace(setup, n_rounds=recovery_rounds)
    out = run_training(recovery, seed=derive_seed(history.seed, "sifu"), init=start_model,
                       threads=threads, record=False, tag="sifu")
    return out.final


def unlearn_sifu(history: TrainingHistory, f: ForgetSpec, sigma_scale: float = 0.05,
                 recovery_rounds: int | None = None, *, threads: int = 1) -> UnlearnResult:
    """Roll back to round ``N // 2``, add sensitivity-scaled Gaussian noise, recover.

    ``recovery_rounds`` defaults to ``ceil(N / 4)``.
    """
    start = time.perf_counter()
    n = len(history.records)
    sifu_rollback_round(n)
    if recovery_rounds is None:
        recovery_rounds = -(-n // 4)
    setup = retained_setup(history.setup, f)
    model = sifu_from_setup(history, setup, f.requesting_client_id, sigma_scale, recovery_rounds, threads)
    return UnlearnResult(model, "sifu", recovery_rounds, time.perf_counter() - start)


def run_unlearning(method: str, history: TrainingHistory, f: ForgetSpec, params: dict | None = None,
                   threads: int = 1) -> UnlearnResult:
    params = dict(params or {})
    allowed = {"retrain": set(), "federaser": {"cal_epochs"}, "fedu": {"lam", "beta"},
               "sifu": {"sigma_scale", "recovery_rounds"}}
    if method in allowed and set(params) - allowed[method]:
        raise ConfigError(f"unknown {method} parameters: {sorted(set(params) - allowed[method])}")
    if method == "retrain":
        return unlearn_retrain(history, f, threads=threads, **params)
    if method == "federaser":
        return unlearn_federaser(history, f, threads=threads, **params)
    if method == "fedu":
        return unlearn_fedu(history, f, **params)
    if method == "sifu":
        return unlearn_sifu(history, f, threads=threads, **params)
    raise ConfigError(f"unknown unlearning method {method!r}; expected one of {METHODS}")
