"""Malicious client construction and unlearning requests.

The attacker only touches its own dataset and the forget requests it
emits; it trains and uploads exactly like an honest client.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, TriggerSpec, data_prepare, stratified_sample
from .errors import ConfigError, UnlearnRequestRejected
from .fl import ClientState
from .unlearn import ForgetSpec
from .rng import make_rng

# fresh ids for poisoned copies; source datasets are assumed smaller than this
POISON_ID_BASE = 1 << 40


@dataclass(frozen=True)
class AttackPlan:
    trigger: TriggerSpec = TriggerSpec()
    malicious_client_id: int = 1
    n_bd: int = 600
    camouflage_ratio: float = 1.0
    attack_seed: int = 0

    def __post_init__(self) -> None:
        if self.camouflage_ratio <= 0:
            raise ConfigError("camouflage_ratio must be positive")
        if self.n_bd < 0:
            raise ConfigError("n_bd must be non-negative")

    @property
    def n_c(self) -> int:
        return int(round(self.camouflage_ratio * self.n_bd))


@dataclass(eq=False)
class AttackArtifacts:
    client_id: int
    bd_ids: np.ndarray
    c_ids: np.ndarray
    augmented: Dataset

    def __post_init__(self) -> None:
        if np.intersect1d(self.bd_ids, self.c_ids).size:
            raise ConfigError("backdoor and camouflage ids overlap")


def build_malicious_client(clean_local: Dataset, plan: AttackPlan, *, client_id: int | None = None,
                           id_base: int = POISON_ID_BASE) -> tuple[ClientState, AttackArtifacts]:
    """Augment a clean local dataset with backdoor and camouflage copies.

    The attack set is a label-stratified sample of ``2 * (n_bd + n_c)``
    local examples.  Poisoned copies get fresh ids starting at ``id_base``
    (backdoor first, then camouflage) so they never collide with the
    clean originals.  The returned client's weight is left at 0; callers
    reweight the federation.
    """
    client_id = plan.malicious_client_id if client_id is None else client_id
    n_bd, n_c = plan.n_bd, plan.n_c
    if n_bd + n_c == 0:
        empty = np.empty(0, dtype=np.int64)
        return (ClientState(client_id, clean_local, is_malicious=True),
                AttackArtifacts(client_id, empty, empty.copy(), clean_local))
    rng = make_rng(plan.attack_seed, "attack_set", client_id)
    attack_set = stratified_sample(clean_local, 2 * (n_bd + n_c), rng)
    bd, cam = data_prepare(attack_set, plan.trigger, n_bd, n_c, plan.attack_seed)
    bd.ids = id_base + np.arange(n_bd, dtype=np.int64)
    cam.ids = id_base + n_bd + np.arange(n_c, dtype=np.int64)
    if np.isin(np.concatenate([bd.ids, cam.ids]), clean_local.ids).any():
        raise ConfigError("poison id range collides with local ids; raise id_base")
    augmented = Dataset.concat([clean_local, bd, cam])
    artifacts = AttackArtifacts(client_id, bd.ids.copy(), cam.ids.copy(), augmented)
    return ClientState(client_id, augmented, is_malicious=True), artifacts


def issue_camouflage_unlearn(artifacts: AttackArtifacts) -> ForgetSpec:
    """Request removal of exactly the camouflage samples."""
    if artifacts.c_ids.size == 0:
        raise UnlearnRequestRejected("no camouflage samples to unlearn")
    return ForgetSpec(artifacts.client_id, frozenset(artifacts.c_ids.tolist()))


def issue_benign_unlearn(client: ClientState, fraction: float, seed: int) -> ForgetSpec:
    if client.is_malicious:
        raise ConfigError("benign unlearning must come from a benign client")
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("fraction must lie in (0, 1]")
    n = max(1, int(round(fraction * len(client.data))))
    picked = make_rng(seed, "benign_unlearn", client.client_id).choice(client.data.ids, size=n, replace=False)
    return ForgetSpec(client.client_id, frozenset(picked.tolist()))
