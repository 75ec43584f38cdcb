"""Turn an :class:`ExperimentConfig` into data, clients and training runs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

from .attack import AttackArtifacts, AttackPlan, build_malicious_client, issue_benign_unlearn, \
    issue_camouflage_unlearn
from .config import ExperimentConfig, IdxData
from .data import Dataset, PartitionSpec, TriggerSpec, gen_synthetic, load_idx, partition, \
    train_test_split
from .evaluate import Evaluator, MetricReport
from .fl import AggregationRule, FederatedSetup, LocalHyper, TrainingHistory, make_clients, reweight, \
    run_training
from .nn import Architecture
from .rng import derive_seed
from .unlearn import ForgetSpec, run_unlearning

log = logging.getLogger(__name__)


@dataclass(eq=False)
class Experiment:
    config: ExperimentConfig
    train: Dataset
    test: Dataset
    setup: FederatedSetup
    benign_setup: FederatedSetup
    trigger: TriggerSpec | None
    artifacts: AttackArtifacts | None
    evaluator: Evaluator
    history: TrainingHistory | None = None
    stages: dict[str, MetricReport] = field(default_factory=dict)

    def camouflage_request(self) -> ForgetSpec:
        if self.artifacts is None:
            raise ValueError("experiment has no attack")
        return issue_camouflage_unlearn(self.artifacts)

    def benign_request(self, client_id: int | None = None, fraction: float | None = None) -> ForgetSpec:
        bu = self.config.benign_unlearn
        client_id = client_id or (bu.client if bu else _first_benign(self.setup))
        fraction = fraction or (bu.fraction if bu else 0.2)
        return issue_benign_unlearn(self.setup.client(client_id), fraction,
                                    derive_seed(self.config.seed, "benign_unlearn"))


def _first_benign(setup: FederatedSetup) -> int:
    return next(c.client_id for c in setup.clients if not c.is_malicious)


@lru_cache(maxsize=4)
def _load_idx_cached(images: str, labels: str, n_classes: int) -> Dataset:
    return load_idx(images, labels, n_classes)


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    if isinstance(ds, IdxData):
        train = _load_idx_cached(ds.train_images, ds.train_labels, ds.n_classes)
        test = _load_idx_cached(ds.test_images, ds.test_labels, ds.n_classes)
        if ds.n_train is not None and ds.n_train < len(train):
            train, _ = train_test_split(train, len(train) - ds.n_train, derive_seed(0, "subsample_train"))
        if ds.n_test is not None and ds.n_test < len(test):
            test, _ = train_test_split(test, len(test) - ds.n_test, derive_seed(0, "subsample_test"))
        return train, test
    full = gen_synthetic(ds.n_train + ds.n_test, ds.d, ds.n_classes, ds.seed, ds.noise)
    return train_test_split(full, ds.n_test, ds.seed)


def trigger_from_config(cfg: ExperimentConfig) -> TriggerSpec | None:
    if cfg.attack is None:
        return None
    t = cfg.attack.trigger
    return TriggerSpec(kind=t.kind, target_label=t.target_label, patch_size=t.patch_size, corner=t.corner,
                       intensity=t.intensity, alpha=t.alpha, trigger_seed=t.seed)


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    train, test = load_data(cfg)
    fed = cfg.federation
    arch = Architecture((train.d, *cfg.model.hidden, train.n_classes), cfg.model.activation)
    spec = PartitionSpec(scheme=cfg.partition.scheme, n_clients=fed.n_clients,
                         seed=derive_seed(cfg.seed, "partition"), ratio=cfg.partition.ratio,
                         classes_per_client=cfg.partition.classes_per_client, alpha=cfg.partition.alpha)
    parts = partition(train, spec)
    benign_clients = make_clients(parts)
    hp = LocalHyper(lr=cfg.training.lr, batch_size=cfg.training.batch_size,
                    local_epochs=cfg.local_epochs, prox_mu=cfg.training.prox_mu)
    rule = AggregationRule(fed.aggregation, global_lr=cfg.global_lr, trim_fraction=fed.trim_fraction)
    benign_setup = FederatedSetup(arch, benign_clients, hp, rule, fed.n_rounds, cfg.seed)

    trigger = trigger_from_config(cfg)
    artifacts = None
    clients = benign_clients
    if cfg.attack is not None:
        trigger.validate_for(train.n_classes, train.d, train.image_shape)
        plan = AttackPlan(trigger=trigger, malicious_client_id=cfg.attack.malicious_client,
                          n_bd=cfg.attack.n_bd, camouflage_ratio=cfg.attack.camouflage_ratio,
                          attack_seed=derive_seed(cfg.seed, "attack"))
        mid = plan.malicious_client_id
        malicious, artifacts = build_malicious_client(benign_setup.client(mid).data, plan)
        clients = reweight([malicious if c.client_id == mid else c for c in benign_clients])
        log.info("malicious client %d: %d clean + %d backdoor + %d camouflage", mid,
                 len(benign_setup.client(mid).data), artifacts.bd_ids.size, artifacts.c_ids.size)
    setup = FederatedSetup(arch, clients, hp, rule, fed.n_rounds, cfg.seed)
    return Experiment(cfg, train, test, setup, benign_setup, trigger, artifacts, Evaluator(test, trigger))


def train(exp: Experiment, *, threads: int = 1, record: bool = True) -> TrainingHistory:
    exp.history = run_training(exp.setup, evaluator=exp.evaluator, eval_every=exp.config.eval_every,
                               threads=threads, record=record)
    stage = "pre_activate" if exp.artifacts is not None else "benign"
    exp.stages[stage] = exp.evaluator.report(exp.history.final, stage)
    return exp.history


def train_benign_baseline(exp: Experiment, *, threads: int = 1) -> MetricReport:
    out = run_training(exp.benign_setup, threads=threads, record=False, tag="benign")
    exp.stages["benign"] = exp.evaluator.report(out.final, "benign")
    return exp.stages["benign"]


def unlearn(exp: Experiment, method: str, *, benign: bool = False, threads: int = 1,
            params: dict | None = None) -> MetricReport:
    """Run one unlearning method on the camouflage request (or a benign request)."""
    if exp.history is None:
        raise ValueError("train the experiment first")
    request = exp.benign_request() if benign else exp.camouflage_request()
    merged = exp.config.unlearn.params(method)
    merged.update(params or {})
    result = run_unlearning(method, exp.history, request, merged, threads=threads)
    stage = "normal_ul" if benign else method
    report = exp.evaluator.report(result.model, stage)
    exp.stages[stage] = report
    log.info("%s: acc=%.4f asr=%.4f (%.1fs)", stage, report.acc, report.asr, result.duration)
    return report


def activation_gap(exp: Experiment, stage: str) -> float:
    return exp.stages[stage].asr - exp.stages["pre_activate"].asr


__all__ = ["Experiment", "build_experiment", "train", "train_benign_baseline", "unlearn",
           "load_data", "activation_gap"]
