"""Small federations shared by the test modules."""

import numpy as np

from badfu.data import PartitionSpec, gen_synthetic, partition
from badfu.fl import AggregationRule, FederatedSetup, LocalHyper, make_clients
from badfu.nn import Architecture, Batch, loss_and_param_grads


def small_setup(K=3, n=240, d=16, C=4, hidden=(8,), rule="fedavg", rounds=3, seed=0, lr=0.05,
                batch_size=16, local_epochs=1, prox_mu=0.01, global_lr=None, scheme="iid"):
    ds = gen_synthetic(n, d, C, seed)
    parts = partition(ds, PartitionSpec(scheme, n_clients=K, seed=seed))
    arch = Architecture((d, *hidden, C))
    hp = LocalHyper(lr=lr, batch_size=batch_size, local_epochs=local_epochs, prox_mu=prox_mu)
    agg = AggregationRule(rule, global_lr=lr if global_lr is None else global_lr)
    return FederatedSetup(arch, make_clients(parts), hp, agg, rounds, seed)


def oracle_mean_grad(p, data):
    """Mean gradient over a dataset straight from the nn-core entry point."""
    return loss_and_param_grads(p, Batch(data.features, data.labels))[1]


def oracle_sum_grad(p, data):
    return len(data) * oracle_mean_grad(p, data)


def max_abs(a, b):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def attacked_setup(K=3, n=600, side=8, C=4, rounds=4, n_bd=20, ratio=1.0, seed=0, rule="fedavg",
                   local_epochs=1, lr=0.05):
    """Small image-shaped federation whose client 1 runs the camouflage attack.

    Returns ``(setup, artifacts, trigger, test)``.
    """
    from badfu.attack import AttackPlan, build_malicious_client
    from badfu.data import TriggerSpec
    from badfu.fl import reweight

    from badfu.data import train_test_split

    ds, test = train_test_split(gen_synthetic(n + 300, side * side, C, seed, noise=0.2), 300, seed)
    parts = partition(ds, PartitionSpec("iid", n_clients=K, seed=seed))
    clients = make_clients(parts)
    trigger = TriggerSpec(target_label=0, patch_size=2)
    plan = AttackPlan(trigger=trigger, malicious_client_id=1, n_bd=n_bd, camouflage_ratio=ratio, attack_seed=seed)
    malicious, artifacts = build_malicious_client(clients[0].data, plan)
    clients = reweight([malicious] + clients[1:])
    arch = Architecture((side * side, 16, C))
    hp = LocalHyper(lr=lr, batch_size=16, local_epochs=local_epochs)
    setup = FederatedSetup(arch, clients, hp, AggregationRule(rule, global_lr=lr), rounds, seed)
    return setup, artifacts, trigger, test
