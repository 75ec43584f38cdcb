"""Clean accuracy, attack success rate and Neural Cleanse trigger reversal."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, TriggerSpec, stratified_sample
from .errors import EvaluationError, NumericError
from .nn import ParamVector, forward, input_grads, predict
from .rng import make_rng

STAGES = ("benign", "pre_activate", "retrain", "federaser", "fedu", "sifu", "normal_ul")
MAD_CONSISTENCY = 1.4826
NC_EPS = 1e-12
NC_THRESHOLD = -2.0


@dataclass
class MetricReport:
    stage: str
    acc: float
    asr: float
    n_test: int
    n_asr_eval: int

    def as_dict(self) -> dict:
        return {"stage": self.stage, "acc": self.acc, "asr": self.asr,
                "n_test": self.n_test, "n_asr_eval": self.n_asr_eval}


def accuracy(model: ParamVector, test: Dataset) -> float:
    """Fraction of examples whose argmax logit (lowest index on ties) equals the label."""
    if len(test) == 0:
        raise EvaluationError("empty test set")
    return float(np.mean(predict(model, test.features) == test.labels))


def asr_eval_set(test: Dataset, t: TriggerSpec) -> np.ndarray:
    """Triggered features of every non-target test example."""
    keep = np.flatnonzero(test.labels != t.target_label)
    if keep.size == 0:
        raise EvaluationError("no non-target examples to evaluate the attack on")
    return t.apply(test.features[keep], test.image_shape)


def attack_success_rate(model: ParamVector, test: Dataset, t: TriggerSpec,
                        triggered: np.ndarray | None = None) -> float:
    """Share of triggered non-target examples classified as the target label.

    ``triggered`` may carry a precomputed :func:`asr_eval_set` result.
    """
    x = asr_eval_set(test, t) if triggered is None else triggered
    return float(np.mean(predict(model, x) == t.target_label))


class Evaluator:
    """Caches the triggered evaluation set so per-round metrics stay cheap."""

    def __init__(self, test: Dataset, trigger: TriggerSpec | None):
        self.test = test
        self.trigger = trigger
        self._triggered = asr_eval_set(test, trigger) if trigger is not None else None

    def __call__(self, model: ParamVector) -> dict[str, float]:
        out = {"acc": accuracy(model, self.test)}
        if self.trigger is not None:
            out["asr"] = attack_success_rate(model, self.test, self.trigger, self._triggered)
        return out

    def report(self, model: ParamVector, stage: str) -> MetricReport:
        m = self(model)
        n_asr = 0 if self._triggered is None else self._triggered.shape[0]
        return MetricReport(stage, m["acc"], m.get("asr", float("nan")), len(self.test), n_asr)


# --- Neural Cleanse ----------------------------------------------------------

@dataclass(frozen=True)
class NCOptions:
    steps: int = 300
    lr: float = 0.1
    l1_weight: float = 0.01
    probe_size: int = 200
    seed: int = 0


@dataclass
class NCReport:
    l1_norms: list[float]
    indices: list[float | None]
    failed: list[int] = field(default_factory=list)

    @property
    def flagged(self) -> list[int]:
        return [c for c, v in enumerate(self.indices) if v is not None and v < NC_THRESHOLD]

    def rows(self) -> list[dict]:
        return [{"class": c, "l1_norm": n, "index": i, "flagged": i is not None and i < NC_THRESHOLD}
                for c, (n, i) in enumerate(zip(self.l1_norms, self.indices))]


def reverse_trigger(model: ParamVector, probe: np.ndarray, target: int,
                    opt: NCOptions) -> tuple[np.ndarray, np.ndarray, float]:
    """Find a small mask ``m`` and pattern ``p`` that send ``probe`` to ``target``.

    Minimises ``mean CE(model((1-m)*x + m*p), target) + l1_weight * sum(m)``
    with Adam-scaled projected gradient steps; ``m`` and ``p`` are clipped to
    [0, 1] after every step.  Returns ``(mask, pattern, final_loss)``.
    """
    d = probe.shape[1]
    rng = make_rng(opt.seed, "nc", target)
    mask = np.full(d, 0.1)
    pattern = rng.uniform(0.0, 1.0, size=d)
    state = np.concatenate([mask, pattern])
    m1 = np.zeros_like(state)
    m2 = np.zeros_like(state)
    b1, b2 = 0.9, 0.999
    targets = np.full(probe.shape[0], target)
    loss = float("nan")
    for step in range(1, opt.steps + 1):
        mask, pattern = state[:d], state[d:]
        x = (1.0 - mask) * probe + mask * pattern
        g = input_grads(model, x, targets) / probe.shape[0]
        grad = np.concatenate([
            (g * (pattern - probe)).sum(axis=0) + opt.l1_weight,
            (g * mask).sum(axis=0),
        ])
        m1 = b1 * m1 + (1 - b1) * grad
        m2 = b2 * m2 + (1 - b2) * grad * grad
        step_dir = (m1 / (1 - b1 ** step)) / (np.sqrt(m2 / (1 - b2 ** step)) + 1e-8)
        state = np.clip(state - opt.lr * step_dir, 0.0, 1.0)
    mask, pattern = state[:d], state[d:]
    x = (1.0 - mask) * probe + mask * pattern
    logits = forward(model, x)
    shifted = logits - logits.max(axis=1, keepdims=True)
    ce = -(shifted[:, target] - np.log(np.exp(shifted).sum(axis=1)))
    loss = float(ce.mean() + opt.l1_weight * mask.sum())
    if not np.isfinite(loss):
        raise NumericError(f"trigger reversal for class {target} diverged")
    return mask, pattern, loss


def anomaly_indices(norms: np.ndarray) -> np.ndarray:
    """``(norm - median) / (1.4826 * MAD + eps)``."""
    med = np.median(norms)
    mad = np.median(np.abs(norms - med))
    return (norms - med) / (MAD_CONSISTENCY * mad + NC_EPS)


def nc_probe(test: Dataset, size: int, seed: int) -> Dataset:
    """Class-stratified probe drawn from held-out data."""
    return stratified_sample(test, size, make_rng(seed, "nc_probe"))


def neural_cleanse(model: ParamVector, probe: Dataset, opt: NCOptions = NCOptions()) -> NCReport:
    C = model.arch.n_classes
    if np.any(probe.label_counts() == 0):
        raise EvaluationError("probe set must contain every class")
    norms = np.full(C, np.nan)
    failed = []
    for c in range(C):
        try:
            mask, _, _ = reverse_trigger(model, probe.features, c, opt)
        except NumericError:
            failed.append(c)
            continue
        norms[c] = float(np.abs(mask).sum())
    ok = ~np.isnan(norms)
    indices: list[float | None] = [None] * C
    if ok.any():
        for c, v in zip(np.flatnonzero(ok), anomaly_indices(norms[ok])):
            indices[c] = float(v)
    return NCReport([float(v) for v in norms], indices, failed)
