"""Layer-wise recoverability probes.

One small MLP (``d -> hidden -> 5``, ReLU) is trained per layer with an
identical protocol: Adam, fixed learning rate, fixed batch size and epoch
count, seeded fan-in uniform init and seeded per-epoch shuffling. The test
accuracy of each probe is that layer's recoverability.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ._parallel import parallel_map
from .corpus import CATEGORIES, LabeledTokenCorpus
from .errors import InvalidInput, NumericalFailure
from .linalg import as_matrix
from .stack import FeatureStack

N_CLASSES = len(CATEGORIES)


@dataclass(frozen=True)
class ProbeConfig:
    hidden_width: int = 256
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        for name in ("hidden_width", "batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise InvalidInput(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise InvalidInput("learning_rate must be positive")


@dataclass
class ProbeModel:
    layer_id: int
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    loss_trace: List[float] = field(default_factory=list)

    @property
    def input_width(self) -> int:
        return self.w1.shape[0]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in (self.w1, self.b1, self.w2, self.b2))

    def scores(self, x) -> np.ndarray:
        h = np.maximum(np.asarray(x, dtype=np.float64) @ self.w1 + self.b1, 0.0)
        return h @ self.w2 + self.b2

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.scores(x), axis=1)


def _init(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), rng.uniform(-bound, bound, size=fan_out)


def _loss_and_grads(params, x, y, need_grad=True):
    w1, b1, w2, b2 = params
    pre = x @ w1 + b1
    h = np.maximum(pre, 0.0)
    logits = h @ w2 + b2
    logits = logits - logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    n = x.shape[0]
    loss = -logp[np.arange(n), y].mean()
    if not need_grad:
        return loss, None
    d_logits = np.exp(logp)
    d_logits[np.arange(n), y] -= 1.0
    d_logits /= n
    d_h = d_logits @ w2.T
    d_h[pre <= 0] = 0.0
    return loss, (x.T @ d_h, d_h.sum(axis=0), h.T @ d_logits, d_logits.sum(axis=0))


def train_probe(features, labels, cfg: ProbeConfig = ProbeConfig(), layer_id: int = 0) -> ProbeModel:
    """Fit one probe; the RNG is seeded with ``cfg.seed + layer_id``.

    ``loss_trace[0]`` is the full-train-set loss at initialization and
    ``loss_trace[e]`` the loss after epoch ``e``.
    """
    x = as_matrix(features, "features")
    y = np.asarray(labels, dtype=np.int64)
    if y.ndim != 1 or y.shape[0] != x.shape[0]:
        raise InvalidInput(f"{x.shape[0]} feature rows but {y.shape} labels")
    if np.any((y < 0) | (y >= N_CLASSES)):
        raise InvalidInput("labels outside the category range")
    if np.unique(y).size < 2:
        raise InvalidInput("probing needs at least two classes")
    rng = np.random.default_rng(cfg.seed + layer_id)
    w1, b1 = _init(rng, x.shape[1], cfg.hidden_width)
    w2, b2 = _init(rng, cfg.hidden_width, N_CLASSES)
    params = [w1, b1, w2, b2]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    trace = [float(_loss_and_grads(params, x, y, need_grad=False)[0])]
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(x.shape[0])
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = _loss_and_grads(params, x[idx], y[idx])
            if not np.isfinite(loss):
                raise NumericalFailure(f"probe loss became {loss} at step {step}")
            step += 1
            for p, g, mi, vi in zip(params, grads, m, v):
                mi *= beta1
                mi += (1 - beta1) * g
                vi *= beta2
                vi += (1 - beta2) * g * g
                m_hat = mi / (1 - beta1**step)
                v_hat = vi / (1 - beta2**step)
                p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + adam_eps)
        trace.append(float(_loss_and_grads(params, x, y, need_grad=False)[0]))
    if not np.isfinite(trace[-1]):
        raise NumericalFailure("probe training produced a non-finite loss")
    return ProbeModel(layer_id=layer_id, w1=w1, b1=b1, w2=w2, b2=b2, loss_trace=trace)


@dataclass(frozen=True)
class Recoverability:
    overall: float
    per_category: Dict[str, float]
    support: Dict[str, int]


def recoverability(probe: ProbeModel, test_features, test_labels) -> Recoverability:
    """Test accuracy overall and per category; absent categories are omitted."""
    x = as_matrix(test_features, "test_features")
    y = np.asarray(test_labels, dtype=np.int64)
    if x.shape[0] == 0 or y.size == 0:
        raise InvalidInput("empty test set")
    if x.shape[0] != y.shape[0]:
        raise InvalidInput("test features and labels are misaligned")
    if x.shape[1] != probe.input_width:
        raise InvalidInput(f"width {x.shape[1]} != probe input width {probe.input_width}")
    hit = probe.predict(x) == y
    per, support = {}, {}
    for c, name in enumerate(CATEGORIES):
        sel = y == c
        if sel.any():
            per[name] = float(hit[sel].mean())
            support[name] = int(sel.sum())
    return Recoverability(overall=float(hit.mean()), per_category=per, support=support)


@dataclass(frozen=True)
class RecoverabilityCurve:
    layer_ids: tuple
    overall: np.ndarray
    per_category: tuple
    support: Dict[str, int]
    n_params: tuple = ()

    def __post_init__(self):
        if len(self.layer_ids) == 0:
            raise InvalidInput("empty recoverability curve")

    def category(self, name: str) -> np.ndarray:
        return np.array([p.get(name, np.nan) for p in self.per_category])

    def to_dict(self) -> dict:
        return {
            "layers": list(self.layer_ids),
            "overall": [float(a) for a in self.overall],
            "per_category": {
                name: [p.get(name) for p in self.per_category] for name in CATEGORIES if name in self.support
            },
            "support": dict(self.support),
        }


def probe_curve(
    stack: FeatureStack,
    corpus: LabeledTokenCorpus,
    cfg: ProbeConfig = ProbeConfig(),
    layers: Optional[List[int]] = None,
) -> RecoverabilityCurve:
    """Train an independent probe on every layer and evaluate on test prompts."""
    if stack.n_tokens != corpus.n_tokens:
        raise InvalidInput(f"stack has {stack.n_tokens} tokens, corpus has {corpus.n_tokens}")
    y = corpus.token_labels()
    train = corpus.token_train_mask()
    if not (~train).any():
        raise InvalidInput("empty test set")
    ids = tuple(range(stack.n_layers)) if layers is None else tuple(sorted(set(layers)))

    def run(layer):
        x = stack[layer]
        probe = train_probe(x[train], y[train], cfg, layer_id=layer)
        return recoverability(probe, x[~train], y[~train]), probe.n_params

    results = parallel_map(run, ids)
    rec = [r for r, _ in results]
    return RecoverabilityCurve(
        layer_ids=ids,
        overall=np.array([r.overall for r in rec]),
        per_category=tuple(r.per_category for r in rec),
        support=rec[0].support,
        n_params=tuple(n for _, n in results),
    )


def synthetic_drift_stack(
    labels,
    n_layers: int = 12,
    width: int = 32,
    separation: float = 1.0,
    base_noise: float = 0.3,
    drift: float = 0.5,
    seed: int = 0,
) -> FeatureStack:
    """Controlled forgetting: ``T^(l) = centroid[y] + base noise + drift * l * fresh noise``.

    With ``drift=0`` every layer is identical.
    """
    y = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    centroids = separation * rng.standard_normal((N_CLASSES, width))
    base = centroids[y] + base_noise * rng.standard_normal((y.size, width))
    layers = [base]
    for l in range(1, n_layers):
        layers.append(base + drift * l * rng.standard_normal((y.size, width)))
    return FeatureStack(layers=tuple(layers))
