"""Synthetic conditioning task, training loop and feature extraction for the toy MMDiT.

Image latents are fixed linear renderings of the prompt's encoder
embeddings, so a model that attends to text can predict the clean latent and
hence the noise.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .corpus import CATEGORIES, LabeledTokenCorpus, build_corpus, geneval_like_prompts
from .errors import InvalidInput, NumericalFailure
from .mmdit import DiffusionBatch, ForwardResult, MMDiTConfig, ToyMMDiT, forward_full, loss_and_grads
from .reinject import ReinjectionPlan, RotationMap, residual_attribute_inject
from .stack import FeatureStack


@dataclass(frozen=True)
class TaskSpec:
    prompts: int = 553
    train_prompts: int = 499
    test_prompts: int = 54
    category_scale: float = 0.7
    word_scale: float = 0.7
    position_scale: float = 0.3
    seed: int = 0


class SyntheticTask:
    """Prompt corpus plus a frozen 'text encoder' and latent renderer."""

    def __init__(self, spec: TaskSpec, config: MMDiTConfig):
        self.spec = spec
        self.config = config
        self.corpus = build_corpus(
            geneval_like_prompts(spec.prompts, spec.seed),
            train_count=spec.train_prompts,
            test_count=spec.test_prompts,
            seed=spec.seed,
        )
        longest = max(len(p) for p in self.corpus.prompts)
        if longest > config.text_tokens:
            raise InvalidInput(f"prompts need {longest} text tokens, config has {config.text_tokens}")
        rng = np.random.default_rng(spec.seed + 7919)
        d, n, m = config.width, config.text_tokens, config.image_tokens
        self.vocab = self.corpus.vocabulary()
        self.token_index = {tok: i for i, tok in enumerate(self.vocab)}
        majority = np.zeros((len(self.vocab), len(CATEGORIES)))
        for toks, labs in zip(self.corpus.prompts, self.corpus.labels):
            for tok, y in zip(toks, labs):
                majority[self.token_index[tok], y] += 1
        centroids = rng.standard_normal((len(CATEGORIES), d))
        self.embeddings = (
            spec.category_scale * centroids[majority.argmax(axis=1)]
            + spec.word_scale * rng.standard_normal((len(self.vocab), d))
        )
        self.positions = spec.position_scale * rng.standard_normal((n, d))
        self.pad = spec.word_scale * rng.standard_normal(d)
        self.mixing = rng.standard_normal((m, n)) / np.sqrt(n)
        self.projection = rng.standard_normal((d, d)) / np.sqrt(d)
        raw = np.stack([self._render_raw(i) for i in range(len(self.corpus.prompts))])
        self.latent_scale = 1.0 / raw.std()

    def __len__(self) -> int:
        return len(self.corpus.prompts)

    def encode_tokens(self, tokens: Sequence[str]) -> np.ndarray:
        """Encoder output ``T^(0)`` padded to the configured text length."""
        n = self.config.text_tokens
        if len(tokens) > n:
            raise InvalidInput(f"{len(tokens)} tokens exceed text length {n}")
        try:
            ids = [self.token_index[t] for t in tokens]
        except KeyError as exc:
            raise InvalidInput(f"token {exc} not in vocabulary") from None
        out = np.tile(self.pad, (n, 1))
        out[: len(ids)] = self.embeddings[ids]
        return out + self.positions

    def encode(self, index: int) -> np.ndarray:
        return self.encode_tokens(self.corpus.prompts[index])

    def _render_raw(self, index: int) -> np.ndarray:
        k = len(self.corpus.prompts[index])
        return self.mixing[:, :k] @ self.encode(index)[:k] @ self.projection

    def render(self, index: int) -> np.ndarray:
        return self.latent_scale * self._render_raw(index)

    def render_tokens(self, tokens: Sequence[str]) -> np.ndarray:
        k = len(tokens)
        return self.latent_scale * (self.mixing[:, :k] @ self.encode_tokens(tokens)[:k] @ self.projection)

    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(self.corpus.train)

    def sample_batch(self, rng: np.random.Generator, size: int, indices=None) -> DiffusionBatch:
        pool = self.train_indices() if indices is None else np.asarray(indices)
        pick = rng.choice(pool, size=size)
        x0 = np.stack([self.render(i) for i in pick])
        cond = np.stack([self.encode(i) for i in pick])
        t = rng.uniform(0.02, 1.0, size=size)
        return DiffusionBatch.make(x0, cond, t, rng)

    def minimal_pair(self, seed: int = 0) -> Tuple[List[str], List[str]]:
        """Two equal-length prompts differing in one adjective."""
        from .corpus import COLORS, split_word

        rng = np.random.default_rng(seed)
        adj = CATEGORIES.index("adjective")
        for i in rng.permutation(len(self)):
            toks, labs = list(self.corpus.prompts[i]), self.corpus.labels[i]
            if adj not in labs:
                continue
            pos = labs.index(adj)
            if len(split_word(toks[pos])) != 1 or toks[pos] not in COLORS:
                continue
            for other in rng.permutation(COLORS):
                if other != toks[pos] and len(split_word(other)) == 1 and other in self.token_index:
                    swapped = list(toks)
                    swapped[pos] = str(other)
                    return toks, swapped
        raise InvalidInput("no prompt with a swappable single-token adjective")


def train_toy(
    model: ToyMMDiT,
    task: SyntheticTask,
    steps: int,
    seed: int = 0,
    batch_size: int = 16,
    learning_rate: float = 3e-3,
    mask: str = "full",
) -> ToyMMDiT:
    """Adam on the epsilon loss; returns a new model whose ``loss_trace`` holds per-step losses."""
    if steps < 1:
        raise InvalidInput("steps must be >= 1")
    model = model.copy()
    rng = np.random.default_rng(seed)
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(x) for k, x in model.params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    for step in range(1, steps + 1):
        batch = task.sample_batch(rng, batch_size)
        loss, grads, _, _ = loss_and_grads(model, batch, mask)
        if not np.isfinite(loss):
            raise NumericalFailure(f"training diverged at step {step}")
        model.loss_trace.append(loss)
        for k, g in grads.items():
            m[k] = b1 * m[k] + (1 - b1) * g
            v[k] = b2 * v[k] + (1 - b2) * g * g
            model.params[k] -= learning_rate * (m[k] / (1 - b1**step)) / (np.sqrt(v[k] / (1 - b2**step)) + eps)
    model.check_finite()
    return model


def evaluation_loss(model: ToyMMDiT, task: SyntheticTask, samples: int = 256, seed: int = 12345, mask: str = "full") -> float:
    """Epsilon loss on a fixed batch of held-out prompts."""
    rng = np.random.default_rng(seed)
    test = np.flatnonzero(~np.array(task.corpus.train))
    batch = task.sample_batch(rng, samples, indices=test if test.size else None)
    res = forward_full(model, batch.cond, batch.z_t, batch.t, mask=mask)
    return float(np.mean((res.prediction - batch.eps) ** 2))


def extract_stack(
    model: ToyMMDiT,
    task: SyntheticTask,
    timestep: float = 1.0,
    seed: int = 0,
    plan: Optional[ReinjectionPlan] = None,
    rmap: Optional[RotationMap] = None,
    chunk: int = 128,
) -> FeatureStack:
    """One denoising pass per corpus prompt; padding tokens are dropped.

    Tokens are concatenated in corpus order, so the result aligns with
    ``task.corpus``.
    """
    rng = np.random.default_rng(seed)
    count = len(task)
    x0 = np.stack([task.render(i) for i in range(count)])
    eps = rng.standard_normal(x0.shape)
    z = (1.0 - timestep) * x0 + timestep * eps
    cond = np.stack([task.encode(i) for i in range(count)])
    per_layer: List[List[np.ndarray]] = [[] for _ in range(model.config.layers + 1)]
    for start in range(0, count, chunk):
        sl = slice(start, min(start + chunk, count))
        res = forward_full(model, cond[sl], z[sl], timestep, plan=plan, rmap=rmap)
        for j, i in enumerate(range(sl.start, sl.stop)):
            k = len(task.corpus.prompts[i])
            for l, t in enumerate(res.text_layers):
                per_layer[l].append(t[j, :k])
    layers = tuple(np.concatenate(rows, axis=0) for rows in per_layer)
    return FeatureStack(layers=layers, timestep=float(timestep), meta={"seed": seed})


def _cos(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


@dataclass(frozen=True)
class PairRow:
    weight: float
    text_similarity: float
    sequence_similarity: float
    output_similarity: float
    output_alignment: float


def minimal_pair_demo(
    model: ToyMMDiT,
    text_a,
    text_b,
    weights: Sequence[float] = (0.0, 0.01, 0.025, 0.05, 0.075, 0.1),
    start_layer: int = 2,
    timestep: float = 1.0,
    seed: int = 0,
) -> List[PairRow]:
    """Inject ``w * T_B^(0)`` into prompt A's blocks ``>= start_layer``.

    Columns, all against prompt B's un-injected run:

    * ``text_similarity`` - cosine of A's final text features at the token
      positions where the two prompts differ;
    * ``sequence_similarity`` - the same over all token positions;
    * ``output_similarity`` - cosine of the predicted noise;
    * ``output_alignment`` - cosine between A's output change and the
      B-minus-A output difference (0 at ``w = 0``).
    """
    text_a = np.asarray(text_a, dtype=np.float64)
    text_b = np.asarray(text_b, dtype=np.float64)
    if text_a.shape != text_b.shape:
        raise InvalidInput("minimal pairs must have identical shapes")
    edited = np.flatnonzero(np.any(text_a != text_b, axis=1))
    if edited.size == 0:
        raise InvalidInput("prompts A and B are identical")
    cfg = model.config
    z = np.random.default_rng(seed).standard_normal((cfg.image_tokens, cfg.width))
    ref = forward_full(model, text_b, z, timestep)
    base = forward_full(model, text_a, z, timestep)
    toward_b = (ref.prediction - base.prediction).ravel()
    rows = []
    for w in weights:

        def hook(l, T, _texts, w=w):
            return T + w * text_b if l >= start_layer else T

        res = forward_full(model, text_a, z, timestep, hook=hook)
        shift = (res.prediction - base.prediction).ravel()
        denom = np.linalg.norm(shift) * np.linalg.norm(toward_b)
        rows.append(PairRow(
            weight=float(w),
            text_similarity=_cos(res.text_layers[-1][0, edited], ref.text_layers[-1][0, edited]),
            sequence_similarity=_cos(res.text_layers[-1], ref.text_layers[-1]),
            output_similarity=_cos(res.prediction, ref.prediction),
            output_alignment=float(shift @ toward_b / denom) if denom > 0 else 0.0,
        ))
    return rows


def injected_stack(stack_a: FeatureStack, t_b0, w: float, start_layer: int = 2) -> FeatureStack:
    """Analysis-only counterpart of the pilot injection on a captured stack."""
    return residual_attribute_inject(stack_a, t_b0, w, start_layer)
