"""A small joint-attention diffusion transformer with hand-written backprop.

Text tokens ``T`` (n x d) and image tokens ``I`` (m x d) are concatenated
and processed by a shared self-attention in every block, with separate
Q/K/V/output projections, layer norms and MLPs per modality. Only the image
stream feeds the noise-prediction head, so text tokens receive gradients
exclusively through attention.

Arrays are batched as ``(B, tokens, d)``; unbatched inputs are promoted.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInput, NumericalFailure
from .reinject import ReinjectionPlan, RotationMap, anchored_inject
from .stack import FeatureStack

LN_EPS = 1e-5
GELU_C = np.sqrt(2.0 / np.pi)
MASK_MODES = ("full", "no_image_to_text", "no_cross")


@dataclass(frozen=True)
class MMDiTConfig:
    layers: int = 8
    width: int = 32
    text_tokens: int = 12
    image_tokens: int = 16
    heads: int = 4
    mlp_ratio: int = 4
    time_bins: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("layers", "width", "text_tokens", "image_tokens", "heads", "mlp_ratio", "time_bins"):
            if getattr(self, name) < 1:
                raise InvalidInput(f"{name} must be positive")
        if self.width % self.heads:
            raise InvalidInput(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads


STREAMS = ("t", "i")


def _block_param_shapes(cfg: MMDiTConfig) -> Dict[str, Tuple[int, ...]]:
    d, h = cfg.width, cfg.width * cfg.mlp_ratio
    shapes = {}
    for s in STREAMS:
        shapes.update({
            f"ln1_{s}.g": (d,), f"ln1_{s}.b": (d,),
            f"q_{s}": (d, d), f"k_{s}": (d, d), f"v_{s}": (d, d), f"o_{s}": (d, d),
            f"ln2_{s}.g": (d,), f"ln2_{s}.b": (d,),
            f"mlp_{s}.w1": (d, h), f"mlp_{s}.b1": (h,), f"mlp_{s}.w2": (h, d), f"mlp_{s}.b2": (d,),
        })
    return shapes


def param_shapes(cfg: MMDiTConfig) -> Dict[str, Tuple[int, ...]]:
    shapes = {
        "temb": (cfg.time_bins, cfg.width),
        "pos_i": (cfg.image_tokens, cfg.width),
        "out.w": (cfg.width, cfg.width),
        "out.b": (cfg.width,),
    }
    for l in range(cfg.layers):
        shapes.update({f"b{l}.{k}": v for k, v in _block_param_shapes(cfg).items()})
    return shapes


def param_group(name: str) -> str:
    """Parameter kind shared across blocks, e.g. ``b3.q_t`` -> ``q_t``."""
    return name.split(".", 1)[1] if name.startswith("b") and name[1].isdigit() else name


@dataclass
class ToyMMDiT:
    config: MMDiTConfig
    params: Dict[str, np.ndarray]
    loss_trace: List[float] = field(default_factory=list)

    @classmethod
    def init(cls, config: MMDiTConfig, seed: Optional[int] = None) -> "ToyMMDiT":
        """Seeded init: unit LN gains, fan-in uniform weights, small embeddings."""
        rng = np.random.default_rng(config.seed if seed is None else seed)
        params = {}
        for name, shape in param_shapes(config).items():
            kind = param_group(name)
            if kind.endswith(".g"):
                params[name] = np.ones(shape)
            elif kind.endswith(".b") or kind.endswith(".b1") or kind.endswith(".b2"):
                params[name] = np.zeros(shape)
            elif kind in ("temb", "pos_i"):
                params[name] = 0.5 * rng.standard_normal(shape)
            else:
                bound = 1.0 / np.sqrt(shape[0])
                params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(config, params)

    def copy(self) -> "ToyMMDiT":
        return ToyMMDiT(self.config, {k: v.copy() for k, v in self.params.items()}, list(self.loss_trace))

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def check_finite(self) -> None:
        for k, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise NumericalFailure(f"parameter {k} is not finite")


# ---------------------------------------------------------------- primitives


def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _ln_bwd(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    gh = dy * g
    dx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu(x):
    th = np.tanh(GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + th), th


def _gelu_grad(x, th):
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _wgrad(x, dy):
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def attention_mask(n: int, m: int, mode: str = "full", text_len: Optional[int] = None) -> np.ndarray:
    """Boolean ``(n+m, n+m)`` matrix; ``True`` where query row may attend key column."""
    if mode not in MASK_MODES:
        raise InvalidInput(f"unknown mask mode {mode!r}")
    allow = np.ones((n + m, n + m), dtype=bool)
    if mode in ("no_image_to_text", "no_cross"):
        allow[n:, :n] = False
    if mode == "no_cross":
        allow[:n, n:] = False
    if text_len is not None:
        if not 1 <= text_len <= n:
            raise InvalidInput(f"text_len {text_len} outside [1, {n}]")
        allow[:, text_len:n] = False
    return allow


# ---------------------------------------------------------------- block


def _block_fwd(p, pre, T, I, cfg, bias):
    n = T.shape[1]
    B, N = T.shape[0], n + I.shape[1]
    h, dh = cfg.heads, cfg.head_dim
    c = {}
    Tn, c["ln1_t"] = _ln_fwd(T, p[pre + "ln1_t.g"], p[pre + "ln1_t.b"])
    In, c["ln1_i"] = _ln_fwd(I, p[pre + "ln1_i.g"], p[pre + "ln1_i.b"])
    c["Tn"], c["In"] = Tn, In

    def heads(x):
        return x.reshape(B, N, h, dh).transpose(0, 2, 1, 3)

    Q = heads(np.concatenate([Tn @ p[pre + "q_t"], In @ p[pre + "q_i"]], axis=1))
    K = heads(np.concatenate([Tn @ p[pre + "k_t"], In @ p[pre + "k_i"]], axis=1))
    V = heads(np.concatenate([Tn @ p[pre + "v_t"], In @ p[pre + "v_i"]], axis=1))
    S = Q @ K.transpose(0, 1, 3, 2) / np.sqrt(dh) + bias
    S = S - S.max(axis=-1, keepdims=True)
    P = np.exp(S)
    P /= P.sum(axis=-1, keepdims=True)
    A = (P @ V).transpose(0, 2, 1, 3).reshape(B, N, cfg.width)
    c.update(Q=Q, K=K, V=V, P=P, A=A)
    T1 = T + A[:, :n] @ p[pre + "o_t"]
    I1 = I + A[:, n:] @ p[pre + "o_i"]
    outs = []
    for s, X in (("t", T1), ("i", I1)):
        Xn, c[f"ln2_{s}"] = _ln_fwd(X, p[pre + f"ln2_{s}.g"], p[pre + f"ln2_{s}.b"])
        H = Xn @ p[pre + f"mlp_{s}.w1"] + p[pre + f"mlp_{s}.b1"]
        G, th = _gelu(H)
        c[f"mlp_{s}"] = (Xn, H, th, G)
        outs.append(X + G @ p[pre + f"mlp_{s}.w2"] + p[pre + f"mlp_{s}.b2"])
    return outs[0], outs[1], c


def _block_bwd(p, pre, dT2, dI2, c, cfg, grads):
    n = dT2.shape[1]
    B, N = dT2.shape[0], n + dI2.shape[1]
    h, dh = cfg.heads, cfg.head_dim
    dX1 = {}
    for s, dY in (("t", dT2), ("i", dI2)):
        Xn, H, th, G = c[f"mlp_{s}"]
        grads[pre + f"mlp_{s}.w2"] += _wgrad(G, dY)
        grads[pre + f"mlp_{s}.b2"] += dY.sum(axis=(0, 1))
        dH = (dY @ p[pre + f"mlp_{s}.w2"].T) * _gelu_grad(H, th)
        grads[pre + f"mlp_{s}.w1"] += _wgrad(Xn, dH)
        grads[pre + f"mlp_{s}.b1"] += dH.sum(axis=(0, 1))
        dXn = dH @ p[pre + f"mlp_{s}.w1"].T
        dx, dg, db = _ln_bwd(dXn, c[f"ln2_{s}"])
        grads[pre + f"ln2_{s}.g"] += dg
        grads[pre + f"ln2_{s}.b"] += db
        dX1[s] = dY + dx
    A = c["A"]
    grads[pre + "o_t"] += _wgrad(A[:, :n], dX1["t"])
    grads[pre + "o_i"] += _wgrad(A[:, n:], dX1["i"])
    dA = np.concatenate([dX1["t"] @ p[pre + "o_t"].T, dX1["i"] @ p[pre + "o_i"].T], axis=1)
    dA = dA.reshape(B, N, h, dh).transpose(0, 2, 1, 3)
    Q, K, V, P = c["Q"], c["K"], c["V"], c["P"]
    dP = dA @ V.transpose(0, 1, 3, 2)
    dV = P.transpose(0, 1, 3, 2) @ dA
    dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) / np.sqrt(dh)
    dQ = dS @ K
    dK = dS.transpose(0, 1, 3, 2) @ Q

    def merge(x):
        return x.transpose(0, 2, 1, 3).reshape(B, N, cfg.width)

    dQ, dK, dV = merge(dQ), merge(dK), merge(dV)
    dXn = {"t": 0.0, "i": 0.0}
    for s, sl, Xn in (("t", slice(0, n), c["Tn"]), ("i", slice(n, N), c["In"])):
        for name, dZ in (("q", dQ), ("k", dK), ("v", dV)):
            grads[pre + f"{name}_{s}"] += _wgrad(Xn, dZ[:, sl])
            dXn[s] = dXn[s] + dZ[:, sl] @ p[pre + f"{name}_{s}"].T
    out = []
    for s in STREAMS:
        dx, dg, db = _ln_bwd(dXn[s], c[f"ln1_{s}"])
        grads[pre + f"ln1_{s}.g"] += dg
        grads[pre + f"ln1_{s}.b"] += db
        out.append(dX1[s] + dx)
    return out[0], out[1]


# ---------------------------------------------------------------- model


def time_bin(t, bins: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any((t < 0) | (t > 1)):
        raise InvalidInput("timesteps must lie in [0, 1]")
    return np.minimum((t * bins).astype(np.int64), bins - 1)


Hook = Callable[[int, np.ndarray, List[np.ndarray]], np.ndarray]


@dataclass
class ForwardResult:
    prediction: np.ndarray
    text_layers: List[np.ndarray]
    image_layers: List[np.ndarray]
    cache: Optional[dict] = None

    def stack(self, index: int = 0, timestep: float = 1.0, prompt_id: Optional[str] = None,
              text_len: Optional[int] = None) -> FeatureStack:
        """FeatureStack for one batch element, optionally dropping padding tokens."""
        sl = slice(None, text_len)
        return FeatureStack(
            layers=tuple(t[index, sl] for t in self.text_layers),
            images=tuple(i[index] for i in self.image_layers),
            timestep=timestep,
            prompt_id=prompt_id,
        )


def _batched(x, width, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != width:
        raise InvalidInput(f"{name} must be (B, tokens, {width}), got {x.shape}")
    return x


def forward_full(
    model: ToyMMDiT,
    text,
    image,
    t,
    plan: Optional[ReinjectionPlan] = None,
    rmap: Optional[RotationMap] = None,
    mask: str = "full",
    text_len: Optional[int] = None,
    hook: Optional[Hook] = None,
    keep_cache: bool = False,
) -> ForwardResult:
    """Batched forward pass recording ``T^(l)`` / ``I^(l)`` for ``l = 0..L``.

    ``T^(l)`` is the text input to block ``l`` (``T^(L)`` the final output).
    A plan or hook rewrites ``T^(l)`` before block ``l`` runs; the recorded
    layer is the rewritten one.
    """
    cfg = model.config
    p = model.params
    T = _batched(text, cfg.width, "text")
    z = _batched(image, cfg.width, "image")
    if T.shape[1] != cfg.text_tokens or z.shape[1] != cfg.image_tokens or T.shape[0] != z.shape[0]:
        raise InvalidInput(
            f"expected text (B, {cfg.text_tokens}, d) and image (B, {cfg.image_tokens}, d), "
            f"got {T.shape} and {z.shape}"
        )
    bins = time_bin(t, cfg.time_bins)
    if bins.size == 1:
        bins = np.repeat(bins, T.shape[0])
    if bins.size != T.shape[0]:
        raise InvalidInput("need one timestep per batch element")
    if plan is not None:
        plan.check_rotations(rmap)
        if plan.target_layers[-1] >= cfg.layers:
            raise InvalidInput(f"plan targets must be < {cfg.layers}")
    if keep_cache and (plan is not None or hook is not None):
        raise InvalidInput("backward through injected forwards is not supported")
    allow = attention_mask(cfg.text_tokens, cfg.image_tokens, mask, text_len)
    bias = np.where(allow, 0.0, -np.inf)
    I = z + p["pos_i"] + p["temb"][bins][:, None, :]
    texts, images, caches = [], [], []
    for l in range(cfg.layers):
        if plan is not None and l in plan.target_layers:
            r = rmap[l] if plan.rotation_enabled else None
            T = np.stack([anchored_inject(texts[plan.origin_layer][b], T[b], plan, r) for b in range(T.shape[0])])
        if hook is not None:
            T = hook(l, T, texts)
        texts.append(T)
        images.append(I)
        T, I, c = _block_fwd(p, f"b{l}.", T, I, cfg, bias)
        if not (np.all(np.isfinite(T)) and np.all(np.isfinite(I))):
            raise NumericalFailure(f"non-finite activation after block {l}")
        if keep_cache:
            caches.append(c)
    texts.append(T)
    images.append(I)
    pred = I @ p["out.w"] + p["out.b"]
    cache = {"caches": caches, "bins": bins} if keep_cache else None
    return ForwardResult(prediction=pred, text_layers=texts, image_layers=images, cache=cache)


def forward(model: ToyMMDiT, text, image, t, plan=None, rmap=None, **kwargs):
    """Predicted noise and the FeatureStack of the first batch element."""
    res = forward_full(model, text, image, t, plan=plan, rmap=rmap, **kwargs)
    single = np.asarray(text).ndim == 2
    pred = res.prediction[0] if single else res.prediction
    tt = float(np.atleast_1d(t)[0])
    return pred, res.stack(0, timestep=tt, text_len=kwargs.get("text_len"))


def backward(model: ToyMMDiT, res: ForwardResult, d_pred) -> Tuple[Dict[str, np.ndarray], np.ndarray, np.ndarray]:
    """Gradients w.r.t. parameters, text input and noisy-image input."""
    if res.cache is None:
        raise InvalidInput("forward was run without keep_cache=True")
    cfg, p = model.config, model.params
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    I_L = res.image_layers[-1]
    grads["out.w"] += _wgrad(I_L, d_pred)
    grads["out.b"] += d_pred.sum(axis=(0, 1))
    dI = d_pred @ p["out.w"].T
    dT = np.zeros_like(res.text_layers[-1])
    for l in reversed(range(cfg.layers)):
        dT, dI = _block_bwd(p, f"b{l}.", dT, dI, res.cache["caches"][l], cfg, grads)
    grads["pos_i"] += dI.sum(axis=0)
    np.add.at(grads["temb"], res.cache["bins"], dI.sum(axis=1))
    return grads, dT, dI


# ---------------------------------------------------------------- diffusion objective


@dataclass
class DiffusionBatch:
    """``z_t = (1 - t) x0 + t eps`` with per-example timesteps."""

    x0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    cond: np.ndarray
    text_len: Optional[int] = None

    @property
    def z_t(self) -> np.ndarray:
        t = self.t[:, None, None]
        return (1.0 - t) * self.x0 + t * self.eps

    @classmethod
    def make(cls, x0, cond, t, rng, text_len=None) -> "DiffusionBatch":
        x0 = np.asarray(x0, dtype=np.float64)
        if x0.ndim == 2:
            x0 = x0[None]
        cond = np.asarray(cond, dtype=np.float64)
        if cond.ndim == 2:
            cond = cond[None]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x0.shape[0],)).copy()
        return cls(x0=x0, eps=rng.standard_normal(x0.shape), t=t, cond=np.ascontiguousarray(cond), text_len=text_len)


def epsilon_loss(model: ToyMMDiT, batch: DiffusionBatch, mask: str = "full") -> float:
    """Mean squared error of predicted noise over image-latent outputs only."""
    res = forward_full(model, batch.cond, batch.z_t, batch.t, mask=mask, text_len=batch.text_len)
    return float(np.mean((res.prediction - batch.eps) ** 2))


def loss_and_grads(model: ToyMMDiT, batch: DiffusionBatch, mask: str = "full"):
    res = forward_full(model, batch.cond, batch.z_t, batch.t, mask=mask, text_len=batch.text_len, keep_cache=True)
    diff = res.prediction - batch.eps
    loss = float(np.mean(diff**2))
    grads, d_text, d_image = backward(model, res, 2.0 * diff / diff.size)
    return loss, grads, d_text, d_image


def grad_check(
    model: ToyMMDiT,
    batch: DiffusionBatch,
    which: Sequence[str] = ("all",),
    samples: int = 6,
    h: float = 1e-5,
    mask: str = "full",
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative error of backprop vs central differences.

    ``which`` holds parameter names, parameter groups (``q_t``), ``"text"``,
    ``"image"`` or ``"all"``. Relative error is ``|a - f| / max(|a|, |f|, floor)``.
    """
    _, grads, d_text, _ = loss_and_grads(model, batch, mask)
    for g in list(grads.values()) + [d_text]:
        if not np.all(np.isfinite(g)):
            raise NumericalFailure("non-finite analytic gradient")
    names = []
    for w in which:
        if w == "all":
            names += list(model.params) + ["text"]
        elif w in model.params or w == "text":
            names.append(w)
        else:
            match = [k for k in model.params if param_group(k) == w]
            if not match:
                raise InvalidInput(f"unknown gradient selector {w!r}")
            names += match
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in dict.fromkeys(names):
        target = batch.cond if name == "text" else model.params[name]
        analytic = d_text if name == "text" else grads[name]
        flat = target.reshape(-1)
        for idx in rng.choice(flat.size, size=min(samples, flat.size), replace=False):
            old = flat[idx]
            flat[idx] = old + h
            up = epsilon_loss(model, batch, mask)
            flat[idx] = old - h
            down = epsilon_loss(model, batch, mask)
            flat[idx] = old
            numeric = (up - down) / (2 * h)
            a = analytic.reshape(-1)[idx]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return worst


def text_gradient_norm(model: ToyMMDiT, batch: DiffusionBatch, mask: str = "full") -> float:
    """``|dL/d text inputs|_F``; zero when image queries cannot see text keys."""
    return float(np.linalg.norm(loss_and_grads(model, batch, mask)[2]))
