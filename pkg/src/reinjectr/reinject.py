"""Prompt reinjection: shallow text features are fused into deeper blocks.

Fusion happens in a standardized space (both sides layer-normalized), with
the origin features optionally rotated into the target layer's frame by an
orthogonal Procrustes map, and the target's per-token mean/std restored
afterwards.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, Mapping, Optional, Tuple, Union

import numpy as np

from .errors import DegenerateWarning, InvalidInput
from .linalg import DEFAULT_EPS, as_matrix, layer_norm, restore, svd, token_stats
from .stack import FeatureStack

ORTHO_TOL = 1e-6


def is_orthogonal(r, tol: float = ORTHO_TOL) -> bool:
    r = np.asarray(r, dtype=np.float64)
    return r.ndim == 2 and r.shape[0] == r.shape[1] and np.linalg.norm(r.T @ r - np.eye(r.shape[0])) < tol


def _row_centered(m: np.ndarray) -> bool:
    return bool(np.max(np.abs(m.mean(axis=1))) <= 1e-9 * max(1.0, np.max(np.abs(m))))


def calibrate_rotation(x_origin, y_target, check_normalized: bool = True) -> np.ndarray:
    """Orthogonal ``R`` minimizing ``|X R - Y|_F``: ``R = U V^T`` with ``U S V^T = svd(X^T Y)``.

    Layer-normalized inputs have zero row means, so the all-ones direction is
    a null vector of ``X^T Y`` on both sides. That direction is then paired so
    that ``R`` maps ones to ones; it does not affect the residual.
    """
    x = as_matrix(x_origin, "x_origin")
    y = as_matrix(y_target, "y_target")
    if x.shape != y.shape:
        raise InvalidInput(f"shape mismatch: {x.shape} vs {y.shape}")
    n, d = x.shape
    if n < d:
        warnings.warn(f"only {n} calibration tokens for width {d}; rotation is underdetermined", DegenerateWarning)
    if check_normalized:
        for name, m in (("x_origin", x), ("y_target", y)):
            st = token_stats(m)
            if np.max(np.abs(st.mean)) > 1e-3 or np.max(np.abs(st.std - 1.0)) > 1e-2:
                warnings.warn(f"{name} does not look layer-normalized", UserWarning)
    res = svd(x.T @ y)
    u, vt = res.u, res.vt.copy()
    tol = res.sigma[0] * d * np.finfo(float).eps
    rank = int(np.sum(res.sigma > tol))
    expected = d
    if d > 1 and _row_centered(x) and _row_centered(y) and rank < d:
        expected = d - 1
        ones = np.ones(d) / np.sqrt(d)
        # the null pair sits last; make it map ones -> ones
        if abs(u[:, -1] @ ones) > 0.5 and (u[:, -1] @ ones) * (vt[-1] @ ones) < 0:
            vt[-1] = -vt[-1]
    if rank < expected:
        warnings.warn(f"X^T Y has rank {rank} < {expected}; rotation is not unique", DegenerateWarning)
    return u @ vt


@dataclass(frozen=True)
class RotationMap:
    origin_layer: int
    entries: Mapping[int, np.ndarray]
    dataset_id: str = ""
    n_tokens: int = 0
    timestep: float = 1.0
    ortho_tol: float = field(default=ORTHO_TOL, compare=False)

    def __post_init__(self):
        clean = {}
        for target, r in self.entries.items():
            target = int(target)
            if target <= self.origin_layer:
                raise InvalidInput(f"target {target} is not deeper than origin {self.origin_layer}")
            r = np.asarray(r, dtype=np.float64)
            if not is_orthogonal(r, self.ortho_tol):
                raise InvalidInput(f"rotation for layer {target} is not orthogonal")
            clean[target] = r
        object.__setattr__(self, "entries", dict(sorted(clean.items())))

    @property
    def targets(self) -> Tuple[int, ...]:
        return tuple(self.entries)

    def __getitem__(self, target: int) -> np.ndarray:
        return self.entries[target]


def calibrate_rotation_map(
    stack: FeatureStack,
    origin: int,
    targets: Iterable[int],
    eps: float = DEFAULT_EPS,
    dataset_id: str = "",
) -> RotationMap:
    """One rotation per target layer, each fitted against the shared origin layer."""
    x = layer_norm(stack[origin], eps)
    entries = {}
    for t in targets:
        if not origin < t < stack.n_layers:
            raise InvalidInput(f"target layer {t} out of range for origin {origin}")
        entries[t] = calibrate_rotation(x, layer_norm(stack[t], eps))
    return RotationMap(origin, entries, dataset_id=dataset_id, n_tokens=stack.n_tokens, timestep=stack.timestep)


@dataclass(frozen=True)
class ReinjectionPlan:
    origin_layer: int
    target_layers: Tuple[int, ...]
    weight: float = 0.025
    anchor_enabled: bool = True
    rotation_enabled: bool = True
    ln_eps: float = DEFAULT_EPS
    exact_restore: bool = True

    def __post_init__(self):
        targets = tuple(sorted({int(t) for t in self.target_layers}))
        if not targets:
            raise InvalidInput("a plan needs at least one target layer")
        if targets[0] <= self.origin_layer:
            raise InvalidInput("all target layers must be deeper than the origin layer")
        if not self.weight >= 0:
            raise InvalidInput(f"weight must be >= 0, got {self.weight}")
        if not self.ln_eps > 0:
            raise InvalidInput("ln_eps must be > 0")
        object.__setattr__(self, "target_layers", targets)

    def with_options(self, **changes) -> "ReinjectionPlan":
        return replace(self, **changes)

    def check_rotations(self, rmap: Optional[RotationMap]) -> None:
        if not self.rotation_enabled:
            return
        if rmap is None:
            raise InvalidInput("rotation is enabled but no RotationMap was given")
        if rmap.origin_layer != self.origin_layer:
            raise InvalidInput(f"rotation map origin {rmap.origin_layer} != plan origin {self.origin_layer}")
        missing = set(self.target_layers) - set(rmap.targets)
        if missing:
            raise InvalidInput(f"rotation map lacks targets {sorted(missing)}")


def anchored_inject(t_ori, t_tgt, plan: ReinjectionPlan, r=None) -> np.ndarray:
    """Fuse origin features into one target layer according to ``plan``.

    A zero weight returns an exact copy of ``t_tgt``.
    """
    t_ori = as_matrix(t_ori, "t_ori")
    t_tgt = as_matrix(t_tgt, "t_tgt")
    if t_ori.shape != t_tgt.shape:
        raise InvalidInput(f"shape mismatch: {t_ori.shape} vs {t_tgt.shape}")
    if plan.rotation_enabled:
        if r is None:
            raise InvalidInput("rotation enabled but no rotation matrix given")
        r = np.asarray(r, dtype=np.float64)
        if r.shape != (t_ori.shape[1],) * 2:
            raise InvalidInput(f"rotation shape {r.shape} does not match width {t_ori.shape[1]}")
    if plan.weight == 0:
        return t_tgt.copy()
    return _fuse(t_ori, t_tgt, plan.weight, r if plan.rotation_enabled else None, plan.anchor_enabled,
                 plan.ln_eps, plan.exact_restore)


def _fuse(t_ori, t_tgt, w, r, anchor, eps, exact=True):
    """Fusion arithmetic without the ``w == 0`` shortcut.

    With ``exact`` the fused rows are re-standardized before the target's
    statistics are put back, so ``token_stats`` of the result equals that of
    ``t_tgt`` for every ``w``. Otherwise the fused rows are rescaled as is.
    """
    if not anchor:
        src = t_ori @ r if r is not None else t_ori
        return t_tgt + w * src
    stats = token_stats(t_tgt, eps)
    src = layer_norm(t_ori, eps)
    if r is not None:
        src = src @ r
    fused = layer_norm(t_tgt, eps) + w * src
    if not exact:
        return restore(fused, stats)
    centered = fused - fused.mean(axis=1, keepdims=True)
    spread = np.sqrt((centered**2).mean(axis=1, keepdims=True))
    target_spread = np.sqrt(np.maximum(stats.std**2 - eps, 0.0))[:, None]
    scale = np.divide(target_spread, spread, out=np.zeros_like(spread), where=spread > 0)
    return centered * scale + stats.mean[:, None]


def apply_plan(stack: FeatureStack, plan: ReinjectionPlan, rmap: Optional[RotationMap] = None) -> FeatureStack:
    """Pure-analysis reinjection on a captured stack (no forward propagation)."""
    plan.check_rotations(rmap)
    if plan.target_layers[-1] >= stack.n_layers:
        raise InvalidInput("plan targets exceed the stack depth")
    origin = stack[plan.origin_layer]
    layers = list(stack.layers)
    for t in plan.target_layers:
        r = rmap[t] if plan.rotation_enabled else None
        layers[t] = anchored_inject(origin, stack[t], plan, r)
    return stack.replace_layers(layers)


def residual_attribute_inject(stack_a: FeatureStack, t_b0, w: float, start_layer: int = 2) -> FeatureStack:
    """``T_A^(l) += w * T_B^(0)`` for every ``l >= start_layer``."""
    t_b0 = as_matrix(t_b0, "t_b0")
    if t_b0.shape != stack_a[0].shape:
        raise InvalidInput(f"t_b0 shape {t_b0.shape} != per-layer shape {stack_a[0].shape}")
    layers = [t if l < start_layer else t + w * t_b0 for l, t in enumerate(stack_a.layers)]
    return stack_a.replace_layers(layers)


PILOT_WEIGHTS = (0.01, 0.025, 0.05, 0.075, 0.1)


def plan_layers(
    total_layers: int,
    origin: int,
    mode: str = "full",
    start: Optional[int] = None,
    end: Optional[int] = None,
    stride: int = 1,
    **plan_kwargs,
) -> ReinjectionPlan:
    """Target layers for ``full``, ``range`` (inclusive ``start..end``) or ``stride`` coverage."""
    if not 0 <= origin < total_layers - 1:
        raise InvalidInput(f"origin {origin} leaves no deeper layer among {total_layers}")
    if stride < 1:
        raise InvalidInput("stride must be >= 1")
    lo = origin + 1 if start is None else start
    hi = total_layers - 1 if end is None else end
    if mode == "full":
        targets = range(origin + 1, total_layers)
    elif mode in ("range", "stride"):
        targets = range(lo, hi + 1, stride if mode == "stride" else 1)
    else:
        raise InvalidInput(f"unknown mode {mode!r}")
    targets = [t for t in targets if origin < t < total_layers]
    if not targets:
        raise InvalidInput("empty target set")
    return ReinjectionPlan(origin_layer=origin, target_layers=tuple(targets), **plan_kwargs)


def parse_targets(spec: str, total_layers: int, origin: int, **plan_kwargs) -> ReinjectionPlan:
    """Parse ``full``, ``a..b`` or ``stride:s`` (optionally ``stride:s:a..b``)."""
    spec = spec.strip()
    try:
        if spec == "full":
            return plan_layers(total_layers, origin, "full", **plan_kwargs)
        if spec.startswith("stride:"):
            parts = spec.split(":")
            s = int(parts[1])
            a, b = (int(v) for v in parts[2].split("..")) if len(parts) > 2 else (None, None)
            return plan_layers(total_layers, origin, "stride", start=a, end=b, stride=s, **plan_kwargs)
        a, b = (int(v) for v in spec.split(".."))
        return plan_layers(total_layers, origin, "range", start=a, end=b, **plan_kwargs)
    except ValueError as exc:
        raise InvalidInput(f"cannot parse target spec {spec!r}") from exc


@dataclass(frozen=True)
class Preset:
    name: str
    blocks: int
    origin: int
    targets: Tuple[int, int]
    weight: float
    steps: int
    cfg_scale: float
    width: int


# Per-model reinjection defaults. Widths are the public hidden sizes of each backbone.
PRESETS: Dict[str, Preset] = {
    "sd3": Preset("sd3", 24, 1, (2, 23), 0.025, 28, 7.0, 1536),
    "sd35": Preset("sd35", 38, 2, (2, 37), 0.025, 28, 7.0, 2432),
    "flux": Preset("flux", 58, 2, (2, 57), 0.025, 50, 3.5, 3072),
    "qwen": Preset("qwen", 60, 30, (31, 59), 0.025, 50, 4.0, 3072),
}


def preset_plan(name: str, **overrides) -> ReinjectionPlan:
    try:
        p = PRESETS[name]
    except KeyError:
        raise InvalidInput(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    # sd35/flux list layer 2 both as origin and first target; only deeper layers are targets
    targets = tuple(t for t in range(p.targets[0], p.targets[1] + 1) if t > p.origin)
    kwargs = dict(weight=p.weight)
    kwargs.update(overrides)
    return ReinjectionPlan(origin_layer=p.origin, target_layers=targets, **kwargs)


ANCHOR_FLOPS_PER_ELEMENT = 7
BYTES_PER_ELEMENT = 2


@dataclass(frozen=True)
class CostReport:
    tokens: int
    width: int
    applications: int
    n_targets: int
    block_tokens: int
    add_flops: float
    anchor_flops: float
    rotation_flops: float
    block_flops: float
    origin_copy_bytes: int
    anchor_buffer_bytes: int
    rotation_buffer_bytes: int
    rotation_matrix_bytes: int
    anchor_enabled: bool = True
    rotation_enabled: bool = True
    assumptions: Dict[str, str] = field(default_factory=dict)

    @property
    def total_flops(self) -> float:
        return self.add_flops + self.anchor_flops + self.rotation_flops

    @property
    def relative_flops(self) -> float:
        return (self.block_flops + self.total_flops) / self.block_flops

    @property
    def buffer_bytes(self) -> int:
        return self.origin_copy_bytes + self.anchor_buffer_bytes + self.rotation_buffer_bytes

    def to_dict(self) -> dict:
        return {
            "per_target_block": {
                "flops": {
                    "plain_add": self.add_flops,
                    "anchoring": self.anchor_flops,
                    "rotation": self.rotation_flops,
                    "total": self.total_flops,
                },
                "relative_flops": self.relative_flops,
                "block_flops": self.block_flops,
                "memory_bytes": {
                    "origin_copy": self.origin_copy_bytes,
                    "anchoring_buffers": self.anchor_buffer_bytes,
                    "rotation_buffer": self.rotation_buffer_bytes,
                    "total": self.buffer_bytes,
                },
            },
            "rotation_matrix_bytes": self.rotation_matrix_bytes,
            "n_targets": self.n_targets,
            "all_targets_flops": self.total_flops * self.n_targets,
            "assumptions": {
                "tokens": self.tokens,
                "width": self.width,
                "applications": self.applications,
                "block_tokens": self.block_tokens,
                "anchor_enabled": self.anchor_enabled,
                "rotation_enabled": self.rotation_enabled,
                **self.assumptions,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def summary(self) -> str:
        d = self.to_dict()["per_target_block"]
        lines = [
            f"assumptions: n={self.tokens} d={self.width} applications={self.applications} "
            f"block_tokens={self.block_tokens} targets={self.n_targets} "
            f"anchor={self.anchor_enabled} rotation={self.rotation_enabled}",
            f"block FLOPs          {self.block_flops:.3e}",
            f"+ plain add          {d['flops']['plain_add']:.3e}",
            f"+ anchoring          {d['flops']['anchoring']:.3e}",
            f"+ rotation           {d['flops']['rotation']:.3e}",
            f"relative FLOPs       {self.relative_flops:.4f}",
            f"memory per block     {self.buffer_bytes / 1e6:.2f} MB",
            f"rotation matrix      {self.rotation_matrix_bytes / 1e6:.2f} MB (once per origin/target pair)",
        ]
        return "\n".join(lines)


def block_flops(tokens: int, width: int, mlp_ratio: int = 4) -> float:
    """Dense FLOPs of one joint-attention block pass over ``tokens`` tokens."""
    linear = 2 * tokens * width * width * (4 + 2 * mlp_ratio)
    attention = 4 * tokens * tokens * width
    return float(linear + attention)


def estimate_cost(
    n: int,
    d: int,
    applications: int,
    plan: Optional[ReinjectionPlan] = None,
    block_tokens: Optional[int] = None,
    reference_block_flops: Optional[float] = None,
) -> CostReport:
    """Analytic per-target-block overhead of reinjection.

    Per application: plain add ``n d``; anchoring ``7 n d``; rotation
    ``2 n d^2``. Memory assumes 2-byte elements.
    """
    for name, v in (("n", n), ("d", d), ("applications", applications)):
        if v < 1:
            raise InvalidInput(f"{name} must be positive")
    anchor = plan.anchor_enabled if plan is not None else True
    rotate = plan.rotation_enabled if plan is not None else True
    nd = n * d
    bt = n if block_tokens is None else block_tokens
    ref = reference_block_flops if reference_block_flops is not None else applications * block_flops(bt, d)
    assumptions = {
        "block_flops_source": "reference" if reference_block_flops is not None else "analytic (4+2*4)*2*T*d^2 + 4*T^2*d",
        "bytes_per_element": str(BYTES_PER_ELEMENT),
    }
    return CostReport(
        tokens=n,
        width=d,
        applications=applications,
        n_targets=len(plan.target_layers) if plan is not None else 1,
        block_tokens=bt,
        add_flops=float(applications * nd),
        anchor_flops=float(applications * ANCHOR_FLOPS_PER_ELEMENT * nd) if anchor else 0.0,
        rotation_flops=float(applications * 2 * nd * d) if rotate else 0.0,
        block_flops=float(ref),
        origin_copy_bytes=BYTES_PER_ELEMENT * nd,
        # normalized origin, normalized target and fused result
        anchor_buffer_bytes=3 * BYTES_PER_ELEMENT * nd if anchor else 0,
        rotation_buffer_bytes=BYTES_PER_ELEMENT * nd if rotate else 0,
        rotation_matrix_bytes=BYTES_PER_ELEMENT * d * d if rotate else 0,
        anchor_enabled=anchor,
        rotation_enabled=rotate,
        assumptions=assumptions,
    )
