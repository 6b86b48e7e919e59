"""Layer-indexed text-token features, the common currency of every analysis."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInput


@dataclass(frozen=True)
class FeatureStack:
    """Text features ``T^(l)`` for layers ``0..L``; layer 0 is the encoder output.

    ``layers[l]`` is a ``tokens x width`` float64 array. Image-token features
    are optional and never persisted.
    """

    layers: tuple
    images: Optional[tuple] = None
    timestep: float = 1.0
    prompt_id: Optional[str] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        layers = tuple(np.asarray(t, dtype=np.float64) for t in self.layers)
        if not layers:
            raise InvalidInput("a FeatureStack needs at least one layer")
        shape = layers[0].shape
        if len(shape) != 2:
            raise InvalidInput(f"layer 0 must be 2-D, got shape {shape}")
        for i, t in enumerate(layers):
            if t.shape != shape:
                raise InvalidInput(f"layer {i} has shape {t.shape}, expected {shape}")
        object.__setattr__(self, "layers", layers)
        if self.images is not None:
            object.__setattr__(
                self, "images", tuple(np.asarray(i, dtype=np.float64) for i in self.images)
            )

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_tokens(self) -> int:
        return self.layers[0].shape[0]

    @property
    def width(self) -> int:
        return self.layers[0].shape[1]

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, layer: int) -> np.ndarray:
        return self.layers[layer]

    def replace_layers(self, layers: Sequence[np.ndarray]) -> "FeatureStack":
        return FeatureStack(
            layers=tuple(layers),
            images=self.images,
            timestep=self.timestep,
            prompt_id=self.prompt_id,
            meta=dict(self.meta),
        )

    def select_tokens(self, index) -> "FeatureStack":
        return self.replace_layers([t[index] for t in self.layers])

    @classmethod
    def concat(cls, stacks: Sequence["FeatureStack"]) -> "FeatureStack":
        """Row-concatenate token sets of several stacks (e.g. one per prompt)."""
        if not stacks:
            raise InvalidInput("nothing to concatenate")
        depth = stacks[0].n_layers
        if any(s.n_layers != depth for s in stacks):
            raise InvalidInput("stacks disagree on layer count")
        layers = [np.concatenate([s.layers[l] for s in stacks], axis=0) for l in range(depth)]
        return cls(layers=tuple(layers), timestep=stacks[0].timestep)

    def equals(self, other: "FeatureStack") -> bool:
        """Bitwise equality of all text layers."""
        return self.n_layers == other.n_layers and all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.layers, other.layers)
        )
