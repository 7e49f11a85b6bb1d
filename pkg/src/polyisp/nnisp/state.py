"""Flat named-tensor container for network parameters and buffers.

This is the unit the checkpoint format serializes: every learnable
parameter, every normalization running statistic, plus the sampler RNG
state.  Tensors are numpy float32; the torch module graph is rebuilt
from it on load.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class NetworkState:
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)

    def validate(self) -> None:
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise ValueError(f"tensor {name!r} contains non-finite values")

    @property
    def frozen_stats(self) -> bool:
        return bool(self.config.get("frozen_stats", False))

    @frozen_stats.setter
    def frozen_stats(self, value: bool) -> None:
        self.config["frozen_stats"] = bool(value)
