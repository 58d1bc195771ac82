from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..lagrangian import CostSample


class EnvFault(RuntimeError):
    """Unrecoverable simulator failure; the running episode is aborted."""


@dataclass
class EnvStep:
    obs: np.ndarray
    reward: float
    costs: CostSample
    terminal: bool = False
    truncated: bool = False
    info: dict = field(default_factory=dict)

    @property
    def done(self) -> bool:
        return self.terminal or self.truncated
