"""Discrete forward-noising schedule and the continuous-t bridge.

The backend runs on a discrete DDPM timestep table; continuous t in (0, 1)
maps to the nearest index, and the alpha_bar actually used is declared in
every response so clients can verify agreement.
"""

import numpy as np


class DdpmSchedule:
    def __init__(self, n_steps: int = 1000, beta_start: float = 1e-4,
                 beta_end: float = 0.02):
        self.n_steps = n_steps
        betas = np.linspace(beta_start, beta_end, n_steps)
        self.alpha_bar_table = np.cumprod(1.0 - betas)
        self.name = f"ddpm-linear-{n_steps}"

    def timestep_for(self, t: float) -> int:
        """Nearest discrete index for continuous t in (0, 1)."""
        if not 0.0 < t < 1.0:
            raise ValueError(f"t={t} outside (0, 1)")
        return int(round(t * (self.n_steps - 1)))

    def alpha_bar(self, t: float) -> float:
        return float(self.alpha_bar_table[self.timestep_for(t)])
