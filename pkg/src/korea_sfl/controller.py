"""Federated gradient norm tracking and the adaptive sampling proportion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from korea_sfl.engine import ContractError

SCHEDULES = ("adaptive", "fixed", "literal")


@dataclass(frozen=True)
class FgnRecord:
    """``eta * mean_i ||g_i||^2`` for one round, stored as a non-negative magnitude."""

    round: int
    magnitude: float
    server_magnitude: float | None = None


@dataclass(frozen=True)
class ProportionState:
    p: float
    p_min: float = 0.002
    p_max: float = 0.5
    history: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if not 0 <= self.p_min <= self.p <= self.p_max:
            raise ContractError(
                f"need 0 <= p_min <= p <= p_max, got p_min={self.p_min} p={self.p} p_max={self.p_max}"
            )
        if not self.history:
            object.__setattr__(self, "history", (self.p,))


def record_fgn(round_: int, grad_sq_norms, eta: float, server_grad_sq_norms=None) -> FgnRecord:
    norms = np.asarray(grad_sq_norms, dtype=np.float64)
    if norms.size == 0:
        raise ContractError("FGN needs at least one branch")
    if np.any(norms < 0):
        raise ContractError("squared gradient norms must be non-negative")
    server = None
    if server_grad_sq_norms is not None:
        server = eta * float(np.mean(server_grad_sq_norms))
    return FgnRecord(round_, eta * float(np.mean(norms)), server)


def update_proportion(state: ProportionState, fgn_prev: FgnRecord, fgn_curr: FgnRecord,
                      schedule: str = "adaptive") -> ProportionState:
    """Next round's sampling proportion.

    ``adaptive`` scales p by the ratio of successive FGN magnitudes, so rising
    gradient norms request more replay.  ``literal`` applies the relative-change
    rule ``p * (FGN(r) - FGN(r-1)) / FGN(r-1)`` on the signed FGN.  ``fixed``
    keeps p.  Results are clamped to ``[p_min, p_max]``; a zero previous
    magnitude leaves p unchanged.
    """
    if schedule not in SCHEDULES:
        raise ContractError(f"unknown schedule {schedule!r}")
    if fgn_prev.round + 1 != fgn_curr.round:
        raise ContractError(f"FGN records must be consecutive, got rounds {fgn_prev.round} and {fgn_curr.round}")
    p = state.p
    if schedule != "fixed" and fgn_prev.magnitude > 0:
        if schedule == "adaptive":
            p = p * (fgn_curr.magnitude / fgn_prev.magnitude)
        else:
            prev, curr = -fgn_prev.magnitude, -fgn_curr.magnitude
            p = (curr - prev) / prev * p
        p = min(max(p, state.p_min), state.p_max)
    return ProportionState(p, state.p_min, state.p_max, state.history + (p,))
