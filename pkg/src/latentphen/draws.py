"""Posterior draw container shared by the Gibbs and variational backends."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .data import ParameterState, ParamLayout

__all__ = ["PosteriorDraws"]


@dataclass(frozen=True)
class PosteriorDraws:
    """S posterior draws of the fixed parameters plus diagnostics payload.

    ``theta`` holds the constrained fixed-parameter scalars (layout order,
    no random effects). Patient random effects are summarized per draw
    (``re_mean``/``re_sd``) and optionally stored in full (``re_draws``),
    which full-state reconstruction needs. ``pointwise_loglik[s, i]`` is
    the marginal log likelihood of patient i under draw s.
    """

    layout: ParamLayout
    theta: np.ndarray
    pointwise_loglik: np.ndarray
    chain_id: np.ndarray
    re_mean: np.ndarray | None = None
    re_sd: np.ndarray | None = None
    re_draws: np.ndarray | None = None
    acceptance: dict = field(default_factory=dict)

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        loglik = np.asarray(self.pointwise_loglik, dtype=float)
        chain = np.asarray(self.chain_id, dtype=np.int64)
        if theta.ndim != 2 or theta.shape[1] != self.layout.n_fixed:
            raise ValueError(f"theta must be (S, {self.layout.n_fixed})")
        s = theta.shape[0]
        if loglik.ndim != 2 or loglik.shape[0] != s:
            raise ValueError("pointwise_loglik must be (S, N)")
        if chain.shape != (s,):
            raise ValueError("chain_id must have length S")
        var = theta[:, self.layout.slices["marker_var"]]
        if var.size and (var <= 0).any():
            raise ValueError("stored marker_var draws must be positive")
        for name in ("re_mean", "re_sd"):
            arr = getattr(self, name)
            if arr is not None and np.asarray(arr).shape != (s,):
                raise ValueError(f"{name} must have length S")
        if self.re_draws is not None and np.asarray(self.re_draws).shape[0] != s:
            raise ValueError("re_draws must have S rows")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "pointwise_loglik", loglik)
        object.__setattr__(self, "chain_id", chain)

    @property
    def n_draws(self) -> int:
        return self.theta.shape[0]

    @property
    def n_patients(self) -> int:
        return self.pointwise_loglik.shape[1]

    @property
    def n_chains(self) -> int:
        return int(np.unique(self.chain_id).shape[0])

    @cached_property
    def _name_index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.layout.fixed_names)}

    def column(self, name: str) -> np.ndarray:
        """Draws of one scalar quantity by its layout name."""
        try:
            return self.theta[:, self._name_index[name]]
        except KeyError:
            raise KeyError(f"unknown quantity {name!r}") from None

    def state_at(self, s: int) -> ParameterState:
        """Reconstruct the full ParameterState of draw ``s``.

        Requires stored random-effect draws when the random effect is
        enabled; summary-only containers cannot rebuild full states.
        """
        vec = self.theta[s]
        if self.layout.re_enabled:
            if self.re_draws is None:
                raise ValueError(
                    "full random-effect draws were not stored; "
                    "rerun with store_re=True to reconstruct states"
                )
            vec = np.concatenate([vec, self.re_draws[s]])
        return self.layout.unpack(vec)
