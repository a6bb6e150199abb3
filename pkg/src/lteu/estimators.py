"""scikit-learn style wrappers around the pricing and allocation pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import harness as hs
from . import netmodel as nm
from .config import MECHANISMS, Scenario
from .contracts import TypeGrid, optimal_prices


class ContractPricer(TransformerMixin, BaseEstimator):
    """Map expected valuations (rows: users, columns: types) to menu prices.

    Parameters
    ----------
    type_values : sequence of float, optional
        Increasing type grid; defaults to ``1..K`` with ``K`` from ``fit``.
    type_probs : sequence of float, optional
        Type probabilities; uniform by default.
    ironing : bool
        Make decreasing rows monotone before pricing instead of failing.
    """

    def __init__(self, type_values=None, type_probs=None, ironing=True):
        self.type_values = type_values
        self.type_probs = type_probs
        self.ironing = ironing

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=1)
        k = X.shape[1]
        types = np.arange(1, k + 1, dtype=float) if self.type_values is None \
            else np.asarray(self.type_values, dtype=float)
        probs = np.full(k, 1.0 / k) if self.type_probs is None \
            else np.asarray(self.type_probs, dtype=float)
        self.grid_ = TypeGrid(types, probs)
        if len(self.grid_) != k:
            raise ValueError(f"X has {k} columns but the type grid has {len(self.grid_)}")
        self.n_features_in_ = k
        return self

    def transform(self, X):
        check_is_fitted(self, "grid_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        prices, _ = optimal_prices(X, self.grid_, ironing=self.ironing)
        return prices


class LTEUAllocator(BaseEstimator):
    """Allocate licensed and unlicensed chunks to users placed at ``X``.

    ``fit(X, y)`` takes user positions (meters, shape ``(n, 2)``) and,
    optionally, type indices ``y`` (0-based; sampled when omitted).  After
    fitting, ``allocation_`` holds each user's (licensed, unlicensed) share
    and ``rates_`` the realised rates.  ``score`` is the QoS fraction.
    """

    def __init__(self, mechanism="proposed", scenario=None, seed=0):
        self.mechanism = mechanism
        self.scenario = scenario
        self.seed = seed

    def _scenario(self):
        return (self.scenario or Scenario()).validate()

    def fit(self, X, y=None):
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"mechanism must be one of {MECHANISMS}")
        scenario = self._scenario()
        X = check_array(X, ensure_min_samples=0)
        if X.shape[1] != 2:
            raise ValueError("X must hold 2-D user positions")
        rng = np.random.default_rng(self.seed)
        params = scenario.replace(scene={"num_users": X.shape[0]}).scene
        base = nm.generate_scene(params, int(rng.integers(2 ** 63)))
        scene = nm.NetworkScene(base.bs_positions, base.wap_positions, X, base.wap_channels,
                                params=params, seed=base.seed)
        grid = TypeGrid(scenario.types.thetas, scenario.types.probs)
        types = grid.sample(rng, X.shape[0]) if y is None else np.asarray(y, dtype=int)
        rep = hs.assemble(scenario, scene, types, int(rng.integers(2 ** 63)), rng)
        outcome = hs.run_mechanism(rep, self.mechanism)
        total = np.maximum(outcome.requested_bits, 1)
        self.allocation_ = np.column_stack([outcome.licensed_bits / total,
                                            outcome.unlicensed_bits / total])
        self.rates_ = outcome.rate
        self.utilities_ = outcome.utility
        self.types_ = rep.types
        self.metrics_ = hs.compute_metrics(outcome, rep.types, len(rep.grid), rep.rates)
        self.n_features_in_ = 2
        return self

    def fit_predict(self, X, y=None):
        return self.fit(X, y).allocation_

    def score(self, X=None, y=None):
        check_is_fitted(self, "metrics_")
        return self.metrics_["qos_fraction"]
