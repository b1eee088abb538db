"""Estimator-style wrapper around the coordinator for single-process use.

DualDecompositionClustering follows the usual fit/predict conventions:
constructor stores hyperparameters verbatim, fit validates and runs the
distributed pipeline over in-process hosts, fitted state lives in trailing
underscore attributes, and get_params/set_params/clone work as expected.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .coordinator import CoordinatorConfig
from .dataeval import cluster_dataset, shard_dataset
from .model import Dataset, RegularizationConfig, model_assignment_scores
from .rotation import beta_from_variances, diagonalize


class DualDecompositionClustering(ClusterMixin, BaseEstimator):
    """Clustering by minimum-description covariance coding, solved through
    per-host subproblems coordinated with Lagrange multipliers.

    Parameters
    ----------
    n_clusters : int, number of clusters.
    n_hosts : int, how many in-process shards to split the data across.
    shard_policy : "interleaved" or "contiguous" row placement.
    sigma_n_sq : float, noise variance added to each cluster covariance
        before its log determinant is coded; keeps singular clusters finite.
    variance_floor : float, numerical floor for per-direction variances.
    max_outer_rounds, dual_rounds, step_size_initial, tolerance : outer loop
        and multiplier schedule controls.
    proportion_mode : "fixed-uniform" keeps target proportions at 1/J,
        "optimize" adjusts them by projected finite-difference steps.
    rounding_mode : "randomized" or "argmax" conversion of soft assignments
        to labels.
    restarts : int, independent restarts; the best objective wins.
    random_state : int or None, master seed.

    Attributes
    ----------
    labels_ : (n_samples,) hard cluster labels in input row order.
    soft_assignments_ : (n_samples, n_clusters) row-stochastic matrix.
    proportions_, means_, covariances_ : fitted model parameters.
    objective_, primal_value_, dual_value_, duality_gap_ : final values.
    trace_ : per-round records of objective, primal, dual, and gap.
    n_iter_ : outer rounds used by the winning restart.
    """

    def __init__(self, n_clusters=2, *, n_hosts=1, shard_policy="interleaved",
                 sigma_n_sq=0.0, variance_floor=1e-12, max_outer_rounds=50,
                 dual_rounds=30, step_size_initial=1.0, tolerance=1e-6,
                 proportion_mode="fixed-uniform", rounding_mode="randomized",
                 restarts=3, random_state=0):
        self.n_clusters = n_clusters
        self.n_hosts = n_hosts
        self.shard_policy = shard_policy
        self.sigma_n_sq = sigma_n_sq
        self.variance_floor = variance_floor
        self.max_outer_rounds = max_outer_rounds
        self.dual_rounds = dual_rounds
        self.step_size_initial = step_size_initial
        self.tolerance = tolerance
        self.proportion_mode = proportion_mode
        self.rounding_mode = rounding_mode
        self.restarts = restarts
        self.random_state = random_state

    def _config(self, seed: int) -> CoordinatorConfig:
        return CoordinatorConfig(
            n_clusters=self.n_clusters,
            regularization=RegularizationConfig(
                sigma_n_sq=self.sigma_n_sq, variance_floor=self.variance_floor
            ),
            max_outer_rounds=self.max_outer_rounds,
            dual_rounds=self.dual_rounds,
            step_size_initial=self.step_size_initial,
            tolerance=self.tolerance,
            proportion_mode=self.proportion_mode,
            rounding_mode=self.rounding_mode,
            restarts=self.restarts,
            seed=seed,
        )

    def fit(self, X, y=None):
        """Cluster X; y is ignored and accepted for pipeline compatibility."""

        x = check_array(X, dtype=np.float64, ensure_min_samples=2)
        if self.shard_policy not in ("interleaved", "contiguous"):
            raise ValueError(
                f"shard_policy must be 'interleaved' or 'contiguous', "
                f"got {self.shard_policy!r}"
            )
        if self.random_state is None:
            seed = int(np.random.SeedSequence().generate_state(1)[0])
        else:
            seed = int(self.random_state)

        dataset = Dataset(samples=x)
        layout = shard_dataset(dataset, self.n_hosts, self.shard_policy)
        outcome = cluster_dataset(dataset, layout, self._config(seed))

        result = outcome.result
        self.n_features_in_ = x.shape[1]
        self.result_ = result
        self.labels_ = outcome.labels
        self.soft_assignments_ = outcome.soft_assignments
        self.proportions_ = result.model.proportions.copy()
        self.means_ = result.model.means.copy()
        self.covariances_ = result.model.covariances.copy()
        self.objective_ = result.objective
        self.primal_value_ = result.primal_value
        self.dual_value_ = result.dual_value
        self.duality_gap_ = result.duality_gap_estimate
        self.trace_ = result.trace
        self.n_iter_ = result.n_outer_rounds
        return self

    def predict(self, X):
        """Assign new samples to the cluster with the shortest description:
        log det of the regularized covariance plus the squared distance in
        its eigenbasis weighted by inverse variances, minus twice the log
        proportion. Empty clusters never receive samples."""

        check_is_fitted(self, "labels_")
        x = check_array(X, dtype=np.float64)
        if x.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {x.shape[1]} features, expected {self.n_features_in_}"
            )
        model = self.result_.model
        reg = RegularizationConfig(sigma_n_sq=self.sigma_n_sq,
                                   variance_floor=self.variance_floor)
        rset = diagonalize(model, reg)
        active = np.array([i not in model.empty_clusters
                           for i in range(self.n_clusters)])
        log_props = np.where(active,
                             np.log(np.clip(model.proportions, 1e-300, None)),
                             0.0)
        scores = model_assignment_scores(
            x,
            means=model.means,
            rotations=rset.rotations,
            beta=beta_from_variances(rset, reg).beta,
            log_dets=np.log(np.clip(rset.rotated_variances,
                                    reg.variance_floor, None)).sum(axis=1),
            log_props=log_props,
            active=active,
        )
        return np.argmin(scores, axis=1).astype(np.int64)
