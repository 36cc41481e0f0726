# Generalized least squares CNMA fitting with pseudoinverse weights (common and random effects)

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.linalg import pinv

from cnma.design import DesignMatrices, Effects
from cnma.errors import DataValidationError
from cnma.estimability import DEFAULT_TOLERANCE, RankTolerance, Verdict, estimability_verdict, numeric_rank
from cnma.network import Network, TreatmentLabel, reconstruct_multiarm_covariance, study_incidence

logger = logging.getLogger(__name__)

CI_Z = 1.959964


@dataclass(frozen=True)
class WeightModel:
    """
    Per-study covariance blocks and the weight matrix built from them.

    `indices[s]` holds the row positions (in network contrast order) of study s,
    so W is block-diagonal up to that row permutation.
    """

    study_ids: Tuple[str, ...]
    blocks: Tuple[np.ndarray, ...]
    indices: Tuple[Tuple[int, ...], ...]
    n_arms: Tuple[int, ...]
    n_contrasts: int
    effects: Effects = Effects.COMMON
    tau2: float = 0.0
    W: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.tau2 < 0:
            raise ValueError(f"tau2 must be nonnegative, got {self.tau2}")
        for study_id, block, idx in zip(self.study_ids, self.blocks, self.indices):
            if block.shape != (len(idx), len(idx)):
                raise DataValidationError(
                    f"study '{study_id}': covariance block {block.shape} does not match {len(idx)} contrasts",
                    study_id=study_id,
                )

    @property
    def independent_contrasts(self) -> int:
        """Σ(arms − 1) over studies; equals the contrast count for two-arm networks."""
        return int(sum(self.n_arms) - len(self.n_arms))


def build_weights(network: Network, tau2: float = 0.0, effects: Effects = Effects.COMMON,
                  tol: RankTolerance = DEFAULT_TOLERANCE) -> WeightModel:
    """
    Reconstruct every study's covariance block (τ²/2 added per arm) and invert it.

    Args:
        network: ingested contrasts
        tau2: heterogeneity variance, 0 for a common-effect model
        effects: recorded on the model
        tol: pseudoinverse cutoff for the singular multi-arm blocks

    Returns:
        WeightModel with W filled in
    """
    if not network.contrasts:
        raise DataValidationError("empty network: no contrasts to fit")

    position = {id(c): r for r, c in enumerate(network.contrasts)}
    n = len(network.contrasts)
    W = np.zeros((n, n))
    study_ids, blocks, indices, n_arms = [], [], [], []
    for study_id, contrasts in network.studies.items():
        block = reconstruct_multiarm_covariance(contrasts, tau2=tau2)
        idx = tuple(position[id(c)] for c in contrasts)
        W[np.ix_(idx, idx)] = pinv(block, atol=0.0, rtol=tol.relative_threshold * max(block.shape))
        study_ids.append(study_id)
        blocks.append(block)
        indices.append(idx)
        n_arms.append(len(study_incidence(contrasts)[0]))

    return WeightModel(study_ids=tuple(study_ids), blocks=tuple(blocks), indices=tuple(indices),
                       n_arms=tuple(n_arms), n_contrasts=n, effects=effects, tau2=float(tau2),
                       W=(W + W.T) / 2.0)


@dataclass(frozen=True)
class FitResult:
    beta_hat: np.ndarray
    cov_beta: np.ndarray
    tau2: float
    Q: float
    df: int
    rank_M: int
    param_labels: List[str]
    n_contrasts: int
    effects: Effects = Effects.COMMON

    @property
    def p(self) -> int:
        return len(self.param_labels)

    def to_dict(self) -> Dict:
        return {
            "beta_hat": self.beta_hat,
            "cov_beta": self.cov_beta,
            "tau2": self.tau2,
            "Q": self.Q,
            "df": self.df,
            "rank_M": self.rank_M,
            "p": self.p,
            "param_labels": list(self.param_labels),
            "n_contrasts": self.n_contrasts,
            "effects": self.effects.value,
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> "FitResult":
        try:
            return cls(
                beta_hat=np.asarray(payload["beta_hat"], dtype=float),
                cov_beta=np.asarray(payload["cov_beta"], dtype=float).reshape(len(payload["param_labels"]), -1),
                tau2=float(payload["tau2"]),
                Q=float(payload["Q"]),
                df=int(payload["df"]),
                rank_M=int(payload["rank_M"]),
                param_labels=list(payload["param_labels"]),
                n_contrasts=int(payload["n_contrasts"]),
                effects=Effects(payload.get("effects", "common")),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataValidationError(f"malformed fit file: {e}")


@dataclass(frozen=True)
class RelativeEffect:
    label: str
    reference: str
    estimable: bool
    estimate: Optional[float] = None
    se: Optional[float] = None
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None

    @property
    def is_reference(self) -> bool:
        return self.estimable and self.se == 0.0 and self.estimate == 0.0


def _check_dimensions(M: np.ndarray, y: np.ndarray, weights: WeightModel) -> None:
    if M.shape[0] == 0:
        raise DataValidationError("empty network: no contrasts to fit")
    if M.shape[0] != y.shape[0] or M.shape[0] != weights.W.shape[0]:
        raise DataValidationError(
            f"dimension mismatch: M has {M.shape[0]} rows, y has {y.shape[0]}, W is {weights.W.shape[0]}"
        )
    if not np.any(weights.W):
        raise DataValidationError("all weights are zero")


def fit_common(M: np.ndarray, y: np.ndarray, weights: WeightModel, param_labels: Optional[List[str]] = None,
               tol: RankTolerance = DEFAULT_TOLERANCE) -> FitResult:
    """
    β̂ = (MᵀWM)⁺MᵀWy with cov(β̂) = (MᵀWM)⁺.

    Args:
        M: design matrix (contrasts × parameters)
        y: observed contrast effects in the row order of M
        weights: weight model; its τ² is carried through to the result
        param_labels: parameter names, defaults to beta0..beta{p-1}
        tol: rank tolerance for rank(M) and the pseudoinverse cutoff
    """
    M = np.asarray(M, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    _check_dimensions(M, y, weights)
    W = weights.W

    MtW = M.T @ W
    precision = MtW @ M
    precision = (precision + precision.T) / 2.0
    cov_beta = pinv(precision, atol=0.0, rtol=tol.relative_threshold * max(precision.shape))
    cov_beta = (cov_beta + cov_beta.T) / 2.0
    beta_hat = cov_beta @ (MtW @ y)

    residual = y - M @ beta_hat
    Q = max(0.0, float(residual @ W @ residual))
    rank_M = numeric_rank(M, tol)
    df = max(0, weights.independent_contrasts - rank_M)

    labels = list(param_labels) if param_labels is not None else [f"beta{k}" for k in range(M.shape[1])]
    logger.info(f"GLS fit: rank(M) = {rank_M}, p = {M.shape[1]}, Q = {Q:.4f}, df = {df}, tau2 = {weights.tau2:.4g}")
    return FitResult(beta_hat=beta_hat, cov_beta=cov_beta, tau2=weights.tau2, Q=Q, df=df, rank_M=rank_M,
                     param_labels=labels, n_contrasts=M.shape[0], effects=weights.effects)


def estimate_tau2(M: np.ndarray, y: np.ndarray, common_fit: FitResult, weights: WeightModel) -> float:
    """
    Generalized DerSimonian–Laird moment estimator.

    τ̂² = max(0, (Q − df) / c) with c = tr(W) − tr((MᵀWM)⁺ MᵀW²M).
    """
    if common_fit.df <= 0:
        logger.warning("No residual degrees of freedom; tau2 set to 0")
        return 0.0

    M = np.asarray(M, dtype=float)
    W = weights.W
    WM = W @ M
    c = float(np.trace(W) - np.trace(common_fit.cov_beta @ (WM.T @ WM)))
    if c <= 0:
        logger.warning(f"Non-positive DerSimonian-Laird scaling constant {c:.4g}; tau2 set to 0")
        return 0.0

    tau2 = max(0.0, (common_fit.Q - common_fit.df) / c)
    logger.info(f"DerSimonian-Laird tau2 = {tau2:.6g} (Q = {common_fit.Q:.4f}, df = {common_fit.df}, c = {c:.4g})")
    return tau2


def fit_random(M: np.ndarray, y: np.ndarray, weights: WeightModel, network: Network,
               param_labels: Optional[List[str]] = None, tol: RankTolerance = DEFAULT_TOLERANCE) -> FitResult:
    """Common-effect stage, moment τ², then a refit with arm variances inflated by τ²/2."""
    common = fit_common(M, y, weights, param_labels, tol)
    tau2 = estimate_tau2(M, y, common, weights)
    if tau2 == 0.0:
        return FitResult(beta_hat=common.beta_hat, cov_beta=common.cov_beta, tau2=0.0, Q=common.Q, df=common.df,
                         rank_M=common.rank_M, param_labels=common.param_labels, n_contrasts=common.n_contrasts,
                         effects=Effects.RANDOM)

    inflated = build_weights(network, tau2=tau2, effects=Effects.RANDOM, tol=tol)
    refit = fit_common(M, y, inflated, param_labels, tol)
    # Q and df describe the common-effect stage the estimate came from
    return FitResult(beta_hat=refit.beta_hat, cov_beta=refit.cov_beta, tau2=tau2, Q=common.Q, df=common.df,
                     rank_M=refit.rank_M, param_labels=refit.param_labels, n_contrasts=refit.n_contrasts,
                     effects=Effects.RANDOM)


def fit_model(design: DesignMatrices, network: Network, effects: Optional[Union[Effects, str]] = None,
              tol: RankTolerance = DEFAULT_TOLERANCE) -> FitResult:
    """
    Fit the CNMA model described by `design` to `network`.

    Args:
        design: matrices built from the same network
        network: ingested contrasts
        effects: overrides the effects mode recorded on the design's model spec
        tol: rank tolerance
    """
    effects = Effects(effects) if effects is not None else design.spec.effects
    y = np.array([c.effect for c in network.contrasts])
    weights = build_weights(network, tol=tol)
    if effects is Effects.RANDOM:
        return fit_random(design.M, y, weights, network, design.param_labels, tol)
    return fit_common(design.M, y, weights, design.param_labels, tol)


def relative_effect(fit: FitResult, v, verdict: Union[bool, Verdict], label: str = "", reference: str = "",
                    z: float = CI_Z) -> RelativeEffect:
    """
    θ̂ = v·β̂ and σ = sqrt(v·cov·vᵀ) with a Wald interval.

    Numbers are withheld when the verdict says v is not estimable.
    """
    coefficients = np.asarray(getattr(v, "coefficients", v), dtype=float).ravel()
    if coefficients.size != fit.p:
        raise DataValidationError(f"contrast vector has length {coefficients.size}, fit has {fit.p} parameters")

    estimable = verdict.estimable if isinstance(verdict, Verdict) else bool(verdict)
    if not estimable:
        return RelativeEffect(label=label, reference=reference, estimable=False)

    if not np.any(coefficients):
        return RelativeEffect(label=label, reference=reference, estimable=True,
                              estimate=0.0, se=0.0, ci_low=0.0, ci_high=0.0)

    estimate = float(coefficients @ fit.beta_hat)
    se = float(np.sqrt(max(0.0, coefficients @ fit.cov_beta @ coefficients)))
    return RelativeEffect(label=label, reference=reference, estimable=True, estimate=estimate, se=se,
                          ci_low=estimate - z * se, ci_high=estimate + z * se)


def effect_versus(fit: FitResult, design: DesignMatrices, i: Union[str, TreatmentLabel],
                  j: Union[str, TreatmentLabel], tol: RankTolerance = DEFAULT_TOLERANCE,
                  z: float = CI_Z) -> RelativeEffect:
    """Relative effect of i versus j, gated by its estimability verdict on M."""
    vector = design.vector(i, j)
    verdict = estimability_verdict(design.M, vector.coefficients, tol)
    return relative_effect(fit, vector, verdict, label=str(i), reference=str(j), z=z)
