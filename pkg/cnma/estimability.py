# Row-space estimability of contrasts in a CNMA design matrix

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.linalg import lstsq, svdvals

from cnma.design import DesignMatrices
from cnma.errors import ConfigError, DataValidationError, LabelError
from cnma.network import TreatmentLabel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RankTolerance:
    """Relative singular-value threshold shared by every rank in one comparison."""

    relative_threshold: float = 1e-8
    fragile_factor: float = 10.0

    def __post_init__(self):
        if not 0 < self.relative_threshold < 1:
            raise ValueError(f"relative_threshold must be in (0, 1), got {self.relative_threshold}")

    def cutoff(self, singular_values: np.ndarray, shape) -> float:
        if singular_values.size == 0:
            return 0.0
        return self.relative_threshold * float(singular_values.max()) * max(shape)


DEFAULT_TOLERANCE = RankTolerance()


@dataclass(frozen=True)
class Verdict:
    estimable: bool
    fragile: bool
    rank_M: int
    rank_augmented: int


@dataclass(frozen=True)
class ElementVerdict:
    label: str
    estimable: bool
    fragile: bool = False
    error: Optional[str] = None


@dataclass
class EstimabilityReport:
    reference: Optional[str]
    elements: List[ElementVerdict]
    rank_M: int
    p: int
    components: List[ElementVerdict] = field(default_factory=list)

    @property
    def fully_identified(self) -> bool:
        return self.rank_M == self.p

    @property
    def all_estimable(self) -> bool:
        return all(e.estimable for e in self.elements)

    def inestimable(self) -> List[str]:
        return [e.label for e in self.elements if not e.estimable]

    def to_dict(self) -> Dict:
        def _element(e: ElementVerdict) -> Dict:
            return {"label": e.label, "estimable": e.estimable, "fragile": e.fragile, "error": e.error}

        payload = {
            "reference": self.reference,
            "rank_M": self.rank_M,
            "p": self.p,
            "fully_identified": self.fully_identified,
            "elements": [_element(e) for e in self.elements],
        }
        if self.components:
            payload["component_diagnostics"] = [_element(e) for e in self.components]
        return payload


def _rank_with_margin(A: np.ndarray, tol: RankTolerance):
    """(rank, smallest retained singular value, cutoff)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return 0, 0.0, 0.0
    s = svdvals(A)
    cutoff = tol.cutoff(s, A.shape)
    if s.size == 0 or s.max() == 0.0:
        return 0, 0.0, cutoff
    kept = s[s > cutoff]
    return int(kept.size), float(kept.min()) if kept.size else 0.0, cutoff


def numeric_rank(A: np.ndarray, tol: RankTolerance = DEFAULT_TOLERANCE) -> int:
    """Count singular values above relative_threshold · σ_max · max(rows, cols)."""
    return _rank_with_margin(A, tol)[0]


def _as_vector(v: Union[np.ndarray, "object"]) -> np.ndarray:
    coefficients = getattr(v, "coefficients", v)
    return np.asarray(coefficients, dtype=float).ravel()


def estimability_verdict(M: np.ndarray, v, tol: RankTolerance = DEFAULT_TOLERANCE) -> Verdict:
    """
    Augmented-rank test: v is estimable iff appending it as a row leaves the rank unchanged.

    A verdict is fragile when the ranks differ only because of a singular value
    within `fragile_factor` of the cutoff.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    v = _as_vector(v)
    if v.size != M.shape[1]:
        raise DataValidationError(f"contrast vector has length {v.size}, design has {M.shape[1]} parameters")

    rank_M = numeric_rank(M, tol)
    # v is rescaled to the largest singular value of M so its norm cannot move the cutoff
    norm_v = float(np.linalg.norm(v))
    scale_M = float(svdvals(M).max()) if M.size else 0.0
    if norm_v > 0.0 and scale_M > 0.0:
        v = v * (scale_M / norm_v)
    rank_aug, smallest, cutoff = _rank_with_margin(np.vstack([M, v]), tol)
    estimable = rank_aug <= rank_M
    fragile = (not estimable) and smallest < tol.fragile_factor * cutoff
    if fragile:
        logger.warning(f"Fragile estimability verdict: retained singular value {smallest:.3g} near cutoff {cutoff:.3g}")
    return Verdict(estimable=estimable, fragile=fragile, rank_M=rank_M, rank_augmented=rank_aug)


def is_estimable(M: np.ndarray, v, tol: RankTolerance = DEFAULT_TOLERANCE) -> bool:
    return estimability_verdict(M, v, tol).estimable


def oracle_residual_estimable(M: np.ndarray, v, tol: RankTolerance = DEFAULT_TOLERANCE) -> bool:
    """
    Independent check: least-squares residual of Mᵀx ≈ vᵀ, relative to max(1, ‖v‖).
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    v = _as_vector(v)
    if not np.any(v):
        return True
    x = lstsq(M.T, v)[0]
    residual = np.linalg.norm(v - M.T @ x) / max(1.0, np.linalg.norm(v))
    return bool(residual < tol.relative_threshold * max(M.shape))


def full_identifiability(M: np.ndarray, tol: RankTolerance = DEFAULT_TOLERANCE) -> bool:
    M = np.atleast_2d(np.asarray(M))
    return numeric_rank(M, tol) == M.shape[1]


def component_diagnostics(design: DesignMatrices, tol: RankTolerance = DEFAULT_TOLERANCE) -> List[ElementVerdict]:
    """Estimability of each parameter on its own (unit vector e_k)."""
    identity = np.eye(design.p)
    verdicts = []
    for k, label in enumerate(design.param_labels):
        verdict = estimability_verdict(design.M, identity[k], tol)
        verdicts.append(ElementVerdict(label=label, estimable=verdict.estimable, fragile=verdict.fragile))
    return verdicts


def check_set(design: DesignMatrices, elements: Sequence[Union[str, TreatmentLabel]],
              reference: Union[str, TreatmentLabel], tol: RankTolerance = DEFAULT_TOLERANCE) -> EstimabilityReport:
    """
    Check V_{i,ref} for every non-reference element of S.

    Encoding failures are reported on the element instead of raising.
    """
    reference_label = str(reference)
    names = [str(e) for e in elements]
    if reference_label not in names:
        raise ConfigError(f"reference '{reference_label}' is not in the set {names}")
    # the reference itself must be encodable for any verdict to mean something
    design.encode(reference)

    rank_M = numeric_rank(design.M, tol)
    verdicts = []
    for element, name in zip(elements, names):
        if name == reference_label:
            continue
        try:
            vector = design.vector(element, reference)
        except LabelError as e:
            verdicts.append(ElementVerdict(label=name, estimable=False, error=e.detail))
            continue
        verdict = estimability_verdict(design.M, vector.coefficients, tol)
        verdicts.append(ElementVerdict(label=name, estimable=verdict.estimable, fragile=verdict.fragile))

    report = EstimabilityReport(reference=reference_label, elements=verdicts, rank_M=rank_M, p=design.p)
    logger.info(
        f"Estimability vs {reference_label}: {sum(v.estimable for v in verdicts)}/{len(verdicts)} estimable "
        f"(rank M = {rank_M}, p = {design.p})"
    )
    return report
