# Ranking metrics, effect resampling and hierarchy assembly over a refined set of treatments

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator
from scipy.linalg import eigh
from scipy.stats import norm, rankdata

from cnma.config import DEFAULT_CONFIG
from cnma.design import DesignMatrices
from cnma.errors import ConfigError, DataValidationError, EstimabilityRefusal, LabelError
from cnma.estimability import DEFAULT_TOLERANCE, RankTolerance, check_set, estimability_verdict
from cnma.fit import CI_Z, FitResult, RelativeEffect, effect_versus
from cnma.network import ComponentCatalog, parse_treatment_label, read_csv_frame

logger = logging.getLogger(__name__)


class Metric(str, Enum):
    POINT_ESTIMATE = "point-estimate"
    P_BEST = "p-best"
    MEDIAN_RANK = "median-rank"
    EXPECTED_RANK = "expected-rank"
    SUCRA = "sucra"
    P_SCORE = "p-score"


class Orientation(str, Enum):
    LARGER_IS_BETTER = "larger-is-better"
    SMALLER_IS_BETTER = "smaller-is-better"


class SamplingMode(str, Enum):
    JOINT = "joint"
    INDEPENDENT = "independent"


# Hierarchy direction per metric: True = largest value is most preferred
LARGEST_FIRST = {
    Metric.P_BEST: True,
    Metric.SUCRA: True,
    Metric.P_SCORE: True,
    Metric.MEDIAN_RANK: False,
    Metric.EXPECTED_RANK: False,
}


class HierarchyQuestion(BaseModel):
    """Which elements to rank, against what, by which metric."""

    set_S: List[str] = Field(description="Idealized set S in requested order")
    refined_S_star: List[str] = Field(description="Subset of S with estimable effects versus the reference")
    reference: str = Field(description="Common reference, an element of S*")
    metric: Metric = Metric.P_SCORE
    orientation: Orientation = Orientation.LARGER_IS_BETTER
    n_samples: int = Field(default=DEFAULT_CONFIG["n_samples"], ge=1)
    seed: int = Field(default=DEFAULT_CONFIG["seed"], ge=0)
    sampling_mode: SamplingMode = SamplingMode.JOINT

    @model_validator(mode="after")
    def _check_sets(self) -> "HierarchyQuestion":
        outside = [label for label in self.refined_S_star if label not in self.set_S]
        if outside:
            raise ValueError(f"S* must be a subset of S; not in S: {outside}")
        if self.reference not in self.refined_S_star:
            raise ValueError(f"reference '{self.reference}' is not in S*")
        return self


class RankedElement(BaseModel):
    label: str
    estimate: float = Field(description="Relative effect versus the reference")
    se: float
    ci: List[float] = Field(description="95% Wald interval [low, high]")
    metric: float = Field(description="Value of the chosen ranking metric")
    position: int = Field(description="Hierarchy position, 1 = most preferred; ties share a position")


class Exclusion(BaseModel):
    label: str
    reason: str


class HierarchyReport(BaseModel):
    question: HierarchyQuestion
    elements: List[RankedElement]
    exclusions: List[Exclusion] = Field(default_factory=list)
    ties: List[List[str]] = Field(default_factory=list)
    warnings: List[str] = Field(default_factory=list)
    set_size: int = Field(description="|S*|; metric values are only comparable within one S*")
    seed: int
    n_samples: int
    mode: SamplingMode
    provenance: str = "analytic"


@dataclass(frozen=True)
class EffectSamples:
    """M draws × |S*| columns of relative effects versus the reference (column of zeros)."""

    labels: List[str]
    values: np.ndarray
    reference: str
    provenance: str

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != len(self.labels):
            raise DataValidationError(f"samples have shape {self.values.shape} for {len(self.labels)} labels")
        if self.values.shape[0] < 1:
            raise DataValidationError("at least one sample is required")
        if not np.all(np.isfinite(self.values)):
            raise DataValidationError("samples contain non-finite values")
        if self.reference not in self.labels:
            raise DataValidationError(f"reference column '{self.reference}' is missing")
        if np.any(self.values[:, self.labels.index(self.reference)] != 0.0):
            raise DataValidationError(f"reference column '{self.reference}' must be identically zero")

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    def select(self, labels: Sequence[str]) -> "EffectSamples":
        """Reorder/subset columns by label (set-equal labels match, e.g. 'B+A' for 'A+B')."""
        columns = []
        for label in labels:
            k = _find_label(self.labels, label)
            if k is None:
                raise DataValidationError(f"samples have no column for '{label}'")
            columns.append(k)
        reference_column = self.labels.index(self.reference)
        if reference_column not in columns:
            raise DataValidationError(f"selection {list(labels)} drops the reference column '{self.reference}'")
        return EffectSamples(labels=list(labels), values=self.values[:, columns],
                             reference=labels[columns.index(reference_column)], provenance=self.provenance)


def _same_label(a: str, b: str) -> bool:
    if a == b:
        return True
    try:
        return parse_treatment_label(a) == parse_treatment_label(b)
    except LabelError:
        return False


def _find_label(labels: Sequence[str], wanted: str) -> Optional[int]:
    for k, label in enumerate(labels):
        if _same_label(label, wanted):
            return k
    return None


def _oriented(values: np.ndarray, orientation: Orientation) -> np.ndarray:
    return values if Orientation(orientation) is Orientation.LARGER_IS_BETTER else -values


# Rows per RNG substream; changing it changes every draw for a given seed
SAMPLE_BLOCK_ROWS = 4096


def _draw_block(seed: int, block_index: int, rows: int, width: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, block_index])))
    return rng.standard_normal((rows, width))


def standard_normal_draws(n_samples: int, width: int, seed: int, max_workers: int = 1) -> np.ndarray:
    """
    n_samples × width standard normals from counter-based substreams.

    Rows are generated in blocks of SAMPLE_BLOCK_ROWS keyed by (seed, block index),
    so row k depends only on the seed and k, not on n_samples or max_workers.
    """
    if seed < 0:
        raise ConfigError(f"seed must be nonnegative, got {seed}")
    n_blocks = math.ceil(n_samples / SAMPLE_BLOCK_ROWS)
    sizes = [min(SAMPLE_BLOCK_ROWS, n_samples - b * SAMPLE_BLOCK_ROWS) for b in range(n_blocks)]
    if max_workers > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            blocks = list(pool.map(lambda b: _draw_block(seed, b, sizes[b], width), range(n_blocks)))
    else:
        blocks = [_draw_block(seed, b, sizes[b], width) for b in range(n_blocks)]
    return np.vstack(blocks)


def _require_estimable(design: DesignMatrices, elements: Sequence[str], reference: str,
                       tol: RankTolerance) -> np.ndarray:
    """Stack V_{i,ref} for every element, refusing if any is not estimable."""
    rows, refused = [], []
    for label in elements:
        vector = design.vector(label, reference)
        if not estimability_verdict(design.M, vector.coefficients, tol).estimable:
            refused.append(label)
        rows.append(vector.coefficients)
    if refused:
        raise EstimabilityRefusal(f"relative effects versus '{reference}' are not estimable for {refused}", refused)
    return np.vstack(rows).astype(float)


def sample_effects(fit: FitResult, design: DesignMatrices, S_star: Sequence[str], reference: str,
                   n_samples: int = DEFAULT_CONFIG["n_samples"], seed: int = DEFAULT_CONFIG["seed"],
                   mode: Union[SamplingMode, str] = SamplingMode.JOINT, tol: RankTolerance = DEFAULT_TOLERANCE,
                   psd_tolerance: float = DEFAULT_CONFIG["psd_tolerance"], max_workers: int = 1) -> EffectSamples:
    """
    Draw relative effects versus `reference` for every element of S*.

    Args:
        fit: fitted model
        design: matrices the fit was built on
        S_star: refined set (reference included)
        reference: common reference
        n_samples: number of draws
        seed: RNG seed
        mode: joint (full covariance A·cov·Aᵀ) or independent (per-column normal)
        tol: rank tolerance for the estimability gate
        psd_tolerance: negative eigenvalues beyond -psd_tolerance·λmax are an error
        max_workers: threads used to generate blocks

    Returns:
        EffectSamples with an all-zero reference column
    """
    mode = SamplingMode(mode)
    if n_samples < 1:
        raise ConfigError(f"n_samples must be at least 1, got {n_samples}")
    labels = list(S_star)
    if reference not in labels:
        raise ConfigError(f"reference '{reference}' is not in S* {labels}")

    A = _require_estimable(design, labels, reference, tol)
    mean = A @ fit.beta_hat
    cov = A @ fit.cov_beta @ A.T
    cov = (cov + cov.T) / 2.0
    z = standard_normal_draws(n_samples, len(labels), seed, max_workers)

    if mode is SamplingMode.JOINT:
        eigenvalues, eigenvectors = eigh(cov)
        largest = max(float(eigenvalues.max()), 0.0)
        if eigenvalues.min() < -psd_tolerance * largest:
            raise DataValidationError(
                f"contrast covariance is not positive semidefinite (smallest eigenvalue {eigenvalues.min():.3g})"
            )
        factor = eigenvectors * np.sqrt(np.clip(eigenvalues, 0.0, None))
        values = mean + z @ factor.T
    else:
        sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        values = mean + z * sd

    values[:, labels.index(reference)] = 0.0
    logger.info(f"Drew {n_samples} {mode.value} samples for {len(labels)} elements (seed {seed})")
    return EffectSamples(labels=labels, values=values, reference=reference,
                         provenance=f"resampled(seed={seed}, mode={mode.value}, block={SAMPLE_BLOCK_ROWS})")


def ingest_samples(path: Union[str, Path], reference: str) -> EffectSamples:
    """
    Read externally generated draws (e.g. MCMC output).

    Args:
        path: CSV with one column per element label and one row per draw
        reference: label of the reference column, which must be all zeros
    """
    path = Path(path)
    frame = read_csv_frame(path, float_precision="round_trip")
    labels = [str(c).strip() for c in frame.columns]

    k = _find_label(labels, reference)
    if k is None:
        raise DataValidationError(f"{path}: missing reference column '{reference}'")

    numeric = frame.apply(pd.to_numeric, errors="coerce")
    if numeric.isna().any().any():
        column = labels[int(np.flatnonzero(numeric.isna().any().to_numpy())[0])]
        raise DataValidationError(f"{path}: non-numeric entries in column '{column}'")

    logger.info(f"Ingested {len(frame)} external samples for {len(labels)} elements from {path}")
    return EffectSamples(labels=labels, values=numeric.to_numpy(dtype=float), reference=labels[k],
                         provenance=f"external({path.name})")


def write_samples(samples: EffectSamples, path: Union[str, Path]) -> Path:
    """Write draws in the format `ingest_samples` reads back bit-for-bit."""
    path = Path(path)
    frame = pd.DataFrame(samples.values, columns=samples.labels)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return path


def p_best(samples: EffectSamples, orientation: Union[Orientation, str] = Orientation.LARGER_IS_BETTER) -> np.ndarray:
    """Share of draws in which each element is strictly better than every other element."""
    values = _oriented(samples.values, orientation)
    top = values.max(axis=1, keepdims=True)
    at_top = values == top
    unique = at_top.sum(axis=1) == 1
    return (at_top & unique[:, None]).mean(axis=0)


def ranks_per_sample(samples: EffectSamples,
                     orientation: Union[Orientation, str] = Orientation.LARGER_IS_BETTER) -> np.ndarray:
    """
    rank(i) = |S*| − #{j ≠ i : i strictly beats j}, per draw.

    Tied elements share the larger (worse) rank.
    """
    values = _oriented(samples.values, orientation)
    n = values.shape[1]
    # 'min' rank minus one counts strictly worse elements
    beaten = rankdata(values, method="min", axis=1) - 1
    return (n - beaten).astype(np.int64)


def median_rank(ranks: np.ndarray) -> np.ndarray:
    return np.median(ranks, axis=0)


def expected_rank(ranks: np.ndarray) -> np.ndarray:
    return ranks.mean(axis=0)


def sucra(expected_ranks: np.ndarray, n_elements: int) -> np.ndarray:
    if n_elements < 2:
        raise ConfigError(f"SUCRA needs at least two elements, got {n_elements}")
    return (n_elements - np.asarray(expected_ranks, dtype=float)) / (n_elements - 1)


def point_estimates(effects: Sequence[RelativeEffect]) -> np.ndarray:
    """Relative effects versus the reference, as metric values."""
    missing = [e.label for e in effects if not e.estimable]
    if missing:
        raise EstimabilityRefusal(f"no point estimate for inestimable elements {missing}", missing)
    return np.array([e.estimate for e in effects], dtype=float)


def pairwise_preference(fit: FitResult, design: DesignMatrices, S_star: Sequence[str],
                        orientation: Union[Orientation, str] = Orientation.LARGER_IS_BETTER,
                        tol: RankTolerance = DEFAULT_TOLERANCE) -> Tuple[np.ndarray, List[Tuple[str, str]]]:
    """
    P[i, j] = Φ(θ̂ᵢⱼ / σᵢⱼ) (sign flipped for smaller-is-better); P[j, i] = 1 − P[i, j].

    Returns:
        (preference matrix with NaN diagonal, pairs with σ = 0 and θ̂ ≠ 0)
    """
    labels = list(S_star)
    larger = Orientation(orientation) is Orientation.LARGER_IS_BETTER
    n = len(labels)
    P = np.full((n, n), np.nan)
    degenerate = []
    for i in range(n):
        for j in range(i + 1, n):
            effect = effect_versus(fit, design, labels[i], labels[j], tol)
            if not effect.estimable:
                raise EstimabilityRefusal(
                    f"relative effect of '{labels[i]}' versus '{labels[j]}' is not estimable", [labels[i], labels[j]]
                )
            theta = effect.estimate if larger else -effect.estimate
            if effect.se > 0.0:
                p = float(norm.cdf(theta / effect.se))
            elif theta == 0.0:
                p = 0.5
            else:
                p = 1.0 if theta > 0 else 0.0
                degenerate.append((labels[i], labels[j]))
                logger.warning(f"Zero standard error for '{labels[i]}' vs '{labels[j]}' with nonzero effect")
            P[i, j] = p
            P[j, i] = 1.0 - p
    return P, degenerate


def p_score(fit: FitResult, design: DesignMatrices, S_star: Sequence[str],
            orientation: Union[Orientation, str] = Orientation.LARGER_IS_BETTER,
            tol: RankTolerance = DEFAULT_TOLERANCE) -> np.ndarray:
    """Mean pairwise probability of being better, from the analytic fit covariance."""
    n = len(S_star)
    if n < 2:
        raise ConfigError(f"P-score needs at least two elements, got {n}")
    P, _ = pairwise_preference(fit, design, S_star, orientation, tol)
    return np.nansum(P, axis=1) / (n - 1)


def build_hierarchy(values: Sequence[float], metric: Union[Metric, str],
                    orientation: Union[Orientation, str] = Orientation.LARGER_IS_BETTER) -> np.ndarray:
    """
    Hierarchy positions (1 = most preferred); exactly equal values share a position.

    Probabilities and SUCRA sort largest first, ranks smallest first, point
    estimates follow the outcome orientation.
    """
    metric = Metric(metric)
    values = np.asarray(values, dtype=float)
    if metric is Metric.POINT_ESTIMATE:
        largest_first = Orientation(orientation) is Orientation.LARGER_IS_BETTER
    else:
        largest_first = LARGEST_FIRST[metric]
    key = -values if largest_first else values
    return rankdata(key, method="min").astype(np.int64)


def league_table(fit: FitResult, design: DesignMatrices, S_star: Sequence[str],
                 tol: RankTolerance = DEFAULT_TOLERANCE, z: float = CI_Z) -> pd.DataFrame:
    """All ordered pairs (row versus column) among S* with estimates and 95% intervals."""
    records = []
    for row in S_star:
        for column in S_star:
            if row == column:
                continue
            effect = effect_versus(fit, design, row, column, tol, z)
            records.append({
                "treatment": row,
                "versus": column,
                "estimable": effect.estimable,
                "estimate": effect.estimate,
                "se": effect.se,
                "ci_low": effect.ci_low,
                "ci_high": effect.ci_high,
            })
    return pd.DataFrame.from_records(
        records, columns=["treatment", "versus", "estimable", "estimate", "se", "ci_low", "ci_high"]
    )


def resolve_set(spec_set: Union[str, Sequence[str]], catalog: ComponentCatalog) -> List[str]:
    """
    Expand "all-treatments" / "all-components" or normalise an explicit list.

    Explicit labels are parsed and de-duplicated with set semantics, keeping the
    first spelling.
    """
    if spec_set == "all-treatments":
        return [t.display for t in catalog.treatments]
    if spec_set == "all-components":
        return list(catalog.components)
    if isinstance(spec_set, str):
        raise ConfigError(f"unknown named set '{spec_set}'. Available: ['all-treatments', 'all-components']")

    resolved, seen = [], set()
    for text in spec_set:
        label = parse_treatment_label(text)
        if label in seen:
            continue
        seen.add(label)
        resolved.append(label.display)
    if not resolved:
        raise ConfigError("the set to rank is empty")
    return resolved


def resolve_reference(set_S: Sequence[str], reference: Optional[str] = None) -> str:
    """The element of S matching `reference`, or the first element when none is given."""
    if reference is None:
        return set_S[0]
    k = _find_label(set_S, reference)
    if k is None:
        raise ConfigError(f"reference '{reference}' is not in the set {list(set_S)}")
    return set_S[k]


def _ties(labels: Sequence[str], positions: np.ndarray) -> List[List[str]]:
    groups: Dict[int, List[str]] = {}
    for label, position in zip(labels, positions):
        groups.setdefault(int(position), []).append(label)
    return [members for _, members in sorted(groups.items()) if len(members) > 1]


def answer_question(design: DesignMatrices, fit: FitResult, spec_set: Union[str, Sequence[str]],
                    reference: Optional[str] = None, metric: Union[Metric, str] = Metric.P_SCORE,
                    orientation: Union[Orientation, str] = Orientation.LARGER_IS_BETTER,
                    n_samples: int = DEFAULT_CONFIG["n_samples"], seed: int = DEFAULT_CONFIG["seed"],
                    mode: Union[SamplingMode, str] = SamplingMode.JOINT, exclude_inestimable: bool = False,
                    samples: Optional[EffectSamples] = None, tol: RankTolerance = DEFAULT_TOLERANCE,
                    z: float = CI_Z, max_workers: int = 1) -> HierarchyReport:
    """
    Check estimability over S, refine to S*, compute the metric and build the hierarchy.

    Args:
        design: matrices of the fitted model
        fit: fitted model
        spec_set: "all-treatments", "all-components" or explicit labels
        reference: common reference; the first element of S when omitted
        metric: ranking metric
        orientation: whether larger or smaller outcomes are preferred
        n_samples: draws for sample-based metrics
        seed: RNG seed
        mode: joint or independent sampling
        exclude_inestimable: drop inestimable elements (recorded as exclusions) instead of refusing
        samples: external draws to use instead of resampling
        tol: rank tolerance
        z: normal quantile for intervals
        max_workers: threads used for sampling

    Returns:
        HierarchyReport with every element of S either ranked or excluded
    """
    metric, orientation, mode = Metric(metric), Orientation(orientation), SamplingMode(mode)
    set_S = resolve_set(spec_set, design.catalog)
    reference = resolve_reference(set_S, reference)

    report = check_set(design, set_S, reference, tol)
    refused = report.inestimable()
    if refused and not exclude_inestimable:
        raise EstimabilityRefusal(
            f"relative effects versus '{reference}' are not estimable for {refused}; "
            f"refine the set or pass --exclude-inestimable",
            refused,
        )

    reasons = {e.label: e.error or f"not estimable versus {reference}" for e in report.elements if not e.estimable}
    S_star = [label for label in set_S if label not in reasons]
    exclusions = [Exclusion(label=label, reason=reasons[label]) for label in set_S if label in reasons]
    for exclusion in exclusions:
        logger.warning(f"Excluded '{exclusion.label}': {exclusion.reason}")

    warnings = []
    if design.spec.interactions and any(label in design.catalog.components for label in S_star):
        warnings.append("ranking components under a model with interaction terms: "
                        "incremental component effects depend on the treatment they are added to")
        logger.warning(warnings[-1])

    effects = [effect_versus(fit, design, label, reference, tol, z) for label in S_star]
    provenance = "analytic"

    if metric is Metric.POINT_ESTIMATE:
        values = point_estimates(effects)
    elif metric is Metric.P_SCORE:
        if len(S_star) < 2:
            raise ConfigError(f"P-score needs at least two elements in S*, got {S_star}")
        P, degenerate = pairwise_preference(fit, design, S_star, orientation, tol)
        values = np.nansum(P, axis=1) / (len(S_star) - 1)
        for a, b in degenerate:
            warnings.append(f"zero standard error for '{a}' vs '{b}' with a nonzero effect")
    else:
        if samples is None:
            samples = sample_effects(fit, design, S_star, reference, n_samples, seed, mode, tol,
                                     max_workers=max_workers)
        else:
            if not _same_label(samples.reference, reference):
                raise DataValidationError(
                    f"samples are relative to '{samples.reference}', the question uses '{reference}'"
                )
            samples = samples.select(S_star)
        provenance = samples.provenance
        n_samples = samples.n_samples
        if metric is Metric.P_BEST:
            values = p_best(samples, orientation)
        else:
            ranks = ranks_per_sample(samples, orientation)
            if metric is Metric.MEDIAN_RANK:
                values = median_rank(ranks)
            elif metric is Metric.EXPECTED_RANK:
                values = expected_rank(ranks)
            else:
                values = sucra(expected_rank(ranks), len(S_star))

    positions = build_hierarchy(values, metric, orientation)
    order = sorted(range(len(S_star)), key=lambda k: (positions[k], k))
    elements = [
        RankedElement(
            label=S_star[k],
            estimate=effects[k].estimate,
            se=effects[k].se,
            ci=[effects[k].ci_low, effects[k].ci_high],
            metric=float(values[k]),
            position=int(positions[k]),
        )
        for k in order
    ]

    question = HierarchyQuestion(set_S=set_S, refined_S_star=S_star, reference=reference, metric=metric,
                                 orientation=orientation, n_samples=n_samples, seed=seed, sampling_mode=mode)
    logger.info(f"Hierarchy by {metric.value}: {' > '.join(e.label for e in elements)}")
    return HierarchyReport(question=question, elements=elements, exclusions=exclusions,
                           ties=_ties([S_star[k] for k in order], [positions[k] for k in order]),
                           warnings=warnings, set_size=len(S_star), seed=seed, n_samples=n_samples, mode=mode,
                           provenance=provenance)
