# Contrast-level network ingestion, component catalog derivation and validation

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.linalg import lstsq
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from cnma.errors import DataValidationError, LabelError

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ["studlab", "treat1", "treat2", "TE", "seTE"]


@dataclass(frozen=True, eq=False)
class TreatmentLabel:
    """
    A treatment identified by its set of units.

    `units` keeps the order of first appearance for display; equality and hashing
    use set semantics so "A+B" and "B+A" are the same treatment.
    """

    units: Tuple[str, ...]

    @property
    def unit_set(self) -> FrozenSet[str]:
        return frozenset(self.units)

    @property
    def display(self) -> str:
        return "+".join(self.units)

    @property
    def is_single(self) -> bool:
        return len(self.units) == 1

    def __eq__(self, other) -> bool:
        if not isinstance(other, TreatmentLabel):
            return NotImplemented
        return self.unit_set == other.unit_set

    def __hash__(self) -> int:
        return hash(self.unit_set)

    def __str__(self) -> str:
        return self.display


@dataclass(frozen=True)
class Contrast:
    study_id: str
    treat1: TreatmentLabel
    treat2: TreatmentLabel
    effect: float
    se: float


@dataclass(frozen=True)
class Network:
    """Observed contrasts in file order; `studies` groups them by study id."""

    contrasts: Tuple[Contrast, ...]
    studies: Dict[str, Tuple[Contrast, ...]] = field(compare=False)

    @classmethod
    def from_contrasts(cls, contrasts: Iterable[Contrast]) -> "Network":
        contrasts = tuple(contrasts)
        studies: Dict[str, List[Contrast]] = {}
        for contrast in contrasts:
            studies.setdefault(contrast.study_id, []).append(contrast)
        return cls(contrasts=contrasts, studies={k: tuple(v) for k, v in studies.items()})

    def study_ids(self) -> List[str]:
        return list(self.studies.keys())

    def treatments(self) -> List[TreatmentLabel]:
        """Observed treatments in order of first appearance (first spelling wins)."""
        seen: Dict[TreatmentLabel, TreatmentLabel] = {}
        for contrast in self.contrasts:
            for label in (contrast.treat1, contrast.treat2):
                seen.setdefault(label, label)
        return list(seen.values())


@dataclass(frozen=True)
class ComponentCatalog:
    """
    Partition of observed units. The parameter axis is
    components ⧺ standalone ⧺ collapsed, in that fixed order.
    """

    components: Tuple[str, ...]
    standalone: Tuple[TreatmentLabel, ...]
    collapsed: Tuple[TreatmentLabel, ...]
    treatments: Tuple[TreatmentLabel, ...]

    def parameter_labels(self) -> List[str]:
        return list(self.components) + [t.display for t in self.standalone] + [t.display for t in self.collapsed]


@dataclass(frozen=True)
class Diagnostic:
    kind: str
    severity: str
    message: str
    study_id: Optional[str] = None


def parse_treatment_label(text: str) -> TreatmentLabel:
    """
    Parse a '+'-separated treatment label into its unit set.

    Args:
        text: raw label such as "A+B" or " B + A "

    Returns:
        TreatmentLabel with units in input order
    """
    if text is None or not str(text).strip():
        raise LabelError("empty treatment label")

    units = [unit.strip() for unit in str(text).strip().split("+")]
    if any(not unit for unit in units):
        raise LabelError(f"empty unit between separators in label '{text}'")
    for unit in units:
        if ":" in unit:
            raise LabelError(f"unit '{unit}' in label '{text}' contains ':'")
    if len(set(units)) != len(units):
        raise LabelError(f"duplicate unit in label '{text}'")

    return TreatmentLabel(units=tuple(units))


def read_csv_frame(path: Path, **kwargs) -> pd.DataFrame:
    """pandas.read_csv with empty and malformed files reported as DataValidationError."""
    try:
        return pd.read_csv(path, **kwargs)
    except pd.errors.EmptyDataError:
        raise DataValidationError(f"{path}: file is empty")
    except pd.errors.ParserError as e:
        raise DataValidationError(f"{path}: malformed CSV: {e}")


def parse_contrast_csv(path: Union[str, Path]) -> Network:
    """
    Read a contrast-level CSV (studlab,treat1,treat2,TE,seTE).

    Args:
        path: CSV file, UTF-8, '.' decimal point

    Returns:
        Network with one Contrast per row, file order preserved
    """
    path = Path(path)
    # blank cells stay empty strings so they fail label and numeric checks instead of becoming "nan"
    frame = read_csv_frame(path, dtype=str, encoding="utf-8", skipinitialspace=True, keep_default_na=False)

    missing = [col for col in REQUIRED_COLUMNS if col not in frame.columns]
    if missing:
        raise DataValidationError(f"{path}: missing column(s) {missing}")
    if frame.empty:
        raise DataValidationError(f"{path}: no contrasts")

    blank_study = frame["studlab"].str.strip() == ""
    if blank_study.any():
        row = int(np.flatnonzero(blank_study.to_numpy())[0])
        raise DataValidationError(f"{path}: empty studlab in data row {row + 1}")

    for col in ("TE", "seTE"):
        numeric = pd.to_numeric(frame[col], errors="coerce")
        bad = numeric.isna() | ~np.isfinite(numeric)
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataValidationError(
                f"{path}: non-numeric {col} '{frame[col].iloc[row]}' in study '{frame['studlab'].iloc[row]}'",
                study_id=frame["studlab"].iloc[row],
            )
        frame[col] = numeric.astype(float)

    contrasts = []
    for row in frame.itertuples(index=False):
        study_id = str(row.studlab).strip()
        try:
            treat1 = parse_treatment_label(row.treat1)
            treat2 = parse_treatment_label(row.treat2)
        except LabelError as e:
            raise LabelError(f"study '{study_id}': {e.detail}", study_id=study_id)
        if row.seTE <= 0:
            raise DataValidationError(f"study '{study_id}': seTE must be positive, got {row.seTE}", study_id=study_id)
        if treat1 == treat2:
            raise DataValidationError(f"study '{study_id}': treat1 equals treat2 ({treat1})", study_id=study_id)
        contrasts.append(Contrast(study_id, treat1, treat2, float(row.TE), float(row.seTE)))

    network = Network.from_contrasts(contrasts)
    logger.info(f"Loaded {len(contrasts)} contrasts from {len(network.studies)} studies ({path})")
    return network


def _treatment_sort_key(label: TreatmentLabel) -> Tuple[int, str]:
    return (len(label.units), label.display)


def derive_component_catalog(network: Network) -> ComponentCatalog:
    """
    Classify observed units into components, standalone and collapsed treatments.

    Seed: units observed in two or more distinct treatments. Then repeatedly add
    units that share a multi-unit treatment with a component, until nothing changes.
    """
    treatments = network.treatments()
    if not treatments:
        raise DataValidationError("network has no contrasts")

    appearances: Dict[str, int] = {}
    for treatment in treatments:
        for unit in treatment.units:
            appearances[unit] = appearances.get(unit, 0) + 1

    components = {unit for unit, count in appearances.items() if count >= 2}
    changed = True
    while changed:
        changed = False
        for treatment in treatments:
            if treatment.is_single:
                continue
            units = treatment.unit_set
            if units & components and not units <= components:
                components |= units
                changed = True

    standalone = [t for t in treatments if t.is_single and t.units[0] not in components]
    collapsed = [t for t in treatments if not t.is_single and not (t.unit_set & components)]

    catalog = ComponentCatalog(
        components=tuple(sorted(components)),
        standalone=tuple(sorted(standalone, key=_treatment_sort_key)),
        collapsed=tuple(sorted(collapsed, key=_treatment_sort_key)),
        treatments=tuple(sorted(treatments, key=_treatment_sort_key)),
    )
    logger.info(
        f"Catalog: {len(catalog.components)} components, {len(catalog.standalone)} standalone, "
        f"{len(catalog.collapsed)} collapsed over {len(catalog.treatments)} treatments"
    )
    return catalog


def _study_arms(contrasts: Iterable[Contrast]) -> List[TreatmentLabel]:
    arms: Dict[TreatmentLabel, TreatmentLabel] = {}
    for contrast in contrasts:
        arms.setdefault(contrast.treat1, contrast.treat1)
        arms.setdefault(contrast.treat2, contrast.treat2)
    return list(arms.values())


def is_complete_study(contrasts: Tuple[Contrast, ...]) -> bool:
    """Exactly one contrast, or every pair of the study's arms exactly once."""
    if len(contrasts) == 1:
        return True
    arms = _study_arms(contrasts)
    pairs = {frozenset((c.treat1, c.treat2)) for c in contrasts}
    a = len(arms)
    return len(contrasts) == a * (a - 1) // 2 and len(pairs) == len(contrasts)


def treatment_subnetworks(network: Network) -> List[List[TreatmentLabel]]:
    """
    Treatments grouped by connected subnetwork of the contrast graph.

    Largest subnetwork first; ties and members keep order of first appearance.
    """
    treatments = network.treatments()
    index = {t: i for i, t in enumerate(treatments)}
    rows = [index[c.treat1] for c in network.contrasts]
    cols = [index[c.treat2] for c in network.contrasts]
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(treatments), len(treatments)))
    _, labels = connected_components(graph, directed=False)

    groups: Dict[int, List[TreatmentLabel]] = {}
    for treatment, label in zip(treatments, labels):
        groups.setdefault(int(label), []).append(treatment)
    return sorted(groups.values(), key=len, reverse=True)


def validate_network(network: Network) -> List[Diagnostic]:
    """
    Report structural problems and treatment-level connectivity.

    Diagnostics never raise; disconnected networks are allowed.
    """
    diagnostics: List[Diagnostic] = []

    for study_id, contrasts in network.studies.items():
        seen = set()
        for contrast in contrasts:
            key = (contrast.treat1, contrast.treat2, contrast.effect, contrast.se)
            if key in seen:
                diagnostics.append(
                    Diagnostic("duplicate-contrast", "warning",
                               f"duplicate contrast {contrast.treat1} vs {contrast.treat2} in study '{study_id}'",
                               study_id)
                )
            seen.add(key)
        if not is_complete_study(contrasts):
            arms = _study_arms(contrasts)
            diagnostics.append(
                Diagnostic("incomplete-multiarm", "error",
                           f"incomplete multi-arm study '{study_id}': {len(contrasts)} contrasts over {len(arms)} arms",
                           study_id)
            )

    n_parts = len(treatment_subnetworks(network))
    if n_parts == 1:
        diagnostics.append(Diagnostic("connectivity", "info", "connected"))
    else:
        diagnostics.append(
            Diagnostic("connectivity", "info", f"disconnected at treatment level: {n_parts} subnetworks")
        )

    for diagnostic in diagnostics:
        if diagnostic.severity != "info":
            logger.warning(diagnostic.message)
    return diagnostics


def study_incidence(contrasts: Tuple[Contrast, ...]) -> Tuple[List[TreatmentLabel], np.ndarray]:
    """Arms of a study and the contrasts × arms ±1 incidence matrix."""
    arms = _study_arms(contrasts)
    position = {arm: i for i, arm in enumerate(arms)}
    incidence = np.zeros((len(contrasts), len(arms)))
    for r, contrast in enumerate(contrasts):
        incidence[r, position[contrast.treat1]] = 1.0
        incidence[r, position[contrast.treat2]] = -1.0
    return arms, incidence


def reconstruct_arm_variances(contrasts: Tuple[Contrast, ...]) -> np.ndarray:
    """
    Solve se²(k,l) = v_k + v_l for the arm variances of a complete multi-arm study.

    Exactly determined for three arms; least squares for more.
    """
    study_id = contrasts[0].study_id
    if not is_complete_study(contrasts):
        raise DataValidationError(f"study '{study_id}' is not a complete set of pairwise contrasts", study_id=study_id)

    _, incidence = study_incidence(contrasts)
    design = np.abs(incidence)
    target = np.array([c.se ** 2 for c in contrasts])
    variances = lstsq(design, target)[0]

    misfit = np.linalg.norm(design @ variances - target)
    if misfit > 1e-8 * max(1.0, np.linalg.norm(target)):
        logger.warning(f"Study '{study_id}': standard errors are not exactly arm-additive (misfit {misfit:.3g})")
    if np.any(variances < 0):
        raise DataValidationError(
            f"study '{study_id}': inconsistent standard errors give negative arm variance {variances.min():.4g}",
            study_id=study_id,
        )
    return variances


def reconstruct_multiarm_covariance(contrasts: Tuple[Contrast, ...], tau2: float = 0.0) -> np.ndarray:
    """
    Covariance block of all contrasts of one study.

    Args:
        contrasts: the study's contrasts (complete pairwise set, or a single contrast)
        tau2: heterogeneity added as τ²/2 per arm (τ² per two-arm contrast)

    Returns:
        len(contrasts) × len(contrasts) symmetric covariance matrix
    """
    if len(contrasts) == 1:
        return np.array([[contrasts[0].se ** 2 + tau2]])

    variances = reconstruct_arm_variances(contrasts) + tau2 / 2.0
    _, incidence = study_incidence(contrasts)
    block = incidence @ np.diag(variances) @ incidence.T
    return (block + block.T) / 2.0
