# Basic, component and design matrices for additive / interaction CNMA models

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from cnma.errors import ConfigError, DataValidationError, LabelError
from cnma.network import (
    ComponentCatalog,
    Network,
    TreatmentLabel,
    derive_component_catalog,
    parse_treatment_label,
)

logger = logging.getLogger(__name__)


class Effects(str, Enum):
    COMMON = "common"
    RANDOM = "random"


@dataclass(frozen=True)
class InteractionTerm:
    members: Tuple[str, ...]

    @classmethod
    def parse(cls, text: str) -> "InteractionTerm":
        members = tuple(m.strip() for m in text.split(":"))
        if len(members) < 2 or any(not m for m in members) or len(set(members)) != len(members):
            raise ConfigError(f"interaction '{text}' needs at least two distinct components")
        return cls(members)

    @property
    def label(self) -> str:
        return ":".join(self.members)


@dataclass(frozen=True)
class ModelSpec:
    """Anchor (None = unanchored), interaction terms and effects mode."""

    anchor: Optional[str] = None
    interactions: Tuple[InteractionTerm, ...] = ()
    effects: Effects = Effects.COMMON

    @classmethod
    def from_strings(cls, anchor: Optional[str] = None, interactions: Optional[List[str]] = None,
                     effects: str = "common") -> "ModelSpec":
        return cls(
            anchor=anchor,
            interactions=tuple(InteractionTerm.parse(t) for t in (interactions or [])),
            effects=Effects(effects),
        )


@dataclass(frozen=True)
class ContrastVector:
    coefficients: np.ndarray
    description: str


@dataclass(frozen=True)
class DesignMatrices:
    """
    B (comparisons × treatments), C (treatments × p) and M = B·C as exact integers.

    Carries the catalog and spec it was built from so contrast vectors for
    unobserved combinations can be encoded on the same parameter axis.
    """

    B: np.ndarray
    C: np.ndarray
    M: np.ndarray
    param_labels: List[str]
    treatment_labels: List[TreatmentLabel]
    catalog: ComponentCatalog = field(repr=False)
    spec: ModelSpec = field(repr=False)

    @property
    def p(self) -> int:
        return len(self.param_labels)

    def encode(self, label: Union[str, TreatmentLabel]) -> np.ndarray:
        return encode_combination(label, self.catalog, self.spec)

    def vector(self, i: Union[str, TreatmentLabel], j: Union[str, TreatmentLabel]) -> ContrastVector:
        return contrast_vector(i, j, self.catalog, self.spec)


def parameter_labels(catalog: ComponentCatalog, spec: ModelSpec) -> List[str]:
    return catalog.parameter_labels() + [term.label for term in spec.interactions]


def validate_model_spec(catalog: ComponentCatalog, spec: ModelSpec) -> None:
    labels = parameter_labels(catalog, spec)
    if spec.anchor is not None and spec.anchor not in labels:
        raise ConfigError(f"unknown parameter '{spec.anchor}' for anchor. Available: {labels}")
    for term in spec.interactions:
        unknown = [m for m in term.members if m not in catalog.components]
        if unknown:
            raise ConfigError(f"unknown parameter(s) {unknown} in interaction '{term.label}': not components")
    declared = [term.label for term in spec.interactions]
    if len(set(declared)) != len(declared):
        raise ConfigError(f"duplicate interaction terms in {declared}")


def build_basic_matrix(network: Network, catalog: ComponentCatalog) -> Tuple[np.ndarray, List[TreatmentLabel]]:
    """
    One row per observed contrast: +1 for treat1, −1 for treat2.

    Returns:
        (B, treatment index) with columns in catalog treatment order
    """
    treatments = list(catalog.treatments)
    column = {t: k for k, t in enumerate(treatments)}
    B = np.zeros((len(network.contrasts), len(treatments)), dtype=np.int64)
    for r, contrast in enumerate(network.contrasts):
        B[r, column[contrast.treat1]] = 1
        B[r, column[contrast.treat2]] = -1
    return B, treatments


def encode_combination(label: Union[str, TreatmentLabel], catalog: ComponentCatalog, spec: ModelSpec) -> np.ndarray:
    """
    C-style row for a treatment, component or unobserved combination.

    A label matching a standalone or collapsed treatment maps to its own column;
    otherwise every unit must be a component. Interaction columns switch on when
    all members are present; the anchor column stays zero.
    """
    if isinstance(label, str):
        label = parse_treatment_label(label)

    labels = parameter_labels(catalog, spec)
    row = np.zeros(len(labels), dtype=np.int64)
    n_components = len(catalog.components)

    own = list(catalog.standalone) + list(catalog.collapsed)
    if label in own:
        row[n_components + own.index(label)] = 1
    else:
        not_components = [u for u in label.units if u not in catalog.components]
        if not_components:
            raise LabelError(
                f"cannot encode '{label.display}': {not_components} are not components "
                f"and the label is not an observed standalone/collapsed treatment"
            )
        for unit in label.units:
            row[catalog.components.index(unit)] = 1

    offset = len(catalog.parameter_labels())
    for k, term in enumerate(spec.interactions):
        if set(term.members) <= label.unit_set:
            row[offset + k] = 1

    if spec.anchor is not None:
        row[labels.index(spec.anchor)] = 0
    return row


def build_component_matrix(catalog: ComponentCatalog, spec: ModelSpec) -> np.ndarray:
    """One encoded row per observed treatment (catalog order)."""
    validate_model_spec(catalog, spec)
    return np.vstack([encode_combination(t, catalog, spec) for t in catalog.treatments])


def build_design_matrix(B: np.ndarray, C: np.ndarray) -> np.ndarray:
    if B.shape[1] != C.shape[0]:
        raise DataValidationError(f"dimension mismatch: B has {B.shape[1]} columns, C has {C.shape[0]} rows")
    return B @ C


def contrast_vector(i: Union[str, TreatmentLabel], j: Union[str, TreatmentLabel],
                    catalog: ComponentCatalog, spec: ModelSpec) -> ContrastVector:
    """V_{i,j} = encode(i) − encode(j)."""
    vi = encode_combination(i, catalog, spec)
    vj = encode_combination(j, catalog, spec)
    return ContrastVector(coefficients=vi - vj, description=f"{i} vs {j}")


def build_design(network: Network, spec: Optional[ModelSpec] = None,
                 catalog: Optional[ComponentCatalog] = None) -> DesignMatrices:
    """Derive the catalog (unless given), validate the model spec and build B, C, M."""
    spec = spec or ModelSpec()
    catalog = catalog or derive_component_catalog(network)
    B, treatments = build_basic_matrix(network, catalog)
    C = build_component_matrix(catalog, spec)
    M = build_design_matrix(B, C)
    labels = parameter_labels(catalog, spec)
    logger.info(f"Design matrix M is {M.shape[0]}x{M.shape[1]} (parameters: {', '.join(labels)})")
    return DesignMatrices(B=B, C=C, M=M, param_labels=labels, treatment_labels=treatments,
                          catalog=catalog, spec=spec)


def matrix_frame(design: DesignMatrices, which: str) -> pd.DataFrame:
    """Labelled DataFrame view of B, C or M."""
    treatments = [t.display for t in design.treatment_labels]
    if which == "B":
        return pd.DataFrame(design.B, columns=treatments)
    if which == "C":
        return pd.DataFrame(design.C, columns=design.param_labels, index=treatments)
    if which == "M":
        return pd.DataFrame(design.M, columns=design.param_labels)
    raise ValueError(f"Unknown matrix: {which}. Available matrices: ['B', 'C', 'M']")


def export_matrix_csv(design: DesignMatrices, which: str, path: Union[str, Path]) -> Path:
    """
    Write B, C or M as CSV with a labelled header.

    Args:
        design: built matrices
        which: "B", "C" or "M"
        path: output file
    """
    path = Path(path)
    matrix_frame(design, which).to_csv(path, index=(which == "C"), lineterminator="\n")
    return path
