# Tests for basic/component/design matrix construction

import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

# Add the parent directory to the path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from cnma.design import (
    ModelSpec,
    build_design,
    build_design_matrix,
    contrast_vector,
    encode_combination,
    export_matrix_csv,
    matrix_frame,
)
from cnma.errors import ConfigError, DataValidationError, LabelError
from cnma.network import Contrast, Network, derive_component_catalog, parse_contrast_csv, parse_treatment_label

DATA = Path(__file__).parent / "data"

TABLE1_B = np.array([
    [1, 0, 0, -1, 0],
    [0, 1, 0, -1, 0],
    [0, 1, -1, 0, 0],
    [1, 0, 0, 0, -1],
])
TABLE1_C = np.array([
    [1, 0, 0, 0, 0],
    [0, 0, 0, 1, 0],
    [1, 1, 0, 0, 0],
    [0, 1, 1, 0, 0],
    [0, 0, 0, 0, 1],
])
TABLE1_M = np.array([
    [1, -1, -1, 0, 0],
    [0, -1, -1, 1, 0],
    [-1, -1, 0, 1, 0],
    [1, 0, 0, 0, -1],
])
TABLE1_M_ANCHORED_D = np.array([
    [1, -1, -1, 0, 0],
    [0, -1, -1, 0, 0],
    [-1, -1, 0, 0, 0],
    [1, 0, 0, 0, -1],
])
TABLE1_M_INTERACTION_AB = np.array([
    [1, -1, -1, 0, 0, 0],
    [0, -1, -1, 1, 0, 0],
    [-1, -1, 0, 1, 0, -1],
    [1, 0, 0, 0, -1, 0],
])

# Rows of the published CLL design matrix, columns Ben, Duv, Ibr, Ide, Ofa, Rit, Ubl, Ven
CLL_COLUMNS = ["Ben", "Duv", "Ibr", "Ide", "Ofa", "Rit", "Ubl", "Ven"]
CLL_M = np.array([
    [0, 0, 1, 0, -1, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, -1, 0],
    [0, 0, 0, 1, 0, 0, 0, 0],
    [0, 1, 0, 0, -1, 0, 0, 0],
    [0, 0, -1, 0, 0, 0, 0, 0],
    [1, 0, 0, 0, 0, 0, 0, -1],
    [0, 0, 0, -1, 0, 0, 0, 0],
    [0, 0, 1, 0, 0, -1, 0, 0],
    [0, 0, 0, 1, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, -1, 0, 0],
])


@pytest.fixture
def table1():
    return parse_contrast_csv(DATA / "table1.csv")


def test_table1_unanchored(table1):
    design = build_design(table1)
    assert design.param_labels == ["A", "B", "C", "D", "E+F"]
    assert [t.display for t in design.treatment_labels] == ["A", "D", "A+B", "B+C", "E+F"]
    np.testing.assert_array_equal(design.B, TABLE1_B)
    np.testing.assert_array_equal(design.C, TABLE1_C)
    np.testing.assert_array_equal(design.M, TABLE1_M)
    assert design.M.dtype.kind == "i"


def test_table1_anchored_on_d(table1):
    design = build_design(table1, ModelSpec(anchor="D"))
    expected_C = TABLE1_C.copy()
    expected_C[:, 3] = 0
    np.testing.assert_array_equal(design.C, expected_C)
    np.testing.assert_array_equal(design.M, TABLE1_M_ANCHORED_D)


def test_table1_interaction(table1):
    design = build_design(table1, ModelSpec.from_strings(interactions=["A:B"]))
    assert design.param_labels == ["A", "B", "C", "D", "E+F", "A:B"]
    np.testing.assert_array_equal(design.C[:, -1], [0, 0, 1, 0, 0])
    np.testing.assert_array_equal(design.M, TABLE1_M_INTERACTION_AB)


def test_unknown_anchor(table1):
    with pytest.raises(ConfigError, match="unknown parameter"):
        build_design(table1, ModelSpec(anchor="Z"))


def test_interaction_members_must_be_components(table1):
    with pytest.raises(ConfigError, match="unknown parameter"):
        build_design(table1, ModelSpec.from_strings(interactions=["A:D"]))


def test_malformed_interaction():
    with pytest.raises(ConfigError):
        ModelSpec.from_strings(interactions=["A"])


def test_encode_unobserved_combination(table1):
    catalog = derive_component_catalog(table1)
    np.testing.assert_array_equal(encode_combination("A+C", catalog, ModelSpec()), [1, 0, 1, 0, 0])
    np.testing.assert_array_equal(encode_combination("F+E", catalog, ModelSpec()), [0, 0, 0, 0, 1])
    with pytest.raises(LabelError):
        encode_combination("A+D", catalog, ModelSpec())
    with pytest.raises(LabelError):
        encode_combination("E", catalog, ModelSpec())


def test_contrast_vector_worked_examples(table1):
    catalog = derive_component_catalog(table1)
    np.testing.assert_array_equal(contrast_vector("A", "D", catalog, ModelSpec()).coefficients, [1, 0, 0, -1, 0])
    np.testing.assert_array_equal(contrast_vector("A+C", "D", catalog, ModelSpec()).coefficients,
                                  [1, 0, 1, -1, 0])
    np.testing.assert_array_equal(contrast_vector("D", "D", catalog, ModelSpec()).coefficients, np.zeros(5))


def test_contrast_vector_antisymmetric():
    catalog = derive_component_catalog(parse_contrast_csv(DATA / "cll.csv"))
    pool = list(catalog.components)
    specs = [ModelSpec(), ModelSpec.from_strings(anchor="Rit"), ModelSpec.from_strings(interactions=["Ibr:Ven"])]
    rng = np.random.default_rng(31)
    for _ in range(200):
        i, j = ("+".join(rng.choice(pool, size=int(rng.integers(1, 4)), replace=False)) for _ in range(2))
        for spec in specs:
            forward = contrast_vector(i, j, catalog, spec).coefficients
            backward = contrast_vector(j, i, catalog, spec).coefficients
            np.testing.assert_array_equal(forward, -backward)


@pytest.mark.parametrize("n_treatments", [2, 3, 5, 8])
def test_standalone_treatments_give_permutation_c(n_treatments):
    labels = [parse_treatment_label(f"T{k}") for k in range(n_treatments)]
    network = Network.from_contrasts(
        Contrast(f"s{k}", labels[k], labels[0], 0.0, 1.0) for k in range(1, n_treatments)
    )
    design = build_design(network)
    C = design.C
    assert set(np.unique(C)) <= {0, 1}
    np.testing.assert_array_equal(C.sum(axis=0), np.ones(n_treatments))
    np.testing.assert_array_equal(C.sum(axis=1), np.ones(n_treatments))
    np.testing.assert_array_equal(C.T @ C, np.eye(n_treatments, dtype=int))


def test_design_rows_equal_contrast_vectors(table1):
    """Row r of M is V_{treat1,treat2} of contrast r."""
    design = build_design(table1, ModelSpec.from_strings(interactions=["A:B"]))
    for row, contrast in zip(design.M, table1.contrasts):
        np.testing.assert_array_equal(row, design.vector(contrast.treat1, contrast.treat2).coefficients)


def test_dimension_mismatch():
    with pytest.raises(DataValidationError, match="dimension mismatch"):
        build_design_matrix(np.zeros((2, 3), dtype=int), np.zeros((4, 2), dtype=int))


def test_cll_matches_published_matrix():
    design = build_design(parse_contrast_csv(DATA / "cll.csv"))
    assert design.M.shape == (10, 8)
    assert design.param_labels[-1] == "Duv"
    reordered = matrix_frame(design, "M")[CLL_COLUMNS].to_numpy()
    np.testing.assert_array_equal(reordered, CLL_M)


def test_export_matrix_csv(tmp_path, table1):
    design = build_design(table1)
    path = export_matrix_csv(design, "M", tmp_path / "M.csv")
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["A", "B", "C", "D", "E+F"]
    np.testing.assert_array_equal(frame.to_numpy(), TABLE1_M)

    c_frame = pd.read_csv(export_matrix_csv(design, "C", tmp_path / "C.csv"), index_col=0)
    assert list(c_frame.index) == ["A", "D", "A+B", "B+C", "E+F"]

    with pytest.raises(ValueError, match="Unknown matrix"):
        matrix_frame(design, "X")
