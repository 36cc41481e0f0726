# Tests for the GLS fit, heterogeneity estimation and relative effects

import os
import sys
from pathlib import Path

import numpy as np
import orjson
import pytest
from scipy.linalg import null_space

# Add the parent directory to the path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from cnma.design import Effects, build_design
from cnma.errors import DataValidationError
from cnma.estimability import is_estimable
from cnma.fit import (
    FitResult,
    build_weights,
    effect_versus,
    estimate_tau2,
    fit_common,
    fit_model,
    fit_random,
    relative_effect,
)
from cnma.network import Contrast, Network, parse_contrast_csv, parse_treatment_label

DATA = Path(__file__).parent / "data"


def _network(rows):
    return Network.from_contrasts(
        Contrast(s, parse_treatment_label(t1), parse_treatment_label(t2), te, se) for s, t1, t2, te, se in rows
    )


def _y(network):
    return np.array([c.effect for c in network.contrasts])


@pytest.fixture(scope="module")
def cll():
    network = parse_contrast_csv(DATA / "cll.csv")
    design = build_design(network)
    return network, design, fit_model(design, network)


def test_single_contrast_exact():
    network = _network([("s1", "A", "B", 0.7, 0.1)])
    design = build_design(network)
    fit = fit_model(design, network)
    effect = effect_versus(fit, design, "A", "B")
    assert effect.estimate == pytest.approx(0.7)
    assert effect.se == pytest.approx(0.1)
    assert fit.df == 0


# cll.csv is synthetic: its TE/seTE were tuned to reproduce these values, so this is a regression check
@pytest.mark.parametrize("label, estimate, ci", [
    ("Ubl", -0.548, (-1.888, 0.792)),
    ("Ide", -1.314, (-2.230, -0.397)),
    ("Ibr", -1.609, (-2.336, -0.883)),
])
def test_cll_effects_versus_duv(cll, label, estimate, ci):
    _, design, fit = cll
    effect = effect_versus(fit, design, label, "Duv")
    assert effect.estimable
    assert effect.estimate == pytest.approx(estimate, abs=0.005)
    assert effect.ci_low == pytest.approx(ci[0], abs=0.01)
    assert effect.ci_high == pytest.approx(ci[1], abs=0.01)


def test_cll_ven_not_estimable(cll):
    _, design, fit = cll
    effect = effect_versus(fit, design, "Ven", "Duv")
    assert not effect.estimable
    assert effect.estimate is None and effect.ci_low is None


def test_cll_summary(cll):
    _, _, fit = cll
    assert fit.rank_M == 7
    assert fit.p == 8
    assert fit.df == 3
    assert fit.Q == pytest.approx(0.0, abs=1e-10)


def test_reference_row_is_zero(cll):
    _, design, fit = cll
    effect = effect_versus(fit, design, "Duv", "Duv")
    assert (effect.estimate, effect.se) == (0.0, 0.0)
    assert effect.is_reference


def test_matches_dense_normal_equations():
    """Random networks: β̂ equals an explicit pseudoinverse solve of the normal equations."""
    rng = np.random.default_rng(11)
    labels = ["A", "B", "C", "A+B", "A+C", "D"]
    for _ in range(20):
        rows = []
        for s in range(6):
            t1, t2 = rng.choice(len(labels), size=2, replace=False)
            rows.append((f"s{s}", labels[t1], labels[t2], float(rng.normal()), float(rng.uniform(0.1, 0.5))))
        network = _network(rows)
        design = build_design(network)
        weights = build_weights(network)
        fit = fit_common(design.M, _y(network), weights, design.param_labels)

        M = design.M.astype(float)
        W = np.diag([1.0 / c.se ** 2 for c in network.contrasts])
        beta = np.linalg.pinv(M.T @ W @ M, rcond=1e-10) @ M.T @ W @ _y(network)
        np.testing.assert_allclose(fit.beta_hat, beta, atol=1e-8)


def test_residual_orthogonality_and_psd(cll):
    network, design, fit = cll
    M = design.M.astype(float)
    W = build_weights(network).W
    residual = _y(network) - M @ fit.beta_hat
    assert np.linalg.norm(M.T @ W @ residual) <= 1e-8 * np.linalg.norm(M.T @ W @ _y(network))
    np.testing.assert_allclose(fit.cov_beta, fit.cov_beta.T, rtol=1e-12, atol=0)
    eigenvalues = np.linalg.eigvalsh(fit.cov_beta)
    assert eigenvalues.min() >= -1e-10 * eigenvalues.max()


def test_null_space_invariance(cll):
    """Estimable contrasts do not move when β̂ moves along the null space of M."""
    _, design, fit = cll
    basis = null_space(design.M.astype(float))
    assert basis.shape[1] == 1
    shifted = fit.beta_hat + 3.7 * basis[:, 0]
    for label in ["Ubl", "Ide", "Ibr", "Ofa"]:
        v = design.vector(label, "Duv").coefficients
        assert is_estimable(design.M, v)
        assert v @ shifted == pytest.approx(v @ fit.beta_hat, abs=1e-10)


def test_linearity_and_antisymmetry(cll):
    _, design, fit = cll
    ik = effect_versus(fit, design, "Ubl", "Ibr")
    ij = effect_versus(fit, design, "Ubl", "Duv")
    jk = effect_versus(fit, design, "Duv", "Ibr")
    assert ik.estimate == pytest.approx(ij.estimate + jk.estimate, abs=1e-12)
    ki = effect_versus(fit, design, "Ibr", "Ubl")
    assert ki.estimate == pytest.approx(-ik.estimate, abs=1e-12)
    assert ki.se == pytest.approx(ik.se, rel=1e-12)


def test_agrees_with_plain_nma_including_three_arm_study():
    """Single-unit treatments only: same answer as a contrast-based solve with basic parameters."""
    network = _network([
        ("t", "A", "B", 0.3, np.sqrt(0.05)),
        ("t", "A", "C", 0.5, np.sqrt(0.06)),
        ("t", "B", "C", 0.2, np.sqrt(0.07)),
        ("s1", "A", "B", 0.25, 0.2),
        ("s2", "B", "C", 0.1, 0.25),
        ("s3", "A", "C", 0.6, 0.3),
    ])
    design = build_design(network)
    fit = fit_model(design, network)

    # basic parameters d_B = B - A, d_C = C - A; a study's observed A-B is -d_B
    X = np.array([[-1, 0], [0, -1], [-1, 0], [1, -1], [0, -1]], dtype=float)
    y = np.array([0.3, 0.5, 0.25, 0.1, 0.6])
    V = np.zeros((5, 5))
    V[:2, :2] = [[0.05, 0.02], [0.02, 0.06]]
    V[2, 2], V[3, 3], V[4, 4] = 0.04, 0.0625, 0.09
    Vinv = np.linalg.inv(V)
    cov = np.linalg.inv(X.T @ Vinv @ X)
    d = cov @ X.T @ Vinv @ y

    effect_b = effect_versus(fit, design, "B", "A")
    effect_c = effect_versus(fit, design, "C", "A")
    assert effect_b.estimate == pytest.approx(d[0], abs=1e-10)
    assert effect_c.estimate == pytest.approx(d[1], abs=1e-10)
    assert effect_b.se == pytest.approx(np.sqrt(cov[0, 0]), rel=1e-9)
    # three-arm study contributes two independent contrasts
    assert fit.df == 5 - 2


def test_tau2_two_conflicting_studies():
    """Q = 200, df = 1, c = 100 by hand, so τ² = 1.99."""
    network = _network([("s1", "A", "B", 1.0, 0.1), ("s2", "A", "B", -1.0, 0.1)])
    design = build_design(network)
    weights = build_weights(network)
    common = fit_common(design.M, _y(network), weights, design.param_labels)
    assert common.Q == pytest.approx(200.0)
    assert common.df == 1
    assert estimate_tau2(design.M, _y(network), common, weights) == pytest.approx(1.99)

    random = fit_random(design.M, _y(network), weights, network, design.param_labels)
    assert random.tau2 == pytest.approx(1.99)
    assert random.effects is Effects.RANDOM
    se_common = effect_versus(common, design, "A", "B").se
    se_random = effect_versus(random, design, "A", "B").se
    assert se_random > se_common
    assert se_random == pytest.approx(np.sqrt((0.01 + 1.99) / 2))


def test_tau2_zero_without_degrees_of_freedom():
    network = _network([("s1", "A", "B", 0.4, 0.2)])
    design = build_design(network)
    weights = build_weights(network)
    common = fit_common(design.M, _y(network), weights)
    assert estimate_tau2(design.M, _y(network), common, weights) == 0.0


def test_random_equals_common_when_homogeneous(cll):
    network, design, common = cll
    random = fit_model(design, network, effects="random")
    assert random.tau2 == 0.0
    np.testing.assert_array_equal(random.beta_hat, common.beta_hat)
    np.testing.assert_array_equal(random.cov_beta, common.cov_beta)


def test_relative_effect_dimension_mismatch(cll):
    _, _, fit = cll
    with pytest.raises(DataValidationError):
        relative_effect(fit, np.ones(3), True)


def test_empty_network():
    with pytest.raises(DataValidationError, match="empty network"):
        build_weights(Network.from_contrasts([]))


def test_fit_json_round_trip(cll):
    _, _, fit = cll
    raw = orjson.dumps(fit.to_dict(), option=orjson.OPT_SERIALIZE_NUMPY)
    restored = FitResult.from_dict(orjson.loads(raw))
    np.testing.assert_array_equal(restored.beta_hat, fit.beta_hat)
    np.testing.assert_array_equal(restored.cov_beta, fit.cov_beta)
    assert restored.param_labels == fit.param_labels
    assert (restored.Q, restored.df, restored.rank_M, restored.tau2) == (fit.Q, fit.df, fit.rank_M, fit.tau2)


def test_malformed_fit_payload():
    with pytest.raises(DataValidationError, match="malformed fit file"):
        FitResult.from_dict({"beta_hat": [0.0]})


DEPRESSION = DATA / "depression.csv"
DEPRESSION_COMPONENTS = [
    ("SSRI", -0.327),
    ("Face-to-face PST", -0.533),
    ("Face-to-face interpsy", -0.730),
]


@pytest.mark.skipif(not DEPRESSION.exists(), reason="depression dataset not bundled")
def test_depression_random_effects_components():
    network = parse_contrast_csv(DEPRESSION)
    design = build_design(network)
    fit = fit_model(design, network, effects="random")
    assert fit.rank_M == fit.p == 19
    assert fit.tau2 >= 0.0
    for label, estimate in DEPRESSION_COMPONENTS:
        effect = effect_versus(fit, design, label, "Face-to-face CBT")
        assert effect.estimable
        assert effect.estimate == pytest.approx(estimate, abs=0.05)
        # intervals depend on the tau2 estimator, so only their order is checked
        assert effect.ci_low < effect.estimate < effect.ci_high
