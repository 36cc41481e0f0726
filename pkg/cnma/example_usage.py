# Example usage of the CNMA library on the bundled chronic lymphocytic leukaemia network

import os
import sys
import traceback
from pathlib import Path

# Add the parent directory to the path to import the package
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from cnma.config import get_preset_config
from cnma.design import build_design
from cnma.errors import EstimabilityRefusal
from cnma.estimability import check_set, component_diagnostics
from cnma.fit import effect_versus, fit_model
from cnma.network import parse_contrast_csv, validate_network
from cnma.ranking import answer_question
from cnma.report import estimability_table_text, fit_summary_text, hierarchy_table_text

DATA = Path(__file__).parent / "data"
NOVEL_AGENTS = ["Duv", "Ibr", "Ide", "Ubl", "Ven"]


def example_fit():
    """Fit the common-effects additive model"""
    print("=== Model Fit Example ===")

    network = parse_contrast_csv(DATA / "cll.csv")
    for diagnostic in validate_network(network):
        print(f"[{diagnostic.severity}] {diagnostic.message}")

    design = build_design(network)
    fit = fit_model(design, network)
    print(fit_summary_text(fit))

    for label in ["Ubl", "Ide", "Ibr", "Ven"]:
        effect = effect_versus(fit, design, label, "Duv")
        print(f"{label} vs Duv: {effect.estimate if effect.estimable else 'Not estimable'}")

    return network, design, fit


def example_estimability(design):
    """Which treatments can be compared with Ben+Rit?"""
    print("\n=== Estimability Example ===")

    treatments = [t.display for t in design.catalog.treatments]
    report = check_set(design, treatments, "Ben+Rit")
    report.components = component_diagnostics(design)
    print(estimability_table_text(report))
    return report


def example_ranking(design, fit):
    """Rank the novel agents, first strictly, then over the estimable subset"""
    print("\n=== Ranking Example ===")

    config = get_preset_config("case-study")
    try:
        answer_question(design, fit, NOVEL_AGENTS, reference="Duv", metric="expected-rank")
    except EstimabilityRefusal as e:
        print(f"Refused: {e.detail}")

    report = answer_question(
        design,
        fit,
        NOVEL_AGENTS,
        reference="Duv",
        metric="expected-rank",
        n_samples=config.get("n_samples"),
        seed=config.get("seed"),
        mode=config.get("sampling_mode"),
        exclude_inestimable=True,
    )
    print(hierarchy_table_text(report))
    return report


def main():
    """Run all examples"""
    try:
        _, design, fit = example_fit()
        example_estimability(design)
        example_ranking(design, fit)
    except Exception as e:
        print(f"Example failed: {e}")
        traceback.print_exc()


if __name__ == "__main__":
    main()
