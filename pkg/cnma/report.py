# JSON/CSV/SVG outputs and printed tables for fits, estimability checks, hierarchies and the network plot

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import orjson  # noqa: E402
import pandas as pd  # noqa: E402
from pydantic import ValidationError  # noqa: E402

from cnma.errors import DataValidationError  # noqa: E402
from cnma.estimability import EstimabilityReport  # noqa: E402
from cnma.fit import FitResult, RelativeEffect  # noqa: E402
from cnma.network import Network, treatment_subnetworks  # noqa: E402
from cnma.ranking import HierarchyReport, RankedElement  # noqa: E402

logger = logging.getLogger(__name__)

JSON_OPTIONS = orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY
FLOAT_FORMAT = "%.17g"

SVG_STYLE = {
    "svg.hashsalt": "cnma",
    "svg.fonttype": "none",
    "font.family": "DejaVu Sans",
    "font.size": 9,
}


def write_json(payload, path: Union[str, Path]) -> Path:
    """Byte-deterministic JSON (sorted keys, 2-space indent)."""
    path = Path(path)
    path.write_bytes(orjson.dumps(payload, option=JSON_OPTIONS) + b"\n")
    return path


def read_json(path: Union[str, Path]) -> Dict:
    path = Path(path)
    try:
        return orjson.loads(path.read_bytes())
    except orjson.JSONDecodeError as e:
        raise DataValidationError(f"{path} is not valid JSON: {e}")


def load_fit(path: Union[str, Path]) -> FitResult:
    return FitResult.from_dict(read_json(path))


def load_hierarchy(path: Union[str, Path]) -> HierarchyReport:
    try:
        return HierarchyReport.model_validate(read_json(path))
    except ValidationError as e:
        raise DataValidationError(f"{path} is not a hierarchy report: {e}")


def hierarchy_payload(report: HierarchyReport) -> Dict:
    return report.model_dump(mode="json")


def format_interval(estimate: Optional[float], low: Optional[float], high: Optional[float],
                    se: Optional[float] = None) -> str:
    """'-0.548 (-1.888, 0.792)', '0 (-,-)' for the reference, 'Not estimable' when withheld."""
    if estimate is None:
        return "Not estimable"
    if se == 0.0 and estimate == 0.0:
        return "0 (-,-)"
    return f"{estimate:.3f} ({low:.3f}, {high:.3f})"


def format_effect(effect: Union[RelativeEffect, RankedElement]) -> str:
    if isinstance(effect, RankedElement):
        return format_interval(effect.estimate, effect.ci[0], effect.ci[1], effect.se)
    return format_interval(effect.estimate, effect.ci_low, effect.ci_high, effect.se)


def hierarchy_frame(report: HierarchyReport) -> pd.DataFrame:
    """Ranked rows in hierarchy order followed by excluded rows."""
    records = [
        {
            "position": e.position,
            "label": e.label,
            "estimate": e.estimate,
            "se": e.se,
            "ci_low": e.ci[0],
            "ci_high": e.ci[1],
            "metric": e.metric,
            "status": "ranked",
        }
        for e in report.elements
    ]
    records += [
        {"position": None, "label": x.label, "estimate": None, "se": None, "ci_low": None, "ci_high": None,
         "metric": None, "status": x.reason}
        for x in report.exclusions
    ]
    frame = pd.DataFrame.from_records(
        records, columns=["position", "label", "estimate", "se", "ci_low", "ci_high", "metric", "status"]
    )
    frame["position"] = frame["position"].astype("Int64")
    return frame


def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def hierarchy_table_text(report: HierarchyReport) -> str:
    """Printed hierarchy: effect vs reference with CI, metric value, position; exclusions last."""
    metric = report.question.metric.value
    rows = [
        {"Treatment": e.label, f"vs {report.question.reference} (95% CI)": format_effect(e),
         metric: f"{e.metric:.3f}", "Position": str(e.position)}
        for e in report.elements
    ]
    rows += [
        {"Treatment": x.label, f"vs {report.question.reference} (95% CI)": "Not estimable", metric: "-",
         "Position": "-"}
        for x in report.exclusions
    ]
    lines = [pd.DataFrame(rows).to_string(index=False)]
    lines.append(f"|S*| = {report.set_size}, samples = {report.n_samples}, mode = {report.mode.value}, "
                 f"seed = {report.seed} ({report.provenance})")
    lines += [f"tie: {', '.join(group)}" for group in report.ties]
    lines += [f"warning: {w}" for w in report.warnings]
    return "\n".join(lines)


def estimability_table_text(report: EstimabilityReport) -> str:
    rows = [
        {"Element": e.label, f"vs {report.reference}": "estimable" if e.estimable else "Not estimable",
         "Note": e.error or ("fragile" if e.fragile else "")}
        for e in report.elements
    ]
    lines = [f"rank(M) = {report.rank_M}, p = {report.p}, fully identified: {report.fully_identified}"]
    if rows:
        lines.append(pd.DataFrame(rows).to_string(index=False))
    if report.components:
        lines.append("Component diagnostics:")
        lines += [f"  {c.label}: {'estimable' if c.estimable else 'Not estimable'}" for c in report.components]
    return "\n".join(lines)


def fit_summary_text(fit: FitResult) -> str:
    return (f"{fit.effects.value}-effects fit: rank(M) = {fit.rank_M}, p = {fit.p}, tau2 = {fit.tau2:.6g}, "
            f"Q = {fit.Q:.4f}, df = {fit.df}, contrasts = {fit.n_contrasts}")


def emit_forest_svg(report: HierarchyReport, path: Union[str, Path]) -> Path:
    """
    Forest plot of relative effects in hierarchy order with the metric in a right-hand column.

    Output bytes depend only on the report (fixed hash salt, no date metadata).
    """
    if not report.elements:
        raise DataValidationError("no ranked elements to plot")
    path = Path(path)
    elements = report.elements
    n = len(elements)
    metric = report.question.metric.value

    with plt.rc_context(SVG_STYLE):
        fig, ax = plt.subplots(figsize=(7.5, 0.35 * n + 1.2))
        y = list(range(n, 0, -1))
        for row, element in zip(y, elements):
            if element.se > 0:
                ax.plot([element.ci[0], element.ci[1]], [row, row], color="black", lw=1.0)
            ax.plot([element.estimate], [row], marker="s", markersize=5, color="black", linestyle="none")
        ax.axvline(0, color="gray", linestyle="--", lw=0.75)

        ax.set_yticks(y)
        ax.set_yticklabels([e.label for e in elements])
        ax.set_ylim(0.4, n + 0.6)
        ax.set_xlabel(f"Relative effect vs {report.question.reference} (95% CI)")

        ax2 = ax.twinx()
        ax2.set_ylim(ax.get_ylim())
        ax2.set_yticks(y)
        ax2.set_yticklabels([f"{e.metric:.3f}" for e in elements])
        ax2.set_ylabel(metric)
        ax.spines["top"].set_visible(False)
        ax2.spines["top"].set_visible(False)

        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)

    logger.info(f"Wrote forest plot with {n} rows to {path}")
    return path


def emit_network_svg(network: Network, path: Union[str, Path]) -> Path:
    """
    Network plot: treatments on a circle, one edge per compared pair with width
    growing with the number of studies, nodes coloured by connected subnetwork.
    """
    path = Path(path)
    treatments = network.treatments()
    if not treatments:
        raise DataValidationError("no treatments to plot")
    subnetworks = treatment_subnetworks(network)
    group = {t: k for k, members in enumerate(subnetworks) for t in members}

    n = len(treatments)
    angles = np.pi / 2 - 2 * np.pi * np.arange(n) / n
    position = {t: (float(np.cos(a)), float(np.sin(a))) for t, a in zip(treatments, angles)}

    studies: Dict[frozenset, set] = {}
    for contrast in network.contrasts:
        studies.setdefault(frozenset((contrast.treat1, contrast.treat2)), set()).add(contrast.study_id)

    palette = matplotlib.colormaps["tab10"]
    with plt.rc_context(SVG_STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 6.0))
        for k, t in enumerate(treatments):
            for u in treatments[k + 1:]:
                count = len(studies.get(frozenset((t, u)), ()))
                if count:
                    (x1, y1), (x2, y2) = position[t], position[u]
                    ax.plot([x1, x2], [y1, y2], color="gray", lw=0.75 + 0.75 * count, zorder=1)
        for t in treatments:
            x, y = position[t]
            ax.scatter([x], [y], s=120, color=palette(group[t] % 10), edgecolors="black", linewidths=0.5, zorder=2)
            ax.annotate(t.display, (x, y), xytext=(1.18 * x, 1.18 * y), ha="center", va="center")
        for k, members in enumerate(subnetworks):
            ax.scatter([], [], s=60, color=palette(k % 10), label=f"subnetwork {k + 1} ({len(members)})")

        ax.legend(loc="lower left", bbox_to_anchor=(0.0, -0.12), ncol=min(len(subnetworks), 3), frameon=False)
        ax.set_xlim(-1.5, 1.5)
        ax.set_ylim(-1.5, 1.5)
        ax.set_aspect("equal")
        ax.axis("off")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)

    logger.info(f"Wrote network plot with {n} treatments in {len(subnetworks)} subnetwork(s) to {path}")
    return path


def write_hierarchy_outputs(report: HierarchyReport, out_dir: Union[str, Path], formats: Sequence[str],
                            league: Optional[pd.DataFrame] = None, stem: str = "hierarchy") -> List[Path]:
    """Write the report in each requested format under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        written.append(write_json(hierarchy_payload(report), out_dir / f"{stem}.json"))
    if "csv" in formats:
        written.append(write_csv(hierarchy_frame(report), out_dir / f"{stem}.csv"))
        if league is not None:
            written.append(write_csv(league, out_dir / "league.csv"))
    if "svg" in formats:
        written.append(emit_forest_svg(report, out_dir / "forest.svg"))
    return written
