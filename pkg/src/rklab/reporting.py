"""Report emission: JSON, CSV, plain-text tables and figure files.

JSON reports contain no timestamps and are serialised with sorted keys, so
identical (config, seed) runs produce byte-identical files regardless of
worker count.  Figures are rendered next to the delimited output on the
report path; a rendering failure degrades to a warning and never affects
verdicts or exit codes.
"""

from __future__ import annotations

import csv
import logging
import os

from .diagnostics import SweepResult
from .stats import ComparisonReport

log = logging.getLogger("rklab")


def report_table(report: ComparisonReport) -> str:
    lines = [
        f"== {report.test_id}  seed={report.seed}  "
        f"n_lhs={report.n_lhs} n_rhs={report.n_rhs}"
        + (f"  ess={report.ess:.1f}" if report.ess is not None else ""),
        f"{'statistic':<34} {'lhs':>12} {'rhs':>12} {'se':>10} {'z':>8}",
    ]
    for row in report.rows:
        mark = "" if row.gating else "  (info)"
        lines.append(
            f"{row.statistic:<34} {row.lhs:>12.6g} {row.rhs:>12.6g} "
            f"{row.se:>10.3g} {row.z:>8.2f}{mark}"
        )
    verdict = "PASS" if report.verdict else "FAIL"
    lines.append(f"verdict: {verdict} (max |z| = {report.max_abs_z():.2f}, "
                 f"z_max = {report.z_max})")
    return "\n".join(lines)


def sweep_table(sweep: SweepResult) -> str:
    lines = [
        f"== {sweep.sweep_id}  seed={sweep.seed}  replicates={sweep.replicates}",
        f"{'scale':>10} {'median ratio':>14} {'target':>8}",
    ]
    for scale, ratio in zip(sweep.scales, sweep.ratios):
        lines.append(f"{scale:>10.6g} {ratio:>14.6g} {sweep.target:>8.3g}")
    band = "inside" if sweep.within_band else "outside"
    lines.append(
        f"finest-scale median {sweep.finest_median:.4g} is {band} the "
        "informational factor-2 band (not gated)"
    )
    return "\n".join(lines)


def write_report_json(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())


def write_sweep_json(sweep: SweepResult, path):
    import json

    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(sweep.to_dict(), indent=2, sort_keys=True) + "\n")


def write_sweep_csv(sweep: SweepResult, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scale", "statistic", "target", "replicates", "seed"])
        for row in sweep.csv_rows():
            writer.writerow(row)


def write_potentials_csv(pot, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "column", "value"])
        for x in pot.states:
            for y in pot.states:
                writer.writerow([x, y, repr(pot.value(x, y))])


def _figure_path(output_path, suffix):
    stem, _ = os.path.splitext(output_path)
    return f"{stem}_{suffix}.png"


def render_report_figure(report: ComparisonReport, output_path) -> str | None:
    """z-score chart next to the JSON report; best effort."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        rows = report.rows
        labels = [r.statistic for r in rows]
        zs = [r.z for r in rows]
        colors = ["#b8413e" if (abs(r.z) > report.z_max and r.gating)
                  else ("#888888" if not r.gating else "#3a6ea5")
                  for r in rows]
        fig, ax = plt.subplots(
            figsize=(8, max(2.5, 0.28 * len(rows) + 1.2))
        )
        ax.barh(range(len(rows)), zs, color=colors)
        ax.axvline(report.z_max, color="#b8413e", ls="--", lw=1)
        ax.axvline(-report.z_max, color="#b8413e", ls="--", lw=1)
        ax.set_yticks(range(len(rows)))
        ax.set_yticklabels(labels, fontsize=7)
        ax.invert_yaxis()
        ax.set_xlabel("z score")
        ax.set_title(f"{report.test_id} (seed {report.seed})")
        fig.tight_layout()
        path = _figure_path(output_path, "z")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        return path
    except Exception as exc:  # non-gating by design
        log.warning("figure rendering failed: %s", exc)
        return None


def render_sweep_figure(sweep: SweepResult, output_path) -> str | None:
    """ratio-vs-scale curve with the factor-2 band; best effort."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(sweep.scales, sweep.ratios, "o-", color="#3a6ea5",
                label="median ratio")
        ax.axhline(sweep.target, color="#444444", lw=1, label="target")
        ax.axhspan(sweep.target / 2, sweep.target * 2, color="#3a6ea5",
                   alpha=0.12, label="factor-2 band (informational)")
        ax.set_xscale("log")
        ax.set_xlabel("scale")
        ax.set_ylabel("ratio")
        ax.set_title(f"{sweep.sweep_id} (seed {sweep.seed}, "
                     f"{sweep.replicates} replicates)")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = _figure_path(output_path, "ratio")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        return path
    except Exception as exc:
        log.warning("figure rendering failed: %s", exc)
        return None
