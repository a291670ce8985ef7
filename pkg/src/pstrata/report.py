"""Summary tables and static figures for an estimate directory."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

__all__ = ["summary_table", "render_figures", "coverage"]

_ARM_COLORS = {0: "#1f5fa8", 1: "#c0392b"}
_PNG_META = {"Software": None}


def coverage(panel: dict) -> int | None:
    """Grid points at which the credible band contains the true curve."""
    if "truth" not in panel:
        return None
    t = panel["truth"]
    return int(np.sum((panel["lo"] <= t + 1e-12) & (t - 1e-12 <= panel["hi"])))


def _pick_times(times: np.ndarray, n: int) -> list[int]:
    """Indices of ``n`` evenly spread grid points, excluding t = 0."""
    targets = times[-1] * np.arange(1, n + 1) / n
    return sorted({int(np.argmin(np.abs(times - t))) for t in targets})


def summary_table(summary: dict, panels: dict, effects: dict, n_times: int = 4):
    """Rows for ``summary.csv`` and a fixed-width text rendering of the same."""
    header = ["section", "stratum", "arm", "time", "mean", "lo", "hi", "truth", "covered"]
    rows = []
    for label, share in summary["strata_proportions"].items():
        rows.append(["proportion", label, "", "", share, "", "", "", ""])
    for (s, z), p in panels.items():
        for j in _pick_times(p["time"], n_times):
            tv = p["truth"][j] if "truth" in p else ""
            cov = "" if tv == "" else int(p["lo"][j] <= tv <= p["hi"][j])
            rows.append(["survival", s.label, z, p["time"][j], p["mean"][j], p["lo"][j],
                         p["hi"][j], tv, cov])
        c = coverage(p)
        if c is not None:
            rows.append(["coverage", s.label, z, "", c, "", "", p["time"].size, ""])
    for (kind, s), e in effects.items():
        for j in _pick_times(e["time"], n_times):
            rows.append([kind, "all" if s is None else s.label, "", e["time"][j],
                         e["mean"][j], e["lo"][j], e["hi"][j], "", ""])

    def cell(v):
        if isinstance(v, (float, np.floating)):
            return f"{v:.4f}"
        return str(v)

    widths = [max(len(h), *(len(cell(r[i])) for r in rows)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(cell(v).ljust(w) for v, w in zip(r, widths)) for r in rows]
    level = summary.get("level", 0.95)
    intro = (f"Posterior summaries: {summary['n_draws']} draws, {int(level * 100)}% "
             f"equal-tailed intervals, family {summary['family']}, exclusion restriction "
             f"{'on' if summary['exclusion_restriction'] else 'off'}.\n")
    return header, rows, intro + "\n".join(lines) + "\n"


def _save(fig: Figure, path: Path) -> Path:
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    return path


def _survival_figure(panels: dict, strata: list) -> Figure:
    fig = Figure(figsize=(7.5, 2.4 * len(strata)), layout="constrained")
    axes = fig.subplots(len(strata), 2, sharex=True, sharey=True, squeeze=False)
    for r, s in enumerate(strata):
        for z in (0, 1):
            ax = axes[r, z]
            p = panels[(s, z)]
            ax.fill_between(p["time"], p["lo"], p["hi"], color=_ARM_COLORS[z], alpha=0.25,
                            lw=0)
            ax.plot(p["time"], p["mean"], color=_ARM_COLORS[z], lw=1.5, label="posterior mean")
            if "truth" in p:
                ax.plot(p["time"], p["truth"], color="black", lw=1.0, ls="--", label="truth")
            ax.set_title(f"{s.label.replace('_', ' ')}, z = {z}", fontsize=9)
            ax.set_ylim(-0.02, 1.02)
            if z == 0:
                ax.set_ylabel("Pr(T > t)")
            if r == len(strata) - 1:
                ax.set_xlabel("t")
    axes[0, 0].legend(fontsize=7, frameon=False, loc="lower left")
    return fig


def _effects_figure(effects: dict, strata: list) -> Figure:
    kinds = [k for k in ("spce", "race") if any(key[0] == k for key in effects)]
    cols = strata + ([None] if any(s is None for _, s in effects) else [])
    fig = Figure(figsize=(2.4 * len(cols), 2.3 * len(kinds)), layout="constrained")
    axes = fig.subplots(len(kinds), len(cols), sharex=True, squeeze=False)
    for r, kind in enumerate(kinds):
        for c, s in enumerate(cols):
            ax = axes[r, c]
            e = effects.get((kind, s))
            if e is None:
                ax.set_axis_off()
                continue
            ax.axhline(0.0, color="0.6", lw=0.8)
            ax.fill_between(e["time"], e["lo"], e["hi"], color="#6c3483", alpha=0.25, lw=0)
            ax.plot(e["time"], e["mean"], color="#6c3483", lw=1.5)
            name = "ITT" if s is None else s.label.replace("_", " ")
            ax.set_title(f"{kind.upper()}: {name}", fontsize=9)
            if r == len(kinds) - 1:
                ax.set_xlabel("t")
    return fig


def _km_figure(km: dict) -> Figure:
    fig = Figure(figsize=(4.5, 3.2), layout="constrained")
    ax = fig.subplots()
    for z, arr in km.items():
        if arr.size:
            ax.step(arr[:, 0], arr[:, 1], where="post", color=_ARM_COLORS[z], label=f"z = {z}")
    ax.set_xlabel("t")
    ax.set_ylabel("Kaplan-Meier survival")
    ax.legend(frameon=False, fontsize=8)
    return fig


def render_figures(out: Path, panels: dict, effects: dict, km: dict | None,
                   summary: dict) -> list[Path]:
    """Write PNG figures next to the tabular report files."""
    from .data import Stratum

    strata = [Stratum.parse(s) for s in summary["strata"]]
    files = [_save(_survival_figure(panels, strata), out / "survival_panels.png")]
    if effects:
        files.append(_save(_effects_figure(effects, strata), out / "effects.png"))
    if km is not None:
        files.append(_save(_km_figure(km), out / "km.png"))
    return files
