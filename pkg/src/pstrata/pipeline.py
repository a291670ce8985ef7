"""Pipeline stages behind the command-line interface.

Each stage reads and writes plain files in an output directory, stamps every
artifact with the run metadata, and returns a :class:`StageResult` listing
what was written and any warnings worth a nonzero exit status.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .artifacts import (
    ArtifactError,
    file_sha256,
    read_draws_binary,
    read_json,
    read_meta,
    read_table,
    write_draws_binary,
    write_draws_csv,
    write_json,
    write_table,
    write_traces,
)
from .config import ConfigError, DataSource, RunConfig, load_config
from .data import CsvSchema, DataError, Dataset, Stratum, load_csv, validate_consistency, write_csv
from .diagnostics import summarize_chains
from .estimands import (
    EstimandError,
    PosteriorModel,
    default_grid,
    itt_aggregate,
    kaplan_meier,
    race_closed_form,
    race_numerical,
    spce,
)
from .likelihood import LogPosterior
from .model import ParamLayout
from .sampler import run_chains
from .simulate import PRESETS, SimScenario, generate, load_preset, scenario_from_dict, \
    write_ground_truth

__all__ = [
    "StageResult",
    "RHAT_WARNING",
    "run_simulate",
    "run_fit",
    "run_estimate",
    "run_report",
    "run_verify",
    "resolve_scenario",
]

log = logging.getLogger(__name__)

RHAT_WARNING = 1.05
CONFIG_FILE = "config.yaml"


@dataclass
class StageResult:
    out_dir: Path
    files: list[Path] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    details: dict = field(default_factory=dict)


def _prepare_dir(path: str | Path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc.strerror}") from exc
    probe = out / ".pstrata-write-test"
    try:
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc.strerror}") from exc
    return out


def _write_config(cfg: RunConfig, out: Path) -> Path:
    path = out / CONFIG_FILE
    text = f"# config_hash: {cfg.hash()}\n# version: {__version__}\n" + cfg.to_yaml()
    path.write_text(text, encoding="utf-8")
    return path


def _meta(cfg: RunConfig, stage: str, inputs: dict | None = None) -> dict:
    m = {**cfg.metadata(), "stage": stage}
    if inputs:
        m["inputs"] = inputs
    return m


# ---------------------------------------------------------------- simulate

def resolve_scenario(spec) -> SimScenario:
    """Scenario from a preset name, a ``{"preset": ..., **overrides}`` block or a full dict."""
    if isinstance(spec, SimScenario):
        return spec
    if isinstance(spec, str):
        if spec in PRESETS:
            return load_preset(spec)
        path = Path(spec)
        if not path.exists():
            raise ConfigError(f"unknown preset {spec!r}; available presets: "
                              f"{', '.join(PRESETS)}")
        d = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        spec = d.get("simulation", d)
    if not isinstance(spec, dict):
        raise ConfigError("simulation block must be a preset name or a mapping")
    spec = dict(spec)
    preset = spec.pop("preset", None)
    try:
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; available presets: "
                                  f"{', '.join(PRESETS)}")
            return load_preset(preset, **spec)
        return scenario_from_dict(spec)
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid scenario: {exc}") from exc


def run_simulate(cfg: RunConfig, out_dir: str | Path | None = None) -> StageResult:
    if cfg.simulation is None:
        raise ConfigError("simulate needs a preset (--preset) or a simulation block")
    scenario = replace(resolve_scenario(cfg.simulation), seed=cfg.seed)
    out = _prepare_dir(out_dir or cfg.output)
    data, truth = generate(scenario)
    data_path = (out / "data.csv").resolve()
    # the snapshot carries the fully expanded scenario and points at the new data
    snap = replace(cfg, simulation=scenario.to_dict(),
                   data=DataSource(str(data_path),
                                   CsvSchema(covariates=tuple(scenario.covariate_names)),
                                   cfg.data.standardize),
                   output=str(out))
    meta = _meta(snap, "simulate")
    header = [f"{k}: {v}" for k, v in sorted(meta.items())]
    files = [write_csv(data, data_path, header_lines=header),
             write_ground_truth(truth, out / "truth.csv", header_lines=header),
             _write_config(snap, out)]
    log.info("simulated %d units (%.1f%% events) into %s", data.n,
             100 * (1 - np.mean(data.delta)), out)
    return StageResult(out, files, details={"config": snap, "n": data.n,
                                            "event_rate": float(1 - np.mean(data.delta))})


# ---------------------------------------------------------------- fit

def _load_data(cfg: RunConfig) -> tuple[Dataset, Path]:
    if not cfg.data.path:
        raise ConfigError("no data file given (--data or data.path in the config)")
    path = Path(cfg.data.path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    return load_csv(path, cfg.data.schema, standardize=cfg.data.standardize), path


def _layout(cfg: RunConfig, data: Dataset) -> ParamLayout:
    return ParamLayout(cfg.strata, data.covariate_names, cfg.family)


def run_fit(cfg: RunConfig, out_dir: str | Path | None = None) -> StageResult:
    data, data_path = _load_data(cfg)
    problems = validate_consistency(data, cfg.strata)
    errors = [p for p in problems if p.level == "error"]
    if errors:
        raise DataError("data inconsistent with the strata configuration:\n  "
                        + "\n  ".join(str(p) for p in errors))
    warnings = [str(p) for p in problems if p.level != "error"]
    out = _prepare_dir(out_dir or cfg.output)
    cfg = replace(cfg, data=replace(cfg.data, path=str(data_path.resolve())), output=str(out))
    layout = _layout(cfg, data)
    target = LogPosterior(data, layout, cfg.prior)
    draws = run_chains(target, cfg.hmc_seeded())
    diag = summarize_chains(draws.draws, draws.names)
    meta = _meta(cfg, "fit", {str(data_path.resolve()): file_sha256(data_path)})

    n_div = int(draws.divergence_count.sum())
    if n_div:
        warnings.append(f"{n_div} divergent transitions after warmup")
    if not diag.max_rhat < RHAT_WARNING:
        worst = diag.names[int(np.argmax(diag.rhat))]
        warnings.append(f"max split R-hat {diag.max_rhat:.3f} ({worst}) exceeds {RHAT_WARNING}")
    payload = {
        "layout": layout.descriptor(),
        "layout_hash": layout.hash(),
        "chains": int(draws.n_chains),
        "draws_per_chain": int(draws.draws.shape[1]),
        "accept_stats": draws.accept_stats.tolist(),
        "divergence_count": draws.divergence_count.tolist(),
        "warmup_divergences": draws.warmup_divergences.tolist(),
        "step_size": draws.step_size.tolist(),
        "log_posterior_mean": draws.log_posterior.mean(axis=1).tolist(),
        "diagnostics": diag.to_dict(),
        "posterior_mean": dict(zip(draws.names, draws.flat().mean(axis=0).tolist())),
        "warnings": warnings,
    }
    files = [write_draws_csv(draws, out / "draws.csv", meta),
             write_draws_binary(draws, out / "draws.bin", meta),
             write_json(out / "diagnostics.json", payload, meta),
             write_traces(draws, out / "traces.csv", meta),
             _write_config(cfg, out)]
    log.info("fit done: max R-hat %.4f, min ESS %.0f, %d divergences", diag.max_rhat,
             diag.min_ess, n_div)
    return StageResult(out, files, warnings,
                       {"draws": draws, "diagnostics": diag, "config": cfg, "data": data})


# ---------------------------------------------------------------- estimate

def _summary_rows(curve, level):
    s = curve.summary(level)
    return s, zip(curve.times, s.mean, s.lo, s.hi)


def run_estimate(cfg: RunConfig, fit_dir: str | Path,
                 out_dir: str | Path | None = None) -> StageResult:
    fit_dir = Path(fit_dir)
    bin_path = fit_dir / "draws.bin"
    if not bin_path.is_file():
        raise ArtifactError(f"no draws found: {bin_path}")
    draws = read_draws_binary(bin_path)
    data, data_path = _load_data(cfg)
    layout = _layout(cfg, data)
    if draws.layout_hash != layout.hash():
        raise ConfigError("parameter layout of the draws does not match the estimating "
                          "configuration (strata, exclusion restriction, family or "
                          "covariates differ from the fit)")
    est = cfg.estimands
    if est.max_draws is not None and draws.n_draws > est.max_draws:
        draws = draws.thin(est.max_draws)
    out = _prepare_dir(out_dir or fit_dir / "estimates")
    cfg = replace(cfg, output=str(out))
    meta = _meta(cfg, "estimate", {str(data_path.resolve()): file_sha256(data_path),
                                   str(bin_path.resolve()): file_sha256(bin_path)})
    model = PosteriorModel(data, draws.flat(), layout)
    grid = default_grid(data, est.points, est.t_max)
    strata = cfg.strata.active_strata
    kinds = set(est.kinds)
    files, warnings, exclusions = [], [], {}
    head = ["stratum", "arm", "time", "mean", "lo", "hi"]

    curves = {}
    for s in strata:
        for z in (0, 1):
            c = model.survival_curve(s, z, grid)
            curves[(s, z)] = c
            exclusions[f"{s.label}_z{z}"] = c.n_excluded
            if c.n_excluded:
                warnings.append(f"{c.n_excluded} draws excluded from G(t; {s.label}, {z}): "
                                "stratum probability underflows")
            if "survival" in kinds:
                _, rows = _summary_rows(c, est.level)
                files.append(write_table(out / f"survival_{s.label}_z{z}.csv", head,
                                         ([s.label, z, *r] for r in rows), meta))
                if est.per_draw:
                    files.append(write_table(
                        out / f"survival_draws_{s.label}_z{z}.csv",
                        ["draw", *[f"t{j}" for j in range(grid.size)]],
                        ([m, *v] for m, v in enumerate(c.per_draw_values)), meta))

    effects = {"SPCE": {}, "RACE": {}}
    for s in strata:
        if kinds & {"spce", "itt"}:
            effects["SPCE"][s] = spce(curves[(s, 1)], curves[(s, 0)])
        if kinds & {"race", "itt"}:
            if est.integration == "closed":
                effects["RACE"][s] = race_closed_form(model, s, grid)
            else:
                effects["RACE"][s] = race_numerical(curves[(s, 1)], curves[(s, 0)], grid,
                                                    est.k, est.integration)
    ehead = ["stratum", "kind", "time", "mean", "lo", "hi"]
    for kind, per in effects.items():
        if kind.lower() not in kinds:
            continue
        for s, e in per.items():
            _, rows = _summary_rows(e, est.level)
            files.append(write_table(out / f"{kind.lower()}_{s.label}.csv", ehead,
                                     ([s.label, kind, *r] for r in rows), meta))

    props = model.strata_proportions()
    if "itt" in kinds:
        for kind, per in effects.items():
            agg = itt_aggregate(per, props, strata)
            _, rows = _summary_rows(agg, est.level)
            files.append(write_table(out / f"itt_{kind.lower()}.csv", ehead,
                                     (["all", kind, *r] for r in rows), meta))

    if "km" in kinds:
        km_rows = []
        for z in (0, 1):
            try:
                km = kaplan_meier(data, z)
            except EstimandError:
                warnings.append(f"arm z={z} is empty; no Kaplan-Meier curve")
                continue
            km_rows.append([z, 0.0, 1.0, 0.0, int(np.sum(data.z == z)), 0])
            km_rows.extend([z, t, sv, v, int(r), int(e)] for t, sv, v, r, e in
                           zip(km.times, km.survival, km.variance, km.n_risk, km.n_event))
        files.append(write_table(out / "km.csv",
                                 ["arm", "time", "survival", "variance", "n_risk", "n_event"],
                                 km_rows, meta))

    tail = (1 - est.level) / 2
    lo, hi = np.quantile(props, [tail, 1 - tail], axis=0)
    files.append(write_table(out / "strata.csv", ["stratum", "mean", "lo", "hi"],
                             ([s.label, props[:, k].mean(), lo[k], hi[k]]
                              for k, s in enumerate(strata)), meta))
    summary = {
        "layout_hash": layout.hash(),
        "strata": [s.label for s in strata],
        "exclusion_restriction": cfg.strata.exclusion_restriction,
        "family": cfg.family,
        "grid": {"points": int(grid.size), "t_max": float(grid[-1])},
        "integration": est.integration,
        "k": est.k,
        "level": est.level,
        "n_draws": int(model.n_draws),
        "exclusions": exclusions,
        "strata_proportions": {s.label: float(props[:, k].mean())
                               for k, s in enumerate(strata)},
        "kinds": sorted(kinds),
        "warnings": warnings,
    }
    files.append(write_json(out / "summary.json", summary, meta))
    files.append(_write_config(cfg, out))
    return StageResult(out, files, warnings,
                       {"model": model, "curves": curves, "effects": effects,
                        "proportions": props, "grid": grid})


# ---------------------------------------------------------------- report

def _load_curve_table(path: Path) -> dict:
    _, header, rows = read_table(path)
    cols = {h: i for i, h in enumerate(header)}
    return {k: np.array([float(r[cols[k]]) for r in rows]) for k in ("time", "mean", "lo", "hi")}


def run_report(est_dir: str | Path, out_dir: str | Path | None = None, truth=None,
               figures: bool = True, quantile_times: int = 4) -> StageResult:
    """Panel data, summary tables and figures from an estimate directory."""
    from .report import render_figures, summary_table

    est_dir = Path(est_dir)
    summary_path = est_dir / "summary.json"
    if not summary_path.is_file():
        raise ArtifactError(f"no estimate outputs in {est_dir} (summary.json missing)")
    summary = read_json(summary_path)
    meta = {**summary["meta"], "stage": "report",
            "inputs": {str(summary_path.resolve()): file_sha256(summary_path)}}
    strata = [Stratum.parse(s) for s in summary["strata"]]
    scenario = resolve_scenario(truth) if truth is not None else None
    out = _prepare_dir(out_dir or est_dir / "report")
    files, warnings = [], []

    panels = {}
    for s in strata:
        for z in (0, 1):
            path = est_dir / f"survival_{s.label}_z{z}.csv"
            if not path.is_file():
                raise ArtifactError(f"missing survival curve file {path.name} in {est_dir}")
            panel = _load_curve_table(path)
            if scenario is not None:
                panel["truth"] = scenario.true_survival(s, z, panel["time"])
            panels[(s, z)] = panel

    long_rows = []
    for (s, z), p in panels.items():
        name = f"{s.label}_z{z}"
        tv = p.get("truth", np.full(p["time"].size, np.nan))
        rows = [[name, s.label, z, t, m, l, h, tr]
                for t, m, l, h, tr in zip(p["time"], p["mean"], p["lo"], p["hi"], tv)]
        long_rows.extend(rows)
        files.append(write_table(out / f"panel_{name}.csv",
                                 ["panel", "stratum", "arm", "time", "mean", "lo", "hi",
                                  "truth"], rows, meta))
    files.append(write_table(out / "panels_long.csv",
                             ["panel", "stratum", "arm", "time", "mean", "lo", "hi", "truth"],
                             long_rows, meta))

    effects = {}
    for kind in ("spce", "race"):
        for s in strata:
            path = est_dir / f"{kind}_{s.label}.csv"
            if path.is_file():
                effects[(kind, s)] = _load_curve_table(path)
        path = est_dir / f"itt_{kind}.csv"
        if path.is_file():
            effects[(kind, None)] = _load_curve_table(path)
    km = None
    if (est_dir / "km.csv").is_file():
        _, header, rows = read_table(est_dir / "km.csv")
        km = {z: np.array([[float(r[1]), float(r[2])] for r in rows if int(r[0]) == z])
              for z in (0, 1)}

    header, rows, text = summary_table(summary, panels, effects, quantile_times)
    files.append(write_table(out / "summary.csv", header, rows, meta))
    txt = out / "summary.txt"
    txt.write_text("".join(f"# {k}: {v}\n" for k, v in sorted(
        (k, v) for k, v in meta.items() if k != "inputs")) + text, encoding="utf-8")
    files.append(txt)
    if figures:
        files.extend(render_figures(out, panels, effects, km, summary))
    return StageResult(out, files, warnings, {"panels": panels})


# ---------------------------------------------------------------- verify

def run_verify(dirs) -> StageResult:
    """Cross-check the metadata stamps of every artifact in the given directories.

    Within a directory every file must carry the same config hash, seed and
    version, matching the directory's config snapshot. Recorded input files
    that still exist must have unchanged checksums.
    """
    problems, checked = [], []
    for d in dirs:
        d = Path(d)
        if not d.is_dir():
            raise ConfigError(f"not a directory: {d}")
        snap = d / CONFIG_FILE
        expect = None
        if snap.is_file():
            try:
                expect = load_config(snap).hash()
            except ConfigError as exc:
                problems.append(f"{snap}: {exc}")
        stamps = {}
        for f in sorted(d.iterdir()):
            if f.suffix not in (".csv", ".json", ".bin") or not f.is_file():
                continue
            try:
                m = read_meta(f)
            except (ArtifactError, ValueError, UnicodeDecodeError) as exc:
                problems.append(f"{f}: unreadable metadata ({exc})")
                continue
            checked.append(f)
            if "config_hash" not in m:
                problems.append(f"{f}: no config hash")
                continue
            stamps[f] = (m["config_hash"], str(m.get("seed")), m.get("version"))
            for path, sha in (m.get("inputs") or {}).items():
                p = Path(path)
                if p.is_file() and file_sha256(p) != sha:
                    problems.append(f"{f}: input {p} changed since it was used")
        if len({v for v in stamps.values()}) > 1:
            problems.append(f"{d}: files carry different config hash, seed or version")
        if expect is not None:
            for f, (h, _, _) in stamps.items():
                if h != expect:
                    problems.append(f"{f}: config hash {h[:12]} does not match "
                                    f"{CONFIG_FILE} ({expect[:12]})")
    return StageResult(Path(dirs[0]) if dirs else Path("."), checked, problems)
