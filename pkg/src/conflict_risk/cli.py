"""
Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 estimation did
not converge, 1 anything unexpected.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from . import reporting
from .kernel import KernelConfig, SeverityThresholds
from .mixed_logit import ChoiceDataset, HaltonConfig, ModelSpec
from .mixed_logit.estimate import EstimationOptions, EstimationResult, NonConvergence, maximize
from .mixed_logit.model import SpecError
from .synth import SceneSpec, SimulationTruth, crossing_scene, covering_zones, generate_scene, simulate_choices
from .trajectory import (
    CongestionFilterConfig,
    FormatConfig,
    SamplingConfig,
    TrajectoryError,
    ZoneMap,
    build_observations,
    derive_kinematics,
    format_summary,
    load_trajectories,
    observations_frame,
    read_observations,
    summarize_dataset,
    write_observations,
)

log = logging.getLogger("conflict_risk")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DATA, EXIT_CONVERGENCE = 0, 1, 2, 3, 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything a run needs; relative paths are resolved against the config file."""

    trajectories: list = field(default_factory=list)
    zones: Optional[Path] = None
    format: FormatConfig = field(default_factory=FormatConfig)
    thresholds: SeverityThresholds = field(default_factory=SeverityThresholds)
    congestion: CongestionFilterConfig = field(default_factory=CongestionFilterConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    observations: Optional[Path] = None
    models: dict = field(default_factory=dict)
    draws: Optional[int] = None
    scramble: Optional[bool] = None
    output_dir: Path = Path("out")
    seed: int = 0

    @classmethod
    def load(cls, path, overrides: Optional[argparse.Namespace] = None) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc, path.parent, overrides)

    @classmethod
    def from_dict(cls, doc: dict, base: Path = Path("."), overrides=None) -> "RunConfig":
        def p(v):
            if v is None:
                return None
            q = Path(v)
            return q if q.is_absolute() else base / q

        try:
            trajectories = doc.get("trajectories", [])
            if isinstance(trajectories, str):
                trajectories = [trajectories]
            thresholds = dict(doc.get("thresholds", {}))
            sampling = dict(doc.get("sampling", {}))
            if "zone_names" in sampling:
                sampling["zone_names"] = tuple(sampling["zone_names"])
            seed = int(doc.get("seed", 0))
            draws = doc.get("draws")
            if overrides is not None:
                if getattr(overrides, "seed", None) is not None:
                    seed = overrides.seed
                if getattr(overrides, "draws", None) is not None:
                    draws = overrides.draws
                if getattr(overrides, "stride", None) is not None:
                    sampling["stride"] = overrides.stride
                if getattr(overrides, "thresholds", None) is not None:
                    slight, severe = (float(x) for x in overrides.thresholds.split(","))
                    thresholds.update(slight=slight, severe=severe)
            fmt = doc.get("format", {})
            cfg = cls(
                trajectories=[p(t) for t in trajectories],
                zones=p(doc.get("zones")),
                format=FormatConfig(fmt.get("delimiter", ","), dict(fmt.get("columns", {})), int(fmt.get("fps", 30))),
                thresholds=SeverityThresholds(**thresholds),
                congestion=CongestionFilterConfig(**doc.get("congestion", {})),
                sampling=SamplingConfig(**sampling),
                observations=p(doc.get("observations")),
                models={k: p(v) for k, v in doc.get("models", {}).items()},
                draws=None if draws is None else int(draws),
                scramble=doc.get("scramble"),
                output_dir=p(doc.get("output_dir", "out")),
                seed=seed,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if cfg.draws is not None and cfg.draws < 1:
            raise ConfigError("draws must be at least 1")
        if cfg.sampling.stride < 1:
            raise ConfigError("stride must be at least 1")
        missing = [str(f) for f in cfg.trajectories + [cfg.zones] + list(cfg.models.values())
                   if f is not None and not Path(f).exists()]
        if missing:
            raise ConfigError(f"referenced files do not exist: {', '.join(missing)}")
        return cfg

    def kernel_config(self) -> KernelConfig:
        return KernelConfig(thresholds=self.thresholds)

    def observations_path(self) -> Path:
        return self.observations if self.observations is not None else self.output_dir / "observations.csv"


# ---------------------------------------------------------------------------
# helpers


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, Path):
        return str(v)
    raise TypeError(f"cannot serialize {type(v).__name__}")


def _summary_json(summary: dict) -> dict:
    return {
        fam: {"counts": block["counts"], "stats": block["stats"].to_dict(orient="records")}
        for fam, block in summary.items()
    }


def _load_tracks(cfg: RunConfig):
    if not cfg.trajectories:
        raise ConfigError("no trajectory files configured")
    tracks = []
    for path in cfg.trajectories:
        tracks += load_trajectories(path, cfg.format)
    ids = [t.vehicle_id for t in tracks]
    if len(set(ids)) != len(ids):
        raise DataError("the same vehicle id appears in more than one trajectory file")
    usable = []
    for t in tracks:
        if len(t) < 2:
            log.warning("vehicle %s has fewer than two frames; dropped", t.vehicle_id)
            continue
        usable.append(derive_kinematics(t, cfg.format.fps))
    return usable


def _run_pipeline(cfg: RunConfig):
    if cfg.zones is None:
        raise ConfigError("a zone map is required")
    try:
        zones = ZoneMap.load(cfg.zones)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{cfg.zones}: malformed zone map ({exc})") from None
    tracks = _load_tracks(cfg)
    obs = build_observations(tracks, zones, cfg.kernel_config(), cfg.congestion, cfg.sampling, cfg.format.fps)
    return tracks, obs


# ---------------------------------------------------------------------------
# commands


CONFLICT_COLUMNS = ["group_id", "frame", "family", "outcome", "ttc", "zone", "leader_id", "follower_id"]


def cmd_detect(cfg: RunConfig) -> int:
    _, obs = _run_pipeline(cfg)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    frame = observations_frame(obs)[CONFLICT_COLUMNS]
    frame.to_csv(cfg.output_dir / "conflicts.csv", index=False, float_format="%.10g", lineterminator="\n")
    text = f"{len(obs)} interaction observations\n"
    if obs:
        counts = frame.groupby(["family", "outcome"]).size()
        text += "".join(f"{fam:<12}{out:<8}{n}\n" for (fam, out), n in counts.items())
        summary = summarize_dataset(obs)
        text += "\n" + format_summary(summary)
        _write_json(cfg.output_dir / "conflicts_summary.json", _summary_json(summary))
    else:
        _write_json(cfg.output_dir / "conflicts_summary.json", {})
    (cfg.output_dir / "conflicts_summary.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_dataset(cfg: RunConfig) -> int:
    _, obs = _run_pipeline(cfg)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.observations_path()
    write_observations(obs, out)
    if not obs:
        sys.stdout.write("no observations\n")
        _write_json(cfg.output_dir / "dataset_summary.json", {})
        return EXIT_OK
    summary = summarize_dataset(obs)
    text = format_summary(summary)
    (cfg.output_dir / "dataset_summary.txt").write_text(text)
    _write_json(cfg.output_dir / "dataset_summary.json", _summary_json(summary))
    sys.stdout.write(text)
    return EXIT_OK


def _model_spec(path: Path, cfg: RunConfig):
    try:
        doc = json.loads(Path(path).read_text())
        spec = ModelSpec.from_dict(doc)
    except (json.JSONDecodeError, SpecError, TypeError, KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    h = spec.halton
    spec.halton = HaltonConfig(
        draws=cfg.draws if cfg.draws is not None else h.draws,
        skip=h.skip,
        primes=h.primes,
        scramble=cfg.scramble if cfg.scramble is not None else h.scramble,
        seed=cfg.seed if cfg.scramble or h.scramble else h.seed,
    )
    return spec, doc.get("family"), doc.get("group", "group_id")


def cmd_estimate(cfg: RunConfig, only: Optional[list] = None) -> int:
    if not cfg.models:
        raise ConfigError("no models configured")
    path = cfg.observations_path()
    if not path.exists():
        raise ConfigError(f"observation file {path} not found")
    try:
        frame = read_observations(path)
    except pd.errors.EmptyDataError:
        raise DataError(f"{path} is empty") from None
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    for name in sorted(cfg.models):
        if only and name not in only:
            continue
        spec, family, group = _model_spec(cfg.models[name], cfg)
        sub = frame if family is None else frame[frame["family"] == family]
        if sub.empty:
            raise DataError(f"model {name}: no observations" + (f" of family {family}" if family else ""))
        data = ChoiceDataset(sub.reset_index(drop=True), group=group, alternatives=spec.alternatives)
        try:
            result = maximize(data, spec)
        except NonConvergence as exc:
            result = exc.result
            status = EXIT_CONVERGENCE
            log.error("model %s did not converge: %s", name, exc)
            trace = "\n".join(f"{i:5d} {ll:.6f}" for i, ll in enumerate(exc.result.trace[-20:]))
            log.error("last log-likelihood evaluations:\n%s", trace)
        _write_json(cfg.output_dir / f"result_{name}.json", reporting.estimation_json(result))
        text = reporting.estimation_report(result, title=name)
        (cfg.output_dir / f"report_{name}.txt").write_text(text)
        sys.stdout.write(text + "\n")
    return status


def cmd_compare(path_a, path_b, names=("Restricted", "Full"), output_dir: Optional[Path] = None) -> int:
    results = []
    for p in (path_a, path_b):
        try:
            results.append(EstimationResult.load(p))
        except FileNotFoundError:
            raise ConfigError(f"result file {p} not found") from None
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise DataError(f"{p}: unreadable result ({exc})") from None
    cmp = reporting.compare(*results)
    text = reporting.comparison_report(cmp, names)
    if output_dir is not None:
        output_dir.mkdir(parents=True, exist_ok=True)
        _write_json(output_dir / "comparison.json", cmp)
        (output_dir / "comparison.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def trajectory_polylines(tracks, key: str) -> pd.DataFrame:
    rows = []
    for t in tracks:
        label = getattr(t, key)
        for f, x, y in zip(t.frames, t.x, t.y):
            rows.append((label, t.vehicle_id, int(f), float(x), float(y)))
    df = pd.DataFrame(rows, columns=[key, "vehicle_id", "frame", "x", "y"])
    return df.sort_values([key, "vehicle_id", "frame"], kind="stable").reset_index(drop=True)


def ttc_histogram(ttc, width: float = 0.25) -> pd.DataFrame:
    ttc = np.asarray(ttc, dtype=float)
    ttc = ttc[np.isfinite(ttc)]
    top = max(width, float(np.ceil(ttc.max() / width) * width)) if ttc.size else width
    edges = np.arange(0.0, top + width / 2, width)
    if edges[-1] < ttc.max(initial=0.0):
        edges = np.append(edges, edges[-1] + width)
    counts, edges = np.histogram(ttc, bins=edges)
    return pd.DataFrame({"lower": edges[:-1], "upper": edges[1:], "count": counts})


def cmd_plot(cfg: RunConfig) -> int:
    tracks = [t for path in cfg.trajectories for t in load_trajectories(path, cfg.format)]
    obs_path = cfg.observations_path()
    obs = read_observations(obs_path) if obs_path.exists() and obs_path.stat().st_size else None
    if not tracks and (obs is None or obs.empty):
        raise DataError("nothing to plot: no tracks and no observations")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if tracks:
        for key in ("payment", "vehicle_class"):
            out = cfg.output_dir / f"plot_trajectories_{key}.csv"
            trajectory_polylines(tracks, key).to_csv(out, index=False, float_format="%.10g", lineterminator="\n")
            written.append(out)
    if obs is not None and not obs.empty:
        for fam, sub in sorted(obs.groupby("family")):
            out = cfg.output_dir / f"plot_ttc_histogram_{fam}.csv"
            ttc_histogram(sub["ttc"]).to_csv(out, index=False, float_format="%.10g", lineterminator="\n")
            written.append(out)
    sys.stdout.write("".join(f"wrote {p}\n" for p in written))
    return EXIT_OK


def _truth_from_dict(doc: dict, base: Path, seed: Optional[int]) -> SimulationTruth:
    spec_doc = doc["spec"]
    if isinstance(spec_doc, str):
        spec_doc = json.loads((base / spec_doc).read_text())
    spec = ModelSpec.from_dict(spec_doc)
    return SimulationTruth(
        spec=spec,
        coefficients=dict(doc.get("coefficients", {})),
        gamma=np.asarray(doc.get("gamma", np.zeros((spec.n_random, spec.n_random))), dtype=float),
        n_groups=int(doc["n_groups"]),
        obs_per_group=int(doc["obs_per_group"]),
        covariates={k: tuple(v) for k, v in doc.get("covariates", {}).items()},
        group_level=tuple(doc.get("group_level", ())),
        seed=int(seed if seed is not None else doc.get("seed", 0)),
    )


def cmd_synth(args) -> int:
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.kind == "scene":
        if not args.spec:
            raise ConfigError("synth scene needs --spec")
        try:
            spec = SceneSpec.load(args.spec)
        except FileNotFoundError:
            raise ConfigError(f"scene file {args.spec} not found") from None
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise ConfigError(f"{args.spec}: {exc}") from None
        tracks = generate_scene(spec, out)
        sys.stdout.write(f"wrote {len(tracks)} tracks to {out}\n")
    elif args.kind == "crossing":
        spec = crossing_scene(angle=args.angle, collide_at=args.collide_at)
        tracks = generate_scene(spec, out)
        if args.zones:
            Path(args.zones).write_text(json.dumps(covering_zones(tracks).to_dict(), indent=2) + "\n")
        sys.stdout.write(f"wrote {len(tracks)} tracks to {out}\n")
    else:
        if not args.spec:
            raise ConfigError("synth choices needs --spec (a truth file)")
        try:
            doc = json.loads(Path(args.spec).read_text())
            truth = _truth_from_dict(doc, Path(args.spec).parent, args.seed)
        except FileNotFoundError as exc:
            raise ConfigError(str(exc)) from None
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{args.spec}: {exc}") from None
        sim = simulate_choices(truth)
        sim.dataset.frame.to_csv(out, index=False, float_format="%.10g", lineterminator="\n")
        sys.stdout.write(f"wrote {len(sim.dataset)} observations in {truth.n_groups} groups to {out}\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conflict-risk", description=__doc__.strip().splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="run configuration (JSON)")
        p.add_argument("--seed", type=int)
        p.add_argument("--draws", type=int, help="Halton draws per group")
        p.add_argument("--stride", type=int, help="frames per sampling window")
        p.add_argument("--thresholds", help="slight,severe TTC thresholds in seconds, e.g. 3,1.5")
        return p

    with_config(sub.add_parser("detect", help="conflict table and summary from trajectories"))
    with_config(sub.add_parser("dataset", help="observation table with model covariates"))
    est = with_config(sub.add_parser("estimate", help="fit configured models"))
    est.add_argument("--model", action="append", help="fit only this model (repeatable)")
    cmp = sub.add_parser("compare", help="fit metrics and likelihood-ratio test for two stored results")
    cmp.add_argument("restricted")
    cmp.add_argument("full")
    cmp.add_argument("--names", nargs=2, default=["Restricted", "Full"])
    cmp.add_argument("--output-dir")
    with_config(sub.add_parser("plot", help="plottable trajectory polylines and TTC histograms"))
    syn = sub.add_parser("synth", help="synthetic trajectories or choice data")
    syn.add_argument("kind", choices=["scene", "crossing", "choices"])
    syn.add_argument("--spec", help="scene spec or simulation truth (JSON)")
    syn.add_argument("--output", required=True)
    syn.add_argument("--zones", help="crossing: also write a covering zone map here")
    syn.add_argument("--angle", type=float, default=8.0)
    syn.add_argument("--collide-at", type=float, default=4.0)
    syn.add_argument("--seed", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            return cmd_compare(args.restricted, args.full, tuple(args.names),
                               Path(args.output_dir) if args.output_dir else None)
        if args.command == "synth":
            return cmd_synth(args)
        cfg = RunConfig.load(args.config, args)
        if args.command == "detect":
            return cmd_detect(cfg)
        if args.command == "dataset":
            return cmd_dataset(cfg)
        if args.command == "estimate":
            return cmd_estimate(cfg, args.model)
        if args.command == "plot":
            return cmd_plot(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TrajectoryError, SpecError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    parser.error(f"unknown command {args.command}")
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
