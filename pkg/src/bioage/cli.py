"""Command line: ``bioage generate | run | report``.

Exit codes: 0 success, 2 config error, 3 runtime/numeric error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import __version__, hetreg
from ._backend import BACKEND
from .cohort import (
    GeneratorConfig,
    Subject,
    _level_map,
    build_dataclass,
    generate_cohort,
    read_cohort_csv,
    write_cohort_csv,
)
from .consolidate import write_assessments_csv
from .errors import ConfigError, StrategyError, TrainingError
from .iterate import (
    BASELINE,
    FlagLedger,
    HetRegressor,
    IterateConfig,
    IterationRecord,
    derive_seed,
    run_strategy,
)
from . import report

log = logging.getLogger("bioage")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4

COHORT_CSV = "cohort.csv"
HOLDOUT_CSV = "holdout.csv"
GENERATION_JSON = "generation.json"
MANIFEST_JSON = "manifest.json"
ASSESSMENTS_CSV = "assessments.csv"
FINAL_MODEL = "models/final.json"
BASELINE_MODEL = "models/baseline.json"
REPORT_DIR = "report"


@dataclass
class HoldoutConfig:
    """Size of the held-out evaluation cohort (same population as the pool)."""

    n_typical: int = 200
    n_atypical_per_level: dict[float, int] = field(
        default_factory=lambda: {0.5: 50, 1.0: 50, 2.0: 50}
    )

    def __post_init__(self) -> None:
        self.n_atypical_per_level = _level_map(self.n_atypical_per_level, "n_atypical_per_level")
        if self.n_typical < 0 or any(n < 0 for n in self.n_atypical_per_level.values()):
            raise ConfigError("n_typical", "counts must be >= 0")

    def to_dict(self) -> dict:
        return {
            "n_typical": self.n_typical,
            "n_atypical_per_level": {f"{k:g}": v for k, v in self.n_atypical_per_level.items()},
        }


def experiment_trainer() -> hetreg.TrainConfig:
    """Trainer used by run configs unless they set one.

    Smaller than the library default: the [64, 32] trunk memorises the
    ~2000 chunks of one training split and its uncertainty collapses.
    """
    return hetreg.TrainConfig(hidden_sizes=[16], fusion_width=16)


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    holdout: HoldoutConfig = field(default_factory=HoldoutConfig)
    iterate: IterateConfig = field(default_factory=lambda: IterateConfig(trainer=experiment_trainer()))
    # CA-trained comparison model; defaults to the iteration trainer
    baseline: hetreg.TrainConfig | None = None
    output_dir: str = "run"
    emit_svg: bool = True

    @classmethod
    def from_dict(cls, data: Any) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "expected a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown key")
        kw: dict[str, Any] = {}
        if "generator" in data:
            kw["generator"] = build_dataclass(GeneratorConfig, data["generator"], "generator")
        if "holdout" in data:
            kw["holdout"] = build_dataclass(HoldoutConfig, data["holdout"], "holdout")
        if "iterate" in data:
            it = data["iterate"]
            if isinstance(it, dict) and "trainer" not in it:
                it = {**it, "trainer": experiment_trainer()}
            kw["iterate"] = build_dataclass(IterateConfig, it, "iterate")
        if data.get("baseline") is not None:
            kw["baseline"] = build_dataclass(hetreg.TrainConfig, data["baseline"], "baseline")
        if "output_dir" in data:
            if not isinstance(data["output_dir"], str):
                raise ConfigError("output_dir", "must be a string")
            kw["output_dir"] = data["output_dir"]
        if "emit_svg" in data:
            if not isinstance(data["emit_svg"], bool):
                raise ConfigError("emit_svg", "must be true or false")
            kw["emit_svg"] = data["emit_svg"]
        return cls(**kw)

    @property
    def baseline_trainer(self) -> hetreg.TrainConfig:
        return self.baseline if self.baseline is not None else self.iterate.trainer

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is None:
            return self
        if not 0 <= seed < 2**64:
            raise ConfigError("--seed", "must be an unsigned 64-bit integer")
        return dataclasses.replace(
            self,
            generator=dataclasses.replace(self.generator, seed=seed),
            iterate=dataclasses.replace(self.iterate, master_seed=seed),
        )

    def to_dict(self) -> dict:
        return {
            "generator": self.generator.to_dict(),
            "holdout": self.holdout.to_dict(),
            "iterate": self.iterate.to_dict(),
            "baseline": self.baseline_trainer.to_dict(),
            "emit_svg": self.emit_svg,
        }


def load_run_config(path: str | Path) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    return RunConfig.from_dict(data)


def _holdout_generator(config: RunConfig) -> GeneratorConfig:
    return dataclasses.replace(
        config.generator,
        n_typical=config.holdout.n_typical,
        n_atypical_per_level=dict(config.holdout.n_atypical_per_level),
    )


def _dump(doc: Any, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing required file: {path}")
    return path


# -- commands -----------------------------------------------------------------

def cmd_generate(config: RunConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    pool = generate_cohort(config.generator, stream=1, id_prefix="s")
    holdout = generate_cohort(_holdout_generator(config), stream=2, id_prefix="h")
    rows = write_cohort_csv(pool, out / COHORT_CSV)
    hold_rows = write_cohort_csv(holdout, out / HOLDOUT_CSV)
    doc = {
        "seed": config.generator.seed,
        "generator": config.generator.to_dict(),
        "holdout": config.holdout.to_dict(),
        "n_subjects": len(pool),
        "n_rows": rows,
        "n_holdout_subjects": len(holdout),
        "n_holdout_rows": hold_rows,
    }
    _dump(doc, out / GENERATION_JSON)
    log.info("wrote %d subjects (%d rows) to %s", len(pool), rows, out / COHORT_CSV)
    return doc


def _load_or_generate(config: RunConfig, out: Path) -> tuple[list[Subject], list[Subject]]:
    gen = out / GENERATION_JSON
    if gen.exists() and (out / COHORT_CSV).exists() and (out / HOLDOUT_CSV).exists():
        with open(gen) as fh:
            doc = json.load(fh)
        if doc.get("generator") == config.generator.to_dict() and doc.get("holdout") == config.holdout.to_dict():
            log.info("reusing cohort in %s", out)
            return read_cohort_csv(out / COHORT_CSV), read_cohort_csv(out / HOLDOUT_CSV)
        log.info("cohort in %s was generated from a different config; regenerating", out)
    cmd_generate(config, out)
    return read_cohort_csv(out / COHORT_CSV), read_cohort_csv(out / HOLDOUT_CSV)


def cmd_run(config: RunConfig, out: Path) -> dict:
    started = time.time()
    out.mkdir(parents=True, exist_ok=True)
    pool, _ = _load_or_generate(config, out)
    it = config.iterate
    result = run_strategy(pool, it, HetRegressor(it.trainer))
    result.ledger.check()

    baseline = HetRegressor(config.baseline_trainer).fit(
        [s.blind() for s in pool], derive_seed(it.master_seed, 0, BASELINE)
    )
    (out / "models").mkdir(exist_ok=True)
    hetreg.save_params(result.final_model, out / FINAL_MODEL)
    hetreg.save_params(baseline, out / BASELINE_MODEL)
    write_assessments_csv(
        ((rec.index, a) for rec in result.ledger.history for a in rec.assessments),
        out / ASSESSMENTS_CSV,
    )
    quality = report.detection_quality(result.removed, pool)
    removed = set(result.removed)
    manifest = {
        "comparable": {
            "bioage_version": __version__,
            "backend": BACKEND,
            "config": config.to_dict(),
            "n_iterations": result.n_iterations,
            "truncated": result.truncated,
            "iterations": [rec.to_dict() for rec in result.ledger.history],
            "flag_count": dict(sorted(result.ledger.flag_count.items())),
            "removed_ids": result.removed,
            "cleaned_ids": [s.id for s in pool if s.id not in removed],
            "detection_quality": quality.to_dict(),
            "files": {
                "cohort": COHORT_CSV,
                "holdout": HOLDOUT_CSV,
                "assessments": ASSESSMENTS_CSV,
                "final_model": FINAL_MODEL,
                "baseline_model": BASELINE_MODEL,
            },
        },
        "volatile": {
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
            "duration_s": round(time.time() - started, 3),
            "output_dir": str(out.resolve()),
            "python": platform.python_version(),
            "platform": platform.platform(),
        },
    }
    _dump(manifest, out / MANIFEST_JSON)
    log.info(
        "%d iterations%s; removed %d of %d subjects",
        result.n_iterations, " (truncated)" if result.truncated else "", len(result.removed), len(pool),
    )
    return manifest


def load_manifest(run_dir: Path) -> dict:
    with open(_require(run_dir / MANIFEST_JSON)) as fh:
        return json.load(fh)


def ledger_from_manifest(manifest: dict) -> FlagLedger:
    body = manifest["comparable"]
    ledger = FlagLedger.for_pool(body["flag_count"].keys())
    for rec in body["iterations"]:
        ledger.add(IterationRecord.from_dict(rec))
    return ledger


def cmd_report(run_dir: Path) -> dict:
    manifest = load_manifest(run_dir)
    body = manifest["comparable"]
    files = body["files"]
    pool = read_cohort_csv(_require(run_dir / files["cohort"]))
    holdout = read_cohort_csv(_require(run_dir / files["holdout"]))
    final = hetreg.load_params(_require(run_dir / files["final_model"]))
    baseline = hetreg.load_params(_require(run_dir / files["baseline_model"]))

    ledger = ledger_from_manifest(manifest)
    ledger.check()
    curves = report.cumulative_curves(ledger, pool)
    summaries = []
    for tag, model in (("CA", baseline), ("BA", final)):
        summaries += report.deviation_summary(model, holdout, tag).values()
    quality = report.detection_quality(body["removed_ids"], pool)

    out = run_dir / REPORT_DIR
    out.mkdir(exist_ok=True)
    report.write_curves_csv(curves, out / "cumulative_curves.csv")
    report.write_deviations_csv(summaries, out / "deviations.csv")
    report.write_deviation_fits_csv(summaries, out / "deviation_fits.csv")
    fits = {f"{s.tag}/{s.group}": {"n": len(s.deviations), "mean": s.fit_mean, "std": s.fit_std} for s in summaries}
    shift = {
        g: fits[f"BA/{g}"]["mean"] - fits[f"CA/{g}"]["mean"]
        for g in sorted({s.group for s in summaries})
        if f"BA/{g}" in fits and f"CA/{g}" in fits
    }
    metrics = {
        "n_iterations": body["n_iterations"],
        "truncated": body["truncated"],
        "n_removed": len(body["removed_ids"]),
        "detection_quality": quality.to_dict(),
        "final_cumulative_percent": {c.group: (c.series[-1][2] if c.series else 0.0) for c in curves},
        "deviation_fits": fits,
        "mean_shift_ba_minus_ca": shift,
    }
    report.write_json(metrics, out / "metrics.json")
    outputs = ["cumulative_curves.csv", "deviations.csv", "deviation_fits.csv", "metrics.json"]
    if body["config"].get("emit_svg", True):
        report.plot_cumulative_curves(curves, out / "cumulative_outliers.svg")
        report.plot_deviations(summaries, out / "deviations.svg")
        outputs += ["cumulative_outliers.svg", "deviations.svg"]
    log.info("report written to %s", out)
    return {"outputs": outputs, "metrics": metrics}


# -- entry point --------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bioage", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("generate", "write a synthetic cohort CSV"),
        ("run", "run the iterative strategy and train the baseline"),
        ("report", "emit curves, deviation fits and detection metrics"),
    ):
        sp = sub.add_parser(name, help=helptext)
        if name == "report":
            sp.add_argument("run_dir", nargs="?", help="run directory (defaults to --out)")
        sp.add_argument("--config", help="JSON run config (defaults built in)")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int, help="override generator seed and master seed")
        sp.add_argument("--quiet", action="store_true", help="only print errors")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        config = load_run_config(args.config) if args.config else RunConfig()
        config = config.with_seed(args.seed)
        if args.command == "report":
            target = args.run_dir or args.out or config.output_dir
            cmd_report(Path(target))
        else:
            out = Path(args.out or config.output_dir)
            if args.command == "generate":
                cmd_generate(config, out)
            else:
                cmd_run(config, out)
    except ConfigError as exc:
        print(f"bioage: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, StrategyError, FloatingPointError, ArithmeticError) as exc:
        print(f"bioage: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, KeyError, ValueError) as exc:
        # ValueError here comes from unreadable/corrupt artifacts
        print(f"bioage: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
