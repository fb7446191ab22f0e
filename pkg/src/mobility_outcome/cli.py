"""Command-line entry point: ``mobility-outcome <subcommand>``.

Inputs come either from a manifest of ingest CSVs (``manifest`` config key)
or from the synthetic generator (``--synth default`` or ``--synth spec.txt``).
Every failure is reported as ``error [stage]: message`` with a nonzero exit
status, and an ``INCOMPLETE`` marker naming the failed stage is left in the
output directory.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from pathlib import Path

from .diagnostics import ExclusionLog
from .evaluate import compare_modes, louo_cross_validate, parse_mode
from .features import FeatureTable
from .ingest import RawCohort, load_cohort, read_key_values
from .intervals import write_intervals_csv
from .pipeline import (ENV_PREFIX, PipelineConfig, adaptation_diagnostics, build_feature_table,
                       correlations, fuse_cohort)
from .stats import write_correlations_csv
from .synth import CohortSpec, generate_cohort

logger = logging.getLogger("mobility_outcome")

INCOMPLETE = "INCOMPLETE"


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.message = message


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # every failure leaves the CLI tagged with its stage
        raise StageError(name, str(exc) or type(exc).__name__) from exc


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class Runner:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.log = ExclusionLog()
        self._raw: RawCohort | None = None
        self._fusion = None
        self._features = None

    # -- inputs -----------------------------------------------------------------
    def synth_spec(self) -> CohortSpec:
        if self.cfg.synth_spec:
            return CohortSpec.from_mapping(read_key_values(self.cfg.synth_spec))
        if self.cfg.synth in ("", "default"):
            return CohortSpec()
        return CohortSpec.from_mapping(read_key_values(self.cfg.synth))

    def raw(self) -> RawCohort:
        if self._raw is None:
            if self.cfg.manifest:
                with stage("ingest"):
                    self._raw = load_cohort(self.cfg.manifest, self.cfg.timezone or None)
                for r in self._raw.rejections:
                    self.log.add("ingest", "row", "", r.reason, f"{r.stream}:{r.line}")
            else:
                with stage("synth"):
                    self._raw = generate_cohort(self.synth_spec(), self.cfg.seed).raw
            logger.info("ingest: %d users, %d location rows, %d rejected", len(self._raw.users),
                        self._raw.n_samples(), len(self._raw.rejections))
        return self._raw

    def fusion(self):
        if self._fusion is None:
            raw = self.raw()
            with stage("fusion"):
                self._fusion = fuse_cohort(raw, self.cfg, self.log)
            logger.info("fusion: %d minute rows",
                        sum(len(r.track) for r in self._fusion.values()))
        return self._fusion

    def features(self):
        if self._features is None:
            fusion = self.fusion()
            with stage("features"):
                self._features = build_feature_table(self.raw(), self.cfg, self.log, fusion)
            t = self._features.table
            logger.info("features: %d intervals from %d users (%d improved); %d exclusions",
                        len(t), len(t.users), int(t.labels.sum()), len(self.log))
        return self._features

    # -- commands -----------------------------------------------------------------
    def cmd_synth(self) -> None:
        with stage("synth"):
            cohort = generate_cohort(self.synth_spec(), self.cfg.seed)
            manifest = cohort.write(self.out / "cohort")
            with open(self.out / "cohort" / "latent_homes.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["user_id", "lat", "lon"])
                for u, (la, lo) in sorted(cohort.homes.items()):
                    w.writerow([u, repr(la), repr(lo)])
        logger.info("synth: %d users written to %s", len(cohort.raw.users), manifest)

    def cmd_fuse(self) -> None:
        fusion = self.fusion()
        with stage("fusion"):
            with open(self.out / "windows.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["user_id", "start", "end", "lat", "lon", "source"])
                for u, res in fusion.items():
                    for win in res.windows:
                        w.writerow([u, int(win.start), int(win.end), repr(win.latitude),
                                    repr(win.longitude), win.source])
            with open(self.out / "track.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["user_id", "minute", "lat", "lon", "source"])
                for u, res in fusion.items():
                    tr = res.track
                    for k in range(len(tr)):
                        w.writerow([u, int(tr.minutes[k]), repr(float(tr.latitude[k])),
                                    repr(float(tr.longitude[k])), tr.source[k]])

    def cmd_features(self) -> None:
        st = self.features()
        with stage("features"):
            write_intervals_csv(st.intervals, self.out / "intervals.csv")
            st.table.to_csv(self.out / "features.csv")
            self.log.write_csv(self.out / "exclusions.csv")

    def table(self) -> FeatureTable:
        return self.features().table

    def cmd_adapt_diag(self) -> None:
        table = self.table()
        with stage("adapt"):
            _dump_json(adaptation_diagnostics(table, self.cfg), self.out / "adaptation.json")

    def cmd_correlate(self) -> None:
        table = self.table()
        with stage("correlate"):
            write_correlations_csv(correlations(table, self.cfg, self.cfg.mode),
                                   self.out / "correlations.csv")

    def cmd_evaluate(self) -> None:
        table = self.table()
        ecfg = self.cfg.eval_config()
        results = []
        mode = parse_mode(self.cfg.mode)
        for scenario in self.cfg.scenario_list:
            with stage(f"evaluate:{scenario.value}"):
                res = louo_cross_validate(table, scenario, mode, ecfg, self.cfg.seed, self.log)
            logger.info("evaluate %s/%s: F1 %.3f over %d folds", scenario.value, mode.value,
                        res.metrics.f1, res.n_folds)
            results.append({"scenario": scenario.value, "mode": mode.value, **res.report()})
        report = {"seed": self.cfg.seed, "n_rows": len(table), "n_users": len(table.users),
                  "results": results}
        _dump_json(report, self.out / "report.json")
        self.log.write_csv(self.out / "exclusions.csv")

    def cmd_compare_modes(self) -> None:
        table = self.table()
        with stage("compare-modes"):
            rows = compare_modes(table, self.cfg.scenario_list, self.cfg.mode_list,
                                 self.cfg.eval_config(), self.cfg.seed, self.log)
            cols = ["scenario", "mode", "platform", "precision", "recall", "f1", "tp", "fp", "tn", "fn"]
            with open(self.out / "compare_modes.csv", "w", newline="") as fh:
                w = csv.DictWriter(fh, cols, lineterminator="\n")
                w.writeheader()
                w.writerows(rows)

    def cmd_run(self) -> None:
        self.cmd_features()
        self.cmd_adapt_diag()
        self.cmd_correlate()
        self.cmd_evaluate()


COMMANDS = {
    "synth": Runner.cmd_synth,
    "fuse": Runner.cmd_fuse,
    "features": Runner.cmd_features,
    "adapt-diag": Runner.cmd_adapt_diag,
    "correlate": Runner.cmd_correlate,
    "evaluate": Runner.cmd_evaluate,
    "compare-modes": Runner.cmd_compare_modes,
    "run": Runner.cmd_run,
}


def _common_options(default) -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=default)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--manifest", help="ingest manifest (overrides synthetic input)")
    common.add_argument("--synth", help="'default' or a key=value cohort spec file")
    common.add_argument("--mode", help="none | android_transformed | ios_transformed | dual_transformed")
    common.add_argument("--modes", help="comma list of modes for compare-modes")
    common.add_argument("--scenario", dest="scenarios",
                        help="comma list of scenarios; 'all' expands to every scenario")
    common.add_argument("-v", "--verbose", action="store_true")
    return common


def build_parser() -> argparse.ArgumentParser:
    # options may appear before or after the subcommand; the subcommand copy
    # suppresses its defaults so it cannot clobber values given earlier
    parser = argparse.ArgumentParser(
        prog="mobility-outcome", parents=[_common_options(None)],
        description="Mobility features and treatment-outcome prediction.",
        epilog=f"Any config key can also be set through an environment variable "
               f"{ENV_PREFIX}<KEY> (e.g. {ENV_PREFIX}MIN_DAYS=4).")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[_common_options(argparse.SUPPRESS)])
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with stage("config"):
            overrides = {"seed": args.seed, "out": args.out, "manifest": args.manifest,
                         "synth": args.synth, "scenarios": args.scenarios, "modes": args.modes,
                         "mode": parse_mode(args.mode).value if args.mode else None}
            cfg = PipelineConfig.load(args.config, overrides=overrides)
            if cfg.manifest and not Path(cfg.manifest).is_file():
                raise FileNotFoundError(f"manifest not found: {cfg.manifest}")
    except StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 2

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / INCOMPLETE
    marker.unlink(missing_ok=True)
    try:
        COMMANDS[args.command](Runner(cfg))
    except StageError as exc:
        marker.write_text(f"{args.command} failed at stage {exc.stage}: {exc.message}\n")
        print(f"error {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
