"""Command-line front end: ``persid <subcommand> --config scenario.json --out dir``.

Exit status is 0 when the command ran to completion (an equivalence
failure is a result, not an error), 2 for configuration or usage
problems and 3 for runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import serialize
from .errors import ConfigError, PersidError, PipelineError
from .reconstruction import fit
from .runner import (
    EnvironmentSpec,
    StageRunner,
    collect_dataset,
    config_digest,
    load_scenario,
    resolve_split,
    run_informativeness,
    run_pipeline,
    threads_from_env,
)
from .seeding import derive_seed

log = logging.getLogger("persid")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SUBCOMMANDS = ("simulate", "fit", "validate", "informativeness", "pipeline")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse would call sys.exit; main() must return a code instead
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="persid", description="Perturbation-based system reconstruction and validation.")
    sub = ap.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    for name, text in (
        ("simulate", "collect a dataset from the virtual participant under every declared policy"),
        ("fit", "collect training data and fit the model class"),
        ("validate", "fit, calibrate the tolerance and test equivalence on held-out policies"),
        ("informativeness", "discriminatory power and greedy design over a finite model set"),
        ("pipeline", "full reconstruct-and-validate loop with optional probes"),
    ):
        sp = sub.add_parser(name, help=text, description=text)
        sp.add_argument("--config", required=True, help="scenario JSON file")
        sp.add_argument("--out", required=True, help="output directory (created if absent)")
        sp.add_argument("--seed", type=int, default=None, help="override the scenario master seed")
        sp.add_argument("--format", choices=("json", "csv", "both"), default="both")
        sp.add_argument("--force", action="store_true", help="overwrite existing reports")
        sp.add_argument("--quiet", action="store_true", help="suppress the summary line")
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads for data collection (default: $PERSID_THREADS or 1)")
    return ap


# ------------------------------------------------------------------ commands


def _cmd_simulate(cfg, seed, threads):
    st = StageRunner()
    sc = st.run("config", load_scenario, cfg, seed)
    env = st.run("collect", EnvironmentSpec.from_dict, sc.collection.get("environment"))
    reps = int(sc.collection.get("reps_per_policy", 20))
    pols = sc.policy_list(sc.domain.policy_family_ids)
    data = st.run("collect", collect_dataset, sc.truth, env, pols, reps, sc.domain.horizon,
                  derive_seed(sc.seed, "collect"), sc.domain, threads, "truth")
    report = {
        "scenario": sc.name,
        "dataset": {"n_records": len(data), "n_groups": len(data.groups), "policy_ids": data.policy_ids()},
        "provenance": {"config_digest": config_digest(sc.raw), "seed_override": seed,
                       "seeds": {"master": sc.seed, "collect": derive_seed(sc.seed, "collect")}},
    }
    summary = f"simulate: {len(data)} records in {len(data.groups)} groups"
    return report, {}, summary, data


def _cmd_fit(cfg, seed, threads):
    st = StageRunner()
    sc = st.run("config", load_scenario, cfg, seed)
    split = st.run("split", resolve_split, sc, int(sc.split.get("seed", derive_seed(sc.seed, "split"))))
    env = st.run("collect", EnvironmentSpec.from_dict, sc.collection.get("environment"))
    reps = int(sc.collection.get("reps_per_policy", 20))
    data = st.run("collect", collect_dataset, sc.truth, env, sc.policy_list(split.train_policy_ids), reps,
                  sc.domain.horizon, derive_seed(sc.seed, "collect"), sc.domain, threads, "truth")
    fc = sc.fit
    fit_seed = derive_seed(sc.seed, "fit")
    reports = []
    for i in range(int(fc.get("n_starts", 1))):
        init = sc.model_class.random_init(sc.domain, derive_seed(fit_seed, "init", i))
        reports.append(st.run("fit", fit, sc.model_class, init, data, sc.loss,
                              int(fc.get("max_iter", 200)), float(fc.get("tol", 1e-6)),
                              tuple(fc.get("fixed_fields", ()))))
    best = min(range(len(reports)), key=lambda i: reports[i].final_loss)
    rep = reports[best]
    report = {
        "scenario": sc.name,
        "split": {"train": list(split.train_policy_ids), "test": list(split.test_policy_ids)},
        "fit_report": dict(rep.to_dict(), start=best),
        "per_start_final_loss": [r.final_loss for r in reports],
        "provenance": {"config_digest": config_digest(sc.raw), "seed_override": seed,
                       "seeds": {"master": sc.seed, "collect": derive_seed(sc.seed, "collect"),
                                 "fit": fit_seed},
                       "train_policy_ids_seen": data.policy_ids()},
    }
    rows = [["iteration", "loss"]] + [[k, serialize.fmt_float(v)] for k, v in enumerate(rep.trace)]
    summary = f"fit: loss={rep.final_loss:.6g} iterations={rep.iterations} converged={rep.converged}"
    return report, {"fit_trace.csv": _csv(rows)}, summary, None


def _equivalence_outputs(rep):
    eq = rep.sections["equivalence_report"]
    csv_text = _csv([["policy_id", "value", "kind", "delta", "pass"]] + [
        [r["policy_id"], serialize.fmt_float(r["value"]), r["kind"], serialize.fmt_float(eq["delta"]),
         int(r["value"] <= eq["delta"])] for r in eq["per_policy"]])
    verdict = "PASS" if eq["pass"] else "FAIL"
    summary = f"sup_value={eq['sup_value']:.6g} delta={eq['delta']:.6g} verdict={verdict}"
    return {"equivalence.csv": csv_text}, summary


def _cmd_validate(cfg, seed, threads):
    rep = run_pipeline(cfg, seed, threads=threads, stages=())
    csvs, summary = _equivalence_outputs(rep)
    return rep.to_dict(), csvs, summary, None


def _cmd_pipeline(cfg, seed, threads):
    rep = run_pipeline(cfg, seed, threads=threads)
    csvs, summary = _equivalence_outputs(rep)
    disc_rep = rep.sections.get("discrimination_report")
    if disc_rep:
        csvs["discrimination.csv"] = _discrimination_csv(disc_rep["report"])
        summary += f" Delta={disc_rep['report']['delta_value']:.6g}"
    if rep.sections.get("consistency_table"):
        csvs["consistency.csv"] = _csv([["N", "discrepancy", "iterations"]] + [
            [r["N"], serialize.fmt_float(r["discrepancy"]), r["iterations"]]
            for r in rep.sections["consistency_table"]])
    return rep.to_dict(), csvs, summary, None


def _cmd_informativeness(cfg, seed, threads):
    st = StageRunner()
    sc = st.run("config", load_scenario, cfg, seed)
    if not sc.informativeness:
        raise PipelineError("config", ConfigError("scenario has no 'informativeness' section"))
    s = derive_seed(sc.seed, "informativeness")
    out = st.run("informativeness", run_informativeness, sc, sc.informativeness, s)
    report = {
        "scenario": sc.name,
        "discrimination_report": out,
        "provenance": {"config_digest": config_digest(sc.raw), "seed_override": seed,
                       "seeds": {"master": sc.seed, "informativeness": s}},
    }
    r = out["report"]
    summary = (f"Delta={r['delta_value']:.6g} informative={r['informative']} "
               f"selected_family={out['selected_family']}")
    return report, {"discrimination.csv": _discrimination_csv(r)}, summary, None


COMMANDS = {
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "validate": _cmd_validate,
    "informativeness": _cmd_informativeness,
    "pipeline": _cmd_pipeline,
}


# ------------------------------------------------------------------- helpers


def _csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


def _discrimination_csv(r: dict) -> str:
    rows = [["model_i", "model_j"] + list(r["policy_ids"])]
    for entry in r["full_matrix"]:
        rows.append(list(entry["pair"]) + [serialize.fmt_float(v) for v in entry["values"]])
    return _csv(rows)


def _targets(out: Path, fmt: str, csv_names) -> list:
    paths = []
    if fmt in ("json", "both"):
        paths.append(out / "report.json")
    if fmt in ("csv", "both"):
        paths += [out / n for n in csv_names]
    return paths


def _is_config_error(exc: BaseException) -> bool:
    cause = exc.cause if isinstance(exc, PipelineError) else exc
    return isinstance(cause, ConfigError)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    if args.command is None:
        print(build_parser().format_usage().rstrip(), file=sys.stderr)
        return EXIT_CONFIG

    cfg_path = Path(args.config)
    if not cfg_path.is_file():
        print(f"error: config file not found: {cfg_path}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = json.loads(cfg_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config {cfg_path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    threads = args.threads if args.threads is not None else threads_from_env()
    if threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.out)
    # check for existing reports before spending any compute
    probe_csvs = {
        "simulate": [], "fit": ["fit_trace.csv"], "validate": ["equivalence.csv"],
        "informativeness": ["discrimination.csv"],
        "pipeline": ["equivalence.csv", "discrimination.csv", "consistency.csv"],
    }[args.command]
    existing = [p for p in _targets(out, args.format, probe_csvs) if p.exists()]
    if args.command == "simulate" and (out / "dataset" / "manifest.json").exists():
        existing.append(out / "dataset" / "manifest.json")
    if existing and not args.force:
        print(f"error: refusing to overwrite {existing[0]} (use --force)", file=sys.stderr)
        return EXIT_CONFIG

    try:
        report, csvs, summary, data = COMMANDS[args.command](cfg, args.seed, threads)
    except (PipelineError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if _is_config_error(exc) else EXIT_RUNTIME
    except PersidError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    out.mkdir(parents=True, exist_ok=True)
    if data is not None:
        serialize.write_dataset(out / "dataset", data)
    if args.format in ("json", "both"):
        serialize.write_json(out / "report.json", report)
    if args.format in ("csv", "both"):
        for name, text in csvs.items():
            (out / name).write_text(text, encoding="utf-8")
    if not args.quiet:
        print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
