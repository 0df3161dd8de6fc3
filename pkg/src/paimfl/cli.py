"""Command line: ``paimfl run|compare|attack|report``.

Every ExperimentConfig field is also a flag (``--gamma 0.1``,
``--layer-dims 784,64,10``); flags override the ``--config`` file. Errors go
to stderr as one JSON object ``{"error": <category>, "message": ...}`` and
set a category-specific exit code.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields

from .config import ConfigError, ExperimentConfig, SCHEMES, build_config, parse_config, parse_overrides
from .fl_engine import RoundError
from .model_data import IdxFormatError
from .telemetry import BytesLedger, OutputError, emit_results, output_dir

EXIT_CODES = {"usage": 2, "config": 3, "data": 4, "output": 5, "round": 6, "internal": 1}


class UsageError(Exception):
    category = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(p):
    g = p.add_argument_group("config overrides")
    for f in fields(ExperimentConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar="V")
    g.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--config", help="flat key = value file")
    p.add_argument("--out", help="output directory (env PAIMFL_OUTPUT_DIR wins)")


def build_parser():
    ap = _Parser(prog="paimfl", description="PA-iMFL federated learning simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="one experiment, per-round CSV + manifest")
    _add_config_flags(run)

    cmp_ = sub.add_parser("compare", help="same seed, several schemes and gammas")
    _add_config_flags(cmp_)
    cmp_.add_argument("--seed", type=int, required=True)
    cmp_.add_argument("--schemes", default=",".join(SCHEMES))
    cmp_.add_argument("--gammas", help="comma separated; default: the config's gamma")

    att = sub.add_parser("attack", help="gradient-matching attack on end-client uplinks")
    _add_config_flags(att)

    rep = sub.add_parser("report", help="summarise CSVs in a results directory")
    rep.add_argument("path", nargs="?")
    return ap


def resolve_config(args) -> ExperimentConfig:
    base = parse_config(args.config) if args.config else ExperimentConfig()
    pairs = [f"{k[4:]}={v}" for k, v in vars(args).items() if k.startswith("cfg_") and v is not None]
    pairs += args.overrides
    if getattr(args, "seed", None) is not None:
        pairs.append(f"master_seed={args.seed}")
    return build_config(parse_overrides(pairs), base)


def cmd_run(args):
    from .fl_engine import run_experiment
    cfg = resolve_config(args)
    ledger = BytesLedger()
    res = run_experiment(cfg, ledger=ledger)
    out = emit_results(res, ledger, args.out, cfg, name="run")
    if cfg.attack:
        _attack(cfg, out)
    last = res[-1] if res else None
    print(f"wrote {out / 'run.csv'}" + (f"; final accuracy {last.test_accuracy:.4f}" if last else ""))


def cmd_compare(args):
    from .telemetry import results_csv, scheme_comparison
    from .fl_engine import load_datasets
    cfg = resolve_config(args)
    schemes = [s.strip() for s in args.schemes.split(",") if s.strip()]
    for s in schemes:
        if s not in SCHEMES:
            raise ConfigError(f"must be one of {SCHEMES}", key="scheme")
    gammas = [float(g) for g in args.gammas.split(",")] if args.gammas else [cfg.gamma]
    configs = [cfg.replace(scheme=s, gamma=g) for g in gammas for s in schemes]
    train, test = load_datasets(cfg)
    runs = {}
    table = scheme_comparison(configs, train, test, per_round=runs)
    out = output_dir(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.csv").write_text(table.to_csv(), encoding="utf-8")
        for (s, g), res in runs.items():
            (out / f"{s}_gamma{g!r}.csv").write_text(results_csv(res), encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot write results to {out}: {exc}") from exc
    sys.stdout.write(table.to_csv())


def _attack(cfg, out):
    from .attack import attack_experiment
    rep = attack_experiment(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "attack.csv").write_text(rep.to_csv(), encoding="utf-8")
    return rep


def cmd_attack(args):
    cfg = resolve_config(args)
    try:
        rep = _attack(cfg, output_dir(args.out))
    except OSError as exc:
        raise OutputError(str(exc)) from exc
    sys.stdout.write(rep.to_csv())


def cmd_report(args):
    out = output_dir(args.path)
    files = sorted(out.glob("*.csv"))
    if not files:
        raise OutputError(f"no CSV files under {out}")
    for f in files:
        with open(f, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if rows and "accuracy" in rows[0]:
            total = sum(int(r[k]) for r in rows for k in ("up_end_edge", "up_edge_cloud",
                                                          "down_cloud_edge", "down_edge_end"))
            best = max(float(r["accuracy"]) for r in rows)
            print(f"{f.name}: rounds={len(rows)} final_acc={float(rows[-1]['accuracy']):.4f} "
                  f"best_acc={best:.4f} total_bytes={total}")
        else:
            print(f"{f.name}:")
            for r in rows:
                print("  " + ", ".join(f"{k}={v}" for k, v in r.items()))


def _category(exc) -> str:
    if isinstance(exc, (FileNotFoundError, IdxFormatError)):
        return "data"
    return getattr(exc, "category", "internal")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
        {"run": cmd_run, "compare": cmd_compare, "attack": cmd_attack, "report": cmd_report}[args.cmd](args)
    except (UsageError, ConfigError, RoundError, OutputError, FileNotFoundError, IdxFormatError) as exc:
        cat = _category(exc)
        print(json.dumps({"error": cat, "message": str(exc)}, ensure_ascii=False), file=sys.stderr)
        return EXIT_CODES[cat]
    return 0


if __name__ == "__main__":
    sys.exit(main())
