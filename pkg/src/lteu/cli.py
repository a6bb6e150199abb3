"""Command-line entry point: ``lteu {run,price,check,scene}``.

Exit codes
----------
0  success
1  a feasibility check failed (``check``)
2  usage error (bad flags)
3  a referenced file does not exist
4  configuration or schema violation
5  infeasible power demands in at least one replication
6  no feasible menu (valuations not monotone after ironing)
7  an input file could not be parsed
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import contracts as ct
from . import experiment as ex
from . import harness as hs
from .config import MECHANISMS, Scenario, load_config
from .errors import ConfigError, FeasibilityError, InfeasibleDemandError
from .matching import preferences_to_json

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_CONFIG = 4
EXIT_INFEASIBLE = 5
EXIT_NO_FEASIBLE_MENU = 6
EXIT_PARSE = 7

log = logging.getLogger("lteu")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", help="scenario file (keyed text); defaults if omitted")
    p.add_argument("--seed", type=int, help="override the base seed")
    p.add_argument("--out", help="output directory (env LTEU_OUT; default ./results)")
    p.add_argument("--quiet", action="store_true", help="only print errors")


def build_parser():
    parser = _Parser(prog="lteu", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run an experiment sweep and write CSV + manifest")
    _common(run)
    run.add_argument("--mechanism", choices=MECHANISMS + ("all",),
                     help="allocation mechanism (default: from the config)")

    price = sub.add_parser("price", help="price the contract menu and write menu.json")
    _common(price)

    check = sub.add_parser("check", help="check a menu for feasibility")
    _common(check)
    check.add_argument("menu", help="menu JSON written by 'price'")

    scene = sub.add_parser("scene", help="dump the generated topology (and optionally a matching)")
    _common(scene)
    scene.add_argument("--mechanism", choices=MECHANISMS)
    scene.add_argument("--matching", action="store_true",
                       help="also write matching.json and preferences.json")
    return parser


def _scenario(args, environ):
    if args.config:
        scenario = load_config(args.config, environ)
    else:
        scenario = Scenario().validate()
        if environ.get("LTEU_SEED"):
            scenario = scenario.replace(experiment={"base_seed": int(environ["LTEU_SEED"])})
    if args.seed is not None:
        scenario = scenario.replace(experiment={"base_seed": args.seed})
    if getattr(args, "mechanism", None) and args.mechanism != "all":
        scenario = scenario.replace(experiment={"mechanism": args.mechanism})
    return scenario.validate()


def _out_dir(args, environ):
    return Path(args.out or environ.get("LTEU_OUT") or "results")


def _write_all(out_dir, files):
    """Write every file or none: stage in a temp dir, then move into place."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory(dir=out_dir) as tmp:
        staged = []
        for name, text in files.items():
            path = Path(tmp) / name
            path.write_text(text)
            staged.append((path, out_dir / name))
        for src, dst in staged:
            os.replace(src, dst)
    return [str(dst) for _, dst in staged]


def population_menu(scenario):
    """Menu priced on the population-average valuation of replication 0."""
    value = scenario.experiment.sweep_values[0]
    rep = hs.prepare(scenario, value, 0)
    _, v, _, _ = hs.information_view(rep, complete=False)
    v_mean = v.mean(axis=0) if v.size else np.zeros(len(rep.grid))
    prices, v_used = ct.optimal_prices(v_mean, rep.grid)
    menu = ct.build_menu(rep.alphas, rep.betas, prices)
    return menu, rep.grid, v_used


def cmd_run(args, environ):
    scenario = _scenario(args, environ)
    mechanisms = MECHANISMS if args.mechanism == "all" else (scenario.experiment.mechanism,)
    progress = None
    if not args.quiet:
        def progress(value, index):
            log.info("sweep %s replication %d done", value, index)
    records = ex.run_experiment(scenario, mechanisms, progress)
    files = {f"metrics_{m}.csv": ex.records_to_csv(records, scenario, m) for m in mechanisms}
    manifest = ex.build_manifest(scenario, records, mechanisms, sorted(files) + ["manifest.json"])
    files["manifest.json"] = ex.manifest_json(manifest)
    written = _write_all(_out_dir(args, environ), files)
    failed = [r for r in records if r.failed]
    if not args.quiet:
        for path in written:
            print(path)
    if failed:
        for r in failed:
            print(f"infeasible: {r.mechanism} sweep={r.sweep_value} rep={r.replication}: "
                  f"{r.failed}", file=sys.stderr)
        return EXIT_INFEASIBLE
    if not all(r.conserved for r in records):
        print("traffic conservation violated", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_price(args, environ):
    scenario = _scenario(args, environ)
    menu, grid, _ = population_menu(scenario)
    written = _write_all(_out_dir(args, environ), {"menu.json": ct.menu_to_json(menu, grid.types)})
    if not args.quiet:
        for c, theta in zip(menu, grid.types):
            print(f"theta={theta:g} alpha={c.alpha:.4f} beta={c.beta:.4f} price={c.price:.6g}")
        print(written[0])
    return EXIT_OK


def cmd_check(args, environ):
    path = Path(args.menu)
    if not path.is_file():
        print(f"menu file not found: {path}", file=sys.stderr)
        return EXIT_MISSING_FILE
    try:
        menu = ct.menu_from_json(path.read_text())
    except (ValueError, KeyError, TypeError) as exc:
        print(f"cannot parse menu {path}: {exc}", file=sys.stderr)
        return EXIT_PARSE
    if not menu:
        print("warning: empty menu; all conditions hold vacuously", file=sys.stderr)
        return EXIT_OK
    scenario = _scenario(args, environ)
    _, grid, v_bar = population_menu(scenario)
    if len(menu) != len(grid):
        print(f"menu has {len(menu)} contracts but the scenario has {len(grid)} types",
              file=sys.stderr)
        return EXIT_PARSE
    expected = ct.ExpectedQuantities(grid.types, v_bar, [c.price for c in menu])
    reports = [ct.check_tibs(expected), ct.check_iir(expected), ct.check_ordering(expected),
               ct.check_feasibility_conditions(expected)]
    for rep in reports:
        if not args.quiet or not rep.ok:
            print(rep.line())
            for v in rep.violations:
                print(f"  {v}")
    return EXIT_OK if all(r.ok for r in reports) else EXIT_CHECK_FAILED


def cmd_scene(args, environ):
    scenario = _scenario(args, environ)
    rep = hs.prepare(scenario, scenario.experiment.sweep_values[0], 0)
    files = {"scene.json": rep.scene.to_json()}
    if args.matching:
        mech = args.mechanism or scenario.experiment.mechanism
        stats, _, _, prices = hs.information_view(rep, complete=mech == "complete-info")
        if mech == "uniform-price":
            prices = hs.uniform_prices(rep, prices)
        if mech == "random":
            pairs, matching = hs.random_matching(rep)
        else:
            pairs, matching, _ = hs.match_by_preferences(rep, prices, stats)
        files["matching.json"] = matching.to_json()
        files["preferences.json"] = preferences_to_json(pairs)
    written = _write_all(_out_dir(args, environ), files)
    if not args.quiet:
        for path in written:
            print(path)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "price": cmd_price, "check": cmd_check, "scene": cmd_scene}


def main(argv=None, environ=None):
    environ = os.environ if environ is None else environ
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args, environ)
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_MISSING_FILE
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleDemandError as exc:
        print(f"infeasible demands: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except FeasibilityError as exc:
        print(f"no feasible menu: {exc}", file=sys.stderr)
        return EXIT_NO_FEASIBLE_MENU
    except json.JSONDecodeError as exc:
        print(f"cannot parse input: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
