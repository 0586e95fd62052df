"""Command-line front door.

Subcommands: ingest, train, attack, rdp-tables, rdp-train, report,
accept. Detection is a flag on train/attack (--detector). Exit codes:
0 ok, 1 usage error, 2 runtime error, 3 acceptance failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import csvio, presets, rdp
from .config import ConfigError, ExperimentConfig
from .experiment import SCHEMAS, discover_runs, final_loss_runner, report, run

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_ACCEPTANCE = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="dpfedsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_preset=True):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", default="runs", help="output directory")
        if with_preset:
            p.add_argument("--preset", choices=sorted(presets.PRESETS), help="run a named grid")

    p_ingest = sub.add_parser("ingest", help="parse a source CSV into a cleaned cache file")
    p_ingest.add_argument("path", help="semicolon-separated source CSV")
    p_ingest.add_argument("--out", default="cache", help="cache directory")

    p_train = sub.add_parser("train", help="run federation (benign unless the config arms an attack)")
    common(p_train)
    p_train.add_argument("--detector", choices=["off", "norm", "accuracy", "mix"],
                         help="arm a detector, overriding the config")

    p_attack = sub.add_parser("attack", help="run federation with the configured attacker")
    common(p_attack)
    p_attack.add_argument("--detector", choices=["off", "norm", "accuracy", "mix"])
    p_attack.add_argument("--mode", choices=["rmd", "mpelm"], help="attack mode override")

    p_tables = sub.add_parser("rdp-tables", help="generate attacker/federated loss tables")
    common(p_tables, with_preset=False)
    p_tables.add_argument("--gammas", default="0.5,1.0", help="comma-separated poisoning degrees")
    p_tables.add_argument("--table-seeds", default="0,1", help="comma-separated run seeds per cell")

    p_rdp = sub.add_parser("rdp-train", help="train the privacy-level agent on generated tables")
    p_rdp.add_argument("--tables", required=True, help="loss-tables CSV from rdp-tables")
    p_rdp.add_argument("--out", default="runs/rdp", help="output directory")
    p_rdp.add_argument("--seed", type=int, default=0)
    p_rdp.add_argument("--alpha", type=float, default=0.001)
    p_rdp.add_argument("--zeta", type=float, default=0.5)
    p_rdp.add_argument("--episodes", type=int, default=60000)

    p_report = sub.add_parser("report", help="summarize one or more run directories")
    p_report.add_argument("runs", nargs="+", help="run directories, or one parent directory")
    p_report.add_argument("--out", help="also write the table as CSV")

    p_accept = sub.add_parser("accept", help="run the acceptance suite with pinned seeds")
    p_accept.add_argument("--only", help="comma-separated criterion numbers, e.g. 1,2,10")
    p_accept.add_argument("--out", default="runs/acceptance", help="scratch directory")
    return parser


def _load_config(args, overrides=None) -> ExperimentConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(parse_file(args.config))
    if overrides:
        values.update(overrides)
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return ExperimentConfig.from_dict(values)


def parse_file(path) -> dict:
    from .config import parse_config_text

    return parse_config_text(Path(path).read_text())


def _cmd_ingest(args) -> int:
    from .data import ingest_csv

    samples = ingest_csv(args.path, cache_dir=args.out)
    print(f"ingested {len(samples)} samples; cache written under {args.out}")
    return EXIT_OK


def _run_single(cfg: ExperimentConfig, out_dir: Path) -> int:
    bundle = run(cfg, out_dir)
    print(f"{out_dir}: status={bundle.status} episodes={bundle.summary['episodes_executed']} "
          f"final_val_loss={bundle.summary['final_val_loss']:.6g}")
    return EXIT_OK if bundle.status == "ok" else EXIT_RUNTIME


def _cmd_train(args, forced_mode=None) -> int:
    out_root = Path(args.out)
    if args.preset:
        worst = EXIT_OK
        for name, overrides in presets.expand(args.preset):
            cfg = _load_config(args, overrides)
            worst = max(worst, _run_single(cfg, out_root / name))
        return worst
    overrides = {}
    if getattr(args, "detector", None):
        overrides["detector.kind"] = args.detector
    if forced_mode:
        overrides["attack.mode"] = forced_mode
    elif getattr(args, "mode", None):
        overrides["attack.mode"] = args.mode
    cfg = _load_config(args, overrides)
    return _run_single(cfg, out_root)


def _cmd_attack(args) -> int:
    mode = args.mode or "mpelm"
    if getattr(args, "config", None):
        file_mode = parse_file(args.config).get("attack.mode", "")
        if file_mode in ("rmd", "mpelm") and not args.mode:
            mode = file_mode
    return _cmd_train(args, forced_mode=mode)


def _cmd_rdp_tables(args) -> int:
    base = _load_config(args)
    gammas = [float(g) for g in args.gammas.split(",") if g.strip()]
    seeds = [int(s) for s in args.table_seeds.split(",") if s.strip()]
    if not gammas or not seeds:
        raise UsageError("--gammas and --table-seeds must be nonempty")
    tables = rdp.generate_loss_tables(
        rdp.default_epsilon_grid(), gammas, seeds, final_loss_runner(base)
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = write_tables(out / "loss_tables.csv", tables)
    print(f"wrote {path} ({len(tables.cells)} cells)")
    return EXIT_OK


def write_tables(path, tables: rdp.LossTables):
    return csvio.write_csv(
        path, "loss_tables", SCHEMAS["loss_tables"],
        ["epsilon", "gamma", "seed", "m_l", "f_l"], tables.cells,
    )


def read_tables(path) -> rdp.LossTables:
    rows = csvio.read_csv(path, "loss_tables", SCHEMAS["loss_tables"])
    cells = [
        {
            "epsilon": float(r["epsilon"]),
            "gamma": float(r["gamma"]),
            "seed": int(r["seed"]),
            "m_l": float(r["m_l"]),
            "f_l": float(r["f_l"]),
        }
        for r in rows
    ]
    grid = tuple(sorted({c["epsilon"] for c in cells}))
    import numpy as np

    m_l, f_l = [], []
    for eps in grid:
        mine = [c for c in cells if c["epsilon"] == eps]
        with np.errstate(all="ignore"):
            m = np.array([c["m_l"] for c in mine])
            f = np.array([c["f_l"] for c in mine])
            m_l.append(float(np.nanmean(m)) if np.any(np.isfinite(m)) else float("nan"))
            f_l.append(float(np.nanmean(f)) if np.any(np.isfinite(f)) else float("nan"))
    return rdp.LossTables(epsilon_grid=grid, m_l=np.array(m_l), f_l=np.array(f_l), cells=cells)


def _cmd_rdp_train(args) -> int:
    tables = read_tables(args.tables)
    hyper = rdp.RdpHyper(alpha=args.alpha, zeta=args.zeta, max_episodes=args.episodes)
    result = rdp.train(tables, hyper, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csvio.write_csv(
        out / "qtable.csv", "qtable", SCHEMAS["qtable"],
        ["m_l_bin", "f_l_bin", "eps_index", "action", "q_value"],
        [
            {
                "m_l_bin": s.m_l_bin,
                "f_l_bin": s.f_l_bin,
                "eps_index": s.epsilon_index,
                "action": a.name.lower(),
                "q_value": q,
            }
            for s, a, q in result.qtable.rows()
        ],
    )
    csvio.write_csv(
        out / "rdp_trace.csv", "rdp_trace", SCHEMAS["rdp_trace"],
        ["episode", "cumulative_reward", "mean_abs_delta_q", "exploration_prob"],
        result.trace,
    )
    print(f"trained {args.episodes} episodes; epsilon*={result.epsilon_star}; "
          f"final mean|dQ|={result.trace[-1]['mean_abs_delta_q']:.3e}; outputs in {out}")
    return EXIT_OK


def _cmd_report(args) -> int:
    run_dirs = args.runs
    if len(run_dirs) == 1 and not (Path(run_dirs[0]) / "summary.csv").exists():
        run_dirs = discover_runs(run_dirs[0])
    text, _rows = report(run_dirs, args.out)
    print(text)
    return EXIT_OK


def _cmd_accept(args) -> int:
    from .acceptance import run_suite

    only = None
    if args.only:
        only = {int(x) for x in args.only.split(",") if x.strip()}
    results = run_suite(Path(args.out), only=only)
    failed = [r for r in results if not r.passed]
    return EXIT_ACCEPTANCE if failed else EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handlers = {
            "ingest": _cmd_ingest,
            "train": _cmd_train,
            "attack": _cmd_attack,
            "rdp-tables": _cmd_rdp_tables,
            "rdp-train": _cmd_rdp_train,
            "report": _cmd_report,
            "accept": _cmd_accept,
        }
        return handlers[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except csvio.SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
