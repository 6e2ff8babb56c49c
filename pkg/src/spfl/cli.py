"""Command line entry point: ``spfl run | plot | attention | grid``."""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import CANONICAL_ATTACKS, ConfigParseError, UnknownAttackError, load_config
from .data import DATA_ROOT_ENV, load_dataset, balanced_test_subset
from .errors import ConfigError, DivergenceError, FormatError, SPFLError
from .nn import Network, NetworkSpec, load_params

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_MISSING_DATA = 3
EXIT_UNKNOWN_ATTACK = 4
EXIT_ABORTED = 5
EXIT_BAD_INPUT = 6

log = logging.getLogger("spfl")


def _overrides(args) -> dict:
    ov: dict[str, dict] = {"run": {}, "dataset": {}, "defense": {}, "attack": {}, "output": {}}
    if args.seed is not None:
        ov["run"]["seed"] = args.seed
    if args.rounds is not None:
        ov["run"]["rounds"] = args.rounds
    if args.dataset:
        ov["dataset"]["name"] = args.dataset
    if args.clients_cap is not None:
        ov["dataset"]["clients_cap"] = args.clients_cap
    if args.data_root:
        ov["dataset"]["root"] = args.data_root
    if args.defense:
        ov["defense"]["method"] = args.defense
    if args.attack:
        if args.attack.lower() != "none":
            ov["attack"]["canonical"] = args.attack
    if args.out:
        ov["output"]["dir"] = args.out
    return ov


def cmd_run(args) -> int:
    from .report import emit_plots
    from .runner import execute, persist, prepare

    try:
        cfg = load_config(args.config, _overrides(args))
    except UnknownAttackError as exc:
        log.error("%s", exc)
        return EXIT_UNKNOWN_ATTACK
    except (ConfigParseError, ConfigError, ValueError) as exc:
        log.error("config error: %s", exc)
        return EXIT_PARSE
    try:
        train, test = load_dataset(cfg.dataset, cfg.data_root or None)
    except (OSError, FormatError) as exc:
        log.error("dataset %s unavailable (%s); set --data-root or $%s", cfg.dataset, exc, DATA_ROOT_ENV)
        return EXIT_MISSING_DATA
    prepared = prepare(cfg, train, test)
    try:
        result = execute(cfg, prepared)
    except DivergenceError as exc:
        log.error("run aborted: %s", exc)
        return EXIT_ABORTED
    out = Path(cfg.output_dir)
    persist(cfg, result, prepared.net, out)
    if cfg.plots:
        emit_plots([out])
    last = result.records[-1]
    print(f"{out}: final MA {last.ma:.4f} ASR {last.asr:.4f}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .report import emit_plots

    try:
        paths = emit_plots(args.runs, args.out, args.labels)
    except FormatError as exc:
        log.error("%s", exc)
        return EXIT_BAD_INPUT
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_attention(args) -> int:
    from .report import attention_report
    from .runner import SPEC_FILE, load_manifest
    from .config import from_parser
    import configparser

    run = Path(args.run)
    try:
        net = Network(NetworkSpec.from_json((run / SPEC_FILE).read_text()))
        parser = configparser.ConfigParser()
        parser.read_dict(load_manifest(run)["config"])
        cfg = from_parser(parser)
        ckpt = run / "checkpoints"
        if args.client is not None:
            names = [f"client{args.client}_teacher.bin", f"client{args.client}_student.bin"]
        else:
            names = ["global.bin"]
        models = [load_params(ckpt / n) for n in names]
    except (OSError, KeyError, FormatError, ConfigError) as exc:
        log.error("cannot load run %s: %s", run, exc)
        return EXIT_BAD_INPUT
    try:
        _, test = load_dataset(cfg.dataset, args.data_root or cfg.data_root or None)
    except (OSError, FormatError) as exc:
        log.error("dataset unavailable: %s", exc)
        return EXIT_MISSING_DATA
    test = balanced_test_subset(test, args.samples, seed=cfg.sim.seed + 1)
    try:
        distance, _ = attention_report(net, models, test.inputs, cfg.trigger, args.out or run / "attention")
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_BAD_INPUT
    print(f"attention distance {distance:.4f}")
    return EXIT_OK


def _grid_job(job) -> tuple[str, int]:
    argv, label = job
    return label, main(argv)


def cmd_grid(args) -> int:
    jobs = []
    for attack in args.attacks:
        for defense in args.defenses:
            label = f"{attack.replace('*', '')}_{defense}"
            argv = ["run", "--attack", attack, "--defense", defense, "--out", str(Path(args.out) / label)]
            if args.config:
                argv += ["--config", args.config]
            for flag, value in (("--rounds", args.rounds), ("--seed", args.seed), ("--dataset", args.dataset),
                                ("--clients-cap", args.clients_cap), ("--data-root", args.data_root)):
                if value is not None:
                    argv += [flag, str(value)]
            jobs.append((argv, label))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_grid_job, jobs))
    else:
        results = [_grid_job(j) for j in jobs]
    worst = 0
    for label, code in results:
        print(f"{label}: exit {code}")
        worst = max(worst, code)
    return worst


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spfl", description="Federated poisoning attacks and defenses.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--rounds", type=int)
        sp.add_argument("--dataset", choices=["mnist", "cifar10"])
        sp.add_argument("--clients-cap", type=int)
        sp.add_argument("--data-root", help=f"dataset directory (default ${DATA_ROOT_ENV})")

    run = sub.add_parser("run", help="run one experiment")
    common(run)
    run.add_argument("--attack", help=f"canonical attack: {', '.join(CANONICAL_ATTACKS)} or none")
    run.add_argument("--defense")
    run.add_argument("--out")
    run.set_defaults(func=cmd_run)

    plot = sub.add_parser("plot", help="MA/ASR curves for one or more run directories")
    plot.add_argument("runs", nargs="+")
    plot.add_argument("--out")
    plot.add_argument("--labels", nargs="+")
    plot.set_defaults(func=cmd_plot)

    att = sub.add_parser("attention", help="attention heatmaps and clean/triggered distance")
    att.add_argument("run")
    att.add_argument("--client", type=int, help="use this client's teacher/student pair instead of the global model")
    att.add_argument("--samples", type=int, default=200)
    att.add_argument("--out")
    att.add_argument("--data-root")
    att.set_defaults(func=cmd_attention)

    grid = sub.add_parser("grid", help="run a grid of canonical attacks x defenses")
    common(grid)
    grid.add_argument("--attacks", nargs="+", default=list(CANONICAL_ATTACKS))
    grid.add_argument("--defenses", nargs="+", default=["FedAvg", "Median", "RFA", "RLR", "SPFL"])
    grid.add_argument("--out", default="runs/grid")
    grid.add_argument("--jobs", type=int, default=1)
    grid.set_defaults(func=cmd_grid)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except SPFLError as exc:
        log.error("%s", exc)
        return EXIT_ABORTED


if __name__ == "__main__":
    sys.exit(main())
