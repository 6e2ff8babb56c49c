"""Experiment configuration: an INI-style key/value grammar plus the canonical attack presets.

Sections and keys (all optional; defaults shown in ``DEFAULTS``)::

    [run]        clients, rounds, seed, eval_mode, workers
    [dataset]    name (mnist|cifar10), root, clients_cap, test_size
    [model]      arch (mnist_cnn|cifar_resnet|tiny_cnn)
    [defense]    method (FedAvg|Median|RFA|RLR|SPFL|SPFL_oA|SPFL_NAD)
    [train]      epochs, lr, batch_size
    [attack]     canonical | method, adversaries, schedule, gamma, poison_per_batch,
                 staggered, lie_z, reference_rounds, epochs
    [trigger]    rows (comma-separated 0/1 strings), value, offset (row, col), target
    [distill]    tau, beta_kd, beta_at
    [aggregator] method, eta, theta, weiszfeld_iters, weiszfeld_eps
    [output]     dir, plots

``schedule`` is ``every``, ``every K`` (the K-th, 2K-th, ... iteration), or a
comma list of 0-based rounds.  With ``reference_rounds = R`` listed rounds are
rescaled by ``rounds / R``.
"""
from __future__ import annotations

import configparser
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

from .aggregation import AggregatorConfig
from .attacks import AttackMethod, AttackPlan, TrainSettings, TriggerSpec
from .distill import DistillConfig
from .errors import ConfigError
from .sim import Defense, SimConfig

CANONICAL_ATTACKS = (
    "DPA-5", "DPA-9", "LIE-5", "LIE-9", "MPA-SS", "MPA-MS",
    "DBA-4*SS", "DBA-4*MS", "DBA-6*SS", "DBA-6*MS",
)

DEFAULTS = {
    "run": {"clients": "10", "rounds": "15", "seed": "0", "eval_mode": "auto", "workers": "1"},
    "dataset": {"name": "mnist", "root": "", "clients_cap": "1000", "test_size": "1000"},
    "model": {"arch": ""},
    "defense": {"method": "SPFL"},
    "train": {"epochs": "2", "lr": "0.05", "batch_size": "64"},
    "attack": {},
    "trigger": {"value": "1.0", "target": ""},
    "distill": {"tau": "4", "beta_kd": "1", "beta_at": "1"},
    "aggregator": {"method": "FedAvg", "eta": "1", "theta": "4", "weiszfeld_iters": "10",
                   "weiszfeld_eps": "1e-6"},
    "output": {"dir": "runs/latest", "plots": "true"},
}

DATASET_DEFAULTS = {
    "mnist": {"arch": "mnist_cnn", "image": (28, 28), "trigger_size": 3, "target": 0},
    "cifar10": {"arch": "cifar_resnet", "image": (32, 32), "trigger_size": 4, "target": 2},  # bird
}


class ConfigParseError(ConfigError):
    pass


class UnknownAttackError(ConfigError):
    pass


@dataclass
class ExperimentConfig:
    sim: SimConfig
    dataset: str = "mnist"
    data_root: str = ""
    clients_cap: int | None = 1000
    test_size: int | None = 1000
    arch: str = "mnist_cnn"
    trigger: TriggerSpec | None = None
    output_dir: str = "runs/latest"
    plots: bool = True
    canonical: str | None = None
    raw: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        """Everything needed to reproduce the run."""
        return {"config": self.raw, "seed": self.sim.seed, "canonical": self.canonical}


def canonical_file(name: str) -> str:
    key = name.replace("*", "")
    if name not in CANONICAL_ATTACKS and key not in {c.replace("*", "") for c in CANONICAL_ATTACKS}:
        raise UnknownAttackError(f"unknown canonical attack {name!r}; choose from {', '.join(CANONICAL_ATTACKS)}")
    return f"{key}.ini"


def canonical_section(name: str) -> dict[str, str]:
    text = resources.files("spfl").joinpath("presets").joinpath(canonical_file(name)).read_text()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read_string(text)
    return dict(parser["attack"])


def parse_schedule(text: str, rounds: int, reference_rounds: int | None) -> tuple[tuple[int, ...], bool]:
    """Returns (rounds, every_round)."""
    text = text.strip().lower()
    if text in ("", "every"):
        return (), text == "every"
    if text.startswith("every"):
        k = int(text.split()[1])
        return tuple(t for t in range(rounds) if (t + 1) % k == 0), False
    listed = [int(v) for v in text.replace(",", " ").split()]
    if reference_rounds:
        listed = [min(rounds - 1, round(r * rounds / reference_rounds)) for r in listed]
    return tuple(listed), False


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def build_trigger(sec: dict, dataset: str) -> TriggerSpec:
    d = DATASET_DEFAULTS[dataset]
    target = int(sec.get("target") or d["target"])
    value = float(sec.get("value", 1.0))
    if sec.get("rows"):
        rows = [r.strip() for r in sec["rows"].split(",")]
        mask_h, mask_w = len(rows), len(rows[0])
        h, w = d["image"]
        offset = _ints(sec["offset"]) if sec.get("offset") else (h - mask_h - 1, w - mask_w - 1)
        return TriggerSpec.from_rows(rows, values=value, target_label=target, offset=offset)
    return TriggerSpec.square(d["trigger_size"], d["image"], target_label=target, value=value)


def build_attack(sec: dict, trigger: TriggerSpec, rounds: int) -> AttackPlan:
    try:
        method = AttackMethod(sec["method"])
    except (KeyError, ValueError) as exc:
        raise ConfigParseError(f"[attack] method: expected one of DPA/MPA/DBA/LIE, got {sec.get('method')!r}") from exc
    count = sec.get("adversaries", "1")
    ids = _ints(sec["ids"]) if sec.get("ids") else tuple(range(int(count)))
    ref = int(sec["reference_rounds"]) if sec.get("reference_rounds") else None
    schedule, every = parse_schedule(sec.get("schedule", "every"), rounds, ref)
    return AttackPlan(
        method=method,
        adversary_ids=ids,
        schedule=schedule,
        every_round=every,
        gamma=float(sec.get("gamma", 1)),
        poison_per_batch=int(sec.get("poison_per_batch", 20)),
        trigger=trigger,
        staggered=sec.get("staggered", "false").lower() in ("1", "true", "yes"),
        lie_z=float(sec.get("lie_z", 1.5)),
        name=sec.get("canonical", ""),
        epochs=int(sec["epochs"]) if sec.get("epochs") else None,
    )


def load_config(path: str | Path | None = None, overrides: dict[str, dict[str, str]] | None = None
                ) -> ExperimentConfig:
    """Parse a config file (or only defaults) and apply ``{section: {key: value}}`` overrides."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read_dict(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigParseError(f"cannot read config {path}: {exc}") from exc
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigParseError(f"{path}: {exc}") from exc
    for section, values in (overrides or {}).items():
        if not parser.has_section(section):
            parser.add_section(section)
        for k, v in values.items():
            if v is not None:
                parser.set(section, k, str(v))
    return from_parser(parser)


def _get(parser, section, key, conv):
    raw = parser.get(section, key, fallback="")
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigParseError(f"[{section}] {key}: bad value {raw!r}") from exc


def from_parser(parser: configparser.ConfigParser) -> ExperimentConfig:
    raw = {s: dict(parser[s]) for s in parser.sections()}
    dataset = parser.get("dataset", "name")
    if dataset not in DATASET_DEFAULTS:
        raise ConfigParseError(f"[dataset] name: unknown dataset {dataset!r}")
    rounds = _get(parser, "run", "rounds", int)
    clients = _get(parser, "run", "clients", int)
    trigger = build_trigger(raw.get("trigger", {}), dataset)

    attack_sec = dict(raw.get("attack", {}))
    canonical = attack_sec.get("canonical") or None
    if canonical:
        preset = canonical_section(canonical)
        preset.update({k: v for k, v in attack_sec.items() if k != "canonical"})
        attack_sec = preset | {"canonical": canonical}
    plan = build_attack(attack_sec, trigger, rounds) if attack_sec.get("method") else None

    optional_int = lambda s: int(s) if s.strip() else None  # noqa: E731
    try:
        train = TrainSettings(_get(parser, "train", "epochs", int), _get(parser, "train", "lr", float),
                              _get(parser, "train", "batch_size", int))
        distill = DistillConfig(tau=_get(parser, "distill", "tau", float),
                                beta_kd=_get(parser, "distill", "beta_kd", float),
                                beta_at=_get(parser, "distill", "beta_at", float))
        aggregator = AggregatorConfig(
            method=parser.get("aggregator", "method"),
            eta=_get(parser, "aggregator", "eta", float),
            theta=_get(parser, "aggregator", "theta", int),
            weiszfeld_iters=_get(parser, "aggregator", "weiszfeld_iters", int),
            weiszfeld_eps=_get(parser, "aggregator", "weiszfeld_eps", float),
        )
        sim = SimConfig(
            num_clients=clients, rounds=rounds, defense=Defense(parser.get("defense", "method")),
            attack=plan, train=train, distill=distill, aggregator=aggregator,
            seed=_get(parser, "run", "seed", int), eval_mode=parser.get("run", "eval_mode"),
            workers=_get(parser, "run", "workers", int),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigParseError(str(exc)) from exc
    return ExperimentConfig(
        sim=sim,
        dataset=dataset,
        data_root=parser.get("dataset", "root"),
        clients_cap=_get(parser, "dataset", "clients_cap", optional_int),
        test_size=_get(parser, "dataset", "test_size", optional_int),
        arch=parser.get("model", "arch") or DATASET_DEFAULTS[dataset]["arch"],
        trigger=trigger,
        output_dir=parser.get("output", "dir"),
        plots=parser.getboolean("output", "plots"),
        canonical=canonical,
        raw=raw,
    )


def dump_manifest(cfg: ExperimentConfig, path: Path, extra: dict | None = None) -> None:
    doc = cfg.manifest() | (extra or {})
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
