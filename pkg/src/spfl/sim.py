"""Federated round orchestration for baseline defenses and SPFL clients."""
from __future__ import annotations

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .aggregation import AggregatorConfig, AggregatorMethod, aggregate
from .attacks import AttackPlan, TrainSettings, TriggerSpec, attack_updates
from .data import Dataset
from .distill import ClientModels, DistillConfig, Variant, ensemble_logits, localkd_round
from .errors import ConfigError, DivergenceError
from .nn import Network, ParamVector
from .train import Shard, sgd_train

log = logging.getLogger(__name__)


class Defense(str, enum.Enum):
    FedAvg = "FedAvg"
    Median = "Median"
    RFA = "RFA"
    RLR = "RLR"
    SPFL = "SPFL"
    SPFL_oA = "SPFL_oA"
    SPFL_NAD = "SPFL_NAD"

    @property
    def is_spfl(self) -> bool:
        return self.value.startswith("SPFL")


@dataclass
class SimConfig:
    num_clients: int = 10
    rounds: int = 30
    defense: Defense = Defense.FedAvg
    attack: AttackPlan | None = None
    train: TrainSettings = field(default_factory=TrainSettings)
    distill: DistillConfig = field(default_factory=DistillConfig)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    seed: int = 0
    # auto: ensemble for SPFL variants, global model otherwise
    eval_mode: str = "auto"
    workers: int = 1

    def __post_init__(self):
        self.defense = Defense(self.defense)
        if self.num_clients < 2:
            raise ConfigError("need at least two clients")
        if self.rounds < 1:
            raise ConfigError("need at least one round")
        if self.eval_mode not in {"auto", "global", "ensemble", "student"}:
            raise ConfigError(f"unknown eval_mode {self.eval_mode!r}")
        if not self.defense.is_spfl and self.defense.value != self.aggregator.method.value:
            self.aggregator = replace(self.aggregator, method=AggregatorMethod(self.defense.value))
        if self.defense.is_spfl:
            self.distill = replace(self.distill, variant=Variant(self.defense.value))
        self.distill = replace(
            self.distill, epochs=self.train.epochs, lr=self.train.lr,
            batch_size=self.train.batch_size, total_rounds=self.rounds,
        )
        if self.attack is not None:
            self.attack.validate(self.num_clients, self.rounds)

    @property
    def resolved_eval_mode(self) -> str:
        if self.eval_mode != "auto":
            return self.eval_mode
        return "ensemble" if self.defense.is_spfl else "global"


@dataclass
class RoundRecord:
    round: int
    ma: float
    asr: float
    ba: float | None
    client_ma: dict[int, float] = field(default_factory=dict)
    client_asr: dict[int, float] = field(default_factory=dict)


@dataclass
class ClientState:
    id: int
    role: str  # "benign" | "adversary"
    shard: Shard
    models: ClientModels | None = None


def client_rng(seed: int, client: int, t: int) -> np.random.Generator:
    return np.random.default_rng([seed, client, t])


def accuracy_and_asr(logits_clean: np.ndarray, logits_trig: np.ndarray, labels: np.ndarray, target: int):
    ma = float((logits_clean.argmax(axis=1) == labels).mean())
    asr = float((logits_trig.argmax(axis=1) == target).mean())
    return ma, asr


def evaluate(net: Network, models: dict[int, ClientModels | ParamVector], clean: Dataset,
             triggered_inputs: np.ndarray, target: int, ba: bool = False, round_: int = 0) -> RoundRecord:
    """Mean MA/ASR over ``models``; a :class:`ClientModels` entry is scored by its ensemble."""
    client_ma, client_asr = {}, {}
    for cid, m in models.items():
        if isinstance(m, ClientModels):
            lc = ensemble_logits(net, m.teacher, m.student, clean.inputs)
            lt = ensemble_logits(net, m.teacher, m.student, triggered_inputs)
        else:
            lc, lt = net.logits(m, clean.inputs), net.logits(m, triggered_inputs)
        client_ma[cid], client_asr[cid] = accuracy_and_asr(lc, lt, clean.labels, target)
    ma = float(np.mean(list(client_ma.values())))
    asr = float(np.mean(list(client_asr.values())))
    return RoundRecord(round_, ma, asr, ma if ba else None, client_ma, client_asr)


class Simulator:
    """Holds global and per-client state and advances it one round at a time."""

    def __init__(self, config: SimConfig, net: Network, shards: list[Shard], test: Dataset,
                 eval_trigger: TriggerSpec, init: ParamVector | None = None):
        if len(shards) != config.num_clients:
            raise ConfigError(f"{len(shards)} shards for {config.num_clients} clients")
        self.cfg = config
        self.net = net
        self.test = test
        self.plan = config.attack
        self.eval_trigger = config.attack.trigger if config.attack else eval_trigger
        self.triggered_test = self.eval_trigger.stamp(test.inputs)
        adversaries = set(self.plan.adversary_ids) if self.plan else set()
        self.clients = [
            ClientState(i, "adversary" if i in adversaries else "benign", shards[i]) for i in range(config.num_clients)
        ]
        self.global_params = init if init is not None else net.init_params(config.seed)
        self.submitted: dict[int, ParamVector] = {}
        self.records: list[RoundRecord] = []

    @property
    def benign(self) -> list[ClientState]:
        return [c for c in self.clients if c.role == "benign"]

    def _local_update(self, client: ClientState, t: int) -> tuple[ParamVector, ClientModels | None]:
        cfg = self.cfg
        rng = client_rng(cfg.seed, client.id, t)
        if cfg.defense.is_spfl and client.role == "benign":
            if t == 0:
                student = sgd_train(self.net, self.global_params, client.shard, epochs=cfg.train.epochs,
                                    lr=cfg.train.lr, batch_size=cfg.train.batch_size, rng=rng)
                return student, ClientModels(teacher=student.copy(), student=student)
            models = localkd_round(self.net, self.global_params, client.models.teacher, client.shard,
                                   cfg.distill, t, rng)
            return models.student, models
        params = sgd_train(self.net, self.global_params, client.shard, epochs=cfg.train.epochs,
                           lr=cfg.train.lr, batch_size=cfg.train.batch_size, rng=rng)
        return params, None

    def run_round(self, t: int) -> RoundRecord:
        cfg = self.cfg
        if not 0 <= t < cfg.rounds:
            raise ConfigError(f"round {t} outside [0, {cfg.rounds})")
        attackers = self.plan.attackers_at(t) if self.plan else []
        honest = [c for c in self.clients if c.id not in attackers]

        if cfg.workers > 1:
            with ThreadPoolExecutor(cfg.workers) as pool:
                results = list(pool.map(lambda c: self._local_update(c, t), honest))
        else:
            results = [self._local_update(c, t) for c in honest]

        submissions: dict[int, ParamVector] = {}
        for client, (params, models) in zip(honest, results):
            submissions[client.id] = params
            if models is not None:
                client.models = models
        if attackers:
            shards = {c.id: c.shard for c in self.clients}
            rngs = {a: client_rng(cfg.seed, a, t) for a in attackers}
            submissions.update(attack_updates(self.plan, attackers, self.net, self.global_params,
                                              shards, cfg.train, rngs))
        ordered = [submissions[i] for i in range(cfg.num_clients)]
        new_global = aggregate(cfg.aggregator, self.global_params, ordered)
        if not np.all(np.isfinite(new_global.values)):
            raise DivergenceError(f"round {t}: aggregate is not finite")
        self.global_params = new_global
        self.submitted = submissions

        record = self._evaluate(t)
        self.records.append(record)
        log.info("round %d  MA %.4f  ASR %.4f", t, record.ma, record.asr)
        return record

    def _evaluate(self, t: int) -> RoundRecord:
        mode = self.cfg.resolved_eval_mode
        if mode == "global":
            models = {-1: self.global_params}
        elif mode == "student":
            models = {c.id: c.models.student if c.models else self.submitted[c.id] for c in self.benign}
        else:
            models = {c.id: c.models if c.models else self.submitted[c.id] for c in self.benign}
        target = self.eval_trigger.target_label
        return evaluate(self.net, models, self.test, self.triggered_test, target,
                        ba=self.plan is None, round_=t)


@dataclass
class TrainingResult:
    records: list[RoundRecord]
    global_params: ParamVector
    clients: list[ClientState]


def run_training(config: SimConfig, net: Network, shards: list[Shard], test: Dataset,
                 eval_trigger: TriggerSpec, init: ParamVector | None = None) -> TrainingResult:
    sim = Simulator(config, net, shards, test, eval_trigger, init)
    for t in range(config.rounds):
        sim.run_round(t)
    return TrainingResult(sim.records, sim.global_params, sim.clients)
