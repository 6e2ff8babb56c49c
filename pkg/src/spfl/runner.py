"""Turns an :class:`ExperimentConfig` into a run directory with metrics, checkpoints and a manifest."""
from __future__ import annotations

import csv
import json
import logging
import platform
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, dump_manifest
from .data import Dataset, balanced_test_subset, iid_partition, load_dataset
from .errors import FormatError
from .nn import ARCHITECTURES, Network, save_params
from .sim import RoundRecord, TrainingResult, run_training

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
MANIFEST_FILE = "manifest.json"
SPEC_FILE = "network.json"


@dataclass
class PreparedRun:
    net: Network
    shards: list
    test: Dataset


def prepare(cfg: ExperimentConfig, train: Dataset | None = None, test: Dataset | None = None) -> PreparedRun:
    if train is None or test is None:
        train, test = load_dataset(cfg.dataset, cfg.data_root or None)
    shards = iid_partition(train, cfg.sim.num_clients, seed=cfg.sim.seed, cap=cfg.clients_cap)
    test = balanced_test_subset(test, cfg.test_size, seed=cfg.sim.seed + 1)
    net = Network(ARCHITECTURES[cfg.arch]())
    return PreparedRun(net, shards, test)


def execute(cfg: ExperimentConfig, prepared: PreparedRun | None = None) -> TrainingResult:
    prepared = prepared or prepare(cfg)
    return run_training(cfg.sim, prepared.net, prepared.shards, prepared.test, cfg.trigger)


def write_metrics(records: list[RoundRecord], path: Path, per_client: bool = True) -> None:
    """CSV with header round,ma,asr,ba (+ ma_<id>/asr_<id> columns); ``ba`` is blank under attack."""
    clients = sorted(records[0].client_ma) if records and per_client else []
    header = ["round", "ma", "asr", "ba"]
    header += [f"ma_{c}" for c in clients] + [f"asr_{c}" for c in clients]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in records:
            row = [r.round, f"{r.ma:.6f}", f"{r.asr:.6f}", "" if r.ba is None else f"{r.ba:.6f}"]
            row += [f"{r.client_ma[c]:.6f}" for c in clients] + [f"{r.client_asr[c]:.6f}" for c in clients]
            w.writerow(row)


def read_metrics(path: Path) -> list[dict]:
    """Rows of a metrics file as dicts of floats (``ba`` may be None)."""
    if not path.exists():
        raise FormatError(f"{path}: metrics file missing")
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise FormatError(f"{path}: metrics file is empty")
    out = []
    for row in rows:
        out.append({k: (float(v) if v != "" else None) for k, v in row.items()})
    return out


def persist(cfg: ExperimentConfig, result: TrainingResult, net: Network, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics(result.records, out_dir / METRICS_FILE)
    (out_dir / SPEC_FILE).write_text(net.spec.to_json())
    ckpt = out_dir / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    save_params(result.global_params, ckpt / "global.bin")
    for c in result.clients:
        if c.models is not None:
            save_params(c.models.student, ckpt / f"client{c.id}_student.bin")
            save_params(c.models.teacher, ckpt / f"client{c.id}_teacher.bin")
    import torch

    dump_manifest(cfg, out_dir / MANIFEST_FILE, {
        "defense": cfg.sim.defense.value,
        "versions": {"spfl": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "torch": torch.__version__},
        "final": {"ma": result.records[-1].ma, "asr": result.records[-1].asr},
    })


def load_manifest(run_dir: Path) -> dict:
    return json.loads((Path(run_dir) / MANIFEST_FILE).read_text())
