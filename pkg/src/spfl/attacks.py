"""Poisoning attacks: data poisoning (DPA), model replacement (MPA), distributed
triggers (DBA) and the LIE band-limited attack."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .nn import Network, ParamVector
from .train import Shard, sgd_train


class AttackMethod(str, enum.Enum):
    DPA = "DPA"
    MPA = "MPA"
    DBA = "DBA"
    LIE = "LIE"


@dataclass
class TriggerSpec:
    """Pixel pattern stamped at ``offset`` (row, col); ``values`` is a scalar or per-cell array."""

    mask: np.ndarray
    values: float | np.ndarray = 1.0
    target_label: int = 0
    offset: tuple[int, int] = (0, 0)
    name: str = "trigger"

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2 or not self.mask.any():
            raise ConfigError("trigger mask must be a nonempty 2-D grid")
        self.offset = (int(self.offset[0]), int(self.offset[1]))
        if not np.isscalar(self.values):
            self.values = np.asarray(self.values, dtype=np.float32)
            if self.values.shape != self.mask.shape:
                raise ConfigError("trigger values must match the mask shape")

    @classmethod
    def square(cls, size: int, image_hw: tuple[int, int], target_label: int = 0, value: float = 1.0,
               margin: int = 1, name: str = "square") -> "TriggerSpec":
        """White ``size`` x ``size`` square near the lower-right corner."""
        h, w = image_hw
        offset = (h - size - margin, w - size - margin)
        return cls(np.ones((size, size), dtype=bool), value, target_label, offset, name)

    def cells(self) -> np.ndarray:
        """Absolute (row, col) of every masked pixel, row-major."""
        rows, cols = np.nonzero(self.mask)
        return np.stack([rows + self.offset[0], cols + self.offset[1]], axis=1)

    def pixel_values(self) -> np.ndarray:
        if np.isscalar(self.values):
            return np.full(int(self.mask.sum()), float(self.values), dtype=np.float32)
        return self.values[self.mask]

    def to_rows(self) -> list[str]:
        return ["".join("1" if v else "0" for v in row) for row in self.mask]

    @classmethod
    def from_rows(cls, rows: list[str], **kwargs) -> "TriggerSpec":
        if not rows or any(set(r) - {"0", "1"} for r in rows) or len({len(r) for r in rows}) != 1:
            raise ConfigError(f"trigger rows must be equal-length 0/1 strings, got {rows!r}")
        return cls(np.array([[c == "1" for c in r] for r in rows]), **kwargs)

    def stamp(self, images: np.ndarray) -> np.ndarray:
        """Copy of ``images`` (B, C, H, W) with the trigger written into every channel."""
        h, w = images.shape[-2:]
        cells = self.cells()
        if cells[:, 0].max() >= h or cells[:, 1].max() >= w or cells.min() < 0:
            raise ConfigError(f"trigger {self.name!r} falls outside a {h}x{w} image")
        out = np.array(images, copy=True)
        out[..., cells[:, 0], cells[:, 1]] = self.pixel_values()
        return out


def poison_batch(inputs: np.ndarray, labels: np.ndarray, trigger: TriggerSpec, count: int):
    """Stamp the first ``count`` samples and relabel them to the target.

    ``labels`` may be class indices (1-D) or one-hot rows (2-D).
    """
    n = len(inputs)
    if not 0 <= count <= n:
        raise ConfigError(f"cannot poison {count} of {n} samples")
    x = np.array(inputs, copy=True)
    y = np.array(labels, copy=True)
    if count == 0:
        return x, y
    x[:count] = trigger.stamp(inputs[:count])
    if y.ndim == 2:
        y[:count] = 0
        y[:count, trigger.target_label] = 1
    else:
        y[:count] = trigger.target_label
    return x, y


def poisoner(trigger: TriggerSpec, per_batch: int, batch_size: int):
    """Batch transform poisoning ``per_batch`` of every ``batch_size`` samples (prorated on short batches)."""

    def transform(x, y):
        count = per_batch if len(x) == batch_size else int(round(per_batch * len(x) / batch_size))
        return poison_batch(x, y, trigger, min(count, len(x)))

    return transform


def mpa_scale(malicious: ParamVector, global_params: ParamVector, gamma: float) -> ParamVector:
    """w0 + gamma * (X - w0)."""
    if len(malicious) != len(global_params):
        raise ConfigError("malicious and global parameter vectors differ in length")
    x = malicious.values
    w0 = global_params.values
    return malicious.with_values(gamma * (x - w0) + w0)


def dba_decompose(trigger: TriggerSpec, parts: int) -> list[TriggerSpec]:
    """Split a trigger into ``parts`` disjoint local triggers covering it exactly.

    A square mask whose side is divisible by sqrt(parts) is tiled into equal
    blocks; otherwise the masked cells are cut, in row-major order, into
    near-equal runs (horizontal strips when the rows divide evenly).
    """
    if parts < 2:
        raise ConfigError("DBA needs at least two parts")
    n_cells = int(trigger.mask.sum())
    if parts > n_cells:
        raise ConfigError(f"trigger with {n_cells} pixels cannot be split into {parts} parts")
    h, w = trigger.mask.shape
    q = math.isqrt(parts)
    masks = []
    if q * q == parts and h == w and h % q == 0 and trigger.mask.all():
        step = h // q
        for bi in range(q):
            for bj in range(q):
                m = np.zeros_like(trigger.mask)
                m[bi * step:(bi + 1) * step, bj * step:(bj + 1) * step] = True
                masks.append(m)
    else:
        rows, cols = np.nonzero(trigger.mask)
        for chunk in np.array_split(np.arange(n_cells), parts):
            m = np.zeros_like(trigger.mask)
            m[rows[chunk], cols[chunk]] = True
            masks.append(m)
    out = []
    for i, m in enumerate(masks):
        values = trigger.values if np.isscalar(trigger.values) else np.where(m, trigger.values, 0)
        out.append(TriggerSpec(m, values, trigger.target_label, trigger.offset, f"{trigger.name}.part{i}"))
    return out


def lie_craft(backdoored: ParamVector, mean: np.ndarray, std: np.ndarray, z: float) -> ParamVector:
    """Clamp every coordinate into [mean - z*std, mean + z*std]."""
    lo = mean - z * std
    hi = mean + z * std
    return backdoored.with_values(np.minimum(np.maximum(backdoored.values, lo), hi))


@dataclass
class AttackPlan:
    method: AttackMethod
    adversary_ids: tuple[int, ...]
    schedule: tuple[int, ...] = ()  # rounds in which adversaries attack
    gamma: float = 1.0
    poison_per_batch: int = 20
    trigger: TriggerSpec | None = None
    dba_parts: list[TriggerSpec] | None = None
    # adversary k attacks only at schedule[k % len(schedule)] (staggered single shots)
    staggered: bool = False
    every_round: bool = False
    lie_z: float = 1.5
    name: str = ""
    epochs: int | None = None  # adversary local epochs; None uses the shared setting

    def __post_init__(self):
        self.method = AttackMethod(self.method)
        self.adversary_ids = tuple(sorted(int(i) for i in self.adversary_ids))
        self.schedule = tuple(sorted(int(r) for r in self.schedule))
        if len(set(self.adversary_ids)) != len(self.adversary_ids):
            raise ConfigError("duplicate adversary ids")
        if self.method is AttackMethod.DBA and self.trigger is not None and self.dba_parts is None:
            self.dba_parts = dba_decompose(self.trigger, len(self.adversary_ids))

    def validate(self, num_clients: int, rounds: int) -> None:
        if len(self.adversary_ids) > num_clients - 1:
            raise ConfigError("at least one client must stay benign")
        if any(not 0 <= a < num_clients for a in self.adversary_ids):
            raise ConfigError("adversary id outside the client range")
        if any(not 0 <= r < rounds for r in self.schedule):
            raise ConfigError(f"attack round outside [0, {rounds})")
        if self.trigger is None:
            raise ConfigError("attack plan needs a trigger")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError("adversary epochs must be >= 1")

    def attackers_at(self, t: int) -> list[int]:
        """Adversaries that attack in round ``t``."""
        if self.every_round:
            return list(self.adversary_ids)
        if t not in self.schedule:
            return []
        if not self.staggered:
            return list(self.adversary_ids)
        return [a for k, a in enumerate(self.adversary_ids) if self.schedule[k % len(self.schedule)] == t]

    def trigger_for(self, adversary: int) -> TriggerSpec:
        if self.method is AttackMethod.DBA:
            k = self.adversary_ids.index(adversary)
            return self.dba_parts[k % len(self.dba_parts)]
        return self.trigger


@dataclass
class TrainSettings:
    epochs: int = 1
    lr: float = 0.05
    batch_size: int = 64


def dpa_client_update(net: Network, global_params: ParamVector, shard: Shard, trigger: TriggerSpec,
                      per_batch: int, train: TrainSettings, rng: np.random.Generator) -> ParamVector:
    """SGD on batches in which ``per_batch`` samples carry the trigger and the target label."""
    return sgd_train(net, global_params, shard, epochs=train.epochs, lr=train.lr,
                     batch_size=train.batch_size, rng=rng,
                     transform=poisoner(trigger, per_batch, train.batch_size))


def attack_updates(plan: AttackPlan, attackers: list[int], net: Network, global_params: ParamVector,
                   shards: dict[int, Shard], train: TrainSettings, rngs: dict[int, np.random.Generator]
                   ) -> dict[int, ParamVector]:
    """Submissions of every adversary attacking this round."""
    if not attackers:
        return {}
    poison_train = replace(train, epochs=plan.epochs) if plan.epochs is not None else train
    backdoored = {
        a: dpa_client_update(net, global_params, shards[a], plan.trigger_for(a), plan.poison_per_batch,
                             poison_train, rngs[a])
        for a in attackers
    }
    method = plan.method
    if method is AttackMethod.DPA:
        return backdoored
    if method in (AttackMethod.MPA, AttackMethod.DBA):
        # a scaled-up contribution is shared evenly among simultaneous attackers
        share = plan.gamma / len(attackers) if plan.gamma != 1 else 1.0
        return {a: mpa_scale(backdoored[a], global_params, share) for a in attackers}
    # LIE: estimate the benign population from the adversary's own clients
    benign = np.stack([
        sgd_train(net, global_params, shards[a], epochs=train.epochs, lr=train.lr,
                  batch_size=train.batch_size, rng=np.random.default_rng(rngs[a].integers(2**63))).values
        for a in attackers
    ])
    mean = benign.mean(axis=0)
    std = benign.std(axis=0)
    return {a: lie_craft(backdoored[a], mean, std, plan.lie_z) for a in attackers}
