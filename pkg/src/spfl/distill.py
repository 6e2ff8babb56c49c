"""Self-distillation losses, the two-phase local update, and ensemble prediction."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ParameterError, ConfigError
from .nn import Network, ParamVector, gradcam, nad_map
from .train import Shard, cross_entropy, minibatches, sgd_step

PROB_FLOOR = 1e-12


class Variant(str, enum.Enum):
    SPFL = "SPFL"
    SPFL_oA = "SPFL_oA"  # logits only, no attention term
    SPFL_NAD = "SPFL_NAD"  # attention as channel sum of |A_k|


@dataclass
class DistillConfig:
    tau: float = 4.0
    beta_kd: float = 1.0
    beta_at: float = 1.0
    epochs: int = 1
    lr: float = 0.05
    batch_size: int = 64
    total_rounds: int = 30
    variant: Variant = Variant.SPFL

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if self.epochs < 1 or self.total_rounds < 1:
            raise ParameterError("epochs and total_rounds must be >= 1")
        if self.beta_kd < 0 or self.beta_at < 0:
            raise ParameterError("beta finals must be nonnegative")


@dataclass
class ClientModels:
    teacher: ParamVector
    student: ParamVector


# ---------------------------------------------------------------------------
# Losses on probabilities (reference definitions, numpy)


def task_loss(probs, labels) -> float:
    """Batch-mean cross-entropy -sum y log p."""
    p = np.maximum(np.asarray(probs, dtype=np.float64), PROB_FLOOR)
    return float(np.mean(-np.sum(np.asarray(labels) * np.log(p), axis=-1)))


def kd_loss(reference, learner) -> float:
    """Batch-mean KL(reference || learner) = -sum a log(b / a)."""
    a = np.asarray(reference, dtype=np.float64)
    b = np.maximum(np.asarray(learner, dtype=np.float64), PROB_FLOOR)
    terms = np.where(a > 0, a * (np.log(np.maximum(a, PROB_FLOOR)) - np.log(b)), 0.0)
    return float(np.mean(np.sum(terms, axis=-1)))


def attention_loss(teacher_maps, student_maps):
    """Sum over layers of the batch-mean L2 distance between per-sample maps.

    Accepts lists of numpy arrays or torch tensors shaped (B, U, V).
    """
    if len(teacher_maps) != len(student_maps):
        raise ConfigError("teacher and student attention layers differ")
    total = 0.0
    for t, s in zip(teacher_maps, student_maps):
        if tuple(t.shape) != tuple(s.shape):
            raise ConfigError(f"attention map shapes differ: {tuple(t.shape)} vs {tuple(s.shape)}")
        if isinstance(s, torch.Tensor):
            total = total + torch.linalg.vector_norm(s - t, dim=(1, 2)).mean()
        else:
            diff = np.asarray(s, dtype=np.float64) - np.asarray(t, dtype=np.float64)
            total = total + float(np.sqrt((diff ** 2).sum(axis=(1, 2))).mean())
    return total


def beta_schedule(t: int, total_rounds: int, beta_final: float) -> float:
    """Linear ramp: beta_final * t / total_rounds."""
    if not 0 <= t <= total_rounds:
        raise ParameterError(f"round {t} outside [0, {total_rounds}]")
    return beta_final * t / total_rounds


# ---------------------------------------------------------------------------
# Torch versions used inside training


def kd_from_logits(reference_logits: torch.Tensor, learner_logits: torch.Tensor, tau: float) -> torch.Tensor:
    """KL between softened distributions; gradient flows only into ``learner_logits``."""
    ref = F.softmax(reference_logits.detach() / tau, dim=1)
    log_learner = F.log_softmax(learner_logits / tau, dim=1)
    kl = torch.special.xlogy(ref, ref) - ref * log_learner
    return kl.sum(dim=1).mean()


def _maps(net: Network, logits, acts, labels, variant: Variant, create_graph: bool) -> list[torch.Tensor]:
    if variant is Variant.SPFL_NAD:
        return [nad_map(acts[l]) for l in net.spec.attention_layers]
    score = logits.gather(1, labels[:, None]).sum()
    return [gradcam(acts[l], score, create_graph=create_graph) for l in net.spec.attention_layers]


def student_loss(net, flat_s, flat_t, x, y, cfg: DistillConfig, beta_kd: float, beta_at: float):
    """Student objective; teacher outputs enter as constants.  Returns (loss, parts)."""
    use_at = beta_at > 0 and cfg.variant is not Variant.SPFL_oA
    keep = net.spec.attention_layers if use_at else ()
    logits_s, acts_s = net.apply(flat_s, x, keep=keep)
    loss = cross_entropy(logits_s, y)
    parts = {"ce": loss.detach()}
    if beta_kd > 0 or use_at:
        with torch.enable_grad():
            t_in = flat_t.detach().requires_grad_(use_at and cfg.variant is Variant.SPFL)
            logits_t, acts_t = net.apply(t_in, x, keep=keep)
        if beta_kd > 0:
            kd = kd_from_logits(logits_t, logits_s, cfg.tau)
            loss = loss + beta_kd * kd
            parts["kd"] = kd.detach()
        if use_at:
            maps_t = [m.detach() for m in _maps(net, logits_t, acts_t, y, cfg.variant, create_graph=False)]
            maps_s = _maps(net, logits_s, acts_s, y, cfg.variant, create_graph=True)
            at = attention_loss(maps_t, maps_s)
            loss = loss + beta_at * at
            parts["at"] = at.detach()
    return loss, parts


def teacher_loss(net, flat_t, flat_s, x, y, cfg: DistillConfig, beta_kd: float):
    logits_t, _ = net.apply(flat_t, x)
    loss = cross_entropy(logits_t, y)
    if beta_kd > 0:
        with torch.no_grad():
            logits_s, _ = net.apply(flat_s, x)
        loss = loss + beta_kd * kd_from_logits(logits_s, logits_t, cfg.tau)
    return loss


def localkd_round(
    net: Network,
    global_params: ParamVector,
    teacher: ParamVector,
    shard: Shard,
    cfg: DistillConfig,
    t: int,
    rng: np.random.Generator,
) -> ClientModels:
    """One round of local self-distillation.

    The student starts from the aggregate, the teacher from the client's previous
    teacher.  Per mini-batch the student steps first; the teacher's KD term is then
    computed against the already-updated student.
    """
    beta_kd = beta_schedule(t, cfg.total_rounds, cfg.beta_kd)
    beta_at = beta_schedule(t, cfg.total_rounds, cfg.beta_at)
    flat_s = torch.tensor(global_params.values, requires_grad=True)
    flat_t = torch.tensor(teacher.values, requires_grad=True)
    for _ in range(cfg.epochs):
        for idx in minibatches(len(shard), cfg.batch_size, rng):
            x = torch.from_numpy(shard.inputs[idx])
            y = torch.from_numpy(shard.labels[idx])
            loss_s, _ = student_loss(net, flat_s, flat_t, x, y, cfg, beta_kd, beta_at)
            flat_s = sgd_step(flat_s, loss_s, cfg.lr)
            flat_t = sgd_step(flat_t, teacher_loss(net, flat_t, flat_s, x, y, cfg, beta_kd), cfg.lr)
    return ClientModels(
        teacher=teacher.with_values(flat_t.detach().numpy().copy()),
        student=global_params.with_values(flat_s.detach().numpy().copy()),
    )


def ensemble_logits(net: Network, teacher: ParamVector, student: ParamVector, inputs: np.ndarray) -> np.ndarray:
    return (net.logits(teacher, inputs) + net.logits(student, inputs)) / 2


def enspre(net: Network, teacher: ParamVector, student: ParamVector, inputs: np.ndarray) -> np.ndarray:
    """Predicted classes from averaged teacher/student logits; ties go to the lowest index."""
    return ensemble_logits(net, teacher, student, inputs).argmax(axis=1)
