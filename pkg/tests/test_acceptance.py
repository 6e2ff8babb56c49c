"""Acceptance suite: eleven criteria, one PASS/FAIL line each in the terminal summary.

Criteria 1-4 are property checks on tiny nets and run in seconds.  Criteria 5-11
train desk-scale MNIST federations (10 clients, 1000 samples each, 15 rounds)
and take a couple of hours on one CPU core; they are marked ``slow`` and skipped
when MNIST is missing.  Runs are shared through a session cache so each
configuration trains once.
"""
from __future__ import annotations

import time
import warnings

import numpy as np
import pytest
import torch

from spfl.aggregation import (
    AggregatorConfig, ConvergenceWarning, aggregate, coordinate_median, fedavg, geometric_median, rlr_aggregate,
)
from spfl.attacks import mpa_scale
from spfl.config import load_config
from spfl.data import balanced_test_subset, load_mnist
from spfl.distill import DistillConfig, student_loss, teacher_loss
from spfl.nn import Network, ParamVector, tiny_cnn
from spfl.report import attention_distance
from spfl.runner import prepare
from spfl.sim import Simulator, evaluate, run_training
from spfl.train import cross_entropy

from .conftest import MNIST_ROOT, needs_mnist, random_batch
from .gradcheck import central_difference, max_relative_error
from .test_aggregation import RLR_CASES, median_oracle, objective
from .test_sim import TRIG, _cfg, toy_data

VERDICTS: dict[int, tuple[bool, str]] = {}

ROUNDS = 15
# Desk-scale distillation weights; the library defaults (tau 4, betas 1) are
# swept alongside in criterion 5.  See the README for how these were chosen.
DESK_DISTILL = {"tau": "4", "beta_kd": "5", "beta_at": "50"}
ATTENTION_SAMPLES = 200


def record(criterion: int, ok: bool, detail: str) -> None:
    VERDICTS[criterion] = (bool(ok), detail)
    assert ok, f"criterion {criterion}: {detail}"


# ---------------------------------------------------------------------------
# 1-4: properties


def test_c01_gradients_match_finite_differences():
    t0 = time.time()
    rng = np.random.default_rng(11)
    net = Network(tiny_cnn())
    assert net.num_params <= 10_000
    s = net.init_params(1, dtype=np.float64).values
    t = net.init_params(2, dtype=np.float64).values
    x, y = random_batch(rng, n=4)
    xt, yt = torch.tensor(x), torch.tensor(y)
    cfg = DistillConfig(tau=4.0)

    def ce(v):
        return cross_entropy(net.apply(v, xt)[0], yt)

    def kd_student(v):  # KL(teacher || student), gradient into the student
        return student_loss(net, v, torch.tensor(t), xt, yt, cfg, 1.0, 0.0)[0] - ce(v)

    def kd_teacher(v):  # KL(student || teacher), gradient into the teacher
        return teacher_loss(net, v, torch.tensor(s), xt, yt, cfg, 1.0) - ce(v)

    def at(v):
        return student_loss(net, v, torch.tensor(t), xt, yt, cfg, 0.0, 1.0)[0] - ce(v)

    errors = {}
    for name, f, at_point in (("CE", ce, s), ("KD_S", kd_student, s), ("KD_T", kd_teacher, t), ("AT", at, s)):
        flat = torch.tensor(at_point, requires_grad=True)
        (analytic,) = torch.autograd.grad(f(flat), flat)
        # h=1e-5 keeps roundoff below 1e-4 relative even on components near 1e-7
        numeric = central_difference(lambda v: f(torch.tensor(v, requires_grad=True)).item(), at_point, h=1e-5)
        assert np.abs(analytic.numpy()).max() > 0, name
        errors[name] = max_relative_error(analytic.numpy(), numeric)
    elapsed = time.time() - t0
    worst = max(errors.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + f"; {net.num_params} params; {elapsed:.0f}s"
    record(1, worst < 1e-4 and elapsed < 60, detail)


def test_c02_aggregator_oracles():
    t0 = time.time()
    rng = np.random.default_rng(0)
    median_ok = True
    for _ in range(1000):
        pts = rng.normal(size=(int(rng.integers(1, 12)), int(rng.integers(1, 20))))
        median_ok &= np.array_equal(coordinate_median(list(pts)), median_oracle(pts))

    geo_ok = True
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        for _ in range(100):
            n = int(rng.integers(2, 12))
            pts = rng.normal(size=(n, int(rng.integers(1, 30))))
            pts[: int(rng.integers(0, n // 2 + 1))] *= 20
            obj = objective(pts, geometric_median(list(pts)))
            geo_ok &= obj <= objective(pts, pts.mean(0)) + 1e-6
            geo_ok &= all(obj <= objective(pts, p) + 1e-6 for p in pts)

    rlr_ok = 0
    for deltas, theta, eta, base, expected in RLR_CASES:
        out = rlr_aggregate([np.array(d, dtype=np.float64) for d in deltas], theta, eta,
                            base=None if base is None else np.array(base, dtype=np.float64))
        rlr_ok += np.allclose(out, expected, rtol=1e-12, atol=1e-15)

    common = rng.normal(size=50)
    manifest = [("w", (50,), 0)]
    same_ok = True
    for method in ("FedAvg", "Median", "RFA", "RLR"):
        cfg = AggregatorConfig(method=method, theta=4)
        global_ = ParamVector(common - 1.0, manifest)
        out = aggregate(cfg, global_, [ParamVector(common.copy(), manifest) for _ in range(5)])
        same_ok &= np.allclose(out.values, common, rtol=0, atol=1e-12)
    elapsed = time.time() - t0
    detail = (f"median {'ok' if median_ok else 'MISMATCH'}, geometric {'ok' if geo_ok else 'WORSE'}, "
              f"RLR {rlr_ok}/{len(RLR_CASES)}, identical inputs {'ok' if same_ok else 'DIFFER'}; {elapsed:.0f}s")
    record(2, median_ok and geo_ok and rlr_ok == len(RLR_CASES) == 20 and same_ok and elapsed < 60, detail)


def test_c03_model_replacement_algebra():
    net = Network(tiny_cnn())
    w0 = net.init_params(0)
    backdoored = net.init_params(1)
    n, eta = 10, 1.0
    gamma = n / eta
    out = fedavg([w0.copy() for _ in range(9)] + [mpa_scale(backdoored, w0, gamma)])
    rel = np.linalg.norm(out.values.astype(np.float64) - backdoored.values) / np.linalg.norm(backdoored.values)
    record(3, rel < 1e-5, f"relative error {rel:.2e} (float32)")


def test_c04_zero_beta_spfl_reproduces_fedavg():
    shards, test = toy_data(4)

    def metrics(cfg):
        res = run_training(cfg, Network(tiny_cnn()), shards, test, TRIG)
        return [(r.ma, r.asr, r.ba) for r in res.records], res.global_params.values.tobytes()

    fed, fed_w = metrics(_cfg(defense="FedAvg"))
    spfl, spfl_w = metrics(_cfg(defense="SPFL", distill=DistillConfig(beta_kd=0, beta_at=0), eval_mode="global"))
    same = fed == spfl and fed_w == spfl_w
    record(4, same, f"3 rounds; MA FedAvg {_fmt([m for m, *_ in fed])} vs SPFL {_fmt([m for m, *_ in spfl])}, "
                     f"weights {'identical' if fed_w == spfl_w else 'differ'}")


# ---------------------------------------------------------------------------
# desk-scale MNIST runs


class DeskRuns:
    """Trains each (defense, attack, distill) configuration at most once per session."""

    def __init__(self):
        self.train, test = load_mnist(MNIST_ROOT)
        self.test_full = test
        self.cache = {}

    def get(self, defense: str, attack: dict | None = None, distill: dict | None = None):
        key = (defense, tuple(sorted((attack or {}).items())), tuple(sorted((distill or DESK_DISTILL).items())))
        if key not in self.cache:
            ov = {"run": {"rounds": ROUNDS, "seed": 0}, "defense": {"method": defense},
                  "dataset": {"clients_cap": 1000, "test_size": 1000},
                  "distill": dict(distill or DESK_DISTILL), "attack": dict(attack or {})}
            cfg = load_config(overrides=ov)
            prepared = prepare(cfg, self.train, self.test_full)
            sim = Simulator(cfg.sim, prepared.net, prepared.shards, prepared.test, cfg.trigger)
            t0 = time.time()
            for t in range(cfg.sim.rounds):
                sim.run_round(t)
            self.cache[key] = (cfg, prepared, sim, time.time() - t0)
        return self.cache[key]


@pytest.fixture(scope="session")
def desk():
    return DeskRuns()


def _asr(sim):
    return [r.asr for r in sim.records]


def _fmt(xs):
    return "[" + " ".join(f"{x:.2f}" for x in xs) + "]"


DPA5 = {"canonical": "DPA-5"}
MPA_SS = {"canonical": "MPA-SS"}


@pytest.mark.slow
@needs_mnist
def test_c05_dpa5_defense(desk):
    *_, fed, t_fed = desk.get("FedAvg", DPA5)
    *_, spfl, t_spfl = desk.get("SPFL", DPA5)
    # library defaults, reported for comparison
    *_, spfl_default, _ = desk.get("SPFL", DPA5, {"tau": "4", "beta_kd": "1", "beta_at": "1"})
    fed_asr, spfl_asr = _asr(fed)[-1], _asr(spfl)
    fed_ma, spfl_ma = fed.records[-1].ma, spfl.records[-1].ma
    minutes = (t_fed + t_spfl) / 60
    ok = fed_asr >= 0.8 and max(spfl_asr) <= 0.15 and spfl_ma >= fed_ma - 0.02 and minutes <= 30
    detail = (f"FedAvg final ASR {fed_asr:.3f} MA {fed_ma:.3f}; SPFL ASR {_fmt(spfl_asr)} max {max(spfl_asr):.3f} "
              f"final MA {spfl_ma:.3f}; default betas max ASR {max(_asr(spfl_default)):.3f}; {minutes:.0f} min")
    record(5, ok, detail)


@pytest.mark.slow
@needs_mnist
def test_c06_mpa_single_shot_recovery(desk):
    cfg, *_, fed, t_fed = desk.get("FedAvg", MPA_SS)
    *_, spfl, t_spfl = desk.get("SPFL", MPA_SS)
    (t_att,) = cfg.sim.attack.schedule
    fed_asr, spfl_asr = _asr(fed), _asr(spfl)
    # SPFL clients are scored on models trained from the previous aggregate, so the
    # replaced global first reaches them one round after the shot; take the worse of both
    jump = max(spfl_asr[t_att], spfl_asr[t_att + 1]) - spfl_asr[t_att - 1]
    after = spfl_asr[t_att + 1:t_att + 4]
    recovered = min(after) <= 0.15
    minutes = (t_fed + t_spfl) / 60
    ok = fed_asr[t_att] >= 0.9 and jump <= 0.05 and recovered and minutes <= 30
    detail = (f"attack round {t_att}; FedAvg ASR there {fed_asr[t_att]:.3f}; SPFL rise {jump:+.3f}, "
              f"rounds {t_att - 1}..{t_att + 3} {_fmt(spfl_asr[t_att - 1:t_att + 4])}; {minutes:.0f} min")
    record(6, ok, detail)


@pytest.mark.slow
@needs_mnist
def test_c07_byzantine_sweep(desk):
    rows, ok, seconds = [], True, 0.0
    for nm in (1, 3, 5, 7, 9):
        attack = DPA5 if nm == 5 else {"method": "DPA", "adversaries": str(nm), "schedule": "every"}
        *_, fed, t_fed = desk.get("FedAvg", attack)
        *_, spfl, t_spfl = desk.get("SPFL", attack)
        seconds += t_fed + t_spfl
        f_asr, s_asr = _asr(fed)[-1], max(_asr(spfl))
        ok &= f_asr >= 0.8 and s_asr <= 0.2
        rows.append(f"Nm={nm}: FedAvg {f_asr:.2f} SPFL max {s_asr:.2f}")
    ok &= seconds <= 2 * 3600
    record(7, ok, "; ".join(rows) + f"; {seconds / 60:.0f} min")


@pytest.mark.slow
@needs_mnist
def test_c08_benign_accuracy(desk):
    *_, fed, _ = desk.get("FedAvg")
    *_, spfl, _ = desk.get("SPFL")
    fed_ba, spfl_ba = fed.records[-1].ba, spfl.records[-1].ba
    record(8, spfl_ba >= fed_ba - 0.005, f"final BA SPFL {spfl_ba:.4f} vs FedAvg {fed_ba:.4f}")


@pytest.mark.slow
@needs_mnist
def test_c09_ablation_ordering(desk):
    seconds = 0.0
    finals = {}
    for defense in ("SPFL", "SPFL_NAD", "SPFL_oA"):
        *_, sim, t = desk.get(defense, DPA5)
        finals[defense] = _asr(sim)[-1]
        seconds += t
    ok = finals["SPFL"] < finals["SPFL_NAD"] < finals["SPFL_oA"] and finals["SPFL_oA"] >= 0.8 and seconds <= 3600
    record(9, ok, ", ".join(f"{k} {v:.3f}" for k, v in finals.items()) + f"; {seconds / 60:.0f} min")


@pytest.mark.slow
@needs_mnist
def test_c10_attention_distance_ordering(desk):
    cfg, prepared, spfl, _ = desk.get("SPFL", DPA5)
    *_, fed, _ = desk.get("FedAvg", DPA5)
    x = balanced_test_subset(prepared.test, ATTENTION_SAMPLES, seed=7).inputs
    net, trig = prepared.net, cfg.trigger
    spfl_d = float(np.mean([attention_distance(net, [c.models.teacher, c.models.student], x, trig)
                            for c in spfl.benign]))
    fed_d = attention_distance(net, [fed.global_params], x, trig)
    record(10, spfl_d < fed_d, f"SPFL {spfl_d:.4f} vs FedAvg {fed_d:.4f} over {len(x)} inputs")


@pytest.mark.slow
@needs_mnist
def test_c11_clean_model_asr_floor(desk):
    cfg, prepared, fed, _ = desk.get("FedAvg")
    test = prepared.test
    rec = evaluate(prepared.net, {0: fed.global_params}, test, cfg.trigger.stamp(test.inputs),
                   cfg.trigger.target_label)
    share = float(np.mean(test.labels == cfg.trigger.target_label))
    record(11, abs(rec.asr - 0.1) <= 0.03, f"clean-model ASR {rec.asr:.3f} (target-class share {share:.3f})")
