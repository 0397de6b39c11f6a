"""Attack campaigns: builds the negated-loss oracle, dispatches per-sample
attacks, and aggregates accuracy / norm / sparsity metrics.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import fw, net
from .distortion import (DistortionBall, GroupPartition, GROUP_NUCLEAR, LINF,
                         NUCLEAR, WEIGHTED_GROUP_NUCLEAR, ball_norm,
                         variance_weights)
from .linalg import tensor_nuclear_norm, vector_norms

# canonical config strings for the attack methods
FWNUCL = "FWnucl"
GROUP_FWNUCL = "GroupFWnucl"
WEIGHTED_GROUP_FWNUCL = "WeightedGroupFWnucl"
PGD = "PGD"
FGSM = "FGSM"

FW_METHODS = (FWNUCL, GROUP_FWNUCL, WEIGHTED_GROUP_FWNUCL)
METHODS = FW_METHODS + (PGD, FGSM)

DEFAULT_NONZERO_THRESHOLD = 1.0 / 255.0


@dataclass(frozen=True)
class AttackConfig:
    """One attack campaign entry.

    ``radius`` is the nuclear/group radius for FW methods and the l-inf
    epsilon for PGD/FGSM.  ``partition`` is a GroupPartition (group methods).
    ``weight_source`` is "none", "explicit" (uses ``weights``) or "variance"
    (per-sample weights from the original image).
    """

    method: str
    radius: float
    iterations: int = 20
    step_rule: str = "short"           # short | decaying | backtracking
    lipschitz: Optional[float] = None
    alpha: float = 2.55 / 255.0        # PGD step size
    partition: Optional[GroupPartition] = None
    weight_source: str = "none"
    weights: Optional[tuple] = None
    select_by_full_nuclear: bool = False
    seed: int = 0
    random_start: bool = False
    channel_subsample: bool = False
    stop_on_success: bool = False
    nonzero_threshold: float = DEFAULT_NONZERO_THRESHOLD
    name: Optional[str] = None
    max_samples: Optional[int] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}; expected one of {METHODS}")
        if not self.radius >= 0:
            raise ValueError("radius must be nonnegative")
        if self.nonzero_threshold <= 0:
            raise ValueError("nonzero_threshold must be positive")
        if self.method in (GROUP_FWNUCL, WEIGHTED_GROUP_FWNUCL) and self.partition is None:
            raise ValueError(f"{self.method} requires a partition")
        if self.method == WEIGHTED_GROUP_FWNUCL and self.weight_source == "none":
            raise ValueError(f"{self.method} requires weight_source 'explicit' or 'variance'")

    def label(self):
        return self.name or f"{self.method}(r={self.radius:g})"


@dataclass
class SampleResult:
    index: int
    clean_correct: bool
    adv_correct: bool
    first_success_iter: Optional[int]
    l2: float
    linf: float
    nuclear: float
    nonzero_pixels: int
    fw_gap: Optional[float] = None
    pre_clamp_ball_norm: Optional[float] = None
    adversarial: Optional[np.ndarray] = None  # kept only on request; never serialized


@dataclass
class AggregateReport:
    config: dict
    clean_accuracy: float
    adversarial_accuracy: float
    robust_accuracy_given_clean_correct: float
    mean_l2: float
    median_l2: float
    mean_linf: float
    median_linf: float
    mean_nuclear: float
    median_nuclear: float
    mean_nonzero_pixels: float
    samples: list = field(default_factory=list)
    runtime_seconds: float = 0.0


def make_adversarial_oracle(spec, params, y):
    """Negated classification loss and gradient: minimizing this ascends the
    cross-entropy against label y."""

    def oracle(x):
        loss, grad = net.loss_and_input_grad(spec, params, x, y)
        return -loss, -grad

    return oracle


def _make_ball(config, x_ori):
    if config.method == FWNUCL:
        return DistortionBall(NUCLEAR, config.radius)
    if config.method == GROUP_FWNUCL:
        return DistortionBall(GROUP_NUCLEAR, config.radius, partition=config.partition,
                              select_by_full_nuclear=config.select_by_full_nuclear)
    if config.method == WEIGHTED_GROUP_FWNUCL:
        if config.weight_source == "variance":
            weights = tuple(variance_weights(x_ori, config.partition))
        else:
            weights = tuple(config.weights)
        return DistortionBall(WEIGHTED_GROUP_NUCLEAR, config.radius,
                              partition=config.partition, weights=weights,
                              select_by_full_nuclear=config.select_by_full_nuclear)
    return DistortionBall(LINF, config.radius)


def _step_rule(config, lipschitz):
    if config.step_rule == "short":
        return fw.ShortStep(lipschitz)
    if config.step_rule == "decaying":
        return fw.Decaying()
    if config.step_rule == "backtracking":
        return fw.Backtracking()
    raise ValueError(f"unknown step rule {config.step_rule!r}")


def attack_sample(spec, params, x_ori, y, config, index=0, seed=None,
                  lipschitz=None, keep_adversarial=False):
    """Attack one sample and measure the perturbation actually applied.

    The adversarial prediction is evaluated on the box-clamped image; all
    reported norms are of delta = clamped_adversarial - original.  Feasibility
    of the pre-clamp perturbation is recorded separately for FW methods.
    """
    x_ori = np.asarray(x_ori, dtype=np.float64)
    clean_correct = net.predict(spec, params, x_ori) == y
    seed = config.seed if seed is None else seed

    trace = None
    if config.radius == 0.0:
        adv = x_ori.copy()
    elif config.method in FW_METHODS:
        oracle = make_adversarial_oracle(spec, params, y)
        ball = _make_ball(config, x_ori)
        step = _step_rule(config, lipschitz if lipschitz is not None else config.lipschitz)
        trace = fw.frank_wolfe(
            oracle, x_ori, ball, step, config.iterations,
            random_start=config.random_start,
            channel_subsample=config.channel_subsample, seed=seed,
            success_fn=lambda img: net.predict(spec, params, img) != y,
            stop_on_success=config.stop_on_success)
        adv = trace.adversarial
    elif config.method == PGD:
        oracle = make_adversarial_oracle(spec, params, y)
        adv = fw.pgd(oracle, x_ori, config.radius, config.alpha, config.iterations,
                     random_start=config.random_start, seed=seed)
    else:  # FGSM
        oracle = make_adversarial_oracle(spec, params, y)
        adv = fw.fgsm(oracle, x_ori, config.radius)

    adv_correct = net.predict(spec, params, adv) == y
    delta = adv - x_ori
    l1, l2, linf = vector_norms(delta)
    nuclear = tensor_nuclear_norm(delta)
    nonzero = int(np.count_nonzero(np.abs(delta) > config.nonzero_threshold))

    first_success = None
    fw_gap = None
    pre_clamp_norm = None
    if trace is not None:
        first_success = trace.first_success_iter
        if trace.records:
            fw_gap = trace.records[-1].fw_gap
        pre_clamp_norm = ball_norm(_make_ball(config, x_ori), trace.delta)
    elif config.method == FGSM and not adv_correct:
        first_success = 0
    if adv_correct:
        first_success = None

    return SampleResult(index=index, clean_correct=bool(clean_correct),
                        adv_correct=bool(adv_correct),
                        first_success_iter=first_success,
                        l2=l2, linf=linf, nuclear=nuclear,
                        nonzero_pixels=nonzero, fw_gap=fw_gap,
                        pre_clamp_ball_norm=pre_clamp_norm,
                        adversarial=adv if keep_adversarial else None)


def _sample_seed(config_seed, index):
    return int(np.random.SeedSequence([config_seed, index]).generate_state(1)[0])


def _config_echo(config):
    echo = {"method": config.method, "radius": config.radius,
            "iterations": config.iterations, "step_rule": config.step_rule,
            "seed": config.seed, "nonzero_threshold": config.nonzero_threshold,
            "name": config.label()}
    if config.method == PGD:
        echo["alpha"] = config.alpha
    if config.partition is not None:
        echo["groups"] = len(config.partition)
        echo["weight_source"] = config.weight_source
    return echo


def run_config(spec, params, images, labels, config, workers=1,
               keep_adversarial=False):
    """Attack every sample under one config and aggregate."""
    start = time.monotonic()
    n = len(images) if config.max_samples is None else min(config.max_samples, len(images))
    clean_acc = 100.0 * net.accuracy(spec, params, images[:n], labels[:n])

    lipschitz = config.lipschitz
    if (config.method in FW_METHODS and config.step_rule == "short"
            and lipschitz is None and config.radius > 0 and n > 0):
        oracle = make_adversarial_oracle(spec, params, int(labels[0]))
        ball = _make_ball(config, np.asarray(images[0], dtype=np.float64))
        lipschitz = fw.estimate_lipschitz(oracle, images[0], ball, seed=config.seed)

    def work(i):
        return attack_sample(spec, params, images[i], int(labels[i]), config,
                             index=i, seed=_sample_seed(config.seed, i),
                             lipschitz=lipschitz, keep_adversarial=keep_adversarial)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, range(n)))
    else:
        results = [work(i) for i in range(n)]

    adv_flags = np.array([r.adv_correct for r in results], dtype=float)
    clean_flags = np.array([r.clean_correct for r in results], dtype=bool)
    if clean_flags.any():
        robust_given_clean = 100.0 * float(adv_flags[clean_flags].mean())
    else:
        robust_given_clean = 0.0

    def stats(values):
        arr = np.array(values, dtype=float)
        return float(arr.mean()), float(np.median(arr))

    mean_l2, med_l2 = stats([r.l2 for r in results])
    mean_linf, med_linf = stats([r.linf for r in results])
    mean_nuc, med_nuc = stats([r.nuclear for r in results])

    return AggregateReport(
        config=_config_echo(config),
        clean_accuracy=clean_acc,
        adversarial_accuracy=100.0 * float(adv_flags.mean()),
        robust_accuracy_given_clean_correct=robust_given_clean,
        mean_l2=mean_l2, median_l2=med_l2,
        mean_linf=mean_linf, median_linf=med_linf,
        mean_nuclear=mean_nuc, median_nuclear=med_nuc,
        mean_nonzero_pixels=float(np.mean([r.nonzero_pixels for r in results])),
        samples=results,
        runtime_seconds=time.monotonic() - start)


def run_campaign(spec, params, images, labels, configs, workers=1,
                 keep_adversarial=False):
    """One report per config, plus an accuracy-vs-radius series when the
    configs share a method and vary only the radius."""
    reports = [run_config(spec, params, images, labels, c, workers=workers,
                          keep_adversarial=keep_adversarial)
               for c in configs]
    series = None
    methods = {c.method for c in configs}
    radii = [c.radius for c in configs]
    if len(configs) > 1 and len(methods) == 1 and len(set(radii)) == len(radii):
        order = np.argsort(radii)
        series = {"method": configs[0].method,
                  "radii": [radii[i] for i in order],
                  "adversarial_accuracy": [reports[i].adversarial_accuracy for i in order]}
    return reports, series
