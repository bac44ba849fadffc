"""The multi-breach game: train a pool of versions, leak them one by one,
let the attacker ensemble everything leaked so far, and measure how long
the recovery (new version + calibrated filter) keeps post-filter targeted
success under the cutoff.

Round i deploys version i+1 with versions 1..i breached. The attacker
optimises one perturbation per input against the mean loss of all
breached versions; the filter is recalibrated for each round's breached
set. The number of breaches recoverable (NBR) counts consecutive rounds
from the first breach whose post-filter targeted success rate stays at or
below the cutoff.

Raw round data (loss gaps, transfer masks) is kept separate from scoring
so FPR sweeps can rescore the same attacks under different thresholds
without retraining or recrafting anything.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import attacks, datagen, filtering, nnet, versioning
from .attacks import AttackBudget
from .datagen import TaskDataset
from .nnet import TrainConfig
from .seeding import (
    TAG_ASSIGNMENT,
    TAG_ATTACK,
    TAG_INPUT_PICK,
    TAG_PRUNE,
    TAG_TARGETS,
    TAG_TRIAL,
    child_rng,
    child_seed,
)
from .versioning import ModelVersion

logger = logging.getLogger(__name__)

ATTACK_KINDS = ("pgd", "cw", "ead", "pgd_dropout", "pgd_low_confidence", "prune_pgd")


@dataclass
class BreachScenario:
    """Everything a breach game needs except the per-trial seed."""

    horizon: int = 12
    attack_kind: str = "pgd"
    budget: AttackBudget = field(default_factory=AttackBudget)
    target_fpr: float = 0.05
    nbr_cutoff: float = 0.20
    n_attack_inputs: int = 100
    trials: int = 3
    task_kind: str = "synthetic_glyphs"
    task_params: dict | None = None
    task_seed: int = 123
    train: TrainConfig = field(default_factory=TrainConfig)
    spread: float = datagen.DEFAULT_SPREAD
    samples_per_label: int = datagen.DEFAULT_SAMPLES_PER_LABEL
    latent_dim: int = datagen.LATENT_DIM
    # adaptive-attack knobs
    p_drop: float = 0.1
    target_prob: float = 0.95
    prune_ratio: float = 0.2
    data_fraction: float = 0.10
    finetune: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=10, learning_rate=0.05)
    )

    def validate(self) -> None:
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if not 0.0 < self.nbr_cutoff < 1.0:
            raise ValueError(f"nbr_cutoff must be in (0, 1), got {self.nbr_cutoff}")
        if self.n_attack_inputs < 0:
            raise ValueError("n_attack_inputs must be >= 0")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not 0.0 <= self.target_fpr < 0.5:
            raise ValueError(f"target_fpr must be in [0, 0.5), got {self.target_fpr}")
        if self.attack_kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.attack_kind!r}")
        self.budget.validate()
        self.train.validate()
        self.finetune.validate()


@dataclass
class RoundResult:
    breach_index: int
    pre_transfer: float
    post_success: float
    filter_rate: float
    fpr_realized: float
    benign_acc: float
    d_benign_med: float
    d_adv_med: float  # median loss gap over transferred attacks; NaN if none transfer

    def validate(self) -> None:
        for name in ("pre_transfer", "post_success", "filter_rate", "fpr_realized", "benign_acc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} = {v} outside [0, 1]")
        if self.post_success > self.pre_transfer + 1e-12:
            raise ValueError("post-filter success exceeds pre-filter transfer rate")


@dataclass
class GameResult:
    seed: int
    target_fpr: float
    rounds: list[RoundResult]
    nbr: int


@dataclass
class _RoundRaw:
    """Threshold-independent measurements of one breach round."""

    breach_index: int
    benign_acc: float
    val_deltas: np.ndarray  # calibration pool
    test_deltas: np.ndarray  # fresh benign pool (realized FPR, medians)
    adv_deltas: np.ndarray
    transferred: np.ndarray


def make_task(scenario: BreachScenario) -> TaskDataset:
    return datagen.make_task(scenario.task_kind, scenario.task_params, scenario.task_seed)


def build_version_pool(
    task: TaskDataset, scenario: BreachScenario, seed: int, count: int
) -> list[ModelVersion]:
    """Train `count` versions with independent hidden assignments.

    All versions share the scenario's training config (and so its
    parameter-init seed): loss-surface differences come from the hidden
    distributions alone, keeping benign loss gaps across versions small.
    """
    rng = child_rng(seed, TAG_TRIAL, TAG_ASSIGNMENT)
    versions = []
    for i in range(count):
        assignment = datagen.assign_per_label(
            task.num_classes,
            scenario.spread,
            rng,
            samples_per_label=scenario.samples_per_label,
            latent_dim=scenario.latent_dim,
        )
        versions.append(versioning.train_version(task, assignment, scenario.train, i + 1))
        logger.debug("trained version %d (benign acc %.3f)", i + 1, versions[-1].benign_accuracy)
    return versions


def pick_attack_inputs(
    task: TaskDataset, deployed: nnet.MlpModel, attacked: list[nnet.MlpModel], n: int, seed: int
):
    """Choose attack inputs and target labels from the test split.

    Inputs the deployed model already misclassifies are excluded. Targets
    are drawn uniformly among labels that differ from the true label and
    from every attacked model's current prediction (the targeted-attack
    precondition); inputs with no such label are skipped.
    """
    pick_rng = child_rng(seed, TAG_INPUT_PICK)
    target_rng = child_rng(seed, TAG_TARGETS)
    preds = nnet.predict_batch(deployed, task.test_x)
    candidates = np.flatnonzero(preds == task.test_y)
    order = pick_rng.permutation(candidates)
    attacked_preds = [nnet.predict_batch(m, task.test_x) for m in attacked]

    chosen, targets = [], []
    for idx in order:
        if len(chosen) == n:
            break
        forbidden = {int(task.test_y[idx])}
        forbidden.update(int(p[idx]) for p in attacked_preds)
        allowed = [c for c in range(task.num_classes) if c not in forbidden]
        if not allowed:
            continue
        chosen.append(idx)
        targets.append(allowed[int(target_rng.integers(0, len(allowed)))])
    if len(chosen) < n:
        raise ValueError(f"only {len(chosen)} usable attack inputs, wanted {n}")
    return task.test_x[chosen], np.asarray(targets, dtype=int)


def craft_attacks(
    scenario: BreachScenario,
    task: TaskDataset,
    breached: list[ModelVersion],
    x: np.ndarray,
    targets: np.ndarray,
    seed: int,
) -> np.ndarray:
    """Run the scenario's attack against the breached ensemble."""
    models = [v.model for v in breached]
    kind = scenario.attack_kind
    if kind == "prune_pgd":
        models = [
            attacks.prune_finetune(
                v,
                scenario.prune_ratio,
                scenario.data_fraction,
                scenario.finetune,
                task,
                seed=child_seed(seed, TAG_PRUNE, v.version_id),
            )
            for v in breached
        ]
        return attacks.pgd_batch(models, x, targets, scenario.budget)
    if kind == "pgd":
        return attacks.pgd_batch(models, x, targets, scenario.budget)
    if kind == "pgd_dropout":
        mask_seeds = [child_seed(seed, TAG_ATTACK, i) for i in range(len(x))]
        return attacks.pgd_batch(
            models, x, targets, scenario.budget, p_drop=scenario.p_drop, mask_seeds=mask_seeds
        )
    if kind == "pgd_low_confidence":
        return attacks.pgd_batch(models, x, targets, scenario.budget, target_prob=scenario.target_prob)
    if kind == "cw":
        return attacks.cw_batch(models, x, targets, scenario.budget)[0]
    if kind == "ead":
        return attacks.ead_batch(models, x, targets, scenario.budget)[0]
    raise ValueError(f"unknown attack kind {kind!r}")


def surrogate_models_for_round(scenario, task, breached, seed):
    """The models the attacker actually optimises against this round."""
    if scenario.attack_kind != "prune_pgd":
        return [v.model for v in breached]
    return [
        attacks.prune_finetune(
            v,
            scenario.prune_ratio,
            scenario.data_fraction,
            scenario.finetune,
            task,
            seed=child_seed(seed, TAG_PRUNE, v.version_id),
        )
        for v in breached
    ]


def play_rounds(
    scenario: BreachScenario,
    seed: int,
    task: TaskDataset | None = None,
    versions: list[ModelVersion] | None = None,
) -> list[_RoundRaw]:
    """Run every breach round once, recording threshold-independent data."""
    scenario.validate()
    task = task if task is not None else make_task(scenario)
    if versions is None:
        versions = build_version_pool(task, scenario, seed, scenario.horizon + 1)
    if len(versions) < scenario.horizon + 1:
        raise ValueError(f"need {scenario.horizon + 1} versions, got {len(versions)}")

    raws = []
    for i in range(1, scenario.horizon + 1):
        deployed = versions[i]
        breached = versions[:i]
        breached_models = [v.model for v in breached]
        round_seed = child_seed(seed, TAG_TRIAL, i)

        val_deltas = filtering.delta_max_batch(task.val_x, deployed.model, breached_models)
        test_deltas = filtering.delta_max_batch(task.test_x, deployed.model, breached_models)

        if scenario.n_attack_inputs > 0:
            attacked = surrogate_models_for_round(scenario, task, breached, round_seed)
            x, targets = pick_attack_inputs(
                task, deployed.model, attacked, scenario.n_attack_inputs, round_seed
            )
            if scenario.attack_kind == "prune_pgd":
                x_adv = attacks.pgd_batch(attacked, x, targets, scenario.budget)
            else:
                x_adv = craft_attacks(scenario, task, breached, x, targets, round_seed)
            transferred = nnet.predict_batch(deployed.model, x_adv) == targets
            adv_deltas = filtering.delta_max_batch(x_adv, deployed.model, breached_models)
        else:
            transferred = np.zeros(0, dtype=bool)
            adv_deltas = np.zeros(0)

        raws.append(
            _RoundRaw(
                breach_index=i,
                benign_acc=deployed.benign_accuracy,
                val_deltas=val_deltas,
                test_deltas=test_deltas,
                adv_deltas=adv_deltas,
                transferred=transferred,
            )
        )
        logger.info(
            "round %d: transfer %.2f, benign p95 %.3f",
            i,
            transferred.mean() if len(transferred) else 0.0,
            np.percentile(val_deltas, 95),
        )
    return raws


def score_rounds(raws: list[_RoundRaw], target_fpr: float, cutoff: float):
    """Threshold the raw rounds at one FPR; returns (rounds, nbr)."""
    rounds = []
    for raw in raws:
        threshold = filtering.quantile_ceil(raw.val_deltas, 1.0 - target_fpr)
        fpr_realized = float(np.mean(raw.test_deltas >= threshold))
        n = len(raw.adv_deltas)
        if n:
            flagged = raw.adv_deltas >= threshold
            caught = raw.transferred & flagged
            pre = float(raw.transferred.mean())
            post = float(np.mean(raw.transferred & ~flagged))
            filter_rate = (
                float(caught.sum() / raw.transferred.sum()) if raw.transferred.any() else 1.0
            )
            d_adv = (
                float(np.median(raw.adv_deltas[raw.transferred]))
                if raw.transferred.any()
                else float("nan")
            )
        else:
            pre = post = 0.0
            filter_rate = 1.0
            d_adv = float("nan")
        result = RoundResult(
            breach_index=raw.breach_index,
            pre_transfer=pre,
            post_success=post,
            filter_rate=filter_rate,
            fpr_realized=fpr_realized,
            benign_acc=raw.benign_acc,
            d_benign_med=float(np.median(raw.test_deltas)),
            d_adv_med=d_adv,
        )
        result.validate()
        rounds.append(result)
    return rounds, compute_nbr([r.post_success for r in rounds], cutoff)


def compute_nbr(post_successes, cutoff: float) -> int:
    """Consecutive recovered rounds from the first breach."""
    nbr = 0
    for post in post_successes:
        if post <= cutoff:
            nbr += 1
        else:
            break
    return nbr


def run_breach_game(
    scenario: BreachScenario,
    seed: int,
    task: TaskDataset | None = None,
    versions: list[ModelVersion] | None = None,
) -> GameResult:
    raws = play_rounds(scenario, seed, task, versions)
    rounds, nbr = score_rounds(raws, scenario.target_fpr, scenario.nbr_cutoff)
    return GameResult(seed=seed, target_fpr=scenario.target_fpr, rounds=rounds, nbr=nbr)


def fpr_sweep(
    scenario: BreachScenario,
    fprs,
    seed: int,
    task: TaskDataset | None = None,
    versions: list[ModelVersion] | None = None,
) -> dict[float, GameResult]:
    """NBR as a function of the target FPR.

    Versions and attacks do not depend on the threshold, so the rounds are
    played once and rescored per FPR.
    """
    fprs = list(fprs)
    if any(b <= a for a, b in zip(fprs, fprs[1:])):
        raise ValueError("fpr list must be strictly ascending")
    raws = play_rounds(scenario, seed, task, versions)
    out = {}
    for fpr in fprs:
        rounds, nbr = score_rounds(raws, fpr, scenario.nbr_cutoff)
        out[fpr] = GameResult(seed=seed, target_fpr=fpr, rounds=rounds, nbr=nbr)
    return out


def strength_sweep(
    scenario: BreachScenario,
    epsilons,
    seed: int,
    task: TaskDataset | None = None,
    versions: list[ModelVersion] | None = None,
) -> dict[float, GameResult]:
    """Games at increasing attack budgets, sharing one version pool.

    The step size scales with epsilon (epsilon/10) as in the default
    budget.
    """
    epsilons = list(epsilons)
    if any(b <= a for a, b in zip(epsilons, epsilons[1:])):
        raise ValueError("epsilon list must be strictly ascending")
    task = task if task is not None else make_task(scenario)
    if versions is None:
        versions = build_version_pool(task, scenario, seed, scenario.horizon + 1)
    out = {}
    for eps in epsilons:
        budget = replace(scenario.budget, epsilon=eps, step_size=eps / 10.0)
        sub = replace(scenario, budget=budget)
        out[eps] = run_breach_game(sub, seed, task, versions)
    return out


def rank_correlation(xs, ys) -> float:
    """Spearman rank correlation with average ranks; 0.0 when either side
    is constant (no order information)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if len(xs) != len(ys) or len(xs) < 2:
        raise ValueError("need two equal-length sequences of length >= 2")
    rx = _average_ranks(xs)
    ry = _average_ranks(ys)
    sx, sy = rx.std(), ry.std()
    if sx == 0 or sy == 0:
        return 0.0
    return float(np.mean((rx - rx.mean()) * (ry - ry.mean())) / (sx * sy))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks
