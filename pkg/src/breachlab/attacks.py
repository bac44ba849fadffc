"""White-box targeted attacks against one or more breached model versions.

All attacks optimise a perturbation against the *mean* NLL of the attacked
models (the ensemble route when several versions have leaked) and are
deterministic given their seeds. Box and L-inf budgets are hard
guarantees, enforced by projection at every step.

- pgd: signed gradient descent under an L-inf budget
- cw: L2-regularised attack loss with a geometric binary search over the
  trade-off constant c (success shrinks c, failure grows it)
- ead: cw plus an L1 term handled by shrinkage-thresholding after each step
- pgd_dropout / pgd_low_confidence: adaptive variants that reduce
  overfitting to the breached versions
- prune_finetune: builds an attacker-side surrogate from a breached
  version by random weight pruning plus finetuning on a small data cut
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import nnet
from .nnet import LossKind, MlpModel, TrainConfig
from .seeding import TAG_FINETUNE_DATA, TAG_PRUNE, child_rng, child_seed


@dataclass(frozen=True)
class AttackBudget:
    epsilon: float = 0.3  # L-inf bound for the pgd family
    step_size: float = 0.03
    steps: int = 100
    cw_steps: int = 200
    search_rounds: int = 6
    c_lo: float = 1e-3
    c_hi: float = 1e2
    beta: float = 0.01  # L1 weight for ead
    box: tuple[float, float] = (0.0, 1.0)

    def validate(self) -> None:
        if self.epsilon <= 0 or self.step_size <= 0:
            raise ValueError("epsilon and step_size must be positive")
        if self.steps < 0 or self.cw_steps < 0:
            raise ValueError("step counts must be >= 0")
        if self.search_rounds < 1:
            raise ValueError("search_rounds must be >= 1")
        if self.c_lo < 0 or self.c_hi < self.c_lo:
            raise ValueError("need 0 <= c_lo <= c_hi")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.box[0] >= self.box[1]:
            raise ValueError("box must be (low, high) with low < high")


@dataclass
class AdvExample:
    """One crafted input plus enough provenance to replay and audit it."""

    original: np.ndarray
    perturbed: np.ndarray
    target: int
    kind: str
    budget: AttackBudget
    final_losses: list[float]  # per attacked model: NLL toward target at perturbed
    success: list[bool]  # per attacked model: argmax == target
    seed: int | None = None
    model_ids: list[int] = field(default_factory=list)

    @property
    def succeeded(self) -> bool:
        return all(self.success)


def _check_attack_inputs(models, x, targets, budget):
    if not models:
        raise ValueError("need at least one model to attack")
    budget.validate()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    targets = np.atleast_1d(np.asarray(targets))
    if targets.shape[0] != x.shape[0]:
        raise ValueError(f"{targets.shape[0]} targets for {x.shape[0]} inputs")
    num_classes = models[0].num_classes
    if targets.min() < 0 or targets.max() >= num_classes:
        raise ValueError(f"target label out of range [0, {num_classes})")
    for m in models:
        preds = nnet.predict_batch(m, x)
        clash = preds == targets
        if clash.any():
            raise ValueError(
                f"targeted attack requires target != current prediction; "
                f"{int(clash.sum())} input(s) already classified as their target"
            )
    return x, targets.astype(int)


def _ensemble_grad(models, x, targets) -> np.ndarray:
    g = nnet.grad_input_batch(models[0], x, targets, LossKind.NEG_LOG_LIKELIHOOD)
    for m in models[1:]:
        g += nnet.grad_input_batch(m, x, targets, LossKind.NEG_LOG_LIKELIHOOD)
    return g / len(models)


def _mean_target_prob(models, x, targets) -> np.ndarray:
    p = np.zeros(len(x))
    for m in models:
        p += nnet.forward_batch(m, x)[np.arange(len(x)), targets]
    return p / len(models)


# ---------------------------------------------------------------------------
# pgd family


def pgd_batch(
    models,
    x,
    targets,
    budget: AttackBudget,
    p_drop: float = 0.0,
    mask_seeds=None,
    target_prob: float | None = None,
) -> np.ndarray:
    """Vectorised targeted PGD over a batch; the engine behind the pgd ops.

    p_drop > 0 evaluates each step's gradient on a copy of the current
    iterate with a random pixel fraction zeroed (per-sample RNG streams
    from mask_seeds, so batch runs and single replays agree). target_prob
    stops a sample's updates once the ensemble-mean probability of its
    target reaches the cap; values >= 1 disable the cap.
    """
    x0, targets = _check_attack_inputs(models, x, targets, budget)
    if not 0.0 <= p_drop < 1.0:
        raise ValueError(f"p_drop must be in [0, 1), got {p_drop}")
    if target_prob is not None and target_prob >= 1.0:
        target_prob = None
    lo, hi = budget.box
    xa = x0.copy()
    streams = None
    if p_drop > 0.0:
        if mask_seeds is None:
            mask_seeds = [0] * len(x0)
        if len(mask_seeds) != len(x0):
            raise ValueError(f"{len(mask_seeds)} mask seeds for {len(x0)} inputs")
        streams = [np.random.default_rng(int(s)) for s in mask_seeds]

    for _ in range(budget.steps):
        if target_prob is not None:
            active = _mean_target_prob(models, xa, targets) < target_prob
            if not active.any():
                break
        else:
            active = np.ones(len(x0), dtype=bool)
        x_eval = xa
        if streams is not None:
            masks = np.stack([rng.random(x0.shape[1]) >= p_drop for rng in streams])
            x_eval = xa * masks
        g = _ensemble_grad(models, x_eval, targets)
        stepped = xa - budget.step_size * np.sign(g)
        stepped = np.clip(stepped, x0 - budget.epsilon, x0 + budget.epsilon)
        stepped = np.clip(stepped, lo, hi)
        xa[active] = stepped[active]
    return xa


def _finalize(models, x, xa, target, kind, budget, seed=None, model_ids=None) -> AdvExample:
    losses = [float(nnet.loss_batch(m, xa, [target])[0]) for m in models]
    success = [int(nnet.predict_batch(m, xa)[0]) == int(target) for m in models]
    return AdvExample(
        original=np.asarray(x, dtype=float).ravel().copy(),
        perturbed=xa.ravel().copy(),
        target=int(target),
        kind=kind,
        budget=budget,
        final_losses=losses,
        success=success,
        seed=seed,
        model_ids=list(model_ids or []),
    )


def pgd(models, x, y_t: int, budget: AttackBudget) -> AdvExample:
    """Targeted ensemble PGD for a single input."""
    xa = pgd_batch(models, x, [y_t], budget)
    return _finalize(models, x, xa, y_t, "pgd", budget)


def pgd_dropout(models, x, y_t: int, budget: AttackBudget, p_drop: float, seed: int = 0) -> AdvExample:
    """PGD whose per-step gradients see a randomly pixel-dropped iterate."""
    if p_drop == 0.0:
        out = pgd(models, x, y_t, budget)
        out.kind, out.seed = "pgd_dropout", seed
        return out
    xa = pgd_batch(models, x, [y_t], budget, p_drop=p_drop, mask_seeds=[seed])
    return _finalize(models, x, xa, y_t, "pgd_dropout", budget, seed=seed)


def pgd_low_confidence(models, x, y_t: int, budget: AttackBudget, target_prob: float) -> AdvExample:
    """PGD that stops once the mean target probability reaches target_prob."""
    num_classes = models[0].num_classes
    if not (1.0 / num_classes) < target_prob <= 1.0:
        raise ValueError(f"target_prob must be in (1/{num_classes}, 1], got {target_prob}")
    xa = pgd_batch(models, x, [y_t], budget, target_prob=target_prob)
    out = _finalize(models, x, xa, y_t, "pgd_low_confidence", budget)
    if target_prob < 1.0:
        reached = float(_mean_target_prob(models, xa, np.asarray([y_t]))[0]) >= target_prob
        out.success = [reached] * len(models)
    return out


# ---------------------------------------------------------------------------
# cw / ead


def _soft_threshold(delta: np.ndarray, amount: float) -> np.ndarray:
    return np.sign(delta) * np.maximum(np.abs(delta) - amount, 0.0)


def elastic_attack_batch(models, x, targets, budget: AttackBudget, beta: float):
    """Shared CW/EAD engine. Returns (perturbed, found) arrays.

    Minimises ||delta||_2^2 + beta*||delta||_1 + c * mean-NLL(target) by
    projected gradient descent (shrinkage handles the L1 term), wrapped in
    a geometric binary search over c in [c_lo, c_hi]: rounds that yield a
    success anywhere shrink c, failures grow it. The returned perturbation
    is the successful one with the smallest regulariser cost seen anywhere
    in the search; inputs with no success return the original input.
    """
    x0, targets = _check_attack_inputs(models, x, targets, budget)
    lo_box, hi_box = budget.box
    n = len(x0)
    c_lo = np.full(n, budget.c_lo)
    c_hi = np.full(n, budget.c_hi)
    best = x0.copy()
    best_cost = np.full(n, np.inf)
    found = np.zeros(n, dtype=bool)

    for _ in range(budget.search_rounds):
        c = np.sqrt(c_lo * c_hi)
        delta = np.zeros_like(x0)
        round_success = np.zeros(n, dtype=bool)
        for step in range(budget.cw_steps + 1):
            xa = x0 + delta
            succ = np.ones(n, dtype=bool)
            for m in models:
                succ &= nnet.predict_batch(m, xa) == targets
            cost = np.sum(delta * delta, axis=1) + beta * np.sum(np.abs(delta), axis=1)
            better = succ & (cost < best_cost)
            best[better] = xa[better]
            best_cost[better] = cost[better]
            found |= succ
            round_success |= succ
            if step == budget.cw_steps:
                break
            g = _ensemble_grad(models, xa, targets)
            delta = delta - budget.step_size * (2.0 * delta + c[:, None] * g)
            if beta > 0:
                delta = _soft_threshold(delta, budget.step_size * beta)
            delta = np.clip(x0 + delta, lo_box, hi_box) - x0
        c_hi = np.where(round_success, c, c_hi)
        c_lo = np.where(round_success, c_lo, c)
    return best, found


def cw_batch(models, x, targets, budget: AttackBudget):
    return elastic_attack_batch(models, x, targets, budget, beta=0.0)


def ead_batch(models, x, targets, budget: AttackBudget):
    return elastic_attack_batch(models, x, targets, budget, beta=budget.beta)


def cw(models, x, y_t: int, budget: AttackBudget) -> AdvExample:
    xa, _ = cw_batch(models, x, [y_t], budget)
    return _finalize(models, x, xa, y_t, "cw", budget)


def ead(models, x, y_t: int, budget: AttackBudget) -> AdvExample:
    xa, _ = ead_batch(models, x, [y_t], budget)
    return _finalize(models, x, xa, y_t, "ead", budget)


# ---------------------------------------------------------------------------
# surrogate building (prune + finetune)


def prune_finetune(
    version,
    ratio: float,
    data_fraction: float,
    config: TrainConfig,
    task,
    seed: int = 0,
) -> MlpModel:
    """Attacker-side surrogate: zero a random weight fraction, then finetune
    on a small cut of the training data (the attacker's data share).

    ratio = 0 with zero finetune epochs returns the breached model exactly.
    """
    if not 0.0 <= ratio <= 0.5:
        raise ValueError(f"ratio must be in [0, 0.5], got {ratio}")
    if not 0.0 < data_fraction <= 1.0:
        raise ValueError(f"data_fraction must be in (0, 1], got {data_fraction}")
    model = nnet.copy_model(version.model)
    params = nnet.model_params(model)
    if ratio > 0:
        sizes = [w.size for w, _ in params]
        total = sum(sizes)
        k = int(ratio * total)
        chosen = child_rng(seed, TAG_PRUNE).choice(total, size=k, replace=False)
        flat = np.concatenate([w.ravel() for w, _ in params])
        flat[chosen] = 0.0
        offset = 0
        for w, _ in params:
            w[...] = flat[offset : offset + w.size].reshape(w.shape)
            offset += w.size

    n = len(task.train_x)
    m = max(1, int(round(data_fraction * n)))
    idx = child_rng(seed, TAG_FINETUNE_DATA).choice(n, size=m, replace=False)
    return nnet.sgd_train(model, task.train_x[idx], task.train_y[idx], config).model


# ---------------------------------------------------------------------------
# batch persistence (JSON lines, one record per example)


def write_adv_examples(path: str | Path, examples: list[AdvExample]) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            record = {
                "kind": ex.kind,
                "target": ex.target,
                "seed": ex.seed,
                "model_ids": ex.model_ids,
                "budget": asdict(ex.budget),
                "original": ex.original.tolist(),
                "perturbed": ex.perturbed.tolist(),
                "final_losses": ex.final_losses,
                "success": ex.success,
            }
            fh.write(json.dumps(record) + "\n")


def read_adv_examples(path: str | Path) -> list[AdvExample]:
    examples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                budget_dict = dict(record["budget"])
                budget_dict["box"] = tuple(budget_dict["box"])
                examples.append(
                    AdvExample(
                        original=np.asarray(record["original"], dtype=float),
                        perturbed=np.asarray(record["perturbed"], dtype=float),
                        target=int(record["target"]),
                        kind=record["kind"],
                        budget=AttackBudget(**budget_dict),
                        final_losses=[float(v) for v in record["final_losses"]],
                        success=[bool(v) for v in record["success"]],
                        seed=record.get("seed"),
                        model_ids=[int(v) for v in record.get("model_ids", [])],
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}: line {lineno}: bad record ({exc})") from exc
    return examples
