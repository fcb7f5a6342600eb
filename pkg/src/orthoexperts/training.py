"""Multi-task training loops (sequential and mixed) with optional dynamic
regrouping, plus scoring and isolated baselines.

Per batch: forward/backward on every sample, one SGD step on the mean
gradients, then — at regroup events — grouping of that same batch's mean
rank-1 gradients and (when enabled) a regroup of the bank. Gradient angles are
recorded on the regrouping batch under the policy in effect after the event,
so runs with grouping disabled produce a comparable angle trace under the
static identity grouping.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError
from .grouping import (
    dog_run,
    extract_rank1_gradients,
    gradient_angles,
    identity_policy,
    normalize_gradients,
)
from .layer import GATE_SCALAR, LayerGradients, backward, forward, regroup_layer
from .metrics import ScoreGrid
from .tasks import single_task_set
from .validation import as_count


@dataclass(frozen=True)
class AngleEvent:
    epoch: int
    step: int
    intra_deg: float
    inter_deg: float
    dog_iterations: int


@dataclass
class TrainResult:
    grid: ScoreGrid
    events: list
    layer: object

    def epoch_angle_trace(self):
        """(epoch, mean intra, mean inter) rows, one per epoch with events."""
        by_epoch = {}
        for ev in self.events:
            by_epoch.setdefault(ev.epoch, []).append(ev)
        rows = []
        for epoch in sorted(by_epoch):
            evs = by_epoch[epoch]
            rows.append(
                (
                    epoch,
                    float(np.mean([e.intra_deg for e in evs])),
                    float(np.mean([e.inter_deg for e in evs])),
                )
            )
        return rows


def evaluate_score(layer, x_eval, y_eval):
    """100 * max(0, 1 - MSE/Var) against per-coordinate target variance."""
    preds = np.array([forward(layer, x) for x in x_eval])
    mse = float(np.mean((preds - y_eval) ** 2))
    var = float(np.mean((y_eval - y_eval.mean(axis=0)) ** 2))
    if var == 0.0:
        return 100.0 if mse == 0.0 else 0.0
    return 100.0 * max(0.0, 1.0 - mse / var)


def batch_gradients(layer, xb, yb):
    """Mean gradients of 0.5*||forward(x) - y||^2 over a batch."""
    bank = layer.bank
    acc_a = [np.zeros_like(a) for a, _ in bank.experts]
    acc_b = [np.zeros_like(b) for _, b in bank.experts]
    acc_alpha = np.zeros(bank.k)
    acc_router = None if layer.router is None else np.zeros_like(layer.router)
    count = xb.shape[0]
    for x, y in zip(xb, yb):
        h = forward(layer, x)
        grads = backward(layer, x, h - y)
        for k in range(bank.k):
            acc_a[k] += grads.grad_a[k]
            acc_b[k] += grads.grad_b[k]
        acc_alpha += grads.grad_alpha
        if acc_router is not None and grads.grad_router is not None:
            acc_router += grads.grad_router
    inv = 1.0 / count
    return LayerGradients(
        grad_a=[g * inv for g in acc_a],
        grad_b=[g * inv for g in acc_b],
        grad_alpha=acc_alpha * inv,
        grad_router=None if acc_router is None else acc_router * inv,
    )


def apply_sgd(layer, grads, lr):
    bank = layer.bank
    for k in range(bank.k):
        a, b = bank.experts[k]
        a -= lr * grads.grad_a[k]
        b -= lr * grads.grad_b[k]
    if layer.gate_mode == GATE_SCALAR:
        bank.routing -= lr * grads.grad_alpha
    elif grads.grad_router is not None:
        layer.router -= lr * grads.grad_router


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-2
    batch_size: int = 8
    dog_enabled: bool = True
    regroup_interval: int = 1
    assign_mode: str = "exact"
    max_iter: int = 10
    eps_g: float = 1e-12


def _train_on_data(layer, data_stream, config, state):
    """Run epochs over one data source, mutating ``layer`` in place.

    ``data_stream`` is (x, y) arrays; ``state`` carries the cross-stage
    counters and rng streams so sequential stages share one seed derivation.
    Returns the possibly-replaced layer (regroup builds a new bank).
    """
    x_all, y_all = data_stream
    count = x_all.shape[0]
    k, r = layer.bank.k, layer.bank.r
    for _ in range(config.epochs):
        perm = state["shuffle_rng"].permutation(count)
        for start in range(0, count, config.batch_size):
            idx = perm[start : start + config.batch_size]
            grads = batch_gradients(layer, x_all[idx], y_all[idx])
            apply_sgd(layer, grads, config.lr)
            state["step"] += 1
            if state["step"] % config.regroup_interval == 0:
                raw = extract_rank1_gradients(grads.grad_a, grads.grad_b)
                batch = normalize_gradients(raw, config.eps_g)
                if config.dog_enabled:
                    ev_seed = int(state["event_rng"].integers(0, 2**31 - 1))
                    result = dog_run(
                        batch,
                        k,
                        r,
                        max_iter=config.max_iter,
                        seed=ev_seed,
                        mode=config.assign_mode,
                    )
                    layer = regroup_layer(layer, result.policy)
                    policy, iters = result.policy, result.iterations
                else:
                    policy, iters = identity_policy(k, r), 0
                angles = gradient_angles(batch, policy)
                state["events"].append(
                    AngleEvent(
                        epoch=state["epoch"],
                        step=state["step"],
                        intra_deg=angles.intra_deg,
                        inter_deg=angles.inter_deg,
                        dog_iterations=iters,
                    )
                )
        state["epoch"] += 1
    return layer


def _fresh_state(seed):
    return {
        "shuffle_rng": np.random.default_rng([int(seed), 10]),
        "event_rng": np.random.default_rng([int(seed), 11]),
        "step": 0,
        "epoch": 0,
        "events": [],
    }


def train_sequential(layer, task_set, order, config, seed=0):
    """Train task stages in ``order``; one grid row of all-task scores per stage."""
    t = task_set.count
    if sorted(int(o) for o in order) != list(range(t)):
        raise ValidationError(f"order must be a permutation of 0..{t - 1}")
    as_count(config.epochs, "epochs")
    state = _fresh_state(seed)
    rows = []
    for task_index in order:
        task = task_set.tasks[int(task_index)]
        layer = _train_on_data(layer, (task.x_train, task.y_train), config, state)
        rows.append(
            [
                evaluate_score(layer, tsk.x_eval, tsk.y_eval)
                for tsk in task_set.tasks
            ]
        )
    return TrainResult(
        grid=ScoreGrid(a=np.asarray(rows)), events=state["events"], layer=layer
    )


def train_mixed(layer, task_set, config, seed=0):
    """Train on the interleaved union of all tasks; single-row grid."""
    x_all = np.vstack([task.x_train for task in task_set.tasks])
    y_all = np.vstack([task.y_train for task in task_set.tasks])
    state = _fresh_state(seed)
    layer = _train_on_data(layer, (x_all, y_all), config, state)
    row = [
        evaluate_score(layer, task.x_eval, task.y_eval) for task in task_set.tasks
    ]
    return TrainResult(
        grid=ScoreGrid(a=np.asarray([row])), events=state["events"], layer=layer
    )


def compute_baselines(task_set, build, config, seed=0):
    """Isolated single-task scores, one fresh model per task.

    ``build`` is a zero-argument callable returning a fresh layer; each task
    is trained alone with the same epochs/step/seed derivation as the main
    runs.
    """
    scores = np.empty(task_set.count)
    for index in range(task_set.count):
        layer = build()
        subset = single_task_set(task_set, index)
        result = train_sequential(layer, subset, [0], config, seed=seed)
        scores[index] = result.grid.a[0, 0]
    return scores
