"""Synthetic multi-task regression around a shared low-rank core.

Every task's teacher is ``rotation_t @ core`` for a small random output-side
rotation of one shared rank-``rank`` linear map, so all tasks share the same
right singular subspace ("shared abilities") while their output subspaces
differ by nonzero principal angles. Targets carry additive Gaussian noise.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .decomposition import decompose
from .exceptions import InvalidParameterError, ValidationError
from .layer import GATE_TOPK, MoeLoraLayer
from .validation import as_count


@dataclass(frozen=True)
class Task:
    teacher: np.ndarray
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray


@dataclass(frozen=True)
class SyntheticTaskSet:
    tasks: tuple
    core: np.ndarray
    n: int
    m: int
    rank: int
    noise: float
    seed: int

    @property
    def count(self):
        return len(self.tasks)


def _orthonormal(rng, rows, cols):
    q, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q


def _random_rotation(rng, dim, strength):
    skew = rng.standard_normal((dim, dim))
    skew = skew - skew.T
    norm = np.linalg.norm(skew, 2)
    if norm > 0:
        skew /= norm
    return expm(strength * skew)


def make_tasks(
    t,
    n,
    m,
    rank,
    noise,
    seed,
    train_count=64,
    eval_count=64,
    rotation_strength=0.25,
):
    """Build ``t`` deterministic tasks sharing a rank-``rank`` core teacher."""
    t = as_count(t, "t")
    n = as_count(n, "n")
    m = as_count(m, "m")
    rank = as_count(rank, "rank")
    train_count = as_count(train_count, "train_count")
    eval_count = as_count(eval_count, "eval_count")
    if rank > min(m, n):
        raise InvalidParameterError(
            f"core rank {rank} exceeds min(m, n) = {min(m, n)}"
        )
    noise = float(noise)
    if noise < 0:
        raise InvalidParameterError(f"noise must be >= 0, got {noise}")

    rng_core = np.random.default_rng([int(seed), 0])
    left = _orthonormal(rng_core, m, rank)
    right = _orthonormal(rng_core, n, rank)
    spectrum = np.linspace(3.0, 1.5, rank)
    core = (left * spectrum) @ right.T

    tasks = []
    for ti in range(t):
        rng_rot = np.random.default_rng([int(seed), 1, ti])
        teacher = _random_rotation(rng_rot, m, rotation_strength) @ core
        rng_train = np.random.default_rng([int(seed), 2, ti])
        x_train = rng_train.standard_normal((train_count, n))
        y_train = x_train @ teacher.T + noise * rng_train.standard_normal(
            (train_count, m)
        )
        rng_eval = np.random.default_rng([int(seed), 3, ti])
        x_eval = rng_eval.standard_normal((eval_count, n))
        y_eval = x_eval @ teacher.T + noise * rng_eval.standard_normal(
            (eval_count, m)
        )
        tasks.append(
            Task(
                teacher=teacher,
                x_train=x_train,
                y_train=y_train,
                x_eval=x_eval,
                y_eval=y_eval,
            )
        )

    return SyntheticTaskSet(
        tasks=tuple(tasks),
        core=core,
        n=n,
        m=m,
        rank=rank,
        noise=noise,
        seed=int(seed),
    )


def single_task_set(task_set, index):
    """A one-task view of ``task_set`` (used for isolated baseline runs)."""
    if not 0 <= index < task_set.count:
        raise ValidationError(f"task index {index} out of range")
    return SyntheticTaskSet(
        tasks=(task_set.tasks[index],),
        core=task_set.core,
        n=task_set.n,
        m=task_set.m,
        rank=task_set.rank,
        noise=task_set.noise,
        seed=task_set.seed,
    )


def initial_weight(task_set, background=0.1):
    """Mean of the task teachers plus a small full-rank background.

    The background keeps every singular block of the initial weight nonzero
    so that all experts start trainable.
    """
    rng = np.random.default_rng([task_set.seed, 4])
    mean_teacher = np.mean([task.teacher for task in task_set.tasks], axis=0)
    noise = rng.standard_normal((task_set.m, task_set.n))
    return mean_teacher + (float(background) / np.sqrt(task_set.n)) * noise


def build_layer(
    task_set,
    k,
    r,
    scale=1.0,
    gate_mode="scalar_alpha",
    top_k=None,
    background=0.1,
):
    """Decompose the task set's initial weight into a fresh layer."""
    w0 = initial_weight(task_set, background=background)
    bank = decompose(w0, k, r, scale)
    router = None
    if gate_mode == GATE_TOPK:
        rng = np.random.default_rng([task_set.seed, 5])
        router = 0.01 * rng.standard_normal((task_set.n, k))
    return MoeLoraLayer(bank=bank, gate_mode=gate_mode, router=router, top_k=top_k)
