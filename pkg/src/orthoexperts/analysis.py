"""Parameter-importance and activation-overlap analysis across tasks.

Fisher information is estimated as the per-parameter mean squared gradient of
the task loss over samples. Unit-level analysis works on the layer's
effective weight (residual plus weighted expert deltas): for a linear layer
the loss gradient w.r.t. that matrix is ``(h - y) x^T`` per sample, which
gives a per-output-row importance mass and a signed mean-gradient direction.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidParameterError, ValidationError
from .layer import backward, forward
from .validation import as_matrix


@dataclass(frozen=True)
class FisherDiagonal:
    """Mean squared gradients per trainable tensor (same shapes as the layer)."""

    a: list
    b: list
    alpha: np.ndarray
    router: np.ndarray = None

    def flattened(self):
        parts = [g.ravel() for g in self.a] + [g.ravel() for g in self.b]
        parts.append(self.alpha.ravel())
        if self.router is not None:
            parts.append(self.router.ravel())
        return np.concatenate(parts)


def fisher_diagonal(layer, x_data, y_data):
    """Per-parameter Fisher diagonal of 0.5*||forward(x) - y||^2.

    Mean over samples of the squared per-sample gradient, for every trainable
    tensor of the layer.
    """
    x_data = as_matrix(x_data, "x_data")
    y_data = as_matrix(y_data, "y_data")
    if x_data.shape[0] == 0:
        raise ValidationError("fisher_diagonal needs at least one sample")
    if x_data.shape[0] != y_data.shape[0]:
        raise ValidationError("x_data and y_data must have matching sample counts")
    bank = layer.bank
    acc_a = [np.zeros_like(a) for a, _ in bank.experts]
    acc_b = [np.zeros_like(b) for _, b in bank.experts]
    acc_alpha = np.zeros(bank.k)
    acc_router = None if layer.router is None else np.zeros_like(layer.router)
    for x, y in zip(x_data, y_data):
        h = forward(layer, x)
        grads = backward(layer, x, h - y)
        for k in range(bank.k):
            acc_a[k] += grads.grad_a[k] ** 2
            acc_b[k] += grads.grad_b[k] ** 2
        acc_alpha += grads.grad_alpha**2
        if acc_router is not None and grads.grad_router is not None:
            acc_router += grads.grad_router**2
    inv = 1.0 / x_data.shape[0]
    return FisherDiagonal(
        a=[g * inv for g in acc_a],
        b=[g * inv for g in acc_b],
        alpha=acc_alpha * inv,
        router=None if acc_router is None else acc_router * inv,
    )


def weight_gradient_stats(layer, x_data, y_data):
    """Fisher diagonal and mean gradient of the layer's effective weight.

    Returns ``(fisher_w, mean_grad)``, both (m, n): the mean squared and mean
    signed per-sample gradients ``(h - y) x^T`` of the effective dense map.
    """
    x_data = as_matrix(x_data, "x_data")
    y_data = as_matrix(y_data, "y_data")
    if x_data.shape[0] == 0:
        raise ValidationError("weight_gradient_stats needs at least one sample")
    m, n = layer.bank.m, layer.bank.n
    fisher_w = np.zeros((m, n))
    mean_grad = np.zeros((m, n))
    for x, y in zip(x_data, y_data):
        g = np.outer(forward(layer, x) - y, x)
        fisher_w += g**2
        mean_grad += g
    inv = 1.0 / x_data.shape[0]
    return fisher_w * inv, mean_grad * inv


def activated_neurons(layer, x_data, eps):
    """Mask of output units whose mean activation magnitude exceeds ``eps``."""
    x_data = as_matrix(x_data, "x_data")
    if x_data.shape[0] == 0:
        raise ValidationError("activated_neurons needs at least one sample")
    eps = float(eps)
    if eps <= 0:
        raise InvalidParameterError(f"eps must be > 0, got {eps}")
    mean_h = np.mean([forward(layer, x) for x in x_data], axis=0)
    return np.abs(mean_h) > eps


@dataclass(frozen=True)
class OverlapReport:
    """Cross-task sharing of important units and gradient sign conflicts.

    ``selected[t, i]`` marks unit i as important for task t;
    ``unit_task_counts[i]`` counts tasks selecting unit i; ``histogram[c]``
    counts units selected by exactly c tasks (c = 0..T). ``positive_counts``
    / ``negative_counts`` count tasks whose mean gradient over a parameter
    row is positive / negative.
    """

    selected: np.ndarray
    unit_task_counts: np.ndarray
    histogram: np.ndarray
    positive_counts: np.ndarray = None
    negative_counts: np.ndarray = None


def overlap_report(per_task_units, keep_fraction=None, mean_grads=None):
    """Cross-task overlap of important units, plus gradient sign splits.

    ``per_task_units`` is (T, U): boolean rows are used as masks directly;
    float rows are treated as per-unit Fisher mass and the top
    ``keep_fraction`` units per task are selected (ties broken by lower unit
    index). ``mean_grads``, if given, is a (T, rows, cols) stack of per-task
    mean gradients; each row's mean sign is counted across tasks.
    """
    units = np.asarray(per_task_units)
    if units.ndim != 2:
        raise ValidationError("per_task_units must be 2-D (tasks x units)")
    t, u = units.shape
    if t < 2:
        raise ValidationError("overlap needs at least 2 tasks")

    if units.dtype == bool:
        selected = units
    else:
        units = as_matrix(units, "per_task_units")
        if keep_fraction is None or not 0 < keep_fraction <= 1:
            raise InvalidParameterError(
                f"keep_fraction must be in (0, 1], got {keep_fraction}"
            )
        n_keep = max(1, int(np.ceil(keep_fraction * u)))
        selected = np.zeros((t, u), dtype=bool)
        for ti in range(t):
            top = np.argsort(-units[ti], kind="stable")[:n_keep]
            selected[ti, top] = True

    unit_task_counts = selected.sum(axis=0)
    histogram = np.bincount(unit_task_counts, minlength=t + 1)

    positive_counts = None
    negative_counts = None
    if mean_grads is not None:
        grads = np.asarray(mean_grads, dtype=np.float64)
        if grads.ndim != 3 or grads.shape[0] != t:
            raise ValidationError(
                "mean_grads must be a (tasks, rows, cols) stack matching per_task_units"
            )
        row_means = grads.mean(axis=2)
        positive_counts = (row_means > 0).sum(axis=0)
        negative_counts = (row_means < 0).sum(axis=0)

    return OverlapReport(
        selected=selected,
        unit_task_counts=unit_task_counts,
        histogram=histogram,
        positive_counts=positive_counts,
        negative_counts=negative_counts,
    )
