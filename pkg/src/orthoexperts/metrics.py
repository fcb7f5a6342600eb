"""Continual-learning metrics over task-score grids.

A grid row t' holds the scores of every task after training stage t'
(sequential runs produce T rows; mixed runs a single row). ``baseline`` holds
per-task scores from isolated single-task training. Scores are
higher-is-better on a 0-100 scale.

The forgetting metric has two variants: ``as_written`` compares each task's
diagonal entry a[t][t] to the final row, which makes Backward == -Forget an
algebraic identity; ``max_over_history`` replaces a[t][t] with the best score
the task ever reached at or after its own stage. Published tables often pair
a Forget value with a smaller |Backward|, which the as-written identity
cannot produce — :func:`published_comparison` reports how both variants
relate to such published numbers instead of guessing which convention
produced them.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError, ModeError, ValidationError
from .matio import read_comment_header, read_csv_matrix, write_csv_matrix
from .validation import as_matrix, as_vector


@dataclass(frozen=True)
class ScoreGrid:
    """T'xT score matrix ``a`` plus optional per-task isolated baselines."""

    a: np.ndarray
    baseline: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "a", as_matrix(self.a, "score grid"))
        if self.baseline is not None:
            baseline = as_vector(self.baseline, "baseline")
            if baseline.shape[0] != self.a.shape[1]:
                raise DimensionError(
                    f"baseline length {baseline.shape[0]} does not match "
                    f"{self.a.shape[1]} tasks"
                )
            object.__setattr__(self, "baseline", baseline)

    @property
    def tasks(self):
        return self.a.shape[1]


def _require_square(grid, what):
    if grid.a.shape[0] != grid.a.shape[1]:
        raise DimensionError(
            f"{what} needs a square stage-by-task grid, got {grid.a.shape}"
        )


def metric_avg_score(grid):
    """Mean of the final row (overall score after all training)."""
    if grid.a.size == 0:
        raise ValidationError("empty grid")
    return float(grid.a[-1].mean())


def metric_forward(grid, mode="sequential"):
    """Mean gain over the isolated-training baseline.

    ``mixed``: final row minus baseline. ``sequential``: each task's own-stage
    diagonal entry minus baseline.
    """
    if grid.baseline is None:
        raise ValidationError("forward transfer needs a baseline")
    if mode == "mixed":
        return float((grid.a[-1] - grid.baseline).mean())
    if mode == "sequential":
        _require_square(grid, "sequential forward")
        return float((np.diag(grid.a) - grid.baseline).mean())
    raise ModeError(f"mode must be 'mixed' or 'sequential', got {mode!r}")


def metric_forget(grid, variant="as_written"):
    """Mean score drop on earlier tasks by the end of training.

    ``as_written`` uses the own-stage diagonal as the reference;
    ``max_over_history`` uses each task's best score at or after its stage.
    """
    _require_square(grid, "forgetting")
    t = grid.tasks
    if t < 2:
        raise ValidationError("forgetting needs at least 2 tasks")
    if variant == "as_written":
        ref = np.diag(grid.a)[: t - 1]
    elif variant == "max_over_history":
        ref = np.array([grid.a[i:, i].max() for i in range(t - 1)])
    else:
        raise ModeError(f"unknown forget variant {variant!r}")
    return float((ref - grid.a[-1, : t - 1]).mean())


def metric_backward(grid):
    """Mean score change on earlier tasks; equals ``-metric_forget(as_written)``."""
    _require_square(grid, "backward transfer")
    t = grid.tasks
    if t < 2:
        raise ValidationError("backward transfer needs at least 2 tasks")
    return float((grid.a[-1, : t - 1] - np.diag(grid.a)[: t - 1]).mean())


def published_comparison(grid, published, tol=0.05):
    """Compare computed metrics with published caption values.

    ``published`` maps metric names (``avg``, ``forget``, ``backward``) to
    the published numbers. The returned report states both forget variants,
    whether either reproduces the published forget within ``tol``, and spells
    out the as-written identity so a mismatched published pair is documented
    rather than silently dropped.
    """
    forget_aw = metric_forget(grid, "as_written")
    forget_mh = metric_forget(grid, "max_over_history")
    backward = metric_backward(grid)
    report = {
        "avg_score": metric_avg_score(grid),
        "forget_as_written": forget_aw,
        "forget_max_over_history": forget_mh,
        "backward": backward,
        "published": dict(published),
        "tolerance": tol,
    }
    if "forget" in published:
        pub = float(published["forget"])
        report["forget_as_written_matches_published"] = bool(
            abs(forget_aw - pub) <= tol
        )
        report["forget_max_over_history_matches_published"] = bool(
            abs(forget_mh - pub) <= tol
        )
        report["note"] = (
            "backward == -forget(as_written) identically; a published "
            "(forget, backward) pair with backward != -forget cannot arise "
            "from the as-written formulas"
        )
    return report


def save_grid_csv(path, grid, header_lines=()):
    write_csv_matrix(path, grid.a, header_lines=header_lines)


def load_grid_csv(path, baseline=None):
    """Load a grid CSV; '#' header lines may carry metadata.

    A header line of the form ``published: avg=48.43 forget=8.37
    backward=-5.71`` is parsed into the returned info dict under
    ``"published"``; ``task_order:`` lines are returned as a list of labels.
    """
    a = read_csv_matrix(path)
    info = {}
    for line in read_comment_header(path):
        if line.startswith("published:"):
            published = {}
            for token in line[len("published:"):].split():
                key, _, value = token.partition("=")
                if _ == "=":
                    published[key] = float(value)
            info["published"] = published
        elif line.startswith("task_order:"):
            info["task_order"] = [
                t.strip() for t in line[len("task_order:"):].split(",") if t.strip()
            ]
    return ScoreGrid(a=a, baseline=baseline), info
