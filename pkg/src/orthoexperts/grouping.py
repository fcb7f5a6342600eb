"""Capacity-constrained spherical grouping of rank-1 gradient directions.

The rank-1 components of an expert bank (column j of ``a_k`` with row j of
``b_k``) each own a gradient vector. This module normalizes those gradients
onto the unit sphere, clusters them by direction, orthogonalizes the cluster
centroids, and solves a balanced assignment so every expert receives exactly
``r`` components. Applying the resulting policy to a bank physically moves
components between experts with a routing-ratio rescaling that leaves the
bank's reconstruction (and any layer built on it) unchanged.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.base import BaseEstimator

from .decomposition import ExpertBank
from .exceptions import (
    ConstraintError,
    DegenerateInputError,
    DimensionError,
    DivisionHazardError,
    InvalidParameterError,
    ModeError,
    NumericInvariantError,
)
from .linalg import orthonormality_defect
from .validation import as_count, as_matrix

DEFAULT_EPS_G = 1e-12


@dataclass(frozen=True)
class GradientBatch:
    """Unit-normalized rank-1 gradient vectors.

    ``vectors`` has one row per component; rows whose raw norm fell below the
    dead threshold are stored as zeros with ``dead_mask`` set.
    """

    dim: int
    vectors: np.ndarray
    raw_norms: np.ndarray
    dead_mask: np.ndarray

    @property
    def count(self):
        return self.vectors.shape[0]

    @property
    def live_indices(self):
        return np.flatnonzero(~self.dead_mask)


@dataclass(frozen=True)
class GroupingPolicy:
    """Binary component-to-expert assignment with exact capacity ``r``.

    ``assignment`` is (r*k, k); every row sums to 1 and every column to r.
    """

    assignment: np.ndarray
    k: int
    r: int

    def expert_of(self):
        """New expert index per component (length r*k)."""
        return np.argmax(self.assignment, axis=1)


@dataclass(frozen=True)
class CentroidSet:
    """Per-expert gradient sums (``raw``) and their orthonormalization (``ortho``)."""

    raw: np.ndarray
    ortho: np.ndarray


@dataclass(frozen=True)
class AngleReport:
    """Mean pairwise gradient angles, in degrees.

    ``intra_deg`` averages over experts with at least two live members (their
    count in ``intra_expert_count``); ``inter_deg`` averages over pairs of
    nonzero per-expert aggregate directions (``inter_aggregate_count`` of
    them). Either mean is NaN when its count leaves nothing to average.
    """

    intra_deg: float
    inter_deg: float
    intra_expert_count: int
    inter_aggregate_count: int


@dataclass(frozen=True)
class DogResult:
    """Outcome of :func:`dog_run`.

    ``objective_trace`` holds the grouping objective after the initial
    feasibility projection and after each loop iteration; ``iterations``
    counts loop iterations executed. ``all_dead`` flags the degenerate case
    where every gradient was below the dead threshold and the identity fill
    was returned without clustering.
    """

    policy: GroupingPolicy
    iterations: int
    objective_trace: tuple
    mode: str
    seed: int
    all_dead: bool = False


def validate_policy(pi, count=None):
    """Check row sums == 1, column sums == r, binary entries."""
    a = pi.assignment
    if a.shape != (pi.r * pi.k, pi.k):
        raise ConstraintError(
            f"assignment shape {a.shape} does not match (r*k, k) = {(pi.r * pi.k, pi.k)}"
        )
    if count is not None and a.shape[0] != count:
        raise ConstraintError(
            f"assignment has {a.shape[0]} rows for {count} components"
        )
    if not np.isin(a, (0, 1)).all():
        raise ConstraintError("assignment entries must be 0 or 1")
    if not (a.sum(axis=1) == 1).all():
        raise ConstraintError("every assignment row must sum to exactly 1")
    if not (a.sum(axis=0) == pi.r).all():
        raise ConstraintError(f"every assignment column must sum to exactly r = {pi.r}")


def policy_from_experts(expert_of, k, r):
    """Build a policy from a new-expert-per-component vector."""
    expert_of = np.asarray(expert_of, dtype=np.int64)
    assignment = np.zeros((expert_of.size, k), dtype=np.int64)
    if expert_of.size:
        if expert_of.min() < 0 or expert_of.max() >= k:
            raise ConstraintError("expert indices out of range")
        assignment[np.arange(expert_of.size), expert_of] = 1
    pi = GroupingPolicy(assignment=assignment, k=k, r=r)
    validate_policy(pi)
    return pi


def identity_policy(k, r):
    """The static grouping: component i belongs to expert i // r."""
    return policy_from_experts(np.repeat(np.arange(k), r), k, r)


def extract_rank1_gradients(grad_a, grad_b):
    """Stack per-component gradients: row ``k*r + j`` is
    ``concat(grad_a[k][:, j], grad_b[k][j, :])``.

    ``grad_a`` holds K matrices of shape (m, r) and ``grad_b`` K matrices of
    shape (r, n); the result is (r*K, m+n).
    """
    if len(grad_a) != len(grad_b) or not grad_a:
        raise DimensionError("grad_a and grad_b must be equal-length, nonempty lists")
    mats_a = [as_matrix(g, f"grad_a[{k}]") for k, g in enumerate(grad_a)]
    mats_b = [as_matrix(g, f"grad_b[{k}]") for k, g in enumerate(grad_b)]
    m, r = mats_a[0].shape
    r_b, n = mats_b[0].shape
    if r_b != r:
        raise DimensionError(f"grad_a rank {r} does not match grad_b rank {r_b}")
    rows = []
    for k, (ga, gb) in enumerate(zip(mats_a, mats_b)):
        if ga.shape != (m, r) or gb.shape != (r, n):
            raise DimensionError(
                f"expert {k} gradient shapes {ga.shape}/{gb.shape} differ from {(m, r)}/{(r, n)}"
            )
        for j in range(r):
            rows.append(np.concatenate([ga[:, j], gb[j, :]]))
    return np.asarray(rows)


def normalize_gradients(raw, eps_g=DEFAULT_EPS_G):
    """Scale every gradient onto the unit sphere; mark near-zero ones dead."""
    raw = as_matrix(raw, "raw gradients")
    eps_g = float(eps_g)
    if eps_g <= 0:
        raise InvalidParameterError(f"eps_g must be > 0, got {eps_g}")
    norms = np.linalg.norm(raw, axis=1)
    dead = norms < eps_g
    vectors = np.zeros_like(raw)
    live = ~dead
    vectors[live] = raw[live] / norms[live, np.newaxis]
    return GradientBatch(
        dim=raw.shape[1], vectors=vectors, raw_norms=norms, dead_mask=dead
    )


def _check_batch_policy(pi, batch):
    validate_policy(pi)
    if pi.assignment.shape[0] != batch.count:
        raise DimensionError(
            f"policy covers {pi.assignment.shape[0]} components, batch has {batch.count}"
        )


def grouping_objective(pi, batch):
    """``sum_k || sum_i pi[i,k] * g_i ||^2`` (dead components contribute zero)."""
    _check_batch_policy(pi, batch)
    sums = pi.assignment.T.astype(np.float64) @ batch.vectors
    return float(np.einsum("kd,kd->", sums, sums))


def objective_split(pi, batch):
    """Return ``(l_intra, l_inter)`` with ``l_intra + l_inter = ||sum_i g_i||^2``.

    ``l_intra`` is :func:`grouping_objective`; ``l_inter`` is the remaining
    cross-group part of the total squared sum.
    """
    l_intra = grouping_objective(pi, batch)
    total_vec = batch.vectors.sum(axis=0)
    total = float(total_vec @ total_vec)
    return l_intra, total - l_intra


def spherical_kmeans_init(batch, k, seed, max_rounds=50):
    """Spherical k-means labels for the live vectors (no capacity constraint).

    Cosine similarity with unit centroids, k-means++ seeding from ``seed``,
    at most ``max_rounds`` update rounds; empty clusters are re-seeded with
    the live point farthest (smallest cosine) from its current centroid.
    Returns one label per component; dead components get label -1.

    Raises
    ------
    DegenerateInputError
        If fewer live vectors than ``k``.
    """
    k = as_count(k, "k")
    live = batch.live_indices
    if live.size < k:
        raise DegenerateInputError(
            f"need at least k={k} live gradient vectors, got {live.size}"
        )
    x = batch.vectors[live]
    rng = np.random.default_rng(seed)

    centers = np.empty((k, batch.dim))
    first = int(rng.integers(live.size))
    centers[0] = x[first]
    best_sim = x @ centers[0]
    for c in range(1, k):
        d2 = np.maximum(0.0, 2.0 - 2.0 * best_sim)
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(live.size, p=d2 / total))
        else:
            idx = int(rng.integers(live.size))
        centers[c] = x[idx]
        best_sim = np.maximum(best_sim, x @ centers[c])

    labels = None
    for _ in range(max_rounds):
        sims = x @ centers.T
        new_labels = np.argmax(sims, axis=1)
        own_sim = sims[np.arange(live.size), new_labels]
        taken = set()
        for c in range(k):
            if (new_labels == c).any():
                continue
            order = np.argsort(own_sim, kind="stable")
            pick = next(int(p) for p in order if int(p) not in taken)
            taken.add(pick)
            new_labels[pick] = c
            centers[c] = x[pick]
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            members = x[labels == c]
            if members.size == 0:
                continue
            summed = members.sum(axis=0)
            norm = np.linalg.norm(summed)
            if norm > 0:
                centers[c] = summed / norm

    full = np.full(batch.count, -1, dtype=np.int64)
    full[live] = labels
    return full


def centroids(pi, batch):
    """Per-expert unnormalized gradient sums, as columns of a (dim, k) matrix."""
    _check_batch_policy(pi, batch)
    return batch.vectors.T @ pi.assignment.astype(np.float64)


def _centroids_from_labels(labels, k, batch):
    onehot = np.zeros((batch.count, k))
    live = labels >= 0
    onehot[np.flatnonzero(live), labels[live]] = 1.0
    return batch.vectors.T @ onehot


def orthogonalize_centroids(raw):
    """Closest orthonormal-column matrix to ``raw`` (orthogonal Procrustes).

    Computed as ``u_c @ v_c.T`` from the SVD of ``raw``; for rank-deficient
    input the SVD supplies an orthonormal completion.
    """
    raw = as_matrix(raw, "centroids")
    d, k = raw.shape
    if d < k:
        raise DimensionError(f"need dim >= k to orthogonalize, got {raw.shape}")
    u, _, vt = np.linalg.svd(raw, full_matrices=False)
    q = u @ vt
    defect = orthonormality_defect(q)
    if defect > 1e-10:
        raise NumericInvariantError(
            f"orthogonalized centroids have defect {defect:.3e} > 1e-10"
        )
    return q


def make_centroid_set(pi, batch):
    raw = centroids(pi, batch)
    return CentroidSet(raw=raw, ortho=orthogonalize_centroids(raw))


def _fill_dead(expert_of, dead_indices, capacity):
    for i in dead_indices:
        for k in range(capacity.size):
            if capacity[k] > 0:
                expert_of[i] = k
                capacity[k] -= 1
                break


def assign_step(batch, q, r, mode="exact"):
    """Balanced assignment maximizing ``sum_ik pi[i,k] <g_i, q_k>``.

    Exact mode solves the expert-duplicated rectangular problem with the
    Hungarian algorithm; greedy mode scans (component, expert) pairs by
    descending similarity, breaking ties by lower component index then lower
    expert index. Dead components are placed last into the remaining
    capacity, lowest expert index first.
    """
    q = as_matrix(q, "q")
    r = as_count(r, "r")
    if mode not in ("exact", "greedy"):
        raise ModeError(f"mode must be 'exact' or 'greedy', got {mode!r}")
    d, k = q.shape
    if batch.dim != d:
        raise DimensionError(f"batch dim {batch.dim} does not match q dim {d}")
    if batch.count != r * k:
        raise ConstraintError(
            f"capacity r*k = {r * k} does not match component count {batch.count}"
        )
    defect = orthonormality_defect(q)
    if defect > 1e-6:
        raise InvalidParameterError(
            f"q must have orthonormal columns (defect {defect:.3e})"
        )

    sims = batch.vectors @ q
    live = batch.live_indices
    dead = np.flatnonzero(batch.dead_mask)
    expert_of = np.full(batch.count, -1, dtype=np.int64)
    capacity = np.full(k, r, dtype=np.int64)

    if mode == "exact":
        if live.size:
            slot_expert = np.repeat(np.arange(k), r)
            cost = -sims[live][:, slot_expert]
            row_ind, col_ind = linear_sum_assignment(cost)
            for row, col in zip(row_ind, col_ind):
                comp = int(live[row])
                expert = int(slot_expert[col])
                expert_of[comp] = expert
                capacity[expert] -= 1
    else:
        if live.size:
            comp_idx = np.repeat(live, k)
            expert_idx = np.tile(np.arange(k), live.size)
            flat_sims = sims[live].ravel()
            order = np.lexsort((expert_idx, comp_idx, -flat_sims))
            for pos in order:
                comp = int(comp_idx[pos])
                expert = int(expert_idx[pos])
                if expert_of[comp] == -1 and capacity[expert] > 0:
                    expert_of[comp] = expert
                    capacity[expert] -= 1

    _fill_dead(expert_of, dead, capacity)
    return policy_from_experts(expert_of, k, r)


def _dog_pipeline(batch, k, r, max_iter, init_seed, mode):
    """One init-project-iterate pass; returns (policy, iterations, trace)."""
    labels = spherical_kmeans_init(batch, k, init_seed)
    q = orthogonalize_centroids(_centroids_from_labels(labels, k, batch))
    pi = assign_step(batch, q, r, mode)
    trace = [grouping_objective(pi, batch)]

    iterations = 0
    for step in range(1, max_iter + 1):
        q = orthogonalize_centroids(centroids(pi, batch))
        new_pi = assign_step(batch, q, r, mode)
        trace.append(grouping_objective(new_pi, batch))
        iterations = step
        if np.array_equal(new_pi.assignment, pi.assignment):
            break
        pi = new_pi
    return pi, iterations, trace


def dog_run(batch, k, r, max_iter=10, seed=0, mode="exact", n_init=10):
    """Full grouping pipeline: spherical k-means init, feasibility projection,
    then centroid/orthogonalize/assign iterations to a stable policy.

    Each restart stops when the policy repeats or after ``max_iter`` loop
    iterations. The iteration objective is non-convex and its basin depends
    on the k-means initialization, so (as with standard k-means) the pipeline
    is restarted ``n_init`` times from child seeds of ``seed`` and the run
    with the highest final grouping objective wins; ties keep the earliest
    restart, so results stay deterministic for a fixed seed.

    If every component is dead, returns the identity fill with ``all_dead``
    set instead of attempting to cluster nothing.
    """
    k = as_count(k, "k")
    r = as_count(r, "r")
    max_iter = as_count(max_iter, "max_iter")
    n_init = as_count(n_init, "n_init")
    if batch.count != r * k:
        raise ConstraintError(
            f"capacity r*k = {r * k} does not match component count {batch.count}"
        )
    if batch.live_indices.size == 0:
        pi = identity_policy(k, r)
        return DogResult(
            policy=pi,
            iterations=0,
            objective_trace=(0.0,),
            mode=mode,
            seed=int(seed),
            all_dead=True,
        )

    init_seeds = np.random.SeedSequence(seed).spawn(n_init)
    best = None
    for init_seed in init_seeds:
        pi, iterations, trace = _dog_pipeline(batch, k, r, max_iter, init_seed, mode)
        if best is None or trace[-1] > best[2][-1]:
            best = (pi, iterations, trace)

    pi, iterations, trace = best
    return DogResult(
        policy=pi,
        iterations=iterations,
        objective_trace=tuple(trace),
        mode=mode,
        seed=int(seed),
    )


def regroup(bank, pi, rescale=True):
    """Physically move rank-1 components between experts per ``pi``.

    A component moving from expert u to expert v has its ``a`` column scaled
    by ``routing[u] / routing[v]`` (its ``b`` row is untouched), which keeps
    ``reconstruct`` exactly unchanged. Within each destination expert the
    received components keep ascending original order, so the identity policy
    is a bit-identical no-op. ``rescale=False`` skips the ratio (used by
    input-gated layers, where output invariance is not claimed).

    Raises
    ------
    DivisionHazardError
        If any destination routing weight is numerically zero (|alpha| <
        1e-12) while rescaling.
    """
    validate_policy(pi, count=bank.component_count)
    if pi.k != bank.k or pi.r != bank.r:
        raise ConstraintError(
            f"policy is for k={pi.k}, r={pi.r}; bank has k={bank.k}, r={bank.r}"
        )
    alpha = bank.routing
    if rescale and np.any(np.abs(alpha) < 1e-12):
        bad = int(np.flatnonzero(np.abs(alpha) < 1e-12)[0])
        raise DivisionHazardError(
            f"destination routing weight alpha[{bad}] is numerically zero"
        )
    dest = pi.expert_of()
    new_cols = [[] for _ in range(bank.k)]
    new_rows = [[] for _ in range(bank.k)]
    for i in range(bank.component_count):
        u, j = divmod(i, bank.r)
        v = int(dest[i])
        a_u, b_u = bank.experts[u]
        gamma = alpha[u] / alpha[v] if rescale else 1.0
        new_cols[v].append(gamma * a_u[:, j])
        new_rows[v].append(b_u[j, :])
    experts = [
        (np.column_stack(new_cols[v]), np.vstack(new_rows[v]))
        for v in range(bank.k)
    ]
    return ExpertBank(
        residual=bank.residual,
        experts=experts,
        routing=bank.routing.copy(),
        scale=bank.scale,
        k=bank.k,
        r=bank.r,
    )


def gradient_angles(batch, pi):
    """Mean intra-expert and inter-expert gradient angles (degrees).

    Intra: for each expert with >= 2 live members, the mean pairwise angle
    between member unit gradients, averaged over such experts. Inter: mean
    pairwise angle between normalized per-expert aggregate directions,
    experts with zero aggregates excluded.
    """
    _check_batch_policy(pi, batch)
    expert_of = pi.expert_of()
    live = ~batch.dead_mask

    per_expert_means = []
    for k in range(pi.k):
        members = batch.vectors[(expert_of == k) & live]
        if members.shape[0] < 2:
            continue
        gram = np.clip(members @ members.T, -1.0, 1.0)
        iu = np.triu_indices(members.shape[0], 1)
        per_expert_means.append(float(np.degrees(np.arccos(gram[iu])).mean()))
    intra = float(np.mean(per_expert_means)) if per_expert_means else float("nan")

    aggregates = centroids(pi, batch)
    norms = np.linalg.norm(aggregates, axis=0)
    keep = norms > 1e-12
    directions = aggregates[:, keep] / norms[keep]
    n_agg = directions.shape[1]
    if n_agg >= 2:
        gram = np.clip(directions.T @ directions, -1.0, 1.0)
        iu = np.triu_indices(n_agg, 1)
        inter = float(np.degrees(np.arccos(gram[iu])).mean())
    else:
        inter = float("nan")

    return AngleReport(
        intra_deg=intra,
        inter_deg=inter,
        intra_expert_count=len(per_expert_means),
        inter_aggregate_count=int(n_agg),
    )


class GradientGrouping(BaseEstimator):
    """Estimator wrapper around :func:`dog_run` (KMeans-style API).

    Parameters
    ----------
    n_experts : int, default=8
    rank : int, default=4
    mode : {'exact', 'greedy'}, default='exact'
    max_iter : int, default=10
    eps_g : float, default=1e-12
        Dead-gradient threshold.
    n_init : int, default=10
        Pipeline restarts; the best final objective wins.
    random_state : int, default=0
        Seed for the spherical k-means initialization.

    Attributes
    ----------
    policy_ : GroupingPolicy
    labels_ : ndarray
        New expert index per component.
    n_iter_ : int
    objective_trace_ : ndarray
    """

    def __init__(
        self, n_experts=8, rank=4, mode="exact", max_iter=10, eps_g=DEFAULT_EPS_G,
        n_init=10, random_state=0,
    ):
        self.n_experts = n_experts
        self.rank = rank
        self.mode = mode
        self.max_iter = max_iter
        self.eps_g = eps_g
        self.n_init = n_init
        self.random_state = random_state

    def fit(self, X, y=None):
        batch = normalize_gradients(X, self.eps_g)
        result = dog_run(
            batch,
            self.n_experts,
            self.rank,
            max_iter=self.max_iter,
            seed=self.random_state,
            mode=self.mode,
            n_init=self.n_init,
        )
        self.policy_ = result.policy
        self.labels_ = result.policy.expert_of()
        self.n_iter_ = result.iterations
        self.objective_trace_ = np.asarray(result.objective_trace)
        self.all_dead_ = result.all_dead
        return self

    def fit_predict(self, X, y=None):
        return self.fit(X).labels_
