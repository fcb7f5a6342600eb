"""Split a dense weight matrix into orthogonal low-rank experts plus a frozen residual.

``decompose`` takes the top ``k*r`` singular directions of a matrix and hands
them out in contiguous descending blocks of ``r`` to ``k`` expert factor pairs
``(a_k, b_k)``; the tail of the spectrum becomes a frozen residual. With the
``sqrt(sigma/scale)`` factor split used here, ``scale * a_k @ b_k`` equals the
expert's singular block exactly for any positive ``scale``, so the bank
reproduces the input matrix and distinct experts are mutually orthogonal under
the Frobenius inner product.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import (
    CapacityError,
    InvalidParameterError,
    ValidationError,
)
from .linalg import frobenius_inner, truncated_svd
from .matio import read_bmat, write_bmat
from .validation import as_matrix, as_count, as_vector

BANK_FORMAT_VERSION = 1


@dataclass
class ExpertBank:
    """K rank-r expert factor pairs over a frozen residual.

    Attributes
    ----------
    residual : ndarray of shape (m, n)
        Frozen tail of the spectrum; marked read-only.
    experts : list of (a_k, b_k) pairs
        ``a_k`` is (m, r), ``b_k`` is (r, n). Global component index
        ``i = k*r + j`` names column j of ``a_k`` together with row j of
        ``b_k``.
    routing : ndarray of shape (k,)
        Per-expert scalar weights, all 1 at initialization.
    scale : float
        Global multiplier applied to every ``a_k @ b_k``.
    """

    residual: np.ndarray
    experts: list
    routing: np.ndarray
    scale: float
    k: int
    r: int

    def __post_init__(self):
        self.routing = as_vector(self.routing, "routing")
        if len(self.experts) != self.k:
            raise ValidationError(
                f"expected {self.k} experts, got {len(self.experts)}"
            )
        if self.routing.shape != (self.k,):
            raise ValidationError(
                f"routing must have length k={self.k}, got {self.routing.shape}"
            )
        m, n = self.residual.shape
        for idx, (a, b) in enumerate(self.experts):
            if a.shape != (m, self.r) or b.shape != (self.r, n):
                raise ValidationError(
                    f"expert {idx} factors have shapes {a.shape}/{b.shape}, "
                    f"expected {(m, self.r)}/{(self.r, n)}"
                )
        if self.r * self.k > min(m, n):
            raise CapacityError(
                f"r*k = {self.r * self.k} exceeds min(m, n) = {min(m, n)}"
            )

    @property
    def m(self):
        return self.residual.shape[0]

    @property
    def n(self):
        return self.residual.shape[1]

    @property
    def component_count(self):
        return self.k * self.r


def _split_factors(u, sigma, v, scale):
    factor = np.sqrt(sigma / scale)
    a = u * factor[np.newaxis, :]
    b = factor[:, np.newaxis] * v.T
    return a, b


def decompose(w, k, r, scale=1.0):
    """Decompose ``w`` into ``k`` orthogonal rank-``r`` experts plus a residual.

    Expert ``k`` receives the contiguous singular block ``[k*r, (k+1)*r)`` in
    descending order of singular value; routing weights start at 1, so
    ``reconstruct(decompose(w, ...))`` returns ``w`` up to float rounding.

    Raises
    ------
    CapacityError
        If ``r*k > min(w.shape)``.
    InvalidParameterError
        If ``scale <= 0`` or ``k``/``r`` are not positive integers.
    """
    w = as_matrix(w, "w")
    k = as_count(k, "k")
    r = as_count(r, "r")
    scale = float(scale)
    if scale <= 0:
        raise InvalidParameterError(f"scale must be > 0, got {scale}")
    m, n = w.shape
    if r * k > min(m, n):
        raise CapacityError(
            f"r*k = {r * k} exceeds min(m, n) = {min(m, n)} for shape {w.shape}"
        )
    full = truncated_svd(w, min(m, n))
    experts = []
    for block in range(k):
        lo, hi = block * r, (block + 1) * r
        experts.append(
            _split_factors(full.u[:, lo:hi], full.sigma[lo:hi], full.v[:, lo:hi], scale)
        )
    tail = slice(r * k, None)
    residual = (full.u[:, tail] * full.sigma[tail]) @ full.v[:, tail].T
    residual = np.ascontiguousarray(residual)
    residual.flags.writeable = False
    return ExpertBank(
        residual=residual,
        experts=experts,
        routing=np.ones(k),
        scale=scale,
        k=k,
        r=r,
    )


def expert_delta(bank, k):
    """Return ``scale * a_k @ b_k`` (routing weight deliberately not applied)."""
    if not 0 <= k < bank.k:
        raise InvalidParameterError(
            f"expert index must be in [0, {bank.k}), got {k}"
        )
    a, b = bank.experts[k]
    return bank.scale * (a @ b)


def reconstruct(bank):
    """Return ``residual + sum_k routing[k] * scale * a_k @ b_k``."""
    out = np.array(bank.residual, copy=True)
    for k in range(bank.k):
        a, b = bank.experts[k]
        out += (bank.routing[k] * bank.scale) * (a @ b)
    return out


@dataclass(frozen=True)
class OrthogonalityReport:
    """Normalized pairwise Frobenius inner products between expert deltas.

    ``matrix[k, l] = <d_k, d_l>_F / (||d_k||_F ||d_l||_F)``. Rows/columns of
    zero-norm experts are reported as 0 (including the diagonal) and their
    indices listed in ``zero_norm_experts`` — no NaN sentinels.
    """

    matrix: np.ndarray
    zero_norm_experts: tuple

    @property
    def max_abs_off_diagonal(self):
        if self.matrix.shape[0] < 2:
            return 0.0
        off = self.matrix - np.diag(np.diag(self.matrix))
        return float(np.abs(off).max())


def pairwise_orthogonality(bank):
    deltas = [expert_delta(bank, k) for k in range(bank.k)]
    norms = np.array([np.linalg.norm(d) for d in deltas])
    zero = [k for k in range(bank.k) if norms[k] == 0.0]
    matrix = np.zeros((bank.k, bank.k))
    for i in range(bank.k):
        if norms[i] == 0.0:
            continue
        for j in range(i, bank.k):
            if norms[j] == 0.0:
                continue
            value = frobenius_inner(deltas[i], deltas[j]) / (norms[i] * norms[j])
            matrix[i, j] = value
            matrix[j, i] = value
    return OrthogonalityReport(matrix=matrix, zero_norm_experts=tuple(zero))


def save_bank(bank, directory):
    """Serialize a bank to a directory (BMAT factors + bank.json)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_bmat(directory / "residual.bmat", bank.residual)
    for k, (a, b) in enumerate(bank.experts):
        write_bmat(directory / f"expert_{k}_a.bmat", a)
        write_bmat(directory / f"expert_{k}_b.bmat", b)
    meta = {
        "format_version": BANK_FORMAT_VERSION,
        "k": bank.k,
        "r": bank.r,
        "scale": bank.scale,
        "routing": [float(x) for x in bank.routing],
    }
    with open(directory / "bank.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_bank(directory):
    directory = Path(directory)
    meta_path = directory / "bank.json"
    if not meta_path.is_file():
        raise ValidationError(f"{directory}: missing bank.json")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("format_version") != BANK_FORMAT_VERSION:
        raise ValidationError(
            f"{meta_path}: unsupported format_version {meta.get('format_version')!r}"
        )
    k = as_count(meta["k"], "k")
    r = as_count(meta["r"], "r")
    residual = read_bmat(directory / "residual.bmat")
    residual.flags.writeable = False
    experts = []
    for idx in range(k):
        a = read_bmat(directory / f"expert_{idx}_a.bmat")
        b = read_bmat(directory / f"expert_{idx}_b.bmat")
        experts.append((a, b))
    return ExpertBank(
        residual=residual,
        experts=experts,
        routing=np.asarray(meta["routing"], dtype=np.float64),
        scale=float(meta["scale"]),
        k=k,
        r=r,
    )


class OrthogonalExpertDecomposition(BaseEstimator):
    """Estimator wrapper around :func:`decompose` (TruncatedSVD-style API).

    Parameters
    ----------
    n_experts : int, default=8
        Number of experts ``k``.
    rank : int, default=4
        Rank ``r`` per expert.
    scale : float, default=1.0
        Global delta multiplier.

    Attributes
    ----------
    bank_ : ExpertBank
    singular_values_ : ndarray
        Full spectrum of the fitted matrix.
    reconstruction_error_ : float
        Relative Frobenius error of reconstruct() against the input.
    orthogonality_ : OrthogonalityReport
    """

    def __init__(self, n_experts=8, rank=4, scale=1.0):
        self.n_experts = n_experts
        self.rank = rank
        self.scale = scale

    def fit(self, w, y=None):
        w = as_matrix(w, "w")
        self.bank_ = decompose(w, self.n_experts, self.rank, self.scale)
        self.singular_values_ = truncated_svd(w, min(w.shape)).sigma
        denom = np.linalg.norm(w)
        err = np.linalg.norm(reconstruct(self.bank_) - w)
        self.reconstruction_error_ = float(err / denom) if denom else float(err)
        self.orthogonality_ = pairwise_orthogonality(self.bank_)
        return self

    def reconstruct(self):
        if not hasattr(self, "bank_"):
            raise ValidationError("estimator is not fitted; call fit(w) first")
        return reconstruct(self.bank_)
