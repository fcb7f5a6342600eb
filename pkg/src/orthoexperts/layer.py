"""Mixture-of-low-rank-experts layer: forward pass and analytic gradients.

Two gating modes:

- ``scalar_alpha``: every expert contributes with its learnable routing
  weight, ``h = residual @ x + sum_k alpha_k * scale * a_k @ (b_k @ x)``.
- ``input_topk``: a linear router scores experts per input; the ``top_k``
  highest logits are softmaxed (others get weight zero) and replace the
  alphas in the sum.

``backward`` returns analytic gradients of ``<upstream, forward(x)>`` with
respect to every trainable tensor; in ``input_topk`` mode the top-k support
is treated as locally constant (straight-through on the selection mask).
"""

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decomposition import load_bank, save_bank
from .exceptions import DimensionError, ModeError, ValidationError
from .grouping import regroup
from .matio import read_bmat, write_bmat
from .validation import as_vector

GATE_SCALAR = "scalar_alpha"
GATE_TOPK = "input_topk"
LAYER_FORMAT_VERSION = 1


@dataclass
class MoeLoraLayer:
    """An expert bank plus its gating configuration.

    ``router`` is (n, k) — column k scores expert k — and is required (with
    ``top_k``) only in ``input_topk`` mode.
    """

    bank: object
    gate_mode: str = GATE_SCALAR
    router: np.ndarray = None
    top_k: int = None

    def __post_init__(self):
        if self.gate_mode not in (GATE_SCALAR, GATE_TOPK):
            raise ModeError(f"unknown gate_mode {self.gate_mode!r}")
        if self.gate_mode == GATE_TOPK:
            if self.router is None:
                raise ValidationError("input_topk mode requires a router matrix")
            self.router = np.ascontiguousarray(self.router, dtype=np.float64)
            if self.router.shape != (self.bank.n, self.bank.k):
                raise DimensionError(
                    f"router must be (n, k) = {(self.bank.n, self.bank.k)}, "
                    f"got {self.router.shape}"
                )
            if self.top_k is None or not 1 <= int(self.top_k) <= self.bank.k:
                raise ValidationError(
                    f"top_k must be in [1, {self.bank.k}], got {self.top_k}"
                )
            self.top_k = int(self.top_k)


@dataclass
class LayerGradients:
    """Gradients of a scalar loss w.r.t. every trainable tensor of a layer."""

    grad_a: list
    grad_b: list
    grad_alpha: np.ndarray
    grad_router: np.ndarray = None


def gate_weights(layer, x):
    """Per-expert gate weights for input ``x`` in ``input_topk`` mode.

    Exactly ``top_k`` nonzero weights that sum to 1: softmax over the top_k
    largest logits, ties broken by lower expert index.
    """
    if layer.gate_mode != GATE_TOPK:
        raise ModeError("gate_weights is only defined in input_topk mode")
    x = as_vector(x, "x")
    if x.shape[0] != layer.bank.n:
        raise DimensionError(f"x must have length {layer.bank.n}, got {x.shape[0]}")
    logits = x @ layer.router
    top = np.argsort(-logits, kind="stable")[: layer.top_k]
    z = logits[top] - logits[top].max()
    e = np.exp(z)
    weights = np.zeros(layer.bank.k)
    weights[top] = e / e.sum()
    return weights


def _expert_weights(layer, x):
    if layer.gate_mode == GATE_SCALAR:
        return layer.bank.routing
    return gate_weights(layer, x)


def forward(layer, x):
    """Apply the layer to a single input vector."""
    x = as_vector(x, "x")
    bank = layer.bank
    if x.shape[0] != bank.n:
        raise DimensionError(f"x must have length {bank.n}, got {x.shape[0]}")
    weights = _expert_weights(layer, x)
    out = bank.residual @ x
    for k in range(bank.k):
        w = weights[k]
        if w == 0.0:
            continue
        a, b = bank.experts[k]
        out += (w * bank.scale) * (a @ (b @ x))
    return out


def backward(layer, x, upstream):
    """Analytic gradients of ``<upstream, forward(x)>``.

    In ``scalar_alpha`` mode ``grad_alpha[k] = scale * u^T a_k b_k x``; in
    ``input_topk`` mode alpha is unused (zero gradient) and the router gets
    the softmax gradient restricted to the selected experts.
    """
    x = as_vector(x, "x")
    u = as_vector(upstream, "upstream")
    bank = layer.bank
    if x.shape[0] != bank.n:
        raise DimensionError(f"x must have length {bank.n}, got {x.shape[0]}")
    if u.shape[0] != bank.m:
        raise DimensionError(f"upstream must have length {bank.m}, got {u.shape[0]}")

    weights = _expert_weights(layer, x)
    s = bank.scale
    grad_a = []
    grad_b = []
    contrib = np.empty(bank.k)
    for k in range(bank.k):
        a, b = bank.experts[k]
        bx = b @ x
        atu = a.T @ u
        contrib[k] = s * float(atu @ bx)
        grad_a.append((weights[k] * s) * np.outer(u, bx))
        grad_b.append((weights[k] * s) * np.outer(atu, x))

    if layer.gate_mode == GATE_SCALAR:
        return LayerGradients(
            grad_a=grad_a,
            grad_b=grad_b,
            grad_alpha=contrib,
            grad_router=None,
        )

    support = np.flatnonzero(weights)
    mean_contrib = float(weights[support] @ contrib[support])
    grad_router = np.zeros_like(layer.router)
    for k in support:
        grad_router[:, k] = weights[k] * (contrib[k] - mean_contrib) * x
    return LayerGradients(
        grad_a=grad_a,
        grad_b=grad_b,
        grad_alpha=np.zeros(bank.k),
        grad_router=grad_router,
    )


def regroup_layer(layer, pi):
    """Apply a grouping policy to the layer's bank.

    In ``scalar_alpha`` mode this is output-invariant (routing-ratio
    rescaling). In ``input_topk`` mode the gate weights depend on the input,
    no constant rescaling exists, and components are moved without rescaling;
    a warning is emitted because outputs may change.
    """
    if layer.gate_mode == GATE_TOPK:
        warnings.warn(
            "regrouping an input-gated layer moves components without "
            "rescaling; outputs are not guaranteed to be preserved",
            stacklevel=2,
        )
        new_bank = regroup(layer.bank, pi, rescale=False)
    else:
        new_bank = regroup(layer.bank, pi, rescale=True)
    return MoeLoraLayer(
        bank=new_bank,
        gate_mode=layer.gate_mode,
        router=layer.router,
        top_k=layer.top_k,
    )


def save_layer(layer, directory):
    """Serialize bank + gating config (+ router) to a directory."""
    directory = Path(directory)
    save_bank(layer.bank, directory)
    router_name = None
    if layer.router is not None:
        router_name = "router.bmat"
        write_bmat(directory / router_name, layer.router)
    meta = {
        "format_version": LAYER_FORMAT_VERSION,
        "gate_mode": layer.gate_mode,
        "top_k": layer.top_k,
        "router": router_name,
    }
    with open(directory / "layer.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_layer(directory):
    directory = Path(directory)
    meta_path = directory / "layer.json"
    if not meta_path.is_file():
        raise ValidationError(f"{directory}: missing layer.json")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("format_version") != LAYER_FORMAT_VERSION:
        raise ValidationError(
            f"{meta_path}: unsupported format_version {meta.get('format_version')!r}"
        )
    bank = load_bank(directory)
    router = None
    if meta.get("router"):
        router = read_bmat(directory / meta["router"])
    return MoeLoraLayer(
        bank=bank,
        gate_mode=meta["gate_mode"],
        router=router,
        top_k=meta.get("top_k"),
    )
