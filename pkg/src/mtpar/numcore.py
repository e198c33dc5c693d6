"""Dense numeric kernels for the model layers.

Tensors are plain ``numpy.ndarray`` objects, float64 unless a caller opts into
float32. Reductions run in a fixed order:

* ``linear_forward`` accumulates ``b + x[:, 0] W[0] + x[:, 1] W[1] + ...``
  sequentially over the input index.
* ``segment_sum`` adds rows in ascending edge index (``np.add.at`` is unbuffered
  and processes indices in order).
* ``linear_backward`` uses BLAS matmul; results are deterministic for a fixed
  platform and thread count.

The activation is SiLU, ``x * sigmoid(x)``, everywhere in the package.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mtpar import ContractError

ACTIVATION = "silu"


@dataclass
class LayerGrad:
    param_grads: dict[str, np.ndarray]
    input_grad: np.ndarray


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


def linear_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1:
        raise ContractError(f"linear_forward expects 2D x, 2D W, 1D b; got {x.shape}, {W.shape}, {b.shape}")
    n_in, n_out = W.shape
    if x.shape[1] != n_in or b.shape[0] != n_out:
        raise ContractError(f"shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    y = np.empty((x.shape[0], n_out), dtype=np.result_type(x, W))
    y[...] = b
    for k in range(n_in):
        y += x[:, k : k + 1] * W[k]
    return check_finite(y, "linear output")


def linear_backward(x: np.ndarray, W: np.ndarray, upstream: np.ndarray) -> LayerGrad:
    if upstream.ndim != 2 or x.ndim != 2 or x.shape[0] != upstream.shape[0]:
        raise ContractError(f"shape mismatch: x{x.shape} upstream{upstream.shape}")
    if W.shape != (x.shape[1], upstream.shape[1]):
        raise ContractError(f"shape mismatch: W{W.shape} vs x{x.shape} upstream{upstream.shape}")
    return LayerGrad(
        param_grads={"W": x.T @ upstream, "b": upstream.sum(axis=0)},
        input_grad=upstream @ W.T,
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def activation_forward(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def activation_backward(x: np.ndarray, upstream: np.ndarray | None = None) -> np.ndarray:
    """Derivative of SiLU at ``x``; multiplied into ``upstream`` when given."""
    s = _sigmoid(x)
    d = s * (1.0 + x * (1.0 - s))
    return d if upstream is None else d * upstream


def segment_sum(values: np.ndarray, segment_ids, n_segments: int) -> np.ndarray:
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.shape[0] != values.shape[0]:
        raise ContractError(f"segment_ids length {ids.shape} does not match values {values.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= n_segments):
        raise ContractError(f"segment id out of range [0, {n_segments})")
    out = np.zeros((n_segments,) + values.shape[1:], dtype=values.dtype)
    np.add.at(out, ids, values)
    return out
