"""Embeddings, GRU cells, the bidirectional encoder, MLPs and the deep output layer."""
from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from .compute import (
    ContractError, ShapeError, Tensor, concat, gather_rows, layer_norm,
    log_softmax_rows, matmul, sigmoid, tanh,
)

INIT_SCALE = 0.08
ACTIVATIONS = ("tanh", "sigmoid", "none")


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


def uniform_init(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    return _param(rng.uniform(-INIT_SCALE, INIT_SCALE, size=(rows, cols)))


class Module:
    """Anything holding parameters as attributes (tensors, sub-modules, lists)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            yield from _walk(val, f"{prefix}{key}")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())


def _walk(val, name: str):
    if isinstance(val, Tensor):
        if val.requires_grad:
            val.name = name
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(item, f"{name}.{i}")


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator):
        self.weight = uniform_init(rng, din, dout)
        self.bias = _param(np.zeros((1, dout)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


def activate(x: Tensor, kind: str) -> Tensor:
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    return x


class Mlp(Module):
    """Stack of affine layers, each followed by its own activation.

    ``blocks`` and ``finish`` let callers evaluate the first affine map on a
    concatenated input piecewise, so per-sequence terms can be projected once
    and broadcast instead of being re-concatenated for every pair.
    """

    def __init__(self, sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator):
        if len(sizes) < 2 or len(activations) != len(sizes) - 1:
            raise ContractError(f"bad MLP layout sizes={sizes} activations={activations}")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.activations = list(activations)

    @property
    def in_dim(self) -> int:
        return self.layers[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"MLP expects width {self.in_dim}, got {x.shape}")
        for layer, act in zip(self.layers, self.activations):
            x = activate(layer(x), act)
        return x

    def blocks(self, widths: Sequence[int]) -> list[Tensor]:
        """Split the first weight matrix into row blocks matching ``widths``."""
        if sum(widths) != self.in_dim:
            raise ShapeError(f"block widths {list(widths)} do not sum to {self.in_dim}")
        w = self.layers[0].weight
        out, start = [], 0
        for width in widths:
            out.append(w[start:start + width, :])
            start += width
        return out

    def finish(self, pre: Tensor) -> Tensor:
        """Apply the rest of the network to a first-layer pre-activation (bias excluded)."""
        x = activate(pre + self.layers[0].bias, self.activations[0])
        for layer, act in zip(self.layers[1:], self.activations[1:]):
            x = activate(layer(x), act)
        return x


class GruCell(Module):
    """GRU with the reset gate applied to ``h_prev`` before the recurrent matmul."""

    def __init__(self, din: int, dh: int, rng: np.random.Generator, layer_norm_enabled: bool = False):
        self.hidden_size = dh
        self.input_size = din
        self.w_x = uniform_init(rng, din, 3 * dh)
        self.w_h = uniform_init(rng, dh, 2 * dh)
        self.u_h = uniform_init(rng, dh, dh)
        self.bias = _param(np.zeros((1, 3 * dh)))
        self.layer_norm_enabled = layer_norm_enabled
        if layer_norm_enabled:
            self.ln_gain = [_param(np.ones((1, dh))) for _ in range(3)]
            self.ln_bias = [_param(np.zeros((1, dh))) for _ in range(3)]

    def project(self, x: Tensor) -> Tensor:
        """Input contribution to all three pre-activations, one row per input row."""
        if x.shape[1] != self.input_size:
            raise ShapeError(f"GRU input width {self.input_size}, got {x.shape}")
        return matmul(x, self.w_x) + self.bias

    def step(self, xproj: Tensor, h_prev: Tensor) -> Tensor:
        dh = self.hidden_size
        if h_prev.shape != (1, dh):
            raise ShapeError(f"GRU state must be (1, {dh}), got {h_prev.shape}")
        gates = xproj[:, :2 * dh] + matmul(h_prev, self.w_h)
        if self.layer_norm_enabled:
            z = sigmoid(layer_norm(gates[:, :dh], self.ln_gain[0], self.ln_bias[0]))
            r = sigmoid(layer_norm(gates[:, dh:], self.ln_gain[1], self.ln_bias[1]))
        else:
            gates = sigmoid(gates)
            z, r = gates[:, :dh], gates[:, dh:]
        cand = xproj[:, 2 * dh:] + matmul(r * h_prev, self.u_h)
        if self.layer_norm_enabled:
            cand = layer_norm(cand, self.ln_gain[2], self.ln_bias[2])
        cand = tanh(cand)
        return h_prev + z * (cand - h_prev)


def gru_step(cell: GruCell, x: Tensor, h_prev: Tensor) -> Tensor:
    return cell.step(cell.project(x), h_prev)


def embed_lookup(table: Tensor, token_id: int | Sequence[int]) -> Tensor:
    ids = [token_id] if isinstance(token_id, (int, np.integer)) else list(token_id)
    n = table.shape[0]
    for i in ids:
        if not 0 <= i < n:
            raise IndexError(f"token id {i} outside vocabulary of size {n}")
    return gather_rows(table, ids)


class EncoderAnnotations:
    """Annotation vectors ``h_i = [forward_i || backward_i]``, one row each.

    Values derived only from the annotations and fixed weights (key
    projections, weight blocks) do not change during a decode, so callers
    memoise them here.
    """

    def __init__(self, matrix: Tensor):
        self.matrix = matrix
        self._memo: dict = {}

    def __len__(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def row(self, i: int) -> Tensor:
        return self.matrix[i]

    def memo(self, key, build):
        try:
            return self._memo[key]
        except KeyError:
            out = self._memo[key] = build()
            return out


def encode_bidirectional(fwd: GruCell, bwd: GruCell, embedded_source: Tensor | Sequence[Tensor]) -> EncoderAnnotations:
    if not isinstance(embedded_source, Tensor):
        if len(embedded_source) == 0:
            raise ContractError("cannot encode an empty source")
        embedded_source = concat(list(embedded_source), axis=0)
    n = embedded_source.shape[0]
    if n == 0:
        raise ContractError("cannot encode an empty source")
    xf, xb = fwd.project(embedded_source), bwd.project(embedded_source)
    h = Tensor(np.zeros((1, fwd.hidden_size)))
    fstates = []
    for i in range(n):
        h = fwd.step(xf[i], h)
        fstates.append(h)
    h = Tensor(np.zeros((1, bwd.hidden_size)))
    bstates = [None] * n
    for i in reversed(range(n)):
        h = bwd.step(xb[i], h)
        bstates[i] = h
    return EncoderAnnotations(concat([concat(fstates, axis=0), concat(bstates, axis=0)], axis=1))


def deep_output(f_o: Mlp, w_o: Linear, s_t: Tensor, y_prev: Tensor, psi_t: Tensor) -> Tensor:
    """Log-probabilities ``log softmax(W_o f_o([s_t || y_prev || psi_t]))``."""
    width = s_t.shape[1] + y_prev.shape[1] + psi_t.shape[1]
    if width != f_o.in_dim:
        raise ShapeError(f"deep output expects width {f_o.in_dim}, got {width}")
    return log_softmax_rows(w_o(f_o(concat([s_t, y_prev, psi_t]))))
