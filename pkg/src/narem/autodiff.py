"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Only the operations the two transformer architectures need are provided.
Every op is total on finite input and has an analytically derived backward
rule; ``narem.gradcheck`` validates all of them against central finite
differences.

Tensors are immutable from the caller's point of view once created; the
training loop owns parameter mutation via the optimizer.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np


class Tensor:
    """A float64 array plus the tape bookkeeping for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward: Optional[Callable[[np.ndarray], None]] = None,
        name: str = "",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Run reverse mode from this (typically scalar) tensor."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        out_data = self.data + other.data

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        return Tensor(out_data, parents=(self, other), backward=bwd)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def bwd(g):
            self._accumulate(-g)

        return Tensor(-self.data, parents=(self,), backward=bwd)

    def __sub__(self, other) -> "Tensor":
        return self + (-_as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        out_data = self.data * other.data

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return Tensor(out_data, parents=(self, other), backward=bwd)

    __rmul__ = __mul__

    def __truediv__(self, scalar: float) -> "Tensor":
        return self * (1.0 / float(scalar))

    def matmul(self, other: "Tensor") -> "Tensor":
        """Stacked matrix product via np.matmul broadcasting rules."""
        out_data = np.matmul(self.data, other.data)

        def bwd(g):
            if self.requires_grad:
                ga = np.matmul(g, np.swapaxes(other.data, -1, -2))
                self._accumulate(_unbroadcast(ga, self.data.shape))
            if other.requires_grad:
                gb = np.matmul(np.swapaxes(self.data, -1, -2), g)
                other._accumulate(_unbroadcast(gb, other.data.shape))

        return Tensor(out_data, parents=(self, other), backward=bwd)

    __matmul__ = matmul

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape: int) -> "Tensor":
        old = self.data.shape

        def bwd(g):
            self._accumulate(g.reshape(old))

        return Tensor(self.data.reshape(shape), parents=(self,), backward=bwd)

    def transpose_last(self) -> "Tensor":
        """Swap the last two axes."""

        def bwd(g):
            self._accumulate(np.swapaxes(g, -1, -2))

        return Tensor(np.swapaxes(self.data, -1, -2), parents=(self,), backward=bwd)

    def moveaxis(self, src: int, dst: int) -> "Tensor":
        def bwd(g):
            self._accumulate(np.moveaxis(g, dst, src))

        return Tensor(np.moveaxis(self.data, src, dst), parents=(self,), backward=bwd)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(gg, self.data.shape).copy())

        return Tensor(out_data, parents=(self,), backward=bwd)

    def mean(self) -> "Tensor":
        return self.sum() / self.data.size

    # -- nonlinearities -----------------------------------------------------

    def relu(self) -> "Tensor":
        mask = self.data > 0.0

        def bwd(g):
            self._accumulate(g * mask)

        return Tensor(self.data * mask, parents=(self,), backward=bwd)

    def log_softmax(self) -> "Tensor":
        """Row-stable log-softmax over the last axis."""
        shifted = self.data - self.data.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        out_data = shifted - lse
        soft = np.exp(out_data)

        def bwd(g):
            self._accumulate(g - soft * g.sum(axis=-1, keepdims=True))

        return Tensor(out_data, parents=(self,), backward=bwd)

    def softmax(self) -> "Tensor":
        shifted = self.data - self.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=-1, keepdims=True)

        def bwd(g):
            inner = (g * out_data).sum(axis=-1, keepdims=True)
            self._accumulate(out_data * (g - inner))

        return Tensor(out_data, parents=(self,), backward=bwd)

    def layer_norm(self, gain: "Tensor", bias: "Tensor", eps: float = 1e-6) -> "Tensor":
        """Normalize the last axis, then scale and shift."""
        mu = self.data.mean(axis=-1, keepdims=True)
        xc = self.data - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out_data = xhat * gain.data + bias.data
        n = self.data.shape[-1]

        def bwd(g):
            if gain.requires_grad:
                gain._accumulate(_unbroadcast(g * xhat, gain.data.shape))
            if bias.requires_grad:
                bias._accumulate(_unbroadcast(g, bias.data.shape))
            if self.requires_grad:
                gx = g * gain.data
                term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
                self._accumulate(term * inv)

        return Tensor(out_data, parents=(self, gain, bias), backward=bwd)

    # -- indexing -----------------------------------------------------------

    def take_rows(self, indices: np.ndarray) -> "Tensor":
        """Embedding lookup: rows of a (V, d) table at an integer index array."""
        idx = np.asarray(indices)
        out_data = self.data[idx]

        def bwd(g):
            acc = np.zeros_like(self.data)
            np.add.at(acc, idx, g)
            self._accumulate(acc)

        return Tensor(out_data, parents=(self,), backward=bwd)

    def gather_last(self, indices: np.ndarray) -> "Tensor":
        """Pick one entry along the last axis per leading position."""
        idx = np.asarray(indices)[..., None]
        out_data = np.take_along_axis(self.data, idx, axis=-1)[..., 0]

        def bwd(g):
            acc = np.zeros_like(self.data)
            np.put_along_axis(acc, idx, g[..., None], axis=-1)
            self._accumulate(acc)

        return Tensor(out_data, parents=(self,), backward=bwd)

    def add_const(self, const: np.ndarray) -> "Tensor":
        """Add a non-differentiable array (attention masks)."""

        def bwd(g):
            self._accumulate(_unbroadcast(g, self.data.shape))

        return Tensor(self.data + const, parents=(self,), backward=bwd)

    def mul_const(self, const: np.ndarray) -> "Tensor":
        """Multiply by a non-differentiable array (loss masks, dropout)."""
        const = np.asarray(const, dtype=np.float64)

        def bwd(g):
            self._accumulate(_unbroadcast(g * const, self.data.shape))

        return Tensor(self.data * const, parents=(self,), backward=bwd)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def parameter(data, name: str) -> Tensor:
    """A named trainable leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def cross_entropy_ls(logits: Tensor, targets: np.ndarray, epsilon: float = 0.0) -> Tensor:
    """Label-smoothed cross entropy, mean over target positions.

    The smoothed target distribution puts ``1 - epsilon`` on the reference id
    and spreads ``epsilon / (V - 1)`` over the remaining ids.
    """
    targets = np.asarray(targets)
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must be in [0, 1), got {epsilon}")
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target id outside 0..{vocab - 1}")
    logp = logits.log_softmax()
    nll = -logp.gather_last(targets)
    if epsilon == 0.0:
        return nll.mean()
    spread = -logp.sum(axis=-1) - (-logp.gather_last(targets))
    loss = (1.0 - epsilon) * nll + (epsilon / (vocab - 1)) * spread
    return loss.mean()


def masked_token_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray, epsilon: float) -> Tensor:
    """Per-token label-smoothed CE averaged over unmasked positions only."""
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=np.float64)
    vocab = logits.shape[-1]
    logp = logits.log_softmax()
    nll = -logp.gather_last(targets)
    if epsilon > 0.0:
        spread = -logp.sum(axis=-1) - nll
        per_tok = (1.0 - epsilon) * nll + (epsilon / (vocab - 1)) * spread
    else:
        per_tok = nll
    total = per_tok.mul_const(mask).sum()
    return total / float(mask.sum())


def collect_parameters(*tensors: Iterable[Tensor]) -> list[Tensor]:
    out: list[Tensor] = []
    for group in tensors:
        out.extend(group)
    return out
