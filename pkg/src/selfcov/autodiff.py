"""Reverse-mode automatic differentiation over complex tensors.

Values are numpy arrays, complex128 for complex quantities and float64 for
real ones (attention weights, moduli, scalar losses). Complex derivatives
use the real-pair reduction: for a real-valued loss L and a complex value
z = x + iy, the adjoint carried here is

    adj(z) = dL/dx + i * dL/dy

i.e. the conjugate Wirtinger gradient stacked as (real, imag). Gradient
descent steps ``z -= lr * adj(z)`` are then steepest descent on the real
pair. Adjoints of real-valued nodes are real arrays.

A Tape records operations as they execute (forward values are computed and
cached at construction time), so node inputs always reference earlier
nodes. ``Tape.backward`` walks the record in reverse and returns one
gradient array per parameter leaf. Tapes are cheap and rebuilt per
training step; there is no graph reuse or fusion.

Every primitive checks its output for NaN/Inf and raises NonFiniteValue,
which trainers treat as fatal for the step.
"""

from __future__ import annotations

import numpy as np

from . import linalg
from .errors import NonFiniteValue


class Node:
    """One recorded operation: cached forward value plus per-parent vjps."""

    __slots__ = ("value", "op", "parents", "vjps", "needs_grad", "name")

    def __init__(self, value, op, parents=(), vjps=(), needs_grad=False, name=None):
        self.value = value
        self.op = op
        self.parents = parents
        self.vjps = vjps
        self.needs_grad = needs_grad
        self.name = name


def _is_real(a) -> bool:
    return not np.iscomplexobj(a)


def _unbroadcast(adj: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an adjoint down to the shape of a broadcast operand."""
    while adj.ndim > len(shape):
        adj = adj.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and adj.shape[axis] != 1:
            adj = adj.sum(axis=axis, keepdims=True)
    return adj


def _hconj(a: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(a, -1, -2))


class Tape:
    """Ordered record of differentiable operations (single-threaded)."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: list[Node] = []

    # -- leaves ------------------------------------------------------------

    def param(self, name: str, value: np.ndarray) -> Node:
        node = Node(np.asarray(value), "param", needs_grad=True, name=name)
        self.nodes.append(node)
        self.params.append(node)
        return node

    def const(self, value) -> Node:
        node = Node(np.asarray(value), "const")
        self.nodes.append(node)
        return node

    # -- op plumbing -------------------------------------------------------

    def _record(self, op, value, parents, vjps) -> Node:
        value = np.asarray(value)
        if not np.isfinite(value).all():
            raise NonFiniteValue(f"non-finite value produced by op '{op}'")
        node = Node(
            value,
            op,
            parents=tuple(parents),
            vjps=tuple(vjps),
            needs_grad=any(p.needs_grad for p in parents),
        )
        self.nodes.append(node)
        return node

    # -- primitives ----------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        value = av @ bv
        return self._record(
            "matmul",
            value,
            (a, b),
            (lambda g: g @ _hconj(bv), lambda g: _hconj(av) @ g),
        )

    def add(self, a: Node, b: Node) -> Node:
        value = a.value + b.value
        ash, bsh = a.value.shape, b.value.shape
        return self._record(
            "add",
            value,
            (a, b),
            (lambda g: _unbroadcast(g, ash), lambda g: _unbroadcast(g, bsh)),
        )

    def add_const(self, a: Node, c) -> Node:
        return self._record("add_const", a.value + np.asarray(c), (a,), (lambda g: g,))

    def scale(self, a: Node, c: float | complex) -> Node:
        return self._record("scale", a.value * c, (a,), (lambda g: np.conj(c) * g,))

    def scale_by(self, s: Node, a: Node) -> Node:
        """Multiply an array node by a real scalar node (grads to both)."""
        if not _is_real(s.value) or s.value.shape != ():
            raise ValueError("scale_by expects a real scalar node")
        sv, av = s.value, a.value
        return self._record(
            "scale_by",
            sv * av,
            (s, a),
            (lambda g: np.real(np.sum(np.conj(g) * av)), lambda g: sv * g),
        )

    def exp(self, a: Node) -> Node:
        if not _is_real(a.value):
            raise ValueError("exp is defined on real nodes only")
        value = np.exp(a.value)
        return self._record("exp", value, (a,), (lambda g: g * value,))

    def adjoint_t(self, a: Node) -> Node:
        """Conjugate transpose over the last two axes."""
        return self._record("adjoint_t", _hconj(a.value), (a,), (lambda g: _hconj(g),))

    def split_relu(self, a: Node) -> Node:
        """ReLU applied independently to real and imaginary parts (CReLU).

        Works on the interleaved (real, imag) float view, which clips each
        real component independently, exactly the split activation.
        """
        if not np.iscomplexobj(a.value):
            raise ValueError("split_relu expects a complex node")
        av = np.ascontiguousarray(a.value)
        fv = av.view(np.float64)
        mask = fv > 0.0
        value = (fv * mask).view(np.complex128)

        def vjp(g):
            gf = np.ascontiguousarray(g, dtype=np.complex128).view(np.float64)
            return (gf * mask).view(np.complex128)

        return self._record("split_relu", value, (a,), (vjp,))

    def modulus(self, a: Node) -> Node:
        """Entrywise |z|; real-valued output, zero gradient at z = 0."""
        av = a.value
        mag = np.abs(av)
        safe = np.where(mag > 0, mag, 1.0)
        phase = av / safe
        return self._record("modulus", mag, (a,), (lambda g: g * phase,))

    def softmax_rows(self, a: Node) -> Node:
        """Softmax along the last axis of a real array."""
        if not _is_real(a.value):
            raise ValueError("softmax_rows expects real logits")
        shifted = a.value - a.value.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        value = e / e.sum(axis=-1, keepdims=True)

        def vjp(g):
            inner = np.sum(g * value, axis=-1, keepdims=True)
            return value * (g - inner)

        return self._record("softmax_rows", value, (a,), (vjp,))

    def gram(self, x: Node) -> Node:
        """sum_r x_r x_r^H over sample rows; supports stacked (..., n, d) input."""
        xv = x.value
        value = np.swapaxes(xv, -1, -2) @ np.conj(xv)
        return self._record(
            "gram", value, (x,), (lambda g: xv @ np.conj(g + _hconj(g)),)
        )

    def mean_stack(self, a: Node) -> Node:
        """Mean over the leading (stack) axis."""
        n = a.value.shape[0]
        value = a.value.mean(axis=0)
        return self._record(
            "mean_stack",
            value,
            (a,),
            (lambda g: np.broadcast_to(g / n, (n,) + g.shape),),
        )

    def logdet_hpd(self, s: Node) -> Node:
        """log|S| for Hermitian PD S; backward uses the Cholesky-based inverse.

        The input is symmetrized before factorization, so the adjoint is the
        Hermitian matrix S^{-1} scaled by the incoming gradient.
        """
        sym = linalg.symmetrize(s.value)
        lower = linalg.cholesky(sym)
        value = linalg.logdet_from_factor(lower)

        def vjp(g):
            inv = linalg.symmetrize(linalg.solve_factored(lower, np.eye(sym.shape[0], dtype=np.complex128)))
            return float(g) * inv

        return self._record("logdet_hpd", value, (s,), (vjp,))

    def quad_form(self, z: Node, s: Node) -> Node:
        """z^H S z for Hermitian S (real scalar output)."""
        zv = z.value
        sym = linalg.symmetrize(s.value)
        sz = sym @ zv
        value = float(np.real(np.conj(zv) @ sz))
        return self._record(
            "quad_form",
            value,
            (z, s),
            (lambda g: 2.0 * float(g) * sz, lambda g: float(g) * np.outer(zv, np.conj(zv))),
        )

    def quad_form_inv(self, z: Node, c: Node) -> Node:
        """z^H C^{-1} z for Hermitian PD C (real scalar output)."""
        zv = z.value
        sym = linalg.symmetrize(c.value)
        u = linalg.solve_factored(linalg.cholesky(sym), zv)
        value = float(np.real(np.conj(zv) @ u))
        return self._record(
            "quad_form_inv",
            value,
            (z, c),
            (lambda g: 2.0 * float(g) * u, lambda g: -float(g) * np.outer(u, np.conj(u))),
        )

    # -- backward ------------------------------------------------------------

    def backward(self, root: Node) -> dict[str, np.ndarray]:
        """Accumulate dloss/dparam for every parameter leaf.

        ``root`` must hold a real scalar. Parameters the loss never touched
        get zero gradients of matching shape.
        """
        if root.value.shape != () or not _is_real(root.value):
            raise ValueError("backward root must be a real scalar node")
        adjoints: dict[int, np.ndarray] = {id(root): np.asarray(1.0)}
        for node in reversed(self.nodes):
            if not node.vjps:
                continue  # leaves keep their adjoints for collection below
            adj = adjoints.pop(id(node), None)
            if adj is None:
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                if not parent.needs_grad:
                    continue
                contrib = np.asarray(vjp(adj))
                if _is_real(parent.value) and np.iscomplexobj(contrib):
                    contrib = contrib.real
                prev = adjoints.get(id(parent))
                adjoints[id(parent)] = contrib if prev is None else prev + contrib
        grads: dict[str, np.ndarray] = {}
        for p in self.params:
            g = adjoints.get(id(p))
            if g is None:
                g = np.zeros_like(p.value)
            else:
                g = np.broadcast_to(g, p.value.shape).astype(p.value.dtype, copy=False)
            if not np.isfinite(g).all():
                raise NonFiniteValue(f"non-finite gradient for parameter '{p.name}'")
            grads[p.name] = g
        return grads


def finite_difference(build_loss, params: dict[str, np.ndarray], name: str,
                      index: tuple, component: str, step: float = 1e-5) -> float:
    """Central finite difference of a scalar loss in one real coordinate.

    ``build_loss`` maps a parameter dict to a float. ``component`` selects
    the real or imaginary part of the perturbed entry.
    """
    def shifted(delta):
        mod = {k: v.copy() for k, v in params.items()}
        bump = delta if component == "real" else 1j * delta
        if np.iscomplexobj(mod[name]):
            mod[name][index] += bump
        else:
            if component != "real":
                raise ValueError("real parameter has no imaginary component")
            mod[name][index] += delta
        return build_loss(mod)

    return (shifted(step) - shifted(-step)) / (2.0 * step)


def check_gradient(build_loss, params, grads, coords, step=1e-5, rtol=1e-4):
    """Compare tape gradients against central differences at given coords.

    ``coords`` is an iterable of (param name, index tuple, 'real'|'imag').
    Returns the worst relative error seen; raises AssertionError on failure.
    """
    worst = 0.0
    for name, index, component in coords:
        fd = finite_difference(build_loss, params, name, index, component, step)
        g = grads[name][index]
        analytic = g.real if component == "real" else g.imag
        err = abs(fd - analytic) / (1.0 + abs(analytic))
        worst = max(worst, err)
        if err > rtol:
            raise AssertionError(
                f"gradient mismatch at {name}{index}.{component}: "
                f"fd={fd!r} analytic={analytic!r} rel={err:.3e}"
            )
    return worst
