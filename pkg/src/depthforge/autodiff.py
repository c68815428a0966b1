"""Reverse-mode differentiation over the primitive ops.

A Var wraps a float64 array and remembers how it was computed; backward()
walks the tape (a DAG of Vars) once, accumulating adjoints. grad_check is
the master numerical oracle: central finite differences compared
coordinate-wise against the tape gradients.

One tape per training step; a Var graph is confined to a single thread.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from depthforge import ndtensor
from depthforge.ndtensor import DTYPE


def _unbroadcast(g, shape):
    """Sum an upstream gradient over axes that numpy broadcasting added."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Var:
    """Node of the differentiation tape."""

    __slots__ = ("data", "grad", "requires_grad", "needs_grad", "_parents",
                 "_vjp", "name")

    # make `ndarray <op> Var` defer to the reflected Var op
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.needs_grad = requires_grad  # True anywhere a parameter feeds in
        self._parents = ()
        self._vjp = None
        self.name = name

    @classmethod
    def param(cls, data, name=None):
        return cls(data, requires_grad=True, name=name)

    @classmethod
    def const(cls, data):
        return cls(data)

    @classmethod
    def from_op(cls, data, parents, vjp: Callable):
        """Record a custom op: vjp(g) returns one gradient per parent (or None)."""
        out = cls(data)
        out._parents = tuple(parents)
        out._vjp = vjp
        out.needs_grad = any(p.needs_grad for p in parents)
        return out

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Var(shape={self.data.shape}, grad={self.requires_grad})"

    # -- arithmetic -----------------------------------------------------

    @staticmethod
    def _value(x):
        return x.data if isinstance(x, Var) else np.asarray(x, dtype=DTYPE)

    def _binary(self, other, fwd, vjp_self, vjp_other):
        ov = self._value(other)
        out_data = fwd(self.data, ov)
        if isinstance(other, Var):
            def vjp(g):
                return (_unbroadcast(vjp_self(g, self.data, ov), self.data.shape),
                        _unbroadcast(vjp_other(g, self.data, ov), ov.shape))
            return Var.from_op(out_data, (self, other), vjp)

        def vjp(g):
            return (_unbroadcast(vjp_self(g, self.data, ov), self.data.shape),)
        return Var.from_op(out_data, (self,), vjp)

    def __add__(self, other):
        return self._binary(other, lambda a, b: a + b,
                            lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, lambda a, b: a - b,
                            lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return self._binary(other, lambda a, b: b - a,
                            lambda g, a, b: -g, lambda g, a, b: g)

    def __mul__(self, other):
        return self._binary(other, lambda a, b: a * b,
                            lambda g, a, b: g * b, lambda g, a, b: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(other, lambda a, b: a / b,
                            lambda g, a, b: g / b,
                            lambda g, a, b: -g * a / (b * b))

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def __neg__(self):
        return Var.from_op(-self.data, (self,), lambda g: (-g,))

    # -- elementwise ----------------------------------------------------

    def abs(self):
        # subgradient at 0 is 0 (np.sign(0) == 0)
        sign = np.sign(self.data)
        return Var.from_op(np.abs(self.data), (self,), lambda g: (g * sign,))

    def square(self):
        return Var.from_op(self.data * self.data, (self,),
                           lambda g: (2.0 * g * self.data,))

    def exp(self):
        out_data = np.exp(self.data)
        return Var.from_op(out_data, (self,), lambda g: (g * out_data,))

    def log(self):
        return Var.from_op(np.log(self.data), (self,),
                           lambda g: (g / self.data,))

    def reciprocal(self):
        inv = 1.0 / self.data
        return Var.from_op(inv, (self,), lambda g: (-g * inv * inv,))

    def relu(self):
        pos = self.data > 0
        return Var.from_op(self.data * pos, (self,), lambda g: (g * pos,))

    def softplus(self):
        out_data = np.logaddexp(0.0, self.data)
        sig = _sigmoid(self.data)
        return Var.from_op(out_data, (self,), lambda g: (g * sig,))

    def maximum(self, other):
        """Elementwise max; at ties the gradient routes to self."""
        return self._binary(other, np.maximum,
                            lambda g, a, b: g * (a >= b),
                            lambda g, a, b: g * (a < b))

    # -- reductions / structure ------------------------------------------

    def sum(self):
        shape = self.data.shape
        return Var.from_op(self.data.sum(), (self,),
                           lambda g: (np.broadcast_to(g, shape),))

    def mean(self):
        shape = self.data.shape
        n = self.data.size
        return Var.from_op(self.data.mean(), (self,),
                           lambda g: (np.broadcast_to(g / n, shape),))

    def reshape(self, *shape):
        orig = self.data.shape
        return Var.from_op(self.data.reshape(*shape), (self,),
                           lambda g: (g.reshape(orig),))

    def __getitem__(self, idx):
        shape = self.data.shape

        def vjp(g):
            gx = np.zeros(shape, dtype=DTYPE)
            gx[idx] = g
            return (gx,)
        return Var.from_op(self.data[idx], (self,), vjp)


def concat(vars_, axis=1):
    """Concatenate along an axis; gradient splits back."""
    sizes = [v.data.shape[axis] for v in vars_]
    out_data = np.concatenate([v.data for v in vars_], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.ascontiguousarray(np.take(g, range(bounds[i], bounds[i + 1]),
                                                  axis=axis))
                     for i in range(len(sizes)))
    return Var.from_op(out_data, tuple(vars_), vjp)


def select(mask, a: Var, b: Var):
    """Elementwise mask ? a : b with the mask treated as a constant."""
    m = np.asarray(mask)
    out_data = np.where(m, a.data, b.data)

    def vjp(g):
        return (_unbroadcast(g * m, a.data.shape),
                _unbroadcast(g * ~m, b.data.shape))
    return Var.from_op(out_data, (a, b), vjp)


def fwd_diff_w(v: Var):
    """Forward difference along W, zero in the last column."""
    x = v.data
    out_data = np.zeros_like(x)
    out_data[..., :-1] = x[..., 1:] - x[..., :-1]

    def vjp(g):
        gx = np.zeros_like(x)
        gx[..., 1:] += g[..., :-1]
        gx[..., :-1] -= g[..., :-1]
        return (gx,)
    return Var.from_op(out_data, (v,), vjp)


def fwd_diff_h(v: Var):
    """Forward difference along H, zero in the last row."""
    x = v.data
    out_data = np.zeros_like(x)
    out_data[..., :-1, :] = x[..., 1:, :] - x[..., :-1, :]

    def vjp(g):
        gx = np.zeros_like(x)
        gx[..., 1:, :] += g[..., :-1, :]
        gx[..., :-1, :] -= g[..., :-1, :]
        return (gx,)
    return Var.from_op(out_data, (v,), vjp)


# -- layer primitives ----------------------------------------------------

def conv2d(x: Var, w: Var, b: Var, spec: ndtensor.ConvSpec):
    out_data = ndtensor.conv2d(x.data, w.data, b.data, spec)

    def vjp(g):
        return ndtensor.conv2d_backward(x.data, w.data, spec, g)
    return Var.from_op(out_data, (x, w, b), vjp)


def max_pool2d(x: Var, k, stride):
    out_data, arg = ndtensor.max_pool2d(x.data, k, stride)
    shape = x.data.shape

    def vjp(g):
        return (ndtensor.max_pool2d_backward(shape, k, stride, arg, g),)
    return Var.from_op(out_data, (x,), vjp)


def batch_norm(x: Var, gamma: Var, beta: Var, state: ndtensor.BNState, training):
    out_data, cache = ndtensor.batch_norm(x.data, gamma.data, beta.data,
                                          state, training)

    def vjp(g):
        return ndtensor.batch_norm_backward(cache, g)
    return Var.from_op(out_data, (x, gamma, beta), vjp)


def unpool2x(x: Var):
    return Var.from_op(ndtensor.unpool2x(x.data), (x,),
                       lambda g: (ndtensor.unpool2x_backward(g),))


# -- tape walk -------------------------------------------------------------

def _toposort(root: Var):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents before children


def backward(loss: Var, params: dict[str, Var] | None = None):
    """Accumulate adjoints of a scalar loss into every requires_grad Var.

    Returns {name: gradient array} when params is given; parameters not
    reachable from the loss get zero gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    order = _toposort(loss)
    adjoint = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.needs_grad:
                continue
            acc = adjoint.get(id(parent))
            adjoint[id(parent)] = pg if acc is None else acc + pg
    if params is None:
        return None
    return {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
            for name, p in params.items()}


def zero_grads(params):
    for p in params.values():
        p.grad = None


# -- finite-difference oracle ----------------------------------------------

@dataclass
class ParamCheck:
    max_abs_err: float
    max_rel_err: float
    worst_coord: tuple
    analytic: float
    numeric: float


@dataclass
class GradReport:
    """Finite-difference comparison, worst coordinate per parameter."""

    per_param: dict[str, ParamCheck]
    tol: float

    @property
    def max_rel_err(self):
        return max((c.max_rel_err for c in self.per_param.values()), default=0.0)

    @property
    def passed(self):
        return self.max_rel_err < self.tol

    def worst(self):
        name = max(self.per_param, key=lambda n: self.per_param[n].max_rel_err)
        return name, self.per_param[name]

    def summary(self):
        lines = []
        for name, c in sorted(self.per_param.items()):
            lines.append(f"{name:35s} max_abs={c.max_abs_err:.3e} "
                         f"max_rel={c.max_rel_err:.3e} at {c.worst_coord} "
                         f"(analytic={c.analytic:.6e} numeric={c.numeric:.6e})")
        return "\n".join(lines)


def _rel_err(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(f, params: dict[str, Var], eps=1e-3, tol=1e-4,
               coords_per_param=None, seed=0):
    """Central differences (f(t+e)-f(t-e))/2e vs tape gradients.

    f re-evaluates the scalar loss from the parameters' current values.
    coords_per_param limits the number of checked coordinates per parameter
    (deterministic choice); None checks all of them.
    """
    zero_grads(params)
    loss = f()
    analytic = backward(loss, params)
    zero_grads(params)

    rng = np.random.default_rng(seed)
    report = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n_coords = flat.size
        if coords_per_param is not None and coords_per_param < n_coords:
            coords = np.sort(rng.choice(n_coords, size=coords_per_param,
                                        replace=False))
        else:
            coords = np.arange(n_coords)
        a_flat = analytic[name].reshape(-1)
        worst = ParamCheck(0.0, 0.0, (0,), float(a_flat[coords[0]]), 0.0)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            f_plus = f().item()
            flat[idx] = orig - eps
            f_minus = f().item()
            flat[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ndtensor.NumericalError(
                    f"non-finite loss while perturbing {name}"
                    f"[{np.unravel_index(idx, p.data.shape)}]")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(a_flat[idx])
            rel = _rel_err(a, numeric)
            if rel >= worst.max_rel_err:
                worst = ParamCheck(max(worst.max_abs_err, abs(a - numeric)), rel,
                                   tuple(np.unravel_index(int(idx), p.data.shape)),
                                   a, numeric)
            else:
                worst.max_abs_err = max(worst.max_abs_err, abs(a - numeric))
        report[name] = worst
    return GradReport(report, tol)
