"""Forward-mode differentiation with dual and hyper-dual numbers.

``Dual`` carries a value and a vector of directional derivatives, so one
pass over a function seeded with all unit directions yields its gradient.
``HyperDual`` adds a second, independent set of directions plus the cross
term, giving exact second derivatives. Its derivative fields may be scalars
(the classic ``(e_i, e_j)`` seeding) or arrays, in which case ``d12`` holds
the outer-product block and one pass returns a whole Hessian.

Problem definitions are written against the module-level primitives
(:func:`exp`, :func:`log`, ...), which accept plain floats as well.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "Dual",
    "HyperDual",
    "exp",
    "log",
    "sin",
    "cos",
    "sqrt",
    "tanh",
    "maximum",
    "value_of",
    "grad",
    "jacobian",
    "hessian",
]


class DomainError(ValueError):
    """A primitive was evaluated outside its domain."""


def _outer(a, b):
    return np.multiply.outer(a, b)


class Dual:
    __slots__ = ("value", "deriv")
    __array_ufunc__ = None  # let numpy scalars defer to our reflected operators

    def __init__(self, value, deriv):
        self.value = float(value)
        self.deriv = np.asarray(deriv, dtype=float)

    def _chain(self, v, dv):
        return Dual(v, dv * self.deriv)

    def __repr__(self):
        return f"Dual({self.value!r}, {self.deriv!r})"

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value + other.value, self.deriv + other.deriv)
        if isinstance(other, HyperDual):
            return NotImplemented
        return Dual(self.value + other, self.deriv)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value - other.value, self.deriv - other.deriv)
        if isinstance(other, HyperDual):
            return NotImplemented
        return Dual(self.value - other, self.deriv)

    def __rsub__(self, other):
        return Dual(other - self.value, -self.deriv)

    def __neg__(self):
        return Dual(-self.value, -self.deriv)

    def __pos__(self):
        return self

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.value * other.value,
                self.value * other.deriv + other.value * self.deriv,
            )
        if isinstance(other, HyperDual):
            return NotImplemented
        return Dual(self.value * other, self.deriv * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            return self * other._reciprocal()
        if isinstance(other, HyperDual):
            return NotImplemented
        return Dual(self.value / other, self.deriv / other)

    def __rtruediv__(self, other):
        return other * self._reciprocal()

    def _reciprocal(self):
        if self.value == 0.0:
            raise ZeroDivisionError("division by a dual number with zero value")
        inv = 1.0 / self.value
        return self._chain(inv, -inv * inv)

    def __pow__(self, other):
        if isinstance(other, (Dual, HyperDual)):
            return exp(other * log(self))
        if other == 0:
            return Dual(1.0, np.zeros_like(self.deriv))
        if other == 1:
            return self
        if self.value == 0.0 and other < 1:
            raise DomainError("power with exponent < 1 at zero is not differentiable")
        return self._chain(self.value**other, other * self.value ** (other - 1))

    def __rpow__(self, base):
        return exp(self * math.log(base))

    def __abs__(self):
        return self if self.value >= 0.0 else -self

    # comparisons act on the value only
    def __lt__(self, other):
        return self.value < value_of(other)

    def __le__(self, other):
        return self.value <= value_of(other)

    def __gt__(self, other):
        return self.value > value_of(other)

    def __ge__(self, other):
        return self.value >= value_of(other)

    def __float__(self):
        return self.value


class HyperDual:
    __slots__ = ("value", "d1", "d2", "d12")
    __array_ufunc__ = None

    def __init__(self, value, d1=0.0, d2=0.0, d12=None):
        self.value = float(value)
        self.d1 = np.asarray(d1, dtype=float)
        self.d2 = np.asarray(d2, dtype=float)
        if d12 is None:
            d12 = np.zeros(self.d1.shape + self.d2.shape)
        self.d12 = np.asarray(d12, dtype=float)

    def _chain(self, v, dv, ddv):
        """Apply a scalar function with value v, first/second derivatives dv, ddv."""
        return HyperDual(
            v,
            dv * self.d1,
            dv * self.d2,
            dv * self.d12 + ddv * _outer(self.d1, self.d2),
        )

    def __repr__(self):
        return f"HyperDual({self.value!r}, {self.d1!r}, {self.d2!r}, {self.d12!r})"

    def _const(self, c):
        return HyperDual(c, np.zeros_like(self.d1), np.zeros_like(self.d2), np.zeros_like(self.d12))

    def __add__(self, other):
        if isinstance(other, HyperDual):
            return HyperDual(
                self.value + other.value,
                self.d1 + other.d1,
                self.d2 + other.d2,
                self.d12 + other.d12,
            )
        if isinstance(other, Dual):
            raise TypeError("cannot mix Dual and HyperDual")
        return HyperDual(self.value + other, self.d1, self.d2, self.d12)

    __radd__ = __add__

    def __neg__(self):
        return HyperDual(-self.value, -self.d1, -self.d2, -self.d12)

    def __pos__(self):
        return self

    def __sub__(self, other):
        if isinstance(other, (HyperDual, Dual)):
            return self + (-other)
        return HyperDual(self.value - other, self.d1, self.d2, self.d12)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, HyperDual):
            return HyperDual(
                self.value * other.value,
                self.value * other.d1 + other.value * self.d1,
                self.value * other.d2 + other.value * self.d2,
                self.value * other.d12
                + other.value * self.d12
                + _outer(self.d1, other.d2)
                + _outer(other.d1, self.d2),
            )
        if isinstance(other, Dual):
            raise TypeError("cannot mix Dual and HyperDual")
        return HyperDual(self.value * other, self.d1 * other, self.d2 * other, self.d12 * other)

    __rmul__ = __mul__

    def _reciprocal(self):
        if self.value == 0.0:
            raise ZeroDivisionError("division by a hyper-dual number with zero value")
        inv = 1.0 / self.value
        return self._chain(inv, -inv * inv, 2.0 * inv**3)

    def __truediv__(self, other):
        if isinstance(other, HyperDual):
            return self * other._reciprocal()
        if isinstance(other, Dual):
            raise TypeError("cannot mix Dual and HyperDual")
        return self * (1.0 / other)

    def __rtruediv__(self, other):
        return other * self._reciprocal()

    def __pow__(self, other):
        if isinstance(other, (Dual, HyperDual)):
            return exp(other * log(self))
        if other == 0:
            return self._const(1.0)
        if other == 1:
            return self
        v = self.value
        if v == 0.0 and other < 2 and other != int(other):
            raise DomainError("non-integer power below 2 at zero is not twice differentiable")
        return self._chain(v**other, other * v ** (other - 1), other * (other - 1) * v ** (other - 2))

    def __rpow__(self, base):
        return exp(self * math.log(base))

    def __abs__(self):
        return self if self.value >= 0.0 else -self

    def __lt__(self, other):
        return self.value < value_of(other)

    def __le__(self, other):
        return self.value <= value_of(other)

    def __gt__(self, other):
        return self.value > value_of(other)

    def __ge__(self, other):
        return self.value >= value_of(other)

    def __float__(self):
        return self.value


_AD = (Dual, HyperDual)


def value_of(x):
    """Strip derivative information; works elementwise on sequences."""
    if isinstance(x, _AD):
        return x.value
    if isinstance(x, np.ndarray) and x.dtype == object:
        return np.array([value_of(v) for v in x.ravel()], dtype=float).reshape(x.shape)
    if isinstance(x, (list, tuple)):
        return np.array([value_of(v) for v in x], dtype=float)
    return x


def _unary(x, f, df, d2f):
    if isinstance(x, Dual):
        return x._chain(f(x.value), df(x.value))
    if isinstance(x, HyperDual):
        return x._chain(f(x.value), df(x.value), d2f(x.value))
    if isinstance(x, np.ndarray) and x.dtype == object:
        return np.array([_unary(v, f, df, d2f) for v in x.ravel()], dtype=object).reshape(x.shape)
    return f(x)


def exp(x):
    return _unary(x, math.exp, math.exp, math.exp)


def log(x):
    if np.any(np.asarray(value_of(x)) <= 0.0):
        raise DomainError("log of a non-positive value")
    return _unary(x, math.log, lambda v: 1.0 / v, lambda v: -1.0 / (v * v))


def sin(x):
    return _unary(x, math.sin, math.cos, lambda v: -math.sin(v))


def cos(x):
    return _unary(x, math.cos, lambda v: -math.sin(v), lambda v: -math.cos(v))


def sqrt(x):
    v = value_of(x)
    if np.any(np.asarray(v) < 0.0):
        raise DomainError("sqrt of a negative value")
    if isinstance(x, _AD) and v == 0.0:
        raise DomainError("sqrt is not differentiable at zero")
    return _unary(
        x,
        math.sqrt,
        lambda u: 0.5 / math.sqrt(u),
        lambda u: -0.25 / (u * math.sqrt(u)),
    )


def tanh(x):
    def d1(v):
        t = math.tanh(v)
        return 1.0 - t * t

    def d2(v):
        t = math.tanh(v)
        return -2.0 * t * (1.0 - t * t)

    return _unary(x, math.tanh, d1, d2)


def maximum(x, c: float):
    """max(x, c) for a constant c; the derivative at the kink is 0."""
    if isinstance(x, np.ndarray) and x.dtype == object:
        return np.array([maximum(v, c) for v in x.ravel()], dtype=object).reshape(x.shape)
    if isinstance(x, Dual):
        return x if x.value > c else Dual(c, np.zeros_like(x.deriv))
    if isinstance(x, HyperDual):
        return x if x.value > c else x._const(c)
    return max(x, c)


def _as_vector(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D point, got shape {x.shape}")
    return x


def _seed_dual(x: np.ndarray) -> np.ndarray:
    eye = np.eye(x.size)
    return np.array([Dual(x[i], eye[i]) for i in range(x.size)], dtype=object)


def _deriv_or_zero(v, n: int) -> np.ndarray:
    return v.deriv if isinstance(v, Dual) else np.zeros(n)


def grad(f: Callable, x) -> np.ndarray:
    """Gradient of a scalar function at x, exact to rounding."""
    x = _as_vector(x)
    return _deriv_or_zero(f(_seed_dual(x)), x.size).copy()


def jacobian(f: Callable, x) -> np.ndarray:
    """Jacobian of a vector function (rows = outputs) at x."""
    x = _as_vector(x)
    out = f(_seed_dual(x))
    if len(out) == 0:
        return np.zeros((0, x.size))
    return np.array([_deriv_or_zero(v, x.size) for v in out])


def hessian(f: Callable, x) -> np.ndarray:
    """Hessian of a scalar function at x from a single hyper-dual pass."""
    x = _as_vector(x)
    n = x.size
    eye = np.eye(n)
    seeded = np.array(
        [HyperDual(x[i], eye[i], eye[i], np.zeros((n, n))) for i in range(n)],
        dtype=object,
    )
    out = f(seeded)
    if not isinstance(out, HyperDual):
        return np.zeros((n, n))
    return out.d12.copy()


def second_partial(f: Callable, x, i: int, j: int) -> float:
    """d^2 f / dx_i dx_j via scalar hyper-dual seeding of (e_i, e_j)."""
    x = _as_vector(x)
    seeded = np.array(
        [HyperDual(x[k], float(k == i), float(k == j), 0.0) for k in range(x.size)],
        dtype=object,
    )
    out = f(seeded)
    return float(out.d12) if isinstance(out, HyperDual) else 0.0


def dot(a: Sequence, b: Sequence):
    """Inner product that tolerates mixed float/dual entries."""
    total = 0.0
    for u, v in zip(a, b):
        total = total + u * v
    return total
