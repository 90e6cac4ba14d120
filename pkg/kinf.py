# kinf.py
"""
Функции сравнения класса K∞: вычисление, композиция, обращение и проверка f < id.

Все значения неизменяемые. Варианты:
  Zero, LinearGain(c), Power(a, b) = a*s^b, Composition(f1, ..., fk) = f1∘...∘fk,
  NumericMonotone (табличная, линейная интерполяция), MaxOf (поточечный максимум)
  и NumericInverse (обратная к табличной/максимуму, через brentq).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq


logger = logging.getLogger("opack.kinf")

INVERSE_XTOL = 1e-10


class KinfError(ValueError):
    pass


class MonotoneFn:
    def __call__(self, s: float) -> float:
        return evaluate(self, s)

    def _eval(self, s: float) -> float:  # pragma: no cover - переопределяется
        raise NotImplementedError

    @property
    def strictly_increasing(self) -> bool:
        return True


@dataclass(frozen=True)
class Zero(MonotoneFn):
    def _eval(self, s: float) -> float:
        return 0.0

    @property
    def strictly_increasing(self) -> bool:
        return False

    def __str__(self) -> str:
        return "0"


@dataclass(frozen=True)
class LinearGain(MonotoneFn):
    c: float

    def __post_init__(self):
        if not (self.c >= 0 and math.isfinite(self.c)):
            raise KinfError(f"linear gain must be a finite non-negative number, got {self.c}")

    def _eval(self, s: float) -> float:
        return self.c * s

    @property
    def strictly_increasing(self) -> bool:
        return self.c > 0

    def __str__(self) -> str:
        return "s" if self.c == 1 else f"{self.c:.12g}*s"


@dataclass(frozen=True)
class Power(MonotoneFn):
    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise KinfError(f"power law a*s^b needs a > 0 and b > 0, got a={self.a}, b={self.b}")

    def _eval(self, s: float) -> float:
        return self.a * s ** self.b

    def __str__(self) -> str:
        return f"{self.a:.12g}*pow(s, {self.b:.12g})"


@dataclass(frozen=True)
class Composition(MonotoneFn):
    # применяется справа налево: parts[0](parts[1](...parts[-1](s)))
    parts: Tuple[MonotoneFn, ...]

    def _eval(self, s: float) -> float:
        for f in reversed(self.parts):
            s = evaluate(f, s)
        return s

    @property
    def strictly_increasing(self) -> bool:
        return all(f.strictly_increasing for f in self.parts)

    def __str__(self) -> str:
        return " ∘ ".join(f"({f})" for f in self.parts)


@dataclass(frozen=True)
class NumericMonotone(MonotoneFn):
    """Таблица (xs, ys) с линейной интерполяцией и линейным продолжением за правым краем."""
    xs: Tuple[float, ...]
    ys: Tuple[float, ...]
    strict: bool = True
    # проверенная пользователем оценка f < id (если есть)
    verified_below_identity: Optional[bool] = None

    def __post_init__(self):
        if len(self.xs) != len(self.ys) or len(self.xs) < 2:
            raise KinfError("sample table needs at least two (s, f(s)) pairs of equal length")
        if self.xs[0] != 0 or self.ys[0] != 0:
            raise KinfError("sample table must start at (0, 0)")
        dx = np.diff(self.xs)
        dy = np.diff(self.ys)
        if np.any(dx <= 0):
            raise KinfError("sample abscissae must be strictly increasing")
        if np.any(dy < 0) or (self.strict and np.any(dy <= 0)):
            raise KinfError("sampled function is not strictly increasing")

    def _eval(self, s: float) -> float:
        xs, ys = self.xs, self.ys
        if s <= xs[-1]:
            return float(np.interp(s, xs, ys))
        slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
        return ys[-1] + slope * (s - xs[-1])

    @property
    def strictly_increasing(self) -> bool:
        return self.strict

    def __str__(self) -> str:
        return f"table[{len(self.xs)} samples up to s={self.xs[-1]:.6g}]"


@dataclass(frozen=True)
class MaxOf(MonotoneFn):
    parts: Tuple[MonotoneFn, ...]

    def _eval(self, s: float) -> float:
        return max(evaluate(f, s) for f in self.parts)

    @property
    def strictly_increasing(self) -> bool:
        return all(f.strictly_increasing for f in self.parts)

    def __str__(self) -> str:
        return "max(" + ", ".join(str(f) for f in self.parts) + ")"


@dataclass(frozen=True)
class NumericInverse(MonotoneFn):
    of: MonotoneFn

    def _eval(self, y: float) -> float:
        if y == 0:
            return 0.0
        f = self.of
        hi = max(1.0, y)
        while evaluate(f, hi) < y:
            hi *= 2.0
            if hi > 1e300:
                raise KinfError(f"cannot invert {f} at {y}: function is bounded")
        return float(brentq(lambda s: evaluate(f, s) - y, 0.0, hi, xtol=INVERSE_XTOL))

    def __str__(self) -> str:
        return f"inverse({self.of})"


# ----------------------------
# Публичное API
# ----------------------------

def identity() -> LinearGain:
    return LinearGain(1.0)


def evaluate(f: MonotoneFn, s: float) -> float:
    if s < 0:
        raise KinfError(f"comparison functions are defined on s >= 0, got {s}")
    return float(f._eval(float(s)))


def inverse(f: MonotoneFn) -> MonotoneFn:
    if isinstance(f, Zero) or not f.strictly_increasing:
        raise KinfError(f"not invertible: {f}")
    if isinstance(f, LinearGain):
        return LinearGain(1.0 / f.c)
    if isinstance(f, Power):
        return _power(f.a ** (-1.0 / f.b), 1.0 / f.b)
    if isinstance(f, Composition):
        return compose_all(*[inverse(g) for g in reversed(f.parts)])
    if isinstance(f, NumericInverse):
        return f.of
    if isinstance(f, MaxOf) and all(isinstance(g, LinearGain) for g in f.parts):
        return LinearGain(1.0 / max(g.c for g in f.parts))
    return NumericInverse(f)


def _power(a: float, b: float) -> MonotoneFn:
    if abs(b - 1.0) <= 1e-15:
        return LinearGain(a)
    return Power(a, b)


def _as_power(f: MonotoneFn) -> Optional[Tuple[float, float]]:
    if isinstance(f, LinearGain) and f.c > 0:
        return f.c, 1.0
    if isinstance(f, Power):
        return f.a, f.b
    return None


def compose(f: MonotoneFn, g: MonotoneFn) -> MonotoneFn:
    """f∘g со свёрткой линейных и степенных звеньев."""
    if isinstance(f, Zero) or isinstance(g, Zero):
        return Zero()
    if isinstance(f, LinearGain) and isinstance(g, LinearGain):
        return LinearGain(f.c * g.c)
    if isinstance(g, LinearGain) and g.c == 1.0:
        return f
    if isinstance(f, LinearGain) and f.c == 1.0:
        return g
    pf, pg = _as_power(f), _as_power(g)
    if pf is not None and pg is not None:
        # a*(c*s^d)^b = a*c^b * s^(b*d)
        (a, b), (c, d) = pf, pg
        return _power(a * c ** b, b * d)

    parts = []
    for h in (f, g):
        parts.extend(h.parts if isinstance(h, Composition) else (h,))
    # повторная свёртка соседних звеньев
    merged = [parts[0]]
    for h in parts[1:]:
        last = merged[-1]
        if _as_power(last) is not None and _as_power(h) is not None:
            merged[-1] = compose(last, h)
        else:
            merged.append(h)
    return merged[0] if len(merged) == 1 else Composition(tuple(merged))


def compose_all(*fs: MonotoneFn) -> MonotoneFn:
    if not fs:
        return identity()
    out = fs[-1]
    for f in reversed(fs[:-1]):
        out = compose(f, out)
    return out


def pointwise_max(fs: Sequence[MonotoneFn]) -> MonotoneFn:
    fs = tuple(fs)
    if len(fs) == 1:
        return fs[0]
    if all(isinstance(f, LinearGain) for f in fs):
        return LinearGain(max(f.c for f in fs))
    return MaxOf(fs)


def strictly_below_identity(f: MonotoneFn) -> bool:
    if isinstance(f, Zero):
        return True
    if isinstance(f, LinearGain):
        return f.c < 1.0
    if isinstance(f, Power):
        if abs(f.b - 1.0) <= 1e-15:
            return f.a < 1.0
        raise KinfError(
            f"{f}: a power law with exponent != 1 cannot stay below the identity for all s > 0; "
            "restrict the certificate to linear gains"
        )
    if isinstance(f, NumericMonotone):
        if f.verified_below_identity is None:
            raise KinfError("undecidable on samples: supply a verified bound for the sampled function")
        return f.verified_below_identity
    raise KinfError(f"undecidable on samples: {f} does not reduce to a linear gain")


def linear_coefficient(f: MonotoneFn) -> Optional[float]:
    """Коэффициент c, если f = c*s (Zero даёт 0), иначе None."""
    if isinstance(f, Zero):
        return 0.0
    if isinstance(f, LinearGain):
        return f.c
    if isinstance(f, Power) and abs(f.b - 1.0) <= 1e-15:
        return f.a
    return None
