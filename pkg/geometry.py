# geometry.py
from __future__ import annotations

import itertools
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np


logger = logging.getLogger("opack.geometry")

# допуск на "целочисленность" k = p/eta и на попадание в грань
REL_TOL = 1e-9
# допуск на сравнение расстояний до узлов сетки
DIST_TOL = 1e-12


class GeometryError(ValueError):
    pass


def _tol(v: float) -> float:
    return REL_TOL * max(1.0, abs(v))


# ----------------------------
# Интервалы и боксы
# ----------------------------

@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float
    lo_closed: bool = True
    hi_closed: bool = True

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise GeometryError(f"interval bounds must be finite: {self.lo}, {self.hi}")
        if self.lo > self.hi:
            raise GeometryError(f"interval lower bound {self.lo} exceeds upper bound {self.hi}")
        if self.lo == self.hi and not (self.lo_closed and self.hi_closed):
            raise GeometryError(f"degenerate interval at {self.lo} must be closed")

    @property
    def length(self) -> float:
        return self.hi - self.lo

    @property
    def is_point(self) -> bool:
        return self.lo == self.hi

    def contains(self, v: float) -> bool:
        if self.lo_closed:
            ok_lo = v >= self.lo - _tol(self.lo)
        else:
            ok_lo = v > self.lo + _tol(self.lo)
        if self.hi_closed:
            ok_hi = v <= self.hi + _tol(self.hi)
        else:
            ok_hi = v < self.hi - _tol(self.hi)
        return ok_lo and ok_hi

    def __str__(self) -> str:
        if self.is_point:
            return "{" + _fmt(self.lo) + "}"
        left = "[" if self.lo_closed else "("
        right = "]" if self.hi_closed else ")"
        return f"{left}{_fmt(self.lo)}, {_fmt(self.hi)}{right}"


def _make_interval(lo: float, hi: float, lo_closed: bool, hi_closed: bool) -> Optional[Interval]:
    """Интервал или None, если он пуст."""
    if lo > hi:
        return None
    if lo == hi and not (lo_closed and hi_closed):
        return None
    return Interval(lo, hi, lo_closed, hi_closed)


def _fmt(v: float) -> str:
    return f"{v:.12g}"


@dataclass(frozen=True)
class Box:
    intervals: Tuple[Interval, ...]

    @property
    def dim(self) -> int:
        return len(self.intervals)

    @property
    def span(self) -> float:
        if not self.intervals:
            return 0.0
        return min(iv.length for iv in self.intervals)

    @property
    def volume(self) -> float:
        return float(np.prod([iv.length for iv in self.intervals])) if self.intervals else 0.0

    def contains(self, p: Sequence[float]) -> bool:
        return all(iv.contains(float(v)) for iv, v in zip(self.intervals, p))

    def inflated(self, theta: float) -> "Box":
        return Box(tuple(Interval(iv.lo - theta, iv.hi + theta, True, True) for iv in self.intervals))

    def __str__(self) -> str:
        if not self.intervals:
            return "{}"
        return " x ".join(str(iv) for iv in self.intervals)


def _subtract_box(a: Box, b: Box) -> List[Box]:
    """a ∖ b послойно: по каждой оси отрезаем куски ниже и выше b."""
    parts: List[Box] = []
    rest = list(a.intervals)
    for d, (ia, ib) in enumerate(zip(a.intervals, b.intervals)):
        inter = _make_interval(
            max(ia.lo, ib.lo), min(ia.hi, ib.hi),
            ia.lo_closed if ia.lo > ib.lo else (ib.lo_closed if ib.lo > ia.lo else ia.lo_closed and ib.lo_closed),
            ia.hi_closed if ia.hi < ib.hi else (ib.hi_closed if ib.hi < ia.hi else ia.hi_closed and ib.hi_closed),
        )
        if inter is None:
            return [a]
        below = _make_interval(rest[d].lo, inter.lo, rest[d].lo_closed, not inter.lo_closed)
        above = _make_interval(inter.hi, rest[d].hi, not inter.hi_closed, rest[d].hi_closed)
        for piece in (below, above):
            if piece is not None:
                parts.append(Box(tuple(rest[:d] + [piece] + rest[d + 1:])))
        rest[d] = inter
    return parts


@dataclass(frozen=True)
class BoxUnion:
    boxes: Tuple[Box, ...] = ()
    dim: int = 0

    def __post_init__(self):
        for b in self.boxes:
            if b.dim != self.dim:
                raise GeometryError(f"box dimension {b.dim} differs from union dimension {self.dim}")

    @classmethod
    def of(cls, boxes: Iterable[Box]) -> "BoxUnion":
        boxes = tuple(boxes)
        if not boxes:
            raise GeometryError("cannot infer dimension of an empty union; use BoxUnion.empty(dim)")
        return cls(boxes, boxes[0].dim)

    @classmethod
    def empty(cls, dim: int) -> "BoxUnion":
        return cls((), dim)

    @classmethod
    def point(cls, values: Sequence[float]) -> "BoxUnion":
        return cls((Box(tuple(Interval(float(v), float(v)) for v in values)),), len(values))

    @property
    def is_empty(self) -> bool:
        return not self.boxes

    @property
    def is_finite(self) -> bool:
        """Все боксы вырождены в точки (например, синглтон-множество входов)."""
        return all(all(iv.is_point for iv in b.intervals) for b in self.boxes)

    def points(self) -> np.ndarray:
        if not self.is_finite:
            raise GeometryError("set is not a finite point set")
        pts = sorted({tuple(iv.lo for iv in b.intervals) for b in self.boxes})
        return np.array(pts, dtype=float).reshape(len(pts), self.dim)

    def contains(self, p: Sequence[float]) -> bool:
        if len(p) != self.dim:
            return False
        return any(b.contains(p) for b in self.boxes)

    def difference(self, other: "BoxUnion") -> "BoxUnion":
        if other.dim != self.dim:
            raise GeometryError("dimension mismatch in set difference")
        pieces = list(self.boxes)
        for b in other.boxes:
            pieces = [part for a in pieces for part in _subtract_box(a, b)]
        return BoxUnion(tuple(pieces), self.dim)

    def is_subset_of(self, other: "BoxUnion") -> bool:
        """Достаточная проверка: каждый бокс целиком лежит в одном боксе other."""
        def inside(a: Box, b: Box) -> bool:
            for ia, ib in zip(a.intervals, b.intervals):
                lo_ok = ia.lo > ib.lo or (ia.lo == ib.lo and (ib.lo_closed or not ia.lo_closed))
                hi_ok = ia.hi < ib.hi or (ia.hi == ib.hi and (ib.hi_closed or not ia.hi_closed))
                if not (lo_ok and hi_ok):
                    return False
            return True
        return all(any(inside(a, b) for b in other.boxes) for a in self.boxes)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Равномерные точки внутри объединения (бокс выбирается по объёму)."""
        if self.is_empty:
            raise GeometryError("cannot sample from an empty set")
        if self.dim == 0:
            return np.zeros((n, 0))
        vols = np.array([max(b.volume, 0.0) for b in self.boxes])
        weights = vols / vols.sum() if vols.sum() > 0 else np.full(len(self.boxes), 1.0 / len(self.boxes))
        which = rng.choice(len(self.boxes), size=n, p=weights)
        out = np.empty((n, self.dim))
        for row, k in enumerate(which):
            for d, iv in enumerate(self.boxes[k].intervals):
                v = iv.lo if iv.is_point else rng.uniform(iv.lo, iv.hi)
                # открытая грань: uniform может вернуть ровно lo
                if not iv.contains(v):
                    v = 0.5 * (iv.lo + iv.hi)
                out[row, d] = v
        return out

    def __str__(self) -> str:
        if not self.boxes:
            return "∅"
        return " ∪ ".join(str(b) for b in self.boxes)


# ----------------------------
# Разбор строк из файла модели
# ----------------------------

_PRODUCT_SPLIT = re.compile(r"\s+x\s+|\s*×\s*")


def _parse_interval(text: str) -> Interval:
    t = text.strip()
    if t.startswith("{") and t.endswith("}"):
        v = float(t[1:-1].strip())
        return Interval(v, v)
    if len(t) < 5 or t[0] not in "[(]" or t[-1] not in "])[":
        raise GeometryError(f"bad interval syntax: {text!r}")
    body = t[1:-1].split(",")
    if len(body) != 2:
        raise GeometryError(f"bad interval syntax: {text!r}")
    try:
        lo, hi = float(body[0]), float(body[1])
    except ValueError:
        raise GeometryError(f"bad interval bounds: {text!r}") from None
    return Interval(lo, hi, t[0] == "[", t[-1] == "]")


def parse_box(text: str) -> Box:
    factors = [f for f in _PRODUCT_SPLIT.split(text.strip()) if f]
    return Box(tuple(_parse_interval(f) for f in factors))


def parse_box_union(spec: Union[str, Sequence[str]], dim: Optional[int] = None) -> BoxUnion:
    """Строка или список строк вида "(0, 0.6)", "[0, 1] x ]0, 2[", "{0.145}"."""
    items = [spec] if isinstance(spec, str) else list(spec)
    boxes = [parse_box(s) for s in items]
    if not boxes:
        if dim is None:
            raise GeometryError("empty set needs an explicit dimension")
        return BoxUnion.empty(dim)
    union = BoxUnion.of(boxes)
    if dim is not None and union.dim != dim:
        raise GeometryError(f"set {spec!r} has dimension {union.dim}, expected {dim}")
    return union


# ----------------------------
# Сетки
# ----------------------------

@dataclass(frozen=True)
class GridSet:
    """[A]_eta. При symbolic=True это само A (eta = 0 для бесконечного множества)."""
    source: BoxUnion
    eta: Tuple[float, ...]
    points: np.ndarray = field(compare=False)
    keys: Optional[Tuple[Tuple[int, ...], ...]] = None
    symbolic: bool = False

    def __len__(self) -> int:
        return 0 if self.symbolic else int(self.points.shape[0])

    @property
    def dim(self) -> int:
        return self.source.dim

    def __iter__(self):
        if self.symbolic:
            raise GeometryError("symbolic grid [A]_0 is not enumerable")
        return iter(self.points)

    def __contains__(self, p) -> bool:
        p = np.asarray(p, dtype=float).reshape(-1)
        if not self.source.contains(p):
            return False
        if self.symbolic:
            return True
        if self.keys is None:
            return self.find(p) is not None
        for v, e in zip(p, self.eta):
            k = v / e
            if abs(k - round(k)) > _tol(k):
                return False
        return True

    def find(self, p, tol: float = REL_TOL) -> Optional[int]:
        """Индекс узла, совпадающего с p (с допуском), или None."""
        if self.symbolic or len(self) == 0:
            return None
        p = np.asarray(p, dtype=float).reshape(1, -1)
        if self.dim == 0:
            return 0
        d = np.max(np.abs(self.points - p), axis=1)
        hit = np.flatnonzero(d <= tol * max(1.0, float(np.max(np.abs(p)))))
        return int(hit[0]) if hit.size else None


def boxspan(a: BoxUnion) -> float:
    if a.is_empty:
        raise GeometryError("empty set")
    return min(b.span for b in a.boxes)


def _eta_vector(eta, dim: int) -> np.ndarray:
    e = np.atleast_1d(np.asarray(eta, dtype=float)).reshape(-1)
    if e.size == 1 and dim != 1:
        e = np.full(dim, float(e[0]))
    if e.size != dim:
        raise GeometryError(f"quantization vector has {e.size} entries, set has dimension {dim}")
    return e


def quantize(a: BoxUnion, eta) -> GridSet:
    if a.is_empty:
        return GridSet(a, tuple(_eta_vector(eta, a.dim)) if a.dim else (), np.zeros((0, a.dim)), ())
    if a.dim == 0:
        return GridSet(a, (), np.zeros((1, 0)), ((),))

    e = _eta_vector(eta, a.dim)
    if np.any(e < 0):
        raise GeometryError(f"negative quantization parameter {e.tolist()}")
    if np.all(e == 0):
        if a.is_finite:
            return GridSet(a, tuple(e), a.points(), None)
        return GridSet(a, tuple(e), np.zeros((0, a.dim)), None, symbolic=True)
    if np.any(e == 0):
        raise GeometryError("mixed zero and positive quantization parameters are not supported")

    for d in range(a.dim):
        edge = min(b.intervals[d].length for b in a.boxes)
        if e[d] > edge + _tol(edge):
            raise GeometryError(f"grid too coarse: eta={e[d]:.6g} exceeds edge {edge:.6g} in dimension {d + 1}")

    keys = set()
    for b in a.boxes:
        ranges = []
        for iv, step in zip(b.intervals, e):
            kmin = math.ceil(iv.lo / step - REL_TOL * max(1.0, abs(iv.lo / step)))
            kmax = math.floor(iv.hi / step + REL_TOL * max(1.0, abs(iv.hi / step)))
            ranges.append(range(kmin, kmax + 1))
        inside = [k for k in itertools.product(*ranges) if b.contains([ki * si for ki, si in zip(k, e)])]
        if not inside:
            # открытые грани ровно на узлах решётки
            raise GeometryError(f"grid too coarse: box {b} holds no point of the eta={e.tolist()} lattice")
        keys.update(inside)

    ordered = tuple(sorted(keys))
    pts = np.array(ordered, dtype=float).reshape(len(ordered), a.dim) * e
    logger.debug("[GEOMETRY] quantized %s with eta=%s -> %d points", a, e.tolist(), len(ordered))
    return GridSet(a, tuple(float(v) for v in e), pts, ordered)


def inflate(a: BoxUnion, theta: float) -> BoxUnion:
    if theta < 0:
        raise GeometryError(f"inflation radius must be non-negative, got {theta}")
    if theta == 0:
        return a
    return BoxUnion(tuple(b.inflated(theta) for b in a.boxes), a.dim)


def nearest_grid_points(p, g: GridSet, eta: float) -> Tuple[int, ...]:
    """Индексы всех узлов g на расстоянии не больше eta (в ∞-норме) от p."""
    if g.symbolic:
        raise GeometryError("grid must be finite")
    if len(g) == 0:
        return ()
    if g.dim == 0:
        return (0,)
    p = np.asarray(p, dtype=float).reshape(1, -1)
    d = np.max(np.abs(g.points - p), axis=1)
    return tuple(int(i) for i in np.flatnonzero(d <= eta + DIST_TOL))
