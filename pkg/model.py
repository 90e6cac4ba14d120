# model.py
"""
Подсистемы, сеть и δ-ISS сертификаты; загрузка моделей из TOML.

Соглашение о рёбрах: пара (i, j) в NetworkSpec.edges означает, что j ∈ Pre(i),
т.е. выход h_ji подсистемы j подаётся на внутренний вход w_ij подсистемы i.
В файле модели рёбра записываются как [откуда, куда] = [j, i].
"""
from __future__ import annotations

import hashlib
import logging
import math
try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

import numpy as np

import kinf
from config import settings
from expr import BinOp, Call, Expr, Neg, ParseError, Var, eval_expr, free_variables, parse_expr
from geometry import Box, BoxUnion, GeometryError, parse_box_union


logger = logging.getLogger("opack.model")

CHECK_TOL = 1e-9


class ModelError(ValueError):
    pass


class CertificateError(ModelError):
    def __init__(self, subsystem: int, violations: List[str]):
        head = "; ".join(violations[:3])
        more = f" (+{len(violations) - 3} more)" if len(violations) > 3 else ""
        super().__init__(f"certificate of subsystem {subsystem} rejected: {head}{more}")
        self.subsystem = subsystem
        self.violations = violations


def norm_inf(v) -> float:
    v = np.asarray(v, dtype=float).reshape(-1)
    return float(np.max(np.abs(v))) if v.size else 0.0


# ----------------------------
# K∞-функции из строк
# ----------------------------

def _constant(e: Expr) -> Optional[float]:
    if free_variables(e):
        return None
    return eval_expr(e, {})


def _linear(e: Expr) -> Optional[float]:
    """c, если e ≡ c*s (линейно по s без свободного члена)."""
    if isinstance(e, Var) and e.name == "s":
        return 1.0
    c = _constant(e)
    if c is not None:
        return 0.0 if c == 0 else None
    if isinstance(e, Neg):
        inner = _linear(e.operand)
        return -inner if inner is not None else None
    if isinstance(e, BinOp):
        if e.op in "+-":
            a, b = _linear(e.left), _linear(e.right)
            if a is None or b is None:
                return None
            return a + b if e.op == "+" else a - b
        if e.op == "*":
            ca, cb = _constant(e.left), _constant(e.right)
            if ca is not None:
                inner = _linear(e.right)
                return ca * inner if inner is not None else None
            if cb is not None:
                inner = _linear(e.left)
                return cb * inner if inner is not None else None
        if e.op == "/":
            cb = _constant(e.right)
            inner = _linear(e.left)
            if cb not in (None, 0.0) and inner is not None:
                return inner / cb
    return None


def _power(e: Expr) -> Optional[Tuple[float, float]]:
    """(a, b), если e ≡ a*s^b через pow(s, b) или sqrt(s)."""
    if isinstance(e, Call) and e.args and isinstance(e.args[0], Var) and e.args[0].name == "s":
        if e.name == "sqrt":
            return 1.0, 0.5
        if e.name == "pow":
            b = _constant(e.args[1])
            return (1.0, b) if b is not None else None
    if isinstance(e, BinOp) and e.op == "*":
        for const_side, other in ((e.left, e.right), (e.right, e.left)):
            c = _constant(const_side)
            if c is not None:
                inner = _power(other)
                if inner is not None:
                    return c * inner[0], inner[1]
    return None


def parse_gain(text: str, s_max: float = 10.0, n_samples: int = 2001) -> kinf.MonotoneFn:
    """Строка с переменной s -> MonotoneFn (Zero, LinearGain, Power или таблица)."""
    e = parse_expr(str(text), {"s"})
    c = _linear(e)
    if c is not None:
        if c < 0:
            raise ModelError(f"gain {text!r} is decreasing")
        return kinf.Zero() if c == 0 else kinf.LinearGain(c)
    p = _power(e)
    if p is not None:
        return kinf.LinearGain(p[0]) if p[1] == 1 else kinf.Power(p[0], p[1])
    xs = np.linspace(0.0, s_max, n_samples)
    ys = [eval_expr(e, {"s": float(s)}) for s in xs]
    if abs(ys[0]) > 1e-12:
        raise ModelError(f"gain {text!r} does not vanish at s = 0")
    ys[0] = 0.0
    try:
        return kinf.NumericMonotone(tuple(float(v) for v in xs), tuple(float(v) for v in ys))
    except kinf.KinfError as exc:
        raise ModelError(f"gain {text!r}: {exc}") from None


# ----------------------------
# Сертификат δ-ISS
# ----------------------------

@dataclass(frozen=True)
class IssCertificate:
    kappa: kinf.MonotoneFn
    rho_int: kinf.MonotoneFn
    rho_ext: kinf.MonotoneFn
    alpha_lower: kinf.MonotoneFn
    alpha_upper: kinf.MonotoneFn
    gamma_hat: kinf.MonotoneFn
    lipschitz: kinf.MonotoneFn
    # "sup" — max_k |x_k - x'_k|; "quadratic" — sqrt(dᵀ P d)
    form: str = "sup"
    P: Optional[Tuple[Tuple[float, ...], ...]] = None
    sigma: Optional[kinf.MonotoneFn] = None

    def __post_init__(self):
        if self.form not in ("sup", "quadratic"):
            raise ModelError(f"unknown simulation function form {self.form!r}")
        if self.form == "quadratic" and self.P is None:
            raise ModelError("quadratic simulation function needs a matrix P")

    @property
    def alpha(self) -> kinf.MonotoneFn:
        # α = (ℓ∘α̲⁻¹)⁻¹
        return kinf.inverse(kinf.compose(self.lipschitz, kinf.inverse(self.alpha_lower)))

    def G(self, x, xp) -> float:
        d = np.asarray(x, dtype=float).reshape(-1) - np.asarray(xp, dtype=float).reshape(-1)
        if self.form == "sup":
            return norm_inf(d)
        P = np.asarray(self.P, dtype=float)
        return float(math.sqrt(max(float(d @ P @ d), 0.0)))


_CERT_KEYS = ("kappa", "rho_int", "rho_ext", "alpha_lower", "alpha_upper", "gamma_hat", "lipschitz")


def certificate_from_table(table: Mapping[str, Any], where: str) -> IssCertificate:
    missing = [k for k in _CERT_KEYS if k not in table]
    if missing:
        raise ModelError(f"{where}: certificate misses {', '.join(missing)}")
    fns = {}
    for k in _CERT_KEYS:
        try:
            fns[k] = parse_gain(table[k])
        except ParseError as exc:
            raise ModelError(f"{where}.{k}: {exc}") from None
    for k in ("kappa", "alpha_lower", "alpha_upper", "gamma_hat", "lipschitz"):
        if isinstance(fns[k], kinf.Zero):
            raise ModelError(f"{where}.{k} must be of class K∞, not identically zero")
    P = table.get("P")
    sigma = parse_gain(table["sigma"]) if "sigma" in table else None
    return IssCertificate(
        **fns,
        form=str(table.get("G", "sup")),
        P=tuple(tuple(float(v) for v in row) for row in P) if P is not None else None,
        sigma=sigma,
    )


# ----------------------------
# Подсистема и сеть
# ----------------------------

@dataclass(frozen=True)
class SubsystemSpec:
    index: int
    X: BoxUnion
    XS: BoxUnion
    U: BoxUnion
    dynamics: Tuple[Expr, ...]
    # j -> блок h_ij; ключ index: внешний выход
    outputs: Dict[int, Tuple[Expr, ...]]
    # j -> W_ij для каждого предшественника j
    internal_sets: Dict[int, BoxUnion]
    certificate: IssCertificate
    output_sets: Dict[int, BoxUnion] = field(default_factory=dict)
    quantization: Dict[str, float] = field(default_factory=dict)

    def __hash__(self) -> int:
        return hash(self.index)

    @property
    def X0(self) -> BoxUnion:
        return self.X

    @property
    def state_dim(self) -> int:
        return self.X.dim

    @property
    def input_dim(self) -> int:
        return self.U.dim

    @property
    def predecessors(self) -> Tuple[int, ...]:
        return tuple(sorted(self.internal_sets))

    @property
    def w_slices(self) -> Dict[int, slice]:
        out, start = {}, 0
        for j in self.predecessors:
            d = self.internal_sets[j].dim
            out[j] = slice(start, start + d)
            start += d
        return out

    @property
    def w_dim(self) -> int:
        return sum(self.internal_sets[j].dim for j in self.predecessors)

    def env(self, x, u, w) -> Dict[str, float]:
        env = {f"x{k + 1}": float(v) for k, v in enumerate(np.asarray(x, dtype=float).reshape(-1))}
        env.update({f"u{k + 1}": float(v) for k, v in enumerate(np.asarray(u, dtype=float).reshape(-1))})
        env.update({f"w{k + 1}": float(v) for k, v in enumerate(np.asarray(w, dtype=float).reshape(-1))})
        return env

    def evaluate(self, x, u, w) -> np.ndarray:
        """f_i без проверки областей (узлы сетки уже внутри)."""
        env = self.env(x, u, w)
        return np.array([eval_expr(e, env) for e in self.dynamics], dtype=float)

    def output(self, x, j: int) -> np.ndarray:
        block = self.outputs.get(j, ())
        env = self.env(x, (), ())
        return np.array([eval_expr(e, env) for e in block], dtype=float)

    def external_output(self, x) -> np.ndarray:
        return self.output(x, self.index)

    def full_output(self, x) -> np.ndarray:
        parts = [self.output(x, j) for j in sorted(self.outputs)]
        return np.concatenate(parts) if parts else np.zeros(0)

    def sample_w(self, rng: np.random.Generator, n: int) -> np.ndarray:
        blocks = [self.internal_sets[j].sample(rng, n) for j in self.predecessors]
        return np.hstack(blocks) if blocks else np.zeros((n, 0))


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    subsystems: Tuple[SubsystemSpec, ...]
    # (i, j): j ∈ Pre(i)
    edges: FrozenSet[Tuple[int, int]]
    precision: Optional[float] = None

    @property
    def vertices(self) -> Tuple[int, ...]:
        return tuple(s.index for s in self.subsystems)

    def sub(self, i: int) -> SubsystemSpec:
        for s in self.subsystems:
            if s.index == i:
                return s
        raise ModelError(f"no subsystem {i}")

    def pre(self, i: int) -> Tuple[int, ...]:
        return tuple(sorted(j for (k, j) in self.edges if k == i))

    def post(self, i: int) -> Tuple[int, ...]:
        return tuple(sorted(k for (k, j) in self.edges if j == i))

    def _slices(self, dims: Sequence[int]) -> List[slice]:
        out, start = [], 0
        for d in dims:
            out.append(slice(start, start + d))
            start += d
        return out

    @property
    def state_slices(self) -> List[slice]:
        return self._slices([s.state_dim for s in self.subsystems])

    @property
    def input_slices(self) -> List[slice]:
        return self._slices([s.input_dim for s in self.subsystems])


# ----------------------------
# Шаги
# ----------------------------

def step(sub: SubsystemSpec, x, u, w) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    w = np.asarray(w, dtype=float).reshape(-1)
    if not sub.X.contains(x):
        raise ModelError(f"subsystem {sub.index}: state {x.tolist()} outside state set {sub.X}")
    if not sub.U.contains(u):
        raise ModelError(f"subsystem {sub.index}: input {u.tolist()} outside input set {sub.U}")
    if w.size != sub.w_dim:
        raise ModelError(f"subsystem {sub.index}: internal input has {w.size} entries, expected {sub.w_dim}")
    for j, sl in sub.w_slices.items():
        if not sub.internal_sets[j].contains(w[sl]):
            raise ModelError(
                f"subsystem {sub.index}: internal input from {j} {w[sl].tolist()} outside {sub.internal_sets[j]}"
            )
    return sub.evaluate(x, u, w)


def interconnection_input(net: NetworkSpec, i: int, xs: Mapping[int, np.ndarray]) -> np.ndarray:
    """w_i = [h_ji(x_j)] по предшественникам j в порядке возрастания."""
    sub = net.sub(i)
    parts = [net.sub(j).output(xs[j], i) for j in sub.predecessors]
    return np.concatenate(parts) if parts else np.zeros(0)


def network_step(net: NetworkSpec, x, u) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    xs = {s.index: x[sl] for s, sl in zip(net.subsystems, net.state_slices)}
    us = {s.index: u[sl] for s, sl in zip(net.subsystems, net.input_slices)}
    if x.size != sum(s.state_dim for s in net.subsystems) or u.size != sum(s.input_dim for s in net.subsystems):
        raise ModelError("network state or input has the wrong dimension")
    out = [step(s, xs[s.index], us[s.index], interconnection_input(net, s.index, xs)) for s in net.subsystems]
    return np.concatenate(out) if out else np.zeros(0)


# ----------------------------
# Проверка сертификата на выборке
# ----------------------------

def check_certificate(sub: SubsystemSpec, samples: Optional[int] = None, seed: Optional[int] = None) -> List[str]:
    """Выборочная проверка неравенств δ-ISS, Липшица и треугольного неравенства."""
    samples = settings.samples if samples is None else samples
    rng = np.random.default_rng(settings.seed if seed is None else seed)
    cert = sub.certificate
    X = [sub.X.sample(rng, samples) for _ in range(3)]
    U = [sub.U.sample(rng, samples) for _ in range(2)]
    W = [sub.sample_w(rng, samples) for _ in range(2)]
    bad: List[str] = []

    for k in range(samples):
        x, xp, xpp = X[0][k], X[1][k], X[2][k]
        u, up = U[0][k], U[1][k]
        w, wp = W[0][k], W[1][k]
        d = norm_inf(x - xp)
        g = cert.G(x, xp)
        if kinf.evaluate(cert.alpha_lower, d) > g + CHECK_TOL or g > kinf.evaluate(cert.alpha_upper, d) + CHECK_TOL:
            bad.append(f"sandwich bound fails at x={x.tolist()}, x'={xp.tolist()}")
        g_next = cert.G(sub.evaluate(x, u, w), sub.evaluate(xp, up, wp))
        rhs = (
            -kinf.evaluate(cert.kappa, g)
            + kinf.evaluate(cert.rho_int, norm_inf(w - wp))
            + kinf.evaluate(cert.rho_ext, norm_inf(u - up))
        )
        if g_next - g > rhs + CHECK_TOL:
            bad.append(f"dissipation inequality fails at x={x.tolist()}, x'={xp.tolist()} (excess {g_next - g - rhs:.3g})")
        if norm_inf(sub.full_output(x) - sub.full_output(xp)) > kinf.evaluate(cert.lipschitz, d) + CHECK_TOL:
            bad.append(f"output Lipschitz bound fails at x={x.tolist()}, x'={xp.tolist()}")
        if g > cert.G(x, xpp) + kinf.evaluate(cert.gamma_hat, norm_inf(xp - xpp)) + CHECK_TOL:
            bad.append(f"triangle-type bound fails at x={x.tolist()}")
    return bad


# ----------------------------
# Загрузка из TOML
# ----------------------------

def _int_keys(table: Mapping[str, Any], where: str) -> Dict[int, Any]:
    out = {}
    for k, v in table.items():
        try:
            out[int(k)] = v
        except ValueError:
            raise ModelError(f"{where}: key {k!r} is not a subsystem index") from None
    return out


def _set(table: Mapping[str, Any], key: str, where: str, dim: Optional[int] = None) -> BoxUnion:
    try:
        return parse_box_union(table[key], dim)
    except GeometryError as exc:
        raise ModelError(f"{where}.{key}: {exc}") from None


def _exprs(items, variables, where: str) -> Tuple[Expr, ...]:
    if isinstance(items, str):
        items = [items]
    try:
        return tuple(parse_expr(t, variables) for t in items)
    except ParseError as exc:
        raise ModelError(f"{where}: {exc}") from None


def _subsystem_from_table(i: int, table: Mapping[str, Any]) -> SubsystemSpec:
    where = f"subsystem.{i}"
    for key in ("state_set", "dynamics", "certificate"):
        if key not in table:
            raise ModelError(f"{where}: missing {key}")
    X = _set(table, "state_set", where)
    if "initial_set" in table and _set(table, "initial_set", where, X.dim) != X:
        raise ModelError(f"{where}: the initial set must equal the state set")
    XS = _set(table, "secret_set", where, X.dim) if "secret_set" in table else BoxUnion.empty(X.dim)
    if not XS.is_empty and not XS.is_subset_of(X):
        raise ModelError(f"{where}: secret set {XS} is not inside the state set {X}")
    U = _set(table, "input_set", where) if "input_set" in table else BoxUnion((Box(()),), 0)

    internal = {j: parse_box_union(v) for j, v in _int_keys(table.get("internal_set", {}), where).items()}
    output_sets = {j: parse_box_union(v) for j, v in _int_keys(table.get("output_set", {}), where).items()}
    w_dim = sum(internal[j].dim for j in internal)

    variables = (
        [f"x{k + 1}" for k in range(X.dim)]
        + [f"u{k + 1}" for k in range(U.dim)]
        + [f"w{k + 1}" for k in range(w_dim)]
    )
    dynamics = _exprs(table["dynamics"], variables, f"{where}.dynamics")
    if len(dynamics) != X.dim:
        raise ModelError(f"{where}: {len(dynamics)} dynamics expressions for a {X.dim}-dimensional state")
    state_vars = variables[: X.dim]
    outputs = {
        j: _exprs(v, state_vars, f"{where}.output.{j}")
        for j, v in _int_keys(table.get("output", {}), where).items()
    }
    cert = certificate_from_table(table["certificate"], f"{where}.certificate")
    quant = {k: float(v) for k, v in table.get("quantization", {}).items()}
    return SubsystemSpec(i, X, XS, U, dynamics, outputs, internal, cert, output_sets, quant)


def network_from_dict(doc: Mapping[str, Any], validate: bool = True, samples: Optional[int] = None) -> NetworkSpec:
    net_table = doc.get("network", {})
    subs_raw = _int_keys(doc.get("subsystem", {}), "subsystem")
    if not subs_raw:
        raise ModelError("model declares no subsystems")
    subs = tuple(_subsystem_from_table(i, subs_raw[i]) for i in sorted(subs_raw))

    edges = set()
    for pair in net_table.get("edges", []):
        if len(pair) != 2:
            raise ModelError(f"edge {pair!r} must be [from, to]")
        j, i = int(pair[0]), int(pair[1])
        if i == j:
            raise ModelError(f"self-loop on subsystem {i}")
        edges.add((i, j))
    net = NetworkSpec(str(net_table.get("name", "network")), subs, frozenset(edges), net_table.get("precision"))

    index = set(net.vertices)
    for (i, j) in sorted(edges):
        if i not in index or j not in index:
            raise ModelError(f"edge {j} -> {i} references an undeclared subsystem")
        src, dst = net.sub(j), net.sub(i)
        block = src.outputs.get(i)
        if not block:
            raise ModelError(f"edge {j} -> {i}: subsystem {j} has no output block for {i}")
        if j not in dst.internal_sets:
            raise ModelError(f"edge {j} -> {i}: subsystem {i} declares no internal_set.{j}")
        if dst.internal_sets[j].dim != len(block):
            raise ModelError(f"edge {j} -> {i}: internal input dimension differs from output block dimension")
    for s in subs:
        extra = set(s.internal_sets) - set(net.pre(s.index))
        if extra:
            raise ModelError(f"subsystem {s.index}: internal inputs from {sorted(extra)} without matching edges")
        for j in s.outputs:
            if j != s.index and j not in net.post(s.index):
                raise ModelError(f"subsystem {s.index}: output block {j} feeds no edge")

    if all(not s.XS.is_empty and s.X.is_subset_of(s.XS) for s in subs):
        raise ModelError("initial set lies inside the secret set; opacity is trivially violated")

    if validate:
        for s in subs:
            bad = check_certificate(s, samples)
            if bad:
                raise CertificateError(s.index, bad)
    logger.info("[MODEL] loaded %s: %d subsystems, %d edges", net.name, len(subs), len(edges))
    return net


def load_network(path, validate: bool = True, samples: Optional[int] = None) -> NetworkSpec:
    p = Path(path)
    try:
        doc = tomllib.loads(p.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ModelError(f"{p}: {exc}") from None
    return network_from_dict(doc, validate, samples)


def model_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
