# relations.py
"""
Отношения симуляции, сохраняющие непрозрачность, и выборочная проверка
функций симуляции.

  max_relation               — наибольшее ε-отношение (неподвижная точка на булевой матрице)
  check_relation             — проверка пунктов 1–3 для заданного отношения
  levelset_relation          — отношение {(x, x̂) : G(x, x̂) ≤ ϖ}
  composed_function          — Ṽ(x, x̂) = maxᵢ (ϖ/ϖᵢ)·Gᵢ(xᵢ, x̂ᵢ)
  validate_sopsf             — пункты 1–3 для одной подсистемы и её абстракции
  validate_composed_function — пункт 3 для Ṽ и рассогласование внутренних входов

Выборка может только опровергнуть: нарушения на случайных точках
помечаются как sampled counterexample.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

import kinf
from abstraction import FiniteSystem, LocalGrid, local_grid, neighbor_values
from config import settings
from design import DesignResult, Quantization, check_notion
from model import IssCertificate, NetworkSpec, SubsystemSpec, interconnection_input, norm_inf


logger = logging.getLogger("opack.relations")

CHECK_TOL = 1e-9
MAX_COUNTEREXAMPLES = 10


# ----------------------------
# Отношения на конечных системах
# ----------------------------

@dataclass(frozen=True)
class ClauseViolation:
    clause: str
    detail: str


@dataclass
class OpRelation:
    notion: str
    epsilon: float
    # pairs[x, x̂]: пара в отношении
    pairs: np.ndarray
    violations: List[ClauseViolation] = field(default_factory=list)
    validated: bool = False

    @property
    def ok(self) -> bool:
        return self.validated and not self.violations

    def __bool__(self) -> bool:
        return bool(self.ok)

    def __contains__(self, pair) -> bool:
        x, xh = pair
        return bool(self.pairs[x, xh])

    @property
    def size(self) -> int:
        return int(self.pairs.sum())

    @property
    def failed_clauses(self) -> Tuple[str, ...]:
        return tuple(sorted({v.clause for v in self.violations}))

    def pair_list(self) -> List[Tuple[int, int]]:
        return [(int(a), int(b)) for a, b in zip(*np.nonzero(self.pairs))]

    def to_dict(self) -> dict:
        return {
            "notion": self.notion,
            "epsilon": self.epsilon,
            "ok": self.ok,
            "pairs": [list(p) for p in self.pair_list()],
            "violations": [{"clause": v.clause, "detail": v.detail} for v in self.violations],
        }


def _check_pair_systems(t: FiniteSystem, that: FiniteSystem) -> None:
    for s in (t, that):
        if s.internal_values:
            raise ValueError(f"{s.name}: relations need systems without internal inputs")
    if t.outputs.shape[1] != that.outputs.shape[1]:
        raise ValueError(f"output dimensions differ: {t.outputs.shape[1]} vs {that.outputs.shape[1]}")


def _close_pairs(t: FiniteSystem, that: FiniteSystem, epsilon: float) -> np.ndarray:
    if t.outputs.shape[1] == 0:
        return np.ones((t.n_states, that.n_states), dtype=bool)
    d = np.max(np.abs(t.outputs[:, None, :] - that.outputs[None, :, :]), axis=2)
    return d <= epsilon + CHECK_TOL


def _mask(n: int, states) -> np.ndarray:
    m = np.zeros(n, dtype=bool)
    m[sorted(states)] = True
    return m


def _forward(A: np.ndarray, Ah: np.ndarray, R: np.ndarray) -> np.ndarray:
    """∀x_d ∈ post(x) ∃x̂_d ∈ post(x̂): (x_d, x̂_d) ∈ R."""
    reach = (R.astype(np.int64) @ Ah.T.astype(np.int64)) > 0  # [x_d, x̂]
    return ~((A.astype(np.int64) @ (~reach).astype(np.int64)) > 0)


def _backward(A: np.ndarray, Ah: np.ndarray, R: np.ndarray) -> np.ndarray:
    """∀x̂_d ∈ post(x̂) ∃x_d ∈ post(x): (x_d, x̂_d) ∈ R."""
    reach = (A.astype(np.int64) @ R.astype(np.int64)) > 0  # [x, x̂_d]
    return ~(((~reach).astype(np.int64) @ Ah.T.astype(np.int64)) > 0)


class _Clauses:
    """Пункты 3 для выбранного понятия; входы в кванторах не участвуют."""

    def __init__(self, t: FiniteSystem, that: FiniteSystem, notion: str):
        self.notion = notion
        self.A = t.adjacency()
        self.Ah = that.adjacency()
        self.S = _mask(t.n_states, t.secret)
        self.Sh = _mask(that.n_states, that.secret)
        self.post = [set(t.post(x)) for x in range(t.n_states)]
        self.post_h = [set(that.post(x)) for x in range(that.n_states)]

    def names(self) -> Tuple[str, ...]:
        return ("3a", "3b") if self.notion == "init" else ("3a", "3b", "3c", "3d")

    def batch(self, R: np.ndarray) -> Dict[str, np.ndarray]:
        A, Ah, S, Sh = self.A, self.Ah, self.S, self.Sh
        if self.notion == "init":
            return {"3a": _forward(A, Ah, R), "3b": _backward(A, Ah, R)}
        return {
            "3a": _forward(A, Ah, R),
            "3b": _forward(A & S[None, :], Ah & Sh[None, :], R),
            "3c": _backward(A, Ah, R),
            "3d": _backward(A & ~S[None, :], Ah & ~Sh[None, :], R),
        }

    def pair(self, R: np.ndarray, x: int, xh: int) -> Optional[str]:
        """Первый нарушенный пункт для пары или None."""
        post, post_h = self.post[x], self.post_h[xh]
        S, Sh = self.S, self.Sh

        def fwd(xs, xhs) -> bool:
            return all(any(R[a, b] for b in xhs) for a in xs)

        def bwd(xs, xhs) -> bool:
            return all(any(R[a, b] for a in xs) for b in xhs)

        if self.notion == "init":
            checks = (("3a", fwd(post, post_h)), ("3b", bwd(post, post_h)))
        else:
            sec = {a for a in post if S[a]}
            sec_h = {b for b in post_h if Sh[b]}
            pub = post - sec
            pub_h = post_h - sec_h
            checks = (
                ("3a", fwd(post, post_h)),
                ("3b", fwd(sec, sec_h)),
                ("3c", bwd(post, post_h)),
                ("3d", bwd(pub, pub_h)),
            )
        for name, ok in checks:
            if not ok:
                return name
        return None


def _initial_violations(t: FiniteSystem, that: FiniteSystem, R: np.ndarray, notion: str) -> List[ClauseViolation]:
    X0, S = t.initial, t.secret
    Xh0, Sh = that.initial, that.secret
    out: List[ClauseViolation] = []

    def cover(label: str, rows, cols) -> None:
        cols = sorted(cols)
        for x in sorted(rows):
            if not cols or not R[x, cols].any():
                out.append(ClauseViolation(label, f"state {t.labels[x]} has no related abstract initial state"))

    def cover_back(label: str, rows, cols) -> None:
        rows = sorted(rows)
        for xh in sorted(cols):
            if not rows or not R[rows, xh].any():
                out.append(ClauseViolation(label, f"state {that.labels[xh]} has no related concrete initial state"))

    if notion == "init":
        cover("1a", X0 & S, Xh0 & Sh)
        cover_back("1b", X0 - S, Xh0 - Sh)
    elif notion == "current":
        cover("1", X0, Xh0)
    else:
        cover("1a", X0, Xh0)
        cover("1b", X0 & S, Xh0 & Sh)
        cover_back("1c", X0 - S, Xh0 - Sh)
    return out


def max_relation(
    t: FiniteSystem,
    that: FiniteSystem,
    epsilon: float,
    notion: str = "init",
    strategy: str = "batch",
) -> OpRelation:
    """Наибольшее отношение; при неудаче violations называют нарушенный пункт 1."""
    notion = check_notion(notion)
    _check_pair_systems(t, that)
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    clauses = _Clauses(t, that, notion)
    R = _close_pairs(t, that, epsilon)
    start = int(R.sum())

    if strategy == "batch":
        while True:
            keep = R.copy()
            for ok in clauses.batch(R).values():
                keep &= ok
            if np.array_equal(keep, R):
                break
            R = keep
    elif strategy == "worklist":
        pre = [[] for _ in range(t.n_states)]
        pre_h = [[] for _ in range(that.n_states)]
        for x in range(t.n_states):
            for y in t.post(x):
                pre[y].append(x)
        for x in range(that.n_states):
            for y in that.post(x):
                pre_h[y].append(x)
        # обратный порядок обхода
        queue = deque(reversed(list(zip(*np.nonzero(R)))))
        while queue:
            x, xh = queue.popleft()
            if not R[x, xh] or clauses.pair(R, x, xh) is None:
                continue
            R[x, xh] = False
            for p in pre[x]:
                for ph in pre_h[xh]:
                    if R[p, ph]:
                        queue.append((p, ph))
    else:
        raise ValueError(f"unknown refinement strategy {strategy!r}")

    violations = _initial_violations(t, that, R, notion)
    logger.info(
        "[RELATION] %s: %d of %d close pairs survive (epsilon=%g, %s); %s",
        notion, int(R.sum()), start, epsilon, strategy,
        "ok" if not violations else "fails " + ",".join(sorted({v.clause for v in violations})),
    )
    return OpRelation(notion, epsilon, R, violations, validated=True)


def check_relation(
    t: FiniteSystem,
    that: FiniteSystem,
    pairs: np.ndarray,
    epsilon: float,
    notion: str = "init",
    initial: bool = True,
) -> List[ClauseViolation]:
    """Все нарушения пунктов 1 (если initial), 2 и 3 для заданного отношения."""
    notion = check_notion(notion)
    _check_pair_systems(t, that)
    R = np.asarray(pairs, dtype=bool)
    out: List[ClauseViolation] = []
    close = _close_pairs(t, that, epsilon)
    for x, xh in zip(*np.nonzero(R & ~close)):
        out.append(ClauseViolation("2", f"outputs of ({t.labels[x]}, {that.labels[xh]}) differ by more than {epsilon:g}"))
    clauses = _Clauses(t, that, notion)
    for name, ok in clauses.batch(R).items():
        for x, xh in zip(*np.nonzero(R & ~ok)):
            out.append(ClauseViolation(name, f"pair ({t.labels[x]}, {that.labels[xh]})"))
    if initial:
        out.extend(_initial_violations(t, that, R, notion))
    return out


PairFunction = Callable[[np.ndarray, np.ndarray], float]


def levelset_relation(
    t: FiniteSystem,
    that: FiniteSystem,
    G: PairFunction,
    varpi: float,
    alpha: Optional[kinf.MonotoneFn] = None,
    notion: str = "init",
) -> OpRelation:
    """{(x, x̂) : G(x, x̂) ≤ ϖ} с ε = α⁻¹(ϖ); пункты не проверяются."""
    eps = varpi if alpha is None else kinf.evaluate(kinf.inverse(alpha), varpi)
    R = np.zeros((t.n_states, that.n_states), dtype=bool)
    for a in range(t.n_states):
        for b in range(that.n_states):
            R[a, b] = G(t.points[a], that.points[b]) <= varpi + CHECK_TOL
    return OpRelation(check_notion(notion), eps, R)


def composed_function(net: NetworkSpec, design: DesignResult) -> PairFunction:
    """Ṽ(x, x̂) = maxᵢ (ϖ/ϖᵢ)·Gᵢ(xᵢ, x̂ᵢ) на сетевых векторах состояния."""
    parts = [
        (sl, s.certificate, design.varpi / design.subsystems[s.index].varpi)
        for s, sl in zip(net.subsystems, net.state_slices)
    ]

    def V(x, xh) -> float:
        x = np.asarray(x, dtype=float).reshape(-1)
        xh = np.asarray(xh, dtype=float).reshape(-1)
        return max(w * c.G(x[sl], xh[sl]) for sl, c, w in parts)
    return V


# ----------------------------
# Выборочная проверка
# ----------------------------

@dataclass
class ValidationReport:
    kind: str
    notion: str
    varpi: float
    vartheta: float
    checked: Dict[str, int] = field(default_factory=dict)
    failed: Dict[str, int] = field(default_factory=dict)
    # max(значение − граница) по пункту; пункт выполнен при ≤ 0
    worst: Dict[str, float] = field(default_factory=dict)
    counterexamples: List[str] = field(default_factory=list)
    sampled_failures: int = 0
    skipped: Dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not any(self.failed.values())

    def failures(self, prefix: str = "") -> int:
        return sum(n for c, n in self.failed.items() if c.startswith(prefix))

    def tally(self, clause: str, value: float, bound: float, sampled: bool, where: str) -> None:
        margin = value - bound
        self.checked[clause] = self.checked.get(clause, 0) + 1
        self.failed.setdefault(clause, 0)
        self.worst[clause] = max(self.worst.get(clause, -math.inf), margin)
        if margin > CHECK_TOL:
            self.failed[clause] += 1
            if sampled:
                self.sampled_failures += 1
            if len(self.counterexamples) < MAX_COUNTEREXAMPLES:
                tag = "sampled counterexample" if sampled else "grid counterexample"
                self.counterexamples.append(f"{tag}: clause {clause} {where} ({value:.6g} > {bound:.6g})")

    def skip(self, reason: str) -> None:
        self.skipped[reason] = self.skipped.get(reason, 0) + 1

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "notion": self.notion,
            "varpi": self.varpi,
            "vartheta": self.vartheta,
            "passed": self.passed,
            "checked": dict(sorted(self.checked.items())),
            "failed": dict(sorted(self.failed.items())),
            "worst_margin": {k: (v if math.isfinite(v) else None) for k, v in sorted(self.worst.items())},
            "sampled_failures": self.sampled_failures,
            "skipped": dict(sorted(self.skipped.items())),
            "counterexamples": list(self.counterexamples),
        }


class _AbstractView:
    """Единый доступ к FiniteSystem и LocalGrid подсистемы."""

    def __init__(self, system: Union[FiniteSystem, LocalGrid]):
        self.system = system
        if isinstance(system, LocalGrid):
            self.points = system.states.points
            self.secret = system.secret
            self.inputs = system.inputs
            self.values = {j: system.internal_values[j] for j in system.sub.predecessors}
        else:
            self.points = system.points
            self.secret = system.secret
            self.inputs = system.inputs
            self.values = {j: system.internal_values[j] for j in sorted(system.internal_values)}
        self.order = sorted(self.values)
        self.shape = tuple(len(self.values[j]) for j in self.order)
        self._cache: Dict[Tuple[int, int, int], Tuple[int, ...]] = {}

    @property
    def n_internal(self) -> int:
        return int(np.prod(self.shape)) if self.order else 1

    def internal_vector(self, w_idx: int) -> np.ndarray:
        if not self.order:
            return np.zeros(0)
        blocks = np.unravel_index(w_idx, self.shape)
        return np.concatenate([self.values[j][b] for j, b in zip(self.order, blocks)])

    def w_index(self, blocks: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(blocks), self.shape)) if self.order else 0

    def successors(self, x: int, u: int, w_idx: int) -> Tuple[int, ...]:
        key = (x, u, w_idx)
        if key not in self._cache:
            if isinstance(self.system, LocalGrid):
                self._cache[key] = self.system.successors(x, u, self.internal_vector(w_idx))
            else:
                self._cache[key] = self.system.successors(x, u, w_idx)
        return self._cache[key]


def _g_many(cert: IssCertificate, x: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """G(x, p) для всех строк pts."""
    d = np.asarray(x, dtype=float).reshape(1, -1) - pts
    if d.shape[1] == 0:
        return np.zeros(len(pts))
    if cert.form == "sup":
        return np.max(np.abs(d), axis=1)
    P = np.asarray(cert.P, dtype=float)
    return np.sqrt(np.maximum(np.einsum("ki,ij,kj->k", d, P, d), 0.0))


def _concrete_inputs(sub: SubsystemSpec, view: _AbstractView, rng, n: int) -> Tuple[np.ndarray, bool]:
    """Конкретные входы для кванторов по u и флаг «выборка»."""
    if sub.U.is_finite:
        return sub.U.points(), False
    extra = sub.U.sample(rng, n)
    return np.vstack([view.inputs, extra]), True


def validate_sopsf(
    sub: SubsystemSpec,
    abstraction: Union[FiniteSystem, LocalGrid],
    cert: Optional[IssCertificate],
    varpi: float,
    vartheta: float,
    notion: str = "init",
    samples: Optional[int] = None,
    seed: Optional[int] = None,
    w_samples: int = 4,
    u_samples: int = 4,
) -> ValidationReport:
    notion = check_notion(notion)
    cert = cert or sub.certificate
    samples = settings.samples if samples is None else samples
    rng = np.random.default_rng(settings.seed if seed is None else seed)
    view = _AbstractView(abstraction)
    pts = view.points
    report = ValidationReport("sopsf", notion, varpi, vartheta)
    bound = varpi + CHECK_TOL

    def secret_x(x) -> bool:
        return not sub.XS.is_empty and sub.XS.contains(x)

    concrete = [(p, False) for p in pts if sub.X.contains(p)]
    concrete += [(p, True) for p in sub.X.sample(rng, samples)]
    public = sub.X.difference(sub.XS)
    public_pool = public.sample(rng, samples) if not public.is_empty else np.zeros((0, sub.state_dim))
    abs_secret = sorted(view.secret)
    abs_public = [k for k in range(len(pts)) if k not in view.secret]

    # пункт 1
    def cover(label: str, xs, cols) -> None:
        for x, sampled in xs:
            g = _g_many(cert, x, pts[cols]) if cols else np.array([math.inf])
            report.tally(label, float(np.min(g)), varpi, sampled, f"at x0={np.round(x, 6).tolist()}")

    def cover_back(label: str) -> None:
        for k in abs_public:
            cands = [p for p in [pts[k]] if public.contains(p)]
            pool = np.vstack(cands + [public_pool]) if cands else public_pool
            g = _g_many(cert, pts[k], pool) if len(pool) else np.array([math.inf])
            report.tally(label, float(np.min(g)), varpi, not cands, f"at abstract x0={np.round(pts[k], 6).tolist()}")

    secret_samples = [(x, s) for x, s in concrete if secret_x(x)]
    all_idx = list(range(len(pts)))
    if notion == "init":
        cover("1a", secret_samples, abs_secret)
        cover_back("1b")
    elif notion == "current":
        cover("1", concrete, all_idx)
    else:
        cover("1a", concrete, all_idx)
        cover("1b", secret_samples, abs_secret)
        cover_back("1c")

    # пункты 2 и 3
    alpha = cert.alpha
    us, u_sampled = _concrete_inputs(sub, view, rng, u_samples)
    if sub.predecessors:
        w_exact = [view.internal_vector(k) for k in range(view.n_internal)]
        ws = [(w, False) for w in w_exact] + [(w, True) for w in sub.sample_w(rng, w_samples)]
        w_hat = np.vstack(w_exact)
    else:
        ws = [(np.zeros(0), False)]
        w_hat = np.zeros((1, 0))
    names = {"init": ("3a", None, "3b", None)}.get(notion, ("3a", "3b", "3c", "3d"))

    for x, x_sampled in concrete:
        g0 = _g_many(cert, x, pts)
        related = np.flatnonzero(g0 <= bound)
        hx = sub.full_output(x)
        for k in related:
            d_out = norm_inf(hx - sub.full_output(pts[k]))
            report.tally("2", kinf.evaluate(alpha, d_out), float(g0[k]), x_sampled, f"at x={np.round(x, 6).tolist()}")
            for w, w_sampled in ws:
                dw = np.max(np.abs(w_hat - w), axis=1) if w_hat.shape[1] else np.zeros(1)
                sampled = x_sampled or w_sampled
                for w_idx in np.flatnonzero(dw <= vartheta + CHECK_TOL):
                    w_idx = int(w_idx)
                    succ = {ui: view.successors(int(k), ui, w_idx) for ui in range(len(view.inputs))}
                    all_succ = sorted({s for ss in succ.values() for s in ss})
                    sec_succ = [s for s in all_succ if s in view.secret]
                    where = f"at x={np.round(x, 6).tolist()}, x̂={np.round(pts[k], 6).tolist()}, w={np.round(w, 6).tolist()}"
                    xds = np.vstack([sub.evaluate(x, u, w) for u in us])
                    for xd in xds:
                        g = _g_many(cert, xd, pts[all_succ]) if all_succ else np.array([math.inf])
                        report.tally(names[0], float(np.min(g)), varpi, sampled, where)
                        if names[1] and secret_x(xd):
                            g = _g_many(cert, xd, pts[sec_succ]) if sec_succ else np.array([math.inf])
                            report.tally(names[1], float(np.min(g)), varpi, sampled, where)
                    pub_xds = np.array([xd for xd in xds if not secret_x(xd)]).reshape(-1, xds.shape[1])
                    for s in all_succ:
                        report.tally(names[2], float(np.min(_g_many(cert, pts[s], xds))), varpi, sampled or u_sampled, where)
                        if names[3] and s not in view.secret:
                            g = _g_many(cert, pts[s], pub_xds) if len(pub_xds) else np.array([math.inf])
                            report.tally(names[3], float(np.min(g)), varpi, sampled or u_sampled, where)

    logger.info(
        "[RELATION] subsystem %d (%s): %s, %d checks, %d failures",
        sub.index, notion, "pass" if report.passed else "FAIL",
        sum(report.checked.values()), report.failures(),
    )
    return report


def validate_composed_function(
    net: NetworkSpec,
    design: DesignResult,
    quantization: Optional[Mapping[int, Quantization]] = None,
    abstractions: Optional[Sequence[FiniteSystem]] = None,
    samples: Optional[int] = None,
    seed: Optional[int] = None,
) -> ValidationReport:
    """Пункт 3 для Ṽ и ‖wᵢ − ŵᵢ‖ ≤ ϑᵢ на случайных парах (x, x̂) с Ṽ ≤ ϖ.

    Без готовых абстракций переходы считаются лениво по локальным сеткам.
    """
    quantization = quantization or design.quantization
    if not quantization:
        raise ValueError("no quantization parameters: run choose_quantization first")
    samples = settings.samples if samples is None else samples
    rng = np.random.default_rng(settings.seed if seed is None else seed)
    notion = design.notion or "init"
    report = ValidationReport("composed", notion, design.varpi, min(d.vartheta for d in design.subsystems.values()))

    if abstractions is not None:
        views = {s.index: _AbstractView(a) for s, a in zip(net.subsystems, abstractions)}
    else:
        values = neighbor_values(net, quantization)
        views = {
            s.index: _AbstractView(local_grid(s, quantization[s.index], values[s.index], strict=False))
            for s in net.subsystems
        }
    varpi = design.varpi
    weight = {i: varpi / d.varpi for i, d in design.subsystems.items()}

    for _ in range(samples):
        xs = {s.index: s.X.sample(rng, 1)[0] for s in net.subsystems}
        xh: Dict[int, int] = {}
        for s in net.subsystems:
            i = s.index
            g = _g_many(s.certificate, xs[i], views[i].points)
            near = np.flatnonzero(g <= design.subsystems[i].varpi + CHECK_TOL)
            if near.size == 0:
                break
            xh[i] = int(rng.choice(near))
        else:
            _check_network_sample(net, design, quantization, views, weight, xs, xh, rng, report)
            continue
        report.skip("no related abstract state")

    logger.info(
        "[RELATION] %s composed function: %s, %d checks, %d failures, skipped %s",
        net.name, "pass" if report.passed else "FAIL",
        sum(report.checked.values()), report.failures(), dict(report.skipped),
    )
    return report


def _check_network_sample(net, design, quantization, views, weight, xs, xh, rng, report) -> None:
    varpi = design.varpi
    where = "at x=" + str({i: np.round(v, 6).tolist() for i, v in xs.items()})
    w_idx: Dict[int, int] = {}
    for s in net.subsystems:
        i, view = s.index, views[s.index]
        blocks = []
        for j in view.order:
            target = net.sub(j).output(views[j].points[xh[j]], i)
            vals = view.values[j]
            d = np.max(np.abs(vals - target), axis=1) if vals.shape[1] else np.zeros(len(vals))
            b = int(np.argmin(d))
            report.tally("interconnection", float(d[b]), quantization[i].phi.get(j, 0.0), True, where)
            blocks.append(b)
        w_idx[i] = view.w_index(blocks)
        w = interconnection_input(net, i, xs)
        report.tally(
            "internal-mismatch", norm_inf(w - view.internal_vector(w_idx[i])),
            design.subsystems[i].vartheta, True, f"{where}, subsystem {i}",
        )

    step_values: List[float] = []
    back_values: List[float] = []
    for s in net.subsystems:
        i, view, cert = s.index, views[s.index], s.certificate
        w = interconnection_input(net, i, xs)
        u = s.U.sample(rng, 1)[0]
        du = np.max(np.abs(view.inputs - u), axis=1) if view.inputs.shape[1] else np.zeros(len(view.inputs))
        ui = int(np.argmin(du))
        xd = s.evaluate(xs[i], u, w)
        if not s.X.contains(xd):
            report.skip("successor outside the state set")
            return
        succ = view.successors(xh[i], ui, w_idx[i])
        if not succ:
            report.skip("abstract successor outside the grid")
            return
        step_values.append(weight[i] * float(np.min(_g_many(cert, xd, view.points[list(succ)]))))
        # û ∈ U: конкретный шаг с тем же входом
        xd_hat_input = s.evaluate(xs[i], view.inputs[ui], w)
        back_values.append(weight[i] * float(np.max(_g_many(cert, xd_hat_input, view.points[list(succ)]))))
    report.tally("3a", max(step_values), varpi, True, where)
    report.tally("3b", max(back_values), varpi, True, where)
