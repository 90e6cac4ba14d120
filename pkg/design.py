# design.py
"""
Граф связей, SCC/BSCC, малый коэффициент усиления и композиционный подбор
локальных параметров (ϖᵢ, ϑᵢ, φᵢⱼ), а также границы квантования ηᵢ и θᵢ.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

import kinf
from config import settings
from geometry import boxspan
from model import IssCertificate, NetworkSpec, SubsystemSpec


logger = logging.getLogger("opack.design")

NOTIONS = ("init", "current", "inf")
BOUND_TOL = 1e-12


class InfeasibleDesign(ValueError):
    def __init__(self, message: str, step: Optional[str] = None):
        super().__init__(f"{message} [{step}]" if step else message)
        self.step = step


class SmallGainViolation(InfeasibleDesign):
    def __init__(self, cycle: Sequence[int], product: float):
        path = " -> ".join(str(v) for v in list(cycle) + [cycle[0]])
        super().__init__(f"small-gain condition violated on cycle {path} (gain product {product:.6g} >= 1)")
        self.cycle = tuple(cycle)
        self.product = product


def check_notion(notion: str) -> str:
    n = {"infinite": "inf"}.get(notion, notion)
    if n not in NOTIONS:
        raise ValueError(f"unknown opacity notion {notion!r}; expected one of {', '.join(NOTIONS)}")
    return n


# ----------------------------
# Граф и SCC
# ----------------------------

@dataclass(frozen=True)
class InterconnectionGraph:
    vertices: Tuple[int, ...]
    # (i, j): j ∈ Pre(i)
    edges: FrozenSet[Tuple[int, int]]

    @classmethod
    def from_network(cls, net: NetworkSpec) -> "InterconnectionGraph":
        return cls(net.vertices, net.edges)

    def pre(self, i: int) -> Tuple[int, ...]:
        return tuple(sorted(j for (k, j) in self.edges if k == i))

    def post(self, i: int) -> Tuple[int, ...]:
        return tuple(sorted(k for (k, j) in self.edges if j == i))


@dataclass(frozen=True)
class SccDecomposition:
    components: Tuple[Tuple[int, ...], ...]
    component_of: Dict[int, int]
    # рёбра конденсации по направлению информации: (a, b) — компонента a питает b
    dag_edges: FrozenSet[Tuple[int, int]]

    @property
    def bottom(self) -> Tuple[int, ...]:
        sources = {a for (a, b) in self.dag_edges}
        return tuple(k for k in range(len(self.components)) if k not in sources)


def tarjan_scc(graph: InterconnectionGraph) -> SccDecomposition:
    """Итеративный Тарьян по потоку информации j -> i."""
    for (i, j) in graph.edges:
        if i == j:
            raise InfeasibleDesign(f"self-loop on vertex {i}")
    succ: Dict[int, List[int]] = {v: [] for v in graph.vertices}
    for (i, j) in sorted(graph.edges):
        succ[j].append(i)

    BEGIN, CONTINUE, RETURN = 0, 1, 2
    index: Dict[int, int] = {}
    low: Dict[int, int] = {}
    on_stack: Dict[int, int] = {}
    stack: List[int] = []
    found: List[List[int]] = []
    counter = 0

    for root in sorted(graph.vertices):
        if root in index:
            continue
        work = [(root, None, 0, BEGIN)]
        while work:
            v, w, k, state = work.pop()
            if state == BEGIN:
                counter += 1
                index[v] = low[v] = counter
                on_stack[v] = len(stack)
                stack.append(v)
                work.append((v, None, 0, CONTINUE))
            elif state == CONTINUE:
                if k == len(succ[v]):
                    if low[v] == index[v]:
                        pos = on_stack[v]
                        comp = stack[pos:]
                        del stack[pos:]
                        for n in comp:
                            del on_stack[n]
                        found.append(comp)
                else:
                    w = succ[v][k]
                    if w not in index:
                        work.append((v, w, k, RETURN))
                        work.append((w, None, 0, BEGIN))
                    else:
                        if w in on_stack:
                            low[v] = min(low[v], index[w])
                        work.append((v, None, k + 1, CONTINUE))
            else:
                low[v] = min(low[v], low[w])
                work.append((v, None, k + 1, CONTINUE))

    components = tuple(sorted((tuple(sorted(c)) for c in found), key=lambda c: c[0]))
    component_of = {v: n for n, comp in enumerate(components) for v in comp}
    dag = frozenset(
        (component_of[j], component_of[i]) for (i, j) in graph.edges if component_of[i] != component_of[j]
    )
    logger.debug("[DESIGN] SCCs: %s", components)
    return SccDecomposition(components, component_of, dag)


# ----------------------------
# Малый коэффициент усиления
# ----------------------------

GainMatrix = Dict[Tuple[int, int], kinf.MonotoneFn]


def gain_matrix(net: NetworkSpec, vertices: Sequence[int]) -> GainMatrix:
    """γᵢⱼ = κᵢ⁻¹∘ρ_int,i∘αⱼ⁻¹ для j ∈ Pre(i) внутри компоненты, иначе Zero."""
    inside = set(vertices)
    gains: GainMatrix = {}
    for i in vertices:
        ci = net.sub(i).certificate
        for j in vertices:
            if i == j:
                continue
            if j in net.pre(i) and j in inside:
                cj = net.sub(j).certificate
                gains[(i, j)] = kinf.compose_all(kinf.inverse(ci.kappa), ci.rho_int, kinf.inverse(cj.alpha))
            else:
                gains[(i, j)] = kinf.Zero()
    return gains


@dataclass(frozen=True)
class SmallGainResult:
    ok: bool
    cycle: Tuple[int, ...] = ()
    product: float = 0.0
    cycles_checked: int = 0
    sampled: bool = False

    def __bool__(self) -> bool:
        return bool(self.ok)


def _coefficients(vertices: Sequence[int], gains: GainMatrix) -> Optional[np.ndarray]:
    n = len(vertices)
    C = np.zeros((n, n))
    for a, i in enumerate(vertices):
        for b, j in enumerate(vertices):
            if i == j:
                continue
            c = kinf.linear_coefficient(gains.get((i, j), kinf.Zero()))
            if c is None:
                return None
            C[a, b] = c
    return C


def _max_cycle_gain(C: np.ndarray) -> float:
    """Максимум произведения по замкнутым путям длины ≤ n (max-times степени)."""
    n = C.shape[0]
    best = 0.0
    P = C.copy()
    for k in range(1, n + 1):
        best = max(best, float(np.max(np.diag(P))) ** (1.0 / k) if k else 0.0)
        P = np.max(P[:, :, None] * C[None, :, :], axis=1)
    return best


def check_small_gain(
    vertices: Sequence[int],
    gains: GainMatrix,
    sigma: Optional[Mapping[int, kinf.MonotoneFn]] = None,
) -> SmallGainResult:
    vertices = tuple(sorted(vertices))
    if len(vertices) < 2:
        return SmallGainResult(True)

    C = _coefficients(vertices, gains)
    if C is None:
        if not sigma or any(v not in sigma for v in vertices):
            raise kinf.KinfError("non-linear gain inside a cycle: supply sigma functions")
        return _check_sigma_sampled(vertices, gains, sigma)

    g = nx.DiGraph()
    g.add_nodes_from(vertices)
    for a, i in enumerate(vertices):
        for b, j in enumerate(vertices):
            if C[a, b] > 0:
                g.add_edge(j, i, gain=C[a, b])

    worst: Tuple[Tuple[int, ...], float] = ((), 0.0)
    count = 0
    for cyc in nx.simple_cycles(g):
        count += 1
        prod = 1.0
        for k, v in enumerate(cyc):
            prod *= g[v][cyc[(k + 1) % len(cyc)]]["gain"]
        if prod > worst[1]:
            worst = (tuple(cyc), prod)
    ok = worst[1] < 1.0

    # перекрёстная проверка через max-times степени матрицы
    spectral_ok = _max_cycle_gain(C) < 1.0
    if ok != spectral_ok:
        raise RuntimeError(f"small-gain verdicts disagree on {vertices}: cycles={ok}, max-times={spectral_ok}")
    return SmallGainResult(ok, worst[0] if not ok else (), worst[1], count)


def _check_sigma_sampled(vertices, gains, sigma) -> SmallGainResult:
    grid = np.geomspace(1e-6, 1e3, 400)
    for i in vertices:
        for j in vertices:
            g = gains.get((i, j), kinf.Zero())
            if isinstance(g, kinf.Zero):
                continue
            for r in grid:
                if kinf.evaluate(g, kinf.evaluate(sigma[j], r)) >= kinf.evaluate(sigma[i], r):
                    return SmallGainResult(False, (i, j), float("nan"), 0, sampled=True)
    logger.warning("[DESIGN] small-gain condition on %s checked on samples of the supplied sigma functions", vertices)
    return SmallGainResult(True, sampled=True)


def find_sigma(vertices: Sequence[int], gains: GainMatrix) -> Dict[int, kinf.MonotoneFn]:
    """σᵢ = sᵢ·s с max_j cᵢⱼ sⱼ < sᵢ; итерация Беллмана-Форда на логарифмах."""
    vertices = tuple(sorted(vertices))
    if len(vertices) < 2:
        return {v: kinf.identity() for v in vertices}
    C = _coefficients(vertices, gains)
    if C is None:
        raise kinf.KinfError("sigma functions can only be derived for linear gains; supply sigma functions")
    rho = _max_cycle_gain(C)
    if rho >= 1.0:
        raise InfeasibleDesign(f"small-gain condition violated on {vertices}; no sigma functions exist")
    lam = 1.0 / math.sqrt(rho) if rho > 0 else 2.0
    with np.errstate(divide="ignore"):
        L = np.log(lam * C)
    t = np.zeros(len(vertices))
    for _ in range(len(vertices) + 1):
        t_new = np.maximum(0.0, np.max(L + t[None, :], axis=1))
        if np.allclose(t_new, t, rtol=0, atol=1e-15):
            break
        t = t_new
    s = np.exp(t - t.max())
    for a in range(len(vertices)):
        for b in range(len(vertices)):
            if C[a, b] > 0 and not C[a, b] * s[b] < s[a]:
                raise InfeasibleDesign(f"sigma iteration failed to separate {vertices[a]} and {vertices[b]}")
    return {v: kinf.LinearGain(float(s[a])) for a, v in enumerate(vertices)}


# ----------------------------
# Границы квантования
# ----------------------------

def max_eta(
    cert: IssCertificate,
    varpi_i: float,
    vartheta_i: float,
    mu_i: float = 0.0,
    sub: Optional[SubsystemSpec] = None,
) -> float:
    budget = (
        kinf.evaluate(cert.kappa, varpi_i)
        - kinf.evaluate(cert.rho_int, vartheta_i)
        - kinf.evaluate(cert.rho_ext, mu_i)
    )
    if budget <= 0:
        raise InfeasibleDesign(
            f"infeasible precision split: kappa({varpi_i:.6g}) - rho_int({vartheta_i:.6g}) - rho_ext({mu_i:.6g}) = {budget:.3g}"
        )
    eta = min(kinf.evaluate(kinf.inverse(cert.gamma_hat), budget), kinf.evaluate(kinf.inverse(cert.alpha_upper), varpi_i))
    if sub is not None:
        rest = sub.X.difference(sub.XS)
        for part in (sub.XS, rest):
            if not part.is_empty:
                eta = min(eta, boxspan(part))
    return eta


def min_theta(cert: IssCertificate, varpi_i: float) -> float:
    if varpi_i <= 0:
        raise InfeasibleDesign(f"precision share must be positive, got {varpi_i}")
    return kinf.evaluate(kinf.inverse(cert.alpha_lower), varpi_i)


def epsilon_of(alpha: kinf.MonotoneFn, varpi: float) -> float:
    return kinf.evaluate(kinf.inverse(alpha), varpi)


def network_alpha(net: NetworkSpec) -> kinf.MonotoneFn:
    # α = ({maxᵢ αᵢ⁻¹})⁻¹
    return kinf.inverse(kinf.pointwise_max([kinf.inverse(s.certificate.alpha) for s in net.subsystems]))


# ----------------------------
# Результат подбора
# ----------------------------

@dataclass(frozen=True)
class Quantization:
    eta: float
    theta: float = 0.0
    mu: float = 0.0
    phi: Dict[int, float] = field(default_factory=dict)

    def __hash__(self) -> int:
        return hash((self.eta, self.theta, self.mu, tuple(sorted(self.phi.items()))))

    @classmethod
    def parse(cls, text: str, predecessors: Iterable[int] = ()) -> "Quantization":
        """"η,θ,μ,φ" — φ (по умолчанию 0) общий для всех предшественников."""
        parts = [p.strip() for p in text.split(",")]
        if len(parts) not in (3, 4):
            raise ValueError(f"quantization {text!r} must read 'eta,theta,mu[,phi]'")
        vals = [float(p) for p in parts] + [0.0] * (4 - len(parts))
        return cls(vals[0], vals[1], vals[2], {j: vals[3] for j in predecessors})

    def to_dict(self) -> dict:
        return {"eta": self.eta, "theta": self.theta, "mu": self.mu, "phi": {str(j): v for j, v in sorted(self.phi.items())}}


@dataclass
class SubsystemDesign:
    index: int
    varpi: float
    vartheta: float
    component: int
    stage: int
    sigma: float = 1.0
    eta_bound: float = 0.0
    theta_min: float = 0.0


@dataclass
class DesignResult:
    varpi: float
    requested: float
    subsystems: Dict[int, SubsystemDesign]
    # (i, j) -> φᵢⱼ
    phi: Dict[Tuple[int, int], float]
    components: Tuple[Tuple[int, ...], ...]
    stages: List[List[int]]
    notes: List[str] = field(default_factory=list)
    quantization: Dict[int, Quantization] = field(default_factory=dict)
    notion: Optional[str] = None

    def phi_of(self, i: int) -> Dict[int, float]:
        return {j: v for (k, j), v in sorted(self.phi.items()) if k == i}

    def to_dict(self) -> dict:
        return {
            "varpi": self.varpi,
            "requested_varpi": self.requested,
            "notion": self.notion,
            "components": [list(c) for c in self.components],
            "stages": [[list(self.components[k]) for k in st] for st in self.stages],
            "subsystems": {
                str(i): {
                    "varpi": d.varpi,
                    "vartheta": d.vartheta,
                    "component": d.component,
                    "stage": d.stage,
                    "sigma": d.sigma,
                    "eta_bound": d.eta_bound,
                    "theta_min": d.theta_min,
                    "quantization": self.quantization[i].to_dict() if i in self.quantization else None,
                }
                for i, d in sorted(self.subsystems.items())
            },
            "phi": {f"{i},{j}": v for (i, j), v in sorted(self.phi.items())},
            "notes": list(self.notes),
        }


def check_composability(result: DesignResult, net: NetworkSpec) -> List[str]:
    """αⱼ⁻¹(ϖⱼ) + φᵢⱼ ≤ ϑᵢ для всех рёбер; пустой список — условие выполнено."""
    bad = []
    for s in net.subsystems:
        i = s.index
        for j in net.pre(i):
            lhs = epsilon_of(net.sub(j).certificate.alpha, result.subsystems[j].varpi) + result.phi.get((i, j), 0.0)
            rhs = result.subsystems[i].vartheta
            if lhs > rhs + BOUND_TOL:
                bad.append(f"edge {j} -> {i}: {lhs:.6g} > vartheta_{i} = {rhs:.6g}")
    return bad


# ----------------------------
# Композиционный подбор параметров
# ----------------------------

def _inv(f: kinf.MonotoneFn, y: float) -> float:
    return kinf.evaluate(kinf.inverse(f), y)


def _vartheta_cap(cert: IssCertificate, varpi_i: float) -> float:
    """ρ_int⁻¹∘κ(ϖᵢ); бесконечность, если ρ_int ≡ 0."""
    if isinstance(cert.rho_int, kinf.Zero):
        return math.inf
    return _inv(cert.rho_int, kinf.evaluate(cert.kappa, varpi_i))


def design_parameters(
    net: NetworkSpec,
    varpi: float,
    sigma: Optional[Mapping[int, kinf.MonotoneFn]] = None,
    phi_fraction: Optional[float] = None,
    theta_fraction: Optional[float] = None,
) -> DesignResult:
    if varpi <= 0:
        raise InfeasibleDesign(f"network precision must be positive, got {varpi}")
    phi_fraction = settings.phi_fraction if phi_fraction is None else phi_fraction
    theta_fraction = settings.theta_fraction if theta_fraction is None else theta_fraction
    if not (0 <= phi_fraction < 1) or not (0 < theta_fraction < 1):
        raise InfeasibleDesign("slack fractions must satisfy 0 <= phi < 1 and 0 < theta < 1")

    graph = InterconnectionGraph.from_network(net)
    scc = tarjan_scc(graph)
    cert = {s.index: s.certificate for s in net.subsystems}

    sig: Dict[int, kinf.MonotoneFn] = {}
    for comp in scc.components:
        if len(comp) == 1:
            sig[comp[0]] = (sigma or {}).get(comp[0], kinf.identity())
            continue
        gains = gain_matrix(net, comp)
        supplied = {v: (sigma or {}).get(v) or cert[v].sigma for v in comp}
        supplied = {v: f for v, f in supplied.items() if f is not None}
        verdict = check_small_gain(comp, gains, supplied or None)
        if not verdict:
            raise SmallGainViolation(verdict.cycle, verdict.product)
        sig.update(supplied if len(supplied) == len(comp) else find_sigma(comp, gains))

    varpis: Dict[int, float] = {}
    varthetas: Dict[int, float] = {}
    phi: Dict[Tuple[int, int], float] = {}
    stage_of: Dict[int, int] = {}
    notes: List[str] = []
    stages: List[List[int]] = []
    remaining = set(range(len(scc.components)))

    def in_comp(i: int, comp: Tuple[int, ...]) -> bool:
        return i in comp

    while remaining:
        first = not stages
        bottoms = sorted(
            k for k in remaining
            if not any(a == k and b in remaining for (a, b) in scc.dag_edges)
        )
        stages.append(bottoms)
        for k in bottoms:
            comp = scc.components[k]
            step = f"{'cyclic' if len(comp) > 1 else 'singleton'} component, {'first' if first else 'later'} pass"

            if len(comp) > 1:
                top = kinf.pointwise_max([sig[i] for i in comp])
                r = _inv(top, varpi)
                if not first:
                    for i in comp:
                        outside = [j for j in graph.post(i) if not in_comp(j, comp)]
                        if not outside:
                            continue
                        budget = min(varthetas[j] - phi[(j, i)] for j in outside)
                        if budget <= 0:
                            raise InfeasibleDesign(f"no admissible precision share for subsystem {i}", step)
                        r = min(r, _inv(sig[i], kinf.evaluate(cert[i].alpha, budget)))
                        if len(outside) > 1:
                            notes.append(f"subsystem {i}: budget is the minimum over successors {outside}")
                for i in comp:
                    varpis[i] = kinf.evaluate(sig[i], r)
                for i in comp:
                    inner = [j for j in graph.pre(i) if in_comp(j, comp)]
                    need = max(_inv(cert[j].alpha, varpis[j]) for j in inner)
                    bound = _vartheta_cap(cert[i], varpis[i]) - need
                    if bound <= 0:
                        raise InfeasibleDesign(
                            f"subsystem {i}: rho_int^-1(kappa(varpi)) - max alpha_j^-1(varpi_j) = {bound:.3g} <= 0", step
                        )
                    for j in inner:
                        phi[(i, j)] = 0.0 if math.isinf(bound) else phi_fraction * bound
                    varthetas[i] = max(_inv(cert[j].alpha, varpis[j]) + phi[(i, j)] for j in inner)
            else:
                i = comp[0]
                if first:
                    varpis[i] = varpi
                else:
                    succ = graph.post(i)
                    budget = min(varthetas[j] - phi[(j, i)] for j in succ)
                    if budget <= 0:
                        raise InfeasibleDesign(f"no admissible precision share for subsystem {i}", step)
                    varpis[i] = min(varpi, kinf.evaluate(cert[i].alpha, budget))
                    if len(succ) > 1:
                        notes.append(f"subsystem {i}: budget is the minimum over successors {list(succ)}")
                cap = _vartheta_cap(cert[i], varpis[i])
                varthetas[i] = varpis[i] if math.isinf(cap) else min(varpis[i], theta_fraction * cap)

            for i in comp:
                stage_of[i] = len(stages) - 1
                for j in graph.pre(i):
                    if not in_comp(j, comp):
                        phi[(i, j)] = phi_fraction * varthetas[i]
        remaining -= set(bottoms)

    subsystems = {}
    for s in net.subsystems:
        i = s.index
        if kinf.evaluate(cert[i].kappa, varpis[i]) - kinf.evaluate(cert[i].rho_int, varthetas[i]) <= 0:
            raise InfeasibleDesign(f"subsystem {i}: rho_int(vartheta) >= kappa(varpi)")
        coef = kinf.linear_coefficient(sig[i])
        subsystems[i] = SubsystemDesign(
            index=i,
            varpi=varpis[i],
            vartheta=varthetas[i],
            component=scc.component_of[i],
            stage=stage_of[i],
            sigma=coef if coef is not None else float("nan"),
            eta_bound=max_eta(cert[i], varpis[i], varthetas[i], 0.0, s),
            theta_min=min_theta(cert[i], varpis[i]),
        )

    result = DesignResult(
        varpi=max(varpis.values()),
        requested=varpi,
        subsystems=subsystems,
        phi=dict(sorted(phi.items())),
        components=scc.components,
        stages=stages,
        notes=sorted(set(notes)),
    )
    bad = check_composability(result, net)
    if bad:
        raise InfeasibleDesign("design violates the composability condition: " + "; ".join(bad))
    logger.info(
        "[DESIGN] varpi=%.6g over %d subsystems in %d stages", result.varpi, len(subsystems), len(stages)
    )
    return result


def choose_quantization(
    net: NetworkSpec,
    result: DesignResult,
    notion: str = "init",
    mu: Optional[float] = None,
) -> Dict[int, Quantization]:
    """Выбор qᵢ = (ηᵢ, θᵢ, μᵢ, φᵢ) по границам; предпочтения из файла модели проверяются."""
    notion = check_notion(notion)
    out: Dict[int, Quantization] = {}
    for s in net.subsystems:
        i, c, d = s.index, s.certificate, result.subsystems[s.index]
        pref = s.quantization
        if s.U.is_finite:
            mu_i = 0.0
        elif mu is not None or "mu" in pref:
            mu_i = float(mu if mu is not None else pref["mu"])
        else:
            half = 0.5 * boxspan(s.U)
            if isinstance(c.rho_ext, kinf.Zero):
                mu_i = half
            else:
                slack = kinf.evaluate(c.kappa, d.varpi) - kinf.evaluate(c.rho_int, d.vartheta)
                mu_i = min(half, _inv(c.rho_ext, 0.5 * slack))

        bound = max_eta(c, d.varpi, d.vartheta, mu_i, s)
        eta = float(pref.get("eta", bound))
        if eta > bound + BOUND_TOL:
            raise InfeasibleDesign(f"subsystem {i}: eta={eta:.6g} exceeds the admissible bound {bound:.6g}")

        theta_lo = 0.0 if notion == "init" else min_theta(c, d.varpi)
        theta = float(pref.get("theta", theta_lo))
        if theta < theta_lo - BOUND_TOL:
            raise InfeasibleDesign(f"subsystem {i}: theta={theta:.6g} below the required {theta_lo:.6g}")

        out[i] = Quantization(eta, theta, mu_i, result.phi_of(i))
        logger.info("[DESIGN] q_%d = (eta=%.6g, theta=%.6g, mu=%.6g, phi=%s)", i, eta, theta, mu_i, out[i].phi)
    result.quantization = out
    result.notion = notion
    return out
