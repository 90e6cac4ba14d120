# abstraction.py
"""
Конечные символические модели подсистем и их композиция.

Переход (x̂, û, ŵ) -> x̂_d существует тогда и только тогда, когда
‖x̂_d − f(x̂, û, ŵ)‖∞ ≤ η. Идентичность состояния — целочисленный индекс узла сетки.
"""
from __future__ import annotations

import itertools
import json
import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from config import settings
from design import Quantization
from geometry import DIST_TOL, GridSet, boxspan, inflate, nearest_grid_points, quantize
from model import NetworkSpec, SubsystemSpec, norm_inf


logger = logging.getLogger("opack.abstraction")

MATCH_TOL = 1e-9


class AbstractionError(ValueError):
    pass


def _stack(rows: Sequence) -> np.ndarray:
    """Строки одинаковой длины (возможно нулевой) -> матрица."""
    rows = [np.asarray(r, dtype=float).reshape(-1) for r in rows]
    width = rows[0].size if rows else 0
    if not rows:
        return np.zeros((0, 0))
    return np.array(rows, dtype=float).reshape(len(rows), width)


def _label(point: np.ndarray) -> str:
    vals = [f"{float(v):.6g}" for v in np.asarray(point).reshape(-1)]
    if len(vals) == 1:
        return vals[0]
    return "(" + ", ".join(vals) + ")"


# ----------------------------
# Конечная система
# ----------------------------

@dataclass(eq=False)
class FiniteSystem:
    name: str
    points: np.ndarray
    outputs: np.ndarray
    initial: FrozenSet[int]
    secret: FrozenSet[int]
    inputs: np.ndarray
    # (состояние, внешний вход, внутренний вход) -> отсортированные преемники
    transitions: Dict[Tuple[int, int, int], Tuple[int, ...]]
    labels: Tuple[str, ...] = ()
    keys: Tuple[Tuple[int, ...], ...] = ()
    # j -> значения блока ŵ_ij (по строкам); порядок блоков = порядок предшественников
    internal_values: Dict[int, np.ndarray] = field(default_factory=dict)
    # j -> ĥ_ij по состояниям
    internal_outputs: Dict[int, np.ndarray] = field(default_factory=dict)
    eta: float = 0.0

    def __post_init__(self):
        n = self.n_states
        if not self.labels:
            self.labels = tuple(_label(p) if p.size else str(k) for k, p in enumerate(self.points))
        if not self.keys:
            self.keys = tuple((k,) for k in range(n))
        if not (self.initial <= frozenset(range(n)) and self.secret <= frozenset(range(n))):
            raise AbstractionError(f"{self.name}: initial and secret sets must be subsets of the states")
        self._post: Optional[Tuple[Tuple[int, ...], ...]] = None

    # --- размеры и структура ---

    @property
    def n_states(self) -> int:
        return int(self.outputs.shape[0])

    @property
    def internal_shape(self) -> Tuple[int, ...]:
        return tuple(len(self.internal_values[j]) for j in sorted(self.internal_values))

    @property
    def n_internal(self) -> int:
        return int(np.prod(self.internal_shape)) if self.internal_values else 1

    def internal_vector(self, w_idx: int) -> np.ndarray:
        if not self.internal_values:
            return np.zeros(0)
        blocks = np.unravel_index(w_idx, self.internal_shape)
        return np.concatenate([self.internal_values[j][b] for j, b in zip(sorted(self.internal_values), blocks)])

    def post(self, s: int) -> Tuple[int, ...]:
        """Преемники без учёта входов (входы наблюдателю не видны)."""
        if self._post is None:
            acc: List[set] = [set() for _ in range(self.n_states)]
            for (x, _, _), targets in self.transitions.items():
                acc[x].update(targets)
            self._post = tuple(tuple(sorted(a)) for a in acc)
        return self._post[s]

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.n_states, self.n_states), dtype=bool)
        for s in range(self.n_states):
            A[s, list(self.post(s))] = True
        return A

    def is_nonblocking(self) -> bool:
        return all(self.post(s) for s in range(self.n_states))

    def successors(self, s: int, u: int, w: int = 0) -> Tuple[int, ...]:
        return self.transitions.get((s, u, w), ())

    # --- преобразования ---

    def restrict_reachable(self) -> "FiniteSystem":
        seen = set(self.initial)
        queue = deque(sorted(self.initial))
        while queue:
            s = queue.popleft()
            for t in self.post(s):
                if t not in seen:
                    seen.add(t)
                    queue.append(t)
        keep = sorted(seen)
        renum = {old: new for new, old in enumerate(keep)}
        trans = {
            (renum[x], u, w): tuple(renum[t] for t in ts)
            for (x, u, w), ts in self.transitions.items() if x in renum
        }
        logger.info("[ABSTRACT] %s: kept %d of %d reachable states", self.name, len(keep), self.n_states)
        return FiniteSystem(
            name=self.name,
            points=self.points[keep],
            outputs=self.outputs[keep],
            initial=frozenset(renum[s] for s in self.initial),
            secret=frozenset(renum[s] for s in self.secret if s in renum),
            inputs=self.inputs,
            transitions=dict(sorted(trans.items())),
            labels=tuple(self.labels[s] for s in keep),
            keys=tuple(self.keys[s] for s in keep),
            internal_values=self.internal_values,
            internal_outputs={j: v[keep] for j, v in self.internal_outputs.items()},
            eta=self.eta,
        )

    # --- сериализация ---

    def to_dict(self) -> dict:
        return {
            "schema": settings.schema_version,
            "name": self.name,
            "eta": self.eta,
            "states": [
                {
                    "index": k,
                    "label": self.labels[k],
                    "key": list(self.keys[k]),
                    "point": self.points[k].tolist(),
                    "output": self.outputs[k].tolist(),
                }
                for k in range(self.n_states)
            ],
            "initial": sorted(self.initial),
            "secret": sorted(self.secret),
            "inputs": self.inputs.tolist(),
            "internal_values": {str(j): v.tolist() for j, v in sorted(self.internal_values.items())},
            "internal_outputs": {str(j): v.tolist() for j, v in sorted(self.internal_outputs.items())},
            "transitions": [[x, u, w, list(ts)] for (x, u, w), ts in sorted(self.transitions.items())],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "FiniteSystem":
        states = sorted(doc["states"], key=lambda s: s["index"])
        matrix = _stack
        return cls(
            name=str(doc.get("name", "system")),
            points=matrix([s["point"] for s in states]),
            outputs=matrix([s["output"] for s in states]),
            initial=frozenset(int(v) for v in doc["initial"]),
            secret=frozenset(int(v) for v in doc["secret"]),
            inputs=matrix(doc.get("inputs", [[]])),
            transitions={(int(x), int(u), int(w)): tuple(int(t) for t in ts) for x, u, w, ts in doc["transitions"]},
            labels=tuple(s.get("label", str(s["index"])) for s in states),
            keys=tuple(tuple(s.get("key", [s["index"]])) for s in states),
            internal_values={int(j): matrix(v) for j, v in doc.get("internal_values", {}).items()},
            internal_outputs={int(j): matrix(v) for j, v in doc.get("internal_outputs", {}).items()},
            eta=float(doc.get("eta", 0.0)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "FiniteSystem":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def finite_system(
    outputs: Sequence[Sequence[float]],
    edges: Mapping[Tuple[int, int], Iterable[int]],
    initial: Iterable[int],
    secret: Iterable[int],
    n_inputs: int = 1,
    name: str = "system",
) -> FiniteSystem:
    """Удобный конструктор: edges[(x, u)] = преемники, выходы по строкам."""
    out = _stack(outputs)
    return FiniteSystem(
        name=name,
        points=np.arange(len(outputs), dtype=float).reshape(-1, 1),
        outputs=out,
        initial=frozenset(initial),
        secret=frozenset(secret),
        inputs=np.arange(n_inputs, dtype=float).reshape(-1, 1),
        transitions={(x, u, 0): tuple(sorted(set(ts))) for (x, u), ts in sorted(edges.items()) if ts},
        labels=tuple(str(k) for k in range(len(outputs))),
    )


# ----------------------------
# Локальная сетка подсистемы
# ----------------------------

@dataclass
class LocalGrid:
    sub: SubsystemSpec
    q: Quantization
    states: GridSet
    secret: FrozenSet[int]
    inputs: np.ndarray
    internal_values: Dict[int, np.ndarray]

    @property
    def internal_shape(self) -> Tuple[int, ...]:
        return tuple(len(self.internal_values[j]) for j in self.sub.predecessors)

    def internal_vector(self, w_idx: int) -> np.ndarray:
        if not self.sub.predecessors:
            return np.zeros(0)
        blocks = np.unravel_index(w_idx, self.internal_shape)
        return np.concatenate([self.internal_values[j][b] for j, b in zip(self.sub.predecessors, blocks)])

    @property
    def n_internal(self) -> int:
        return int(np.prod(self.internal_shape)) if self.sub.predecessors else 1

    def successors(self, x_idx: int, u_idx: int, w: np.ndarray) -> Tuple[int, ...]:
        target = self.sub.evaluate(self.states.points[x_idx], self.inputs[u_idx], w)
        return nearest_grid_points(target, self.states, self.q.eta)


def _check_bounds(sub: SubsystemSpec, q: Quantization) -> None:
    if q.eta <= 0:
        raise AbstractionError(f"subsystem {sub.index}: eta must be positive")
    rest = sub.X.difference(sub.XS)
    for name, part in (("secret set", sub.XS), ("non-secret set", rest)):
        if not part.is_empty and q.eta > boxspan(part) + DIST_TOL:
            raise AbstractionError(
                f"subsystem {sub.index}: eta={q.eta:.6g} exceeds the span {boxspan(part):.6g} of the {name}"
            )
    if not sub.U.is_finite and not (0 < q.mu < boxspan(sub.U)):
        raise AbstractionError(f"subsystem {sub.index}: need 0 < mu < span(U) = {boxspan(sub.U):.6g}, got {q.mu}")
    for j, phi in q.phi.items():
        if phi > 0 and phi > boxspan(sub.internal_sets[j]) + DIST_TOL:
            raise AbstractionError(f"subsystem {sub.index}: phi_{sub.index}{j}={phi:.6g} exceeds span(W)")


def local_grid(
    sub: SubsystemSpec,
    q: Quantization,
    neighbor_values: Optional[Mapping[int, np.ndarray]] = None,
    strict: bool = True,
) -> LocalGrid:
    if strict:
        _check_bounds(sub, q)
    try:
        states = quantize(sub.X, q.eta)
    except ValueError as exc:
        raise AbstractionError(f"subsystem {sub.index}: {exc}") from None
    if states.symbolic or len(states) == 0:
        raise AbstractionError(f"subsystem {sub.index}: state grid is empty")

    inflated = inflate(sub.XS, q.theta)
    secret = frozenset(k for k, p in enumerate(states.points) if inflated.contains(p))
    if not sub.XS.is_empty and not secret:
        raise AbstractionError(
            f"subsystem {sub.index}: no grid point of eta={q.eta:.6g} falls in the secret set {sub.XS}"
        )

    if not sub.U.is_finite and q.mu <= 0:
        raise AbstractionError(f"subsystem {sub.index}: a non-finite input set needs mu > 0")
    try:
        inputs = quantize(sub.U, 0.0 if sub.U.is_finite else q.mu).points
    except ValueError as exc:
        raise AbstractionError(f"subsystem {sub.index}: input set: {exc}") from None

    values: Dict[int, np.ndarray] = {}
    for j in sub.predecessors:
        phi = q.phi.get(j, 0.0)
        if phi > 0:
            try:
                values[j] = quantize(sub.internal_sets[j], phi).points
            except ValueError as exc:
                raise AbstractionError(f"subsystem {sub.index}: internal set of {j}: {exc}") from None
        elif neighbor_values is not None and j in neighbor_values:
            values[j] = np.unique(np.asarray(neighbor_values[j], dtype=float), axis=0)
        else:
            raise AbstractionError(
                f"subsystem {sub.index}: phi_{sub.index}{j} = 0 needs the output values of subsystem {j}"
            )
        if len(values[j]) == 0:
            raise AbstractionError(f"subsystem {sub.index}: empty internal input grid from {j}")
    return LocalGrid(sub, q, states, secret, inputs, values)


def build_abstraction(
    sub: SubsystemSpec,
    q: Quantization,
    neighbor_values: Optional[Mapping[int, np.ndarray]] = None,
    strict: bool = True,
    threads: Optional[int] = None,
) -> FiniteSystem:
    grid = local_grid(sub, q, neighbor_values, strict)
    n, m, k = len(grid.states), len(grid.inputs), grid.n_internal
    w_vectors = [grid.internal_vector(w) for w in range(k)]

    def cell_row(x: int) -> List[Tuple[Tuple[int, int, int], Tuple[int, ...]]]:
        row = []
        for u in range(m):
            for w in range(k):
                succ = grid.successors(x, u, w_vectors[w])
                if not succ:
                    raise AbstractionError(
                        f"subsystem {sub.index}: blocking cell x={_label(grid.states.points[x])}, "
                        f"u={grid.inputs[u].tolist()}, w={w_vectors[w].tolist()} has no grid point within eta"
                    )
                row.append(((x, u, w), succ))
        return row

    threads = settings.threads if threads is None else threads
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(cell_row, range(n)))
    else:
        rows = [cell_row(x) for x in range(n)]
    transitions = dict(item for row in rows for item in row)

    pts = grid.states.points
    system = FiniteSystem(
        name=f"subsystem{sub.index}",
        points=pts,
        outputs=_stack([sub.external_output(p) for p in pts]),
        initial=frozenset(range(n)),
        secret=grid.secret,
        inputs=grid.inputs,
        transitions=transitions,
        keys=grid.states.keys or tuple((s,) for s in range(n)),
        internal_values=grid.internal_values,
        internal_outputs={
            j: _stack([sub.output(p, j) for p in pts])
            for j in sorted(sub.outputs) if j != sub.index
        },
        eta=q.eta,
    )
    logger.info(
        "[ABSTRACT] subsystem %d: %d states, %d secret, %d inputs, %d internal inputs, %d transitions",
        sub.index, n, len(grid.secret), m, k, sum(len(t) for t in transitions.values()),
    )
    return system


def neighbor_values(net: NetworkSpec, quantization: Mapping[int, Quantization]) -> Dict[int, Dict[int, np.ndarray]]:
    """Для каждого i: j -> множество значений ĥ_ji на сетке подсистемы j."""
    grids = {s.index: quantize(s.X, quantization[s.index].eta) for s in net.subsystems}
    out: Dict[int, Dict[int, np.ndarray]] = {}
    for s in net.subsystems:
        out[s.index] = {
            j: _stack([net.sub(j).output(p, s.index) for p in grids[j].points])
            for j in s.predecessors
        }
    return out


def build_network_abstractions(
    net: NetworkSpec,
    quantization: Mapping[int, Quantization],
    strict: bool = True,
) -> List[FiniteSystem]:
    values = neighbor_values(net, quantization)
    return [build_abstraction(s, quantization[s.index], values[s.index], strict) for s in net.subsystems]


# ----------------------------
# Композиция
# ----------------------------

def compose(
    abstractions: Sequence[FiniteSystem],
    Mhat: Mapping[Tuple[int, int], float],
    net: NetworkSpec,
    max_states: Optional[int] = None,
) -> FiniteSystem:
    """Произведение подсистем с ограничением ‖ĥ_ji(x̂_j) − ŵ_ij‖ ≤ φ_ij."""
    order = list(net.vertices)
    if len(abstractions) != len(order):
        raise AbstractionError(f"{len(abstractions)} abstractions for {len(order)} subsystems")
    sys_of = dict(zip(order, abstractions))
    sizes = [sys_of[i].n_states for i in order]
    total = int(np.prod(sizes))
    limit = settings.max_states if max_states is None else max_states
    if total > limit:
        raise AbstractionError(f"composed state space has {total} states, above the limit {limit}")

    # allowed[i][j][x_j] -> индексы допустимых значений блока ŵ_ij
    allowed: Dict[int, Dict[int, List[np.ndarray]]] = {}
    for i in order:
        a = sys_of[i]
        allowed[i] = {}
        for j in sorted(a.internal_values):
            if j not in sys_of or i not in sys_of[j].internal_outputs:
                raise AbstractionError(f"subsystem {i} expects an internal input from {j}, which provides none")
            phi = float(Mhat.get((i, j), 0.0))
            vals = a.internal_values[j]
            outs = sys_of[j].internal_outputs[i]
            if outs.shape[1] != vals.shape[1]:
                raise AbstractionError(f"edge {j} -> {i}: output and internal input dimensions differ")
            rows = []
            for xj in range(outs.shape[0]):
                d = np.max(np.abs(vals - outs[xj]), axis=1) if vals.shape[1] else np.zeros(len(vals))
                hit = np.flatnonzero(d <= phi + MATCH_TOL * max(1.0, norm_inf(outs[xj])))
                if phi == 0 and hit.size == 0:
                    raise AbstractionError(
                        f"ill-posed interconnection: output {outs[xj].tolist()} of subsystem {j} "
                        f"is not an internal input value of subsystem {i}"
                    )
                rows.append(hit)
            allowed[i][j] = rows

    memo: Dict[Tuple, FrozenSet[int]] = {}

    def local_successors(i: int, xi: int, ui: int, pred_states: Tuple[int, ...]) -> FrozenSet[int]:
        key = (i, xi, ui, pred_states)
        if key not in memo:
            a = sys_of[i]
            preds = sorted(a.internal_values)
            choices = [allowed[i][j][xj] for j, xj in zip(preds, pred_states)]
            acc = set()
            if preds:
                for combo in itertools.product(*choices):
                    w = int(np.ravel_multi_index(combo, a.internal_shape))
                    acc.update(a.successors(xi, ui, w))
            else:
                acc.update(a.successors(xi, ui, 0))
            memo[key] = frozenset(acc)
        return memo[key]

    input_sizes = [len(sys_of[i].inputs) for i in order]
    input_combos = list(itertools.product(*[range(n) for n in input_sizes]))
    pos = {i: k for k, i in enumerate(order)}
    pred_lists = {i: sorted(sys_of[i].internal_values) for i in order}

    transitions: Dict[Tuple[int, int, int], Tuple[int, ...]] = {}
    keys = list(itertools.product(*[range(n) for n in sizes]))
    for s, key in enumerate(keys):
        for u, ucombo in enumerate(input_combos):
            parts = []
            for i, xi, ui in zip(order, key, ucombo):
                pred_states = tuple(key[pos[j]] for j in pred_lists[i])
                succ = local_successors(i, xi, ui, pred_states)
                if not succ:
                    break
                parts.append(sorted(succ))
            else:
                targets = sorted(int(np.ravel_multi_index(t, sizes)) for t in itertools.product(*parts))
                transitions[(s, u, 0)] = tuple(targets)

    def cat(arrays: Sequence[np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(a, dtype=float).reshape(-1) for a in arrays])

    points = _stack([cat([sys_of[i].points[x] for i, x in zip(order, key)]) for key in keys])
    outputs = _stack([cat([sys_of[i].outputs[x] for i, x in zip(order, key)]) for key in keys])
    inputs = _stack(
        [cat([sys_of[i].inputs[u] for i, u in zip(order, combo)]) for combo in input_combos]
    )

    def product_set(attr: str) -> FrozenSet[int]:
        sets = [sorted(getattr(sys_of[i], attr)) for i in order]
        return frozenset(int(np.ravel_multi_index(t, sizes)) for t in itertools.product(*sets))

    labels = tuple(
        sys_of[order[0]].labels[key[0]] if len(order) == 1
        else "(" + ", ".join(sys_of[i].labels[x] for i, x in zip(order, key)) + ")"
        for key in keys
    )
    composed = FiniteSystem(
        name=net.name,
        points=points,
        outputs=outputs,
        initial=product_set("initial"),
        secret=product_set("secret"),
        inputs=inputs,
        transitions=transitions,
        labels=labels,
        keys=tuple(keys),
    )
    blocked = [labels[s] for s in range(total) if not composed.post(s)]
    if blocked:
        raise AbstractionError(f"composed system blocks in {len(blocked)} states, e.g. {blocked[0]}")
    logger.info(
        "[COMPOSE] %s: %d states (%s), %d secret, %d transitions",
        net.name, total, " x ".join(str(n) for n in sizes), len(composed.secret), len(transitions),
    )
    return composed


# ----------------------------
# DOT
# ----------------------------

def _gvquote(s: str) -> str:
    return '"{}"'.format(s.replace("\\", "\\\\").replace('"', r"\""))


def _record(s: str) -> str:
    for ch in "{}|<>":
        s = s.replace(ch, "\\" + ch)
    return s


def to_dot(system: FiniteSystem) -> Iterator[str]:
    """Узел: метка состояния сверху, выход снизу; секретные закрашены."""
    yield f"digraph {_gvquote(system.name)} {{\n"
    yield "  rankdir=LR;\n"
    yield "  node [shape=Mrecord];\n"
    for s in range(system.n_states):
        out = ", ".join(f"{v:.6g}" for v in system.outputs[s]) or "-"
        label = "{" + _record(system.labels[s]) + "|" + _record(out) + "}"
        style = ' style=filled fillcolor="#e06666"' if s in system.secret else ""
        yield f"  s{s} [label={_gvquote(label)}{style}];\n"
    for s in sorted(system.initial):
        yield f"  init{s} [shape=point style=invis];\n"
        yield f"  init{s} -> s{s};\n"
    edges: Dict[Tuple[int, int], set] = {}
    for (x, u, w), targets in sorted(system.transitions.items()):
        for t in targets:
            edges.setdefault((x, t), set()).add(u)
    many_inputs = len(system.inputs) > 1
    for (x, t), us in sorted(edges.items()):
        attr = f" [label={_gvquote(','.join(f'u{u}' for u in sorted(us)))}]" if many_inputs else ""
        yield f"  s{x} -> s{t}{attr};\n"
    yield "}\n"


def export_dot(system: FiniteSystem, path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", encoding="utf-8") as f:
        f.writelines(to_dot(system))
    logger.info("[ABSTRACT] wrote %s", p)
    return p
