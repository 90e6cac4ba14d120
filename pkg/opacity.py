# opacity.py
"""
Проверка δ-приближённой непрозрачности (initial / current / infinite-step)
конечной системы построением пар (состояние, belief).

Входы наблюдателю не видны: работаем на графе переходов без меток.
Belief — отсортированный кортеж индексов, интернированный в словаре.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from abstraction import FiniteSystem
from design import check_notion


logger = logging.getLogger("opack.opacity")

CLOSE_TOL = 1e-12

Belief = Tuple[int, ...]
Pair = Tuple[int, Belief]


@dataclass(frozen=True)
class OpacityVerdict:
    notion: str
    delta: float
    opaque: bool
    # прогон x_0, ..., x_n; для inf — шаг k, на котором секрет раскрыт
    witness: Tuple[int, ...] = ()
    step: Optional[int] = None
    explored: int = 0
    reason: str = ""

    def to_dict(self) -> dict:
        return {
            "notion": self.notion,
            "delta": self.delta,
            "opaque": self.opaque,
            "witness": list(self.witness),
            "step": self.step,
            "explored": self.explored,
            "reason": self.reason,
        }


class _Observer:
    """Общие части: матрица δ-близости выходов и шаг belief."""

    def __init__(self, t: FiniteSystem, delta: float):
        if delta < 0:
            raise ValueError(f"delta must be non-negative, got {delta}")
        if t.internal_values:
            raise ValueError(f"{t.name}: verification needs a system without internal inputs")
        self.t = t
        out = t.outputs
        if out.shape[1]:
            dist = np.max(np.abs(out[:, None, :] - out[None, :, :]), axis=2)
        else:
            dist = np.zeros((t.n_states, t.n_states))
        self.close = dist <= delta + CLOSE_TOL
        self.secret = t.secret
        self._interned: Dict[Belief, Belief] = {}

    def intern(self, states) -> Belief:
        b = tuple(sorted(set(states)))
        return self._interned.setdefault(b, b)

    def step(self, x_next: int, belief: Belief) -> Belief:
        row = self.close[x_next]
        return self.intern(t for x in belief for t in self.t.post(x) if row[t])

    def start(self, x0: int, candidates) -> Belief:
        row = self.close[x0]
        return self.intern(c for c in candidates if row[c])


def _path(parent: Dict[Pair, Optional[Pair]], node: Pair) -> Tuple[int, ...]:
    run = []
    cur: Optional[Pair] = node
    while cur is not None:
        run.append(cur[0])
        cur = parent[cur]
    return tuple(reversed(run))


def _bfs(obs: _Observer, starts: List[Pair], bad) -> Tuple[Optional[Pair], Dict[Pair, Optional[Pair]]]:
    """BFS по парам; возвращает первую «плохую» пару и таблицу родителей."""
    parent: Dict[Pair, Optional[Pair]] = {}
    queue: deque = deque()
    for p in starts:
        if p not in parent:
            parent[p] = None
            queue.append(p)
    while queue:
        p = queue.popleft()
        if bad(p):
            return p, parent
        x, belief = p
        for y in obs.t.post(x):
            q = (y, obs.step(y, belief))
            if q not in parent:
                parent[q] = p
                queue.append(q)
    return None, parent


def verify_init_opacity(t: FiniteSystem, delta: float) -> OpacityVerdict:
    obs = _Observer(t, delta)
    init = sorted(t.initial)
    secret_init = [x for x in init if x in t.secret]
    public_init = [x for x in init if x not in t.secret]
    reason = ""
    if secret_init and not public_init:
        reason = "trivially violated: every initial state is secret"
    starts = [(x, obs.start(x, public_init)) for x in secret_init]
    hit, parent = _bfs(obs, starts, lambda p: not p[1])
    if hit is None:
        logger.info("[OPACITY] init: opaque at delta=%g (%d pairs)", delta, len(parent))
        return OpacityVerdict("init", delta, True, explored=len(parent))
    run = _path(parent, hit)
    logger.info("[OPACITY] init: not opaque at delta=%g, witness %s", delta, run)
    return OpacityVerdict(
        "init", delta, False, run, explored=len(parent),
        reason=reason or "no delta-close run from a non-secret initial state",
    )


def _current_pairs(obs: _Observer, bad=lambda p: False):
    init = sorted(obs.t.initial)
    starts = [(x, obs.start(x, init)) for x in init]
    return _bfs(obs, starts, bad)


def _revealed(obs: _Observer, p: Pair) -> bool:
    x, belief = p
    return x in obs.secret and all(b in obs.secret for b in belief)


def verify_current_opacity(t: FiniteSystem, delta: float) -> OpacityVerdict:
    obs = _Observer(t, delta)
    hit, parent = _current_pairs(obs, lambda p: _revealed(obs, p))
    if hit is None:
        logger.info("[OPACITY] current: opaque at delta=%g (%d pairs)", delta, len(parent))
        return OpacityVerdict("current", delta, True, explored=len(parent))
    run = _path(parent, hit)
    logger.info("[OPACITY] current: not opaque at delta=%g, witness %s", delta, run)
    return OpacityVerdict(
        "current", delta, False, run, explored=len(parent),
        reason="every delta-close run ends in a secret state",
    )


def verify_infinite_opacity(t: FiniteSystem, delta: float) -> OpacityVerdict:
    obs = _Observer(t, delta)
    _, parent = _current_pairs(obs)
    explored = len(parent)
    memo: Dict[Pair, Optional[Tuple[int, ...]]] = {}

    def phase_two(start: Pair) -> Optional[Tuple[int, ...]]:
        """Продолжение прогона, на котором альтернативы кончаются (или None)."""
        nonlocal explored
        if start in memo:
            return memo[start]
        hit, par = _bfs(obs, [start], lambda p: not p[1])
        explored += len(par)
        memo[start] = _path(par, hit) if hit is not None else None
        return memo[start]

    # parent заполнялся в порядке BFS: первым найдётся кратчайший префикс
    for p in list(parent):
        x, belief = p
        if x not in t.secret:
            continue
        c0 = obs.intern(b for b in belief if b not in t.secret)
        tail = phase_two((x, c0))
        if tail is not None:
            prefix = _path(parent, p)
            run = prefix + tail[1:]
            k = len(prefix) - 1
            logger.info("[OPACITY] inf: not opaque at delta=%g, secret step %d revealed by %s", delta, k, run)
            return OpacityVerdict(
                "inf", delta, False, run, step=k, explored=explored,
                reason=f"the secret state at step {k} has no delta-close non-secret alternative",
            )
    logger.info("[OPACITY] inf: opaque at delta=%g (%d pairs)", delta, explored)
    return OpacityVerdict("inf", delta, True, explored=explored)


def verify(t: FiniteSystem, notion: str, delta: float) -> OpacityVerdict:
    notion = check_notion(notion)
    if notion == "init":
        return verify_init_opacity(t, delta)
    if notion == "current":
        return verify_current_opacity(t, delta)
    return verify_infinite_opacity(t, delta)


def transfer_bound(delta_hat: float, epsilon: float) -> float:
    """δ для конкретной системы по вердикту абстракции при δ̂: δ = δ̂ + 2ε."""
    if delta_hat < 0 or epsilon < 0:
        raise ValueError("delta_hat and epsilon must be non-negative")
    return delta_hat + 2.0 * epsilon
