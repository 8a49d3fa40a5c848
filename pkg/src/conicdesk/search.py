"""Strategy optimizers: exact enumeration, cross-entropy search, mixtures.

Probability distortion destroys the tower property, so no dynamic program
is attempted anywhere: the exact oracle enumerates whole grid schedules
depth-first with solvency pruning, and the cross-entropy method searches a
linear policy family projected onto the same feasible trade grids. Both
report traces whose incumbent total variation mirrors the boundedness
diagnostic of the underlying existence argument.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .cones import DEFAULT_TOL, SolvencyCone, liquidation_value
from .markets import ScenarioTree
from .preferences import CPTSpec, cpt_value_arrays
from .trading import (InadmissibleStrategyError, RandomizedStrategy, TradeSchedule,
                      is_admissible, terminal_distribution, total_variation)

DEFAULT_EVAL_CAP = 10 ** 7

MIXTURE_MAX_CANDIDATES = 6

VARIANCE_FLOOR = 1e-6


class EvaluationCapExceeded(RuntimeError):
    """Refusal to enumerate: the admissible schedule count is above the cap."""

    def __init__(self, count, cap):
        super().__init__(f"exact search needs {count} objective evaluations, cap is {cap}")
        self.count = count
        self.cap = cap


class EmptyEliteError(RuntimeError):
    """A cross-entropy generation produced no admissible candidate."""


@dataclass(frozen=True)
class TradeGrid:
    """Finite symmetric trade lattice: multiples of delta within the bound.

    Both fields may be scalars or per-asset vectors; the zero trade is
    always on the lattice.
    """

    delta: float | np.ndarray = 0.5
    bound: float | np.ndarray = 1.0

    def levels(self, d):
        delta = np.broadcast_to(np.asarray(self.delta, dtype=float), (d,))
        bound = np.broadcast_to(np.asarray(self.bound, dtype=float), (d,))
        if np.any(delta <= 0) or np.any(bound <= 0):
            raise ValueError("grid step and bound must be positive")
        out = []
        for dl, b in zip(delta, bound):
            k = int(math.floor(b / dl + 1e-9))
            out.append(dl * np.arange(-k, k + 1))
        return out

    def box(self, d):
        """All lattice points, rows in ascending lexicographic order."""
        return np.array(list(itertools.product(*self.levels(d))))

    def refine(self):
        """Halve the step size; the new lattice contains the old one."""
        return TradeGrid(delta=np.asarray(self.delta) / 2.0, bound=self.bound)


class _CandidateCache:
    """Feasible trade sets keyed by (cone, entering position)."""

    def __init__(self, grid: TradeGrid, d, tol):
        self.box = grid.box(d)
        self.tol = tol
        self._store = {}

    def feasible(self, cone: SolvencyCone, position):
        key = (id(cone), np.round(position, 12).tobytes())
        hit = self._store.get(key)
        if hit is None:
            Z = cone.dual
            if Z.size:
                products = self.box @ Z.T
                in_neg_cone = products.max(axis=1) <= self.tol
                solvent = (products + (Z @ position)).min(axis=1) >= -self.tol
                mask = in_neg_cone & solvent
            else:
                mask = np.ones(len(self.box), dtype=bool)
            hit = self.box[mask]
            if len(self._store) < 10 ** 6:
                self._store[key] = hit
        return hit


@dataclass
class TraceRecord:
    iteration: int
    best_value: float
    incumbent_tv: float
    evaluations: int


@dataclass
class OptimizationTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def append(self, record: TraceRecord):
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def to_csv_rows(self):
        header = ["iteration", "best_value", "incumbent_tv", "evaluations"]
        rows = [[r.iteration, repr(r.best_value), repr(r.incumbent_tv), r.evaluations]
                for r in self.records]
        return header, rows


@dataclass
class OracleResult:
    schedule: TradeSchedule
    value: float
    trace: OptimizationTrace
    evaluations: int
    candidates: list  # (value, TradeSchedule) with distinct terminal laws, best first


def count_schedules(tree: ScenarioTree, x, grid: TradeGrid, tol=DEFAULT_TOL,
                    _cache=None):
    """Number of admissible grid schedules (= oracle objective evaluations)."""
    x = np.asarray(x, dtype=float)
    cache = _cache if _cache is not None else _CandidateCache(grid, tree.d, tol)
    memo = {}

    def rec(index, position):
        node = tree.nodes[index]
        key = (index, np.round(position, 12).tobytes())
        hit = memo.get(key)
        if hit is not None:
            return hit
        if not node.children:
            result = 1 if node.cone.contains(position, tol) else 0
        else:
            result = 0
            for delta in cache.feasible(node.cone, position):
                after = position + delta
                prod = 1
                for child in node.children:
                    prod *= rec(child, after)
                    if prod == 0:
                        break
                result += prod
        memo[key] = result
        return result

    return rec(0, x)


def oracle_optimize(tree: ScenarioTree, x, grid: TradeGrid, cpt: CPTSpec, numeraire,
                    tol=DEFAULT_TOL, cap=DEFAULT_EVAL_CAP, top_k=1) -> OracleResult:
    """Exact maximizer of the prospect objective over admissible grid schedules.

    Trades are enumerated depth-first in node order with solvency pruning;
    terminal nodes never trade, since a trade inside -G can only lower the
    liquidated value. Candidates are visited in ascending lexicographic
    order, so the first schedule attaining the maximum is the
    lexicographically smallest maximizer and reruns are bit-identical.
    A counting pass refuses instances whose admissible schedule count
    exceeds ``cap``. With ``top_k`` > 1 the best schedules with pairwise
    distinct terminal laws are also collected (for mixture search).
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (tree.d,):
        raise ValueError(f"endowment of shape {x.shape}, expected ({tree.d},)")
    if not tree.root.cone.contains(x, tol):
        raise InadmissibleStrategyError("endowment is not solvent at the root")
    cache = _CandidateCache(grid, tree.d, tol)
    total = count_schedules(tree, x, grid, tol=tol, _cache=cache)
    if total > cap:
        raise EvaluationCapExceeded(total, cap)
    if total == 0:
        raise InadmissibleStrategyError("no admissible grid schedule from this endowment")

    n = tree.n_nodes
    leaf_slot = {leaf: i for i, leaf in enumerate(tree.leaves)}
    leaf_probs = tree.leaf_probs()
    entering = np.zeros((n, tree.d))
    after = np.zeros((n, tree.d))
    cands: list = [None] * n
    choice = [0] * n
    outcomes = np.zeros(len(tree.leaves))
    liq_cache: dict = {}
    zero_trade = np.zeros((1, tree.d))
    empty = np.zeros((0, tree.d))

    trace = OptimizationTrace()
    best_value = -np.inf
    best_trades = None
    evaluations = 0
    pool: list = []  # (value, trades, law_key), best first, distinct laws

    k = 0
    descending = True
    while k >= 0:
        if k == n:
            value = cpt_value_arrays(outcomes, leaf_probs, cpt.utility, cpt.distortion)
            evaluations += 1
            if value > best_value:
                best_value = value
                best_trades = np.array([cands[i][choice[i]] for i in range(n)])
                trace.append(TraceRecord(len(trace), best_value,
                                         _tv_of(best_trades, tree), evaluations))
            if top_k > 1:
                _offer_candidate(pool, value, outcomes, leaf_probs,
                                 lambda: np.array([cands[i][choice[i]] for i in range(n)]),
                                 top_k)
            k -= 1
            descending = False
            continue
        node = tree.nodes[k]
        if descending:
            entering[k] = x if node.parent is None else after[node.parent]
            if node.children:
                cands[k] = cache.feasible(node.cone, entering[k])
            elif node.cone.contains(entering[k], tol):
                cands[k] = zero_trade
            else:
                cands[k] = empty
            choice[k] = 0
        else:
            choice[k] += 1
        if choice[k] < len(cands[k]):
            after[k] = entering[k] + cands[k][choice[k]]
            if not node.children:
                slot = leaf_slot[k]
                key = (k, np.round(after[k], 12).tobytes())
                out = liq_cache.get(key)
                if out is None:
                    out = liquidation_value(node.cone, after[k] - tree.reference[slot],
                                            numeraire, tol=tol)
                    liq_cache[key] = out
                outcomes[slot] = out
            k += 1
            descending = True
        else:
            k -= 1
            descending = False

    schedule = TradeSchedule(x, best_trades)
    if trace.records:
        last = trace.records[-1]
        if last.evaluations != evaluations:
            trace.append(TraceRecord(len(trace), best_value,
                                     _tv_of(best_trades, tree), evaluations))
    candidates = [(v, TradeSchedule(x, t)) for v, t, _ in pool]
    return OracleResult(schedule=schedule, value=float(best_value), trace=trace,
                        evaluations=evaluations, candidates=candidates)


def _tv_of(trades, tree):
    probs = np.array([node.prob for node in tree.nodes])
    return float(np.sum(probs * np.abs(trades).sum(axis=1)))


def _offer_candidate(pool, value, outcomes, probs, make_trades, top_k):
    law = _law_key(outcomes, probs)
    for i, (v, _, existing) in enumerate(pool):
        if existing == law:
            if value > v:
                pool[i] = (value, make_trades(), law)
                pool.sort(key=lambda item: -item[0])
            return
    pool.append((value, make_trades(), law))
    pool.sort(key=lambda item: -item[0])
    if len(pool) > top_k:
        pool.pop()


def _law_key(outcomes, probs):
    merged = {}
    for o, p in zip(np.round(outcomes, 10), np.round(probs, 12)):
        merged[o] = merged.get(o, 0.0) + p
    return tuple(sorted(merged.items()))


# ---------------------------------------------------------------------------
# cross-entropy policy search

@dataclass(frozen=True)
class PolicyFamily:
    """Linear trade rule in node features, projected onto the feasible grid.

    Features are (1, t, y, position); the parameter matrix theta maps them
    to a raw trade, which is replaced by the nearest feasible lattice trade
    (ties to the lexicographically smallest). The zero parameter vector is
    the no-trade policy.
    """

    grid: TradeGrid
    init_std: float = 1.0

    def n_features(self, m, d):
        return 2 + m + d

    @staticmethod
    def features(t, y, position):
        return np.concatenate([[1.0, t], y, position])


@dataclass
class SampledMarket:
    """Monte Carlo stand-in for a tree: path batch plus market maps."""

    times: np.ndarray
    paths: np.ndarray  # (n_paths, n_steps + 1, m)
    d: int
    cone_map: object
    reference_map: object


@dataclass
class CEMResult:
    theta: np.ndarray
    value: float
    schedule: TradeSchedule | None
    trace: OptimizationTrace
    evaluations: int


def _project(raw, candidates):
    # candidates are lex-sorted; argmin returns the first (smallest) tie
    d2 = np.sum((candidates - raw) ** 2, axis=1)
    return candidates[int(np.argmin(d2))]


def _rollout_tree(tree, x, theta, cache, tol):
    """Run the policy over a tree; returns the schedule or None if insolvent."""
    trades = np.zeros((tree.n_nodes, tree.d))
    after = np.zeros((tree.n_nodes, tree.d))
    for node in tree.nodes:
        pos = x if node.parent is None else after[node.parent]
        if node.children:
            candidates = cache.feasible(node.cone, pos)
            if len(candidates) == 0:
                return None
            f = PolicyFamily.features(tree.times[node.time_index], node.y, pos)
            trades[node.index] = _project(theta @ f, candidates)
            after[node.index] = pos + trades[node.index]
        else:
            if not node.cone.contains(pos, tol):
                return None
            after[node.index] = pos
    return TradeSchedule(x, trades)


def _evaluate_tree_policy(tree, x, theta, cache, cpt, numeraire, tol, liq_cache):
    schedule = _rollout_tree(tree, x, theta, cache, tol)
    if schedule is None:
        return None
    positions = schedule.positions(tree)
    outcomes = np.empty(len(tree.leaves))
    for slot, leaf in enumerate(tree.leaves):
        key = (leaf, np.round(positions[leaf], 12).tobytes())
        out = liq_cache.get(key)
        if out is None:
            out = liquidation_value(tree.nodes[leaf].cone,
                                    positions[leaf] - tree.reference[slot],
                                    numeraire, tol=tol)
            liq_cache[key] = out
        outcomes[slot] = out
    value = cpt_value_arrays(outcomes, tree.leaf_probs(), cpt.utility, cpt.distortion)
    return value, schedule, total_variation(schedule, tree)


def _evaluate_path_policy(market, x, theta, cache, cpt, numeraire, tol):
    n_paths, n_times, _ = market.paths.shape
    outcomes = np.empty(n_paths)
    tv = 0.0
    for p in range(n_paths):
        pos = x.copy()
        for i in range(n_times - 1):
            y = market.paths[p, i]
            cone = market.cone_map(market.times[i], y)
            candidates = cache.feasible(cone, pos)
            if len(candidates) == 0:
                return None
            f = PolicyFamily.features(market.times[i], y, pos)
            delta = _project(theta @ f, candidates)
            pos = pos + delta
            tv += float(np.abs(delta).sum())
        terminal_cone = market.cone_map(market.times[-1], market.paths[p, -1])
        if not terminal_cone.contains(pos, tol):
            return None
        w = market.reference_map(market.paths[p])
        outcomes[p] = liquidation_value(terminal_cone, pos - w, numeraire, tol=tol)
    probs = np.full(n_paths, 1.0 / n_paths)
    value = cpt_value_arrays(outcomes, probs, cpt.utility, cpt.distortion)
    return value, None, tv / n_paths


def cem_optimize(market, x, policy: PolicyFamily, cpt: CPTSpec, numeraire, budget,
                 seed, population=64, elite_fraction=0.1, tol=DEFAULT_TOL,
                 variance_floor=VARIANCE_FLOOR) -> CEMResult:
    """Cross-entropy search over the policy parameters.

    ``market`` is a ScenarioTree (exact objective) or a SampledMarket
    (empirical objective on a path batch). Each generation samples
    parameters from a diagonal Gaussian, evaluates the projected policy,
    and refits the distribution to the elite fraction; the sampled variance
    never drops below ``variance_floor``. The zero (no-trade) policy is the
    initial incumbent and costs no budget; runs are deterministic in
    ``seed``. Raises EmptyEliteError when a whole generation is
    inadmissible.
    """
    x = np.asarray(x, dtype=float)
    is_tree = isinstance(market, ScenarioTree)
    m = market.m if is_tree else market.paths.shape[2]
    d = market.d
    n_features = policy.n_features(m, d)
    cache = _CandidateCache(policy.grid, d, tol)
    liq_cache: dict = {}

    def evaluate(theta):
        if is_tree:
            return _evaluate_tree_policy(market, x, theta, cache, cpt, numeraire,
                                         tol, liq_cache)
        return _evaluate_path_policy(market, x, theta, cache, cpt, numeraire, tol)

    theta0 = np.zeros((d, n_features))
    base = evaluate(theta0)
    if base is None:
        raise InadmissibleStrategyError("the no-trade policy is inadmissible on this market")
    best_value, best_schedule, best_tv = base
    best_theta = theta0

    rng = np.random.default_rng(seed)
    mean = np.zeros(d * n_features)
    std = np.full(d * n_features, float(policy.init_std))
    n_elite = max(1, int(round(elite_fraction * population)))

    trace = OptimizationTrace()
    trace.append(TraceRecord(0, best_value, best_tv, 0))
    evaluations = 0
    generation = 0
    while evaluations < budget:
        size = min(population, budget - evaluations)
        thetas = mean + std * rng.standard_normal((size, d * n_features))
        scored = []
        for flat in thetas:
            result = evaluate(flat.reshape(d, n_features))
            evaluations += 1
            if result is None:
                continue
            value, schedule, tv = result
            scored.append((value, flat, schedule, tv))
        if not scored:
            raise EmptyEliteError(
                f"generation {generation + 1}: all {size} sampled policies were "
                f"inadmissible after projection")
        scored.sort(key=lambda item: -item[0])
        if scored[0][0] > best_value:
            best_value, flat, best_schedule, best_tv = scored[0]
            best_theta = flat.reshape(d, n_features)
        elite = np.array([flat for _, flat, _, _ in scored[:n_elite]])
        mean = elite.mean(axis=0)
        std = np.maximum(elite.std(axis=0), math.sqrt(variance_floor))
        generation += 1
        trace.append(TraceRecord(generation, best_value, best_tv, evaluations))

    return CEMResult(theta=best_theta, value=float(best_value), schedule=best_schedule,
                     trace=trace, evaluations=evaluations)


# ---------------------------------------------------------------------------
# mixtures

def _compositions(total, parts):
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def mixture_optimize(candidates, tree: ScenarioTree, cpt: CPTSpec, numeraire,
                     resolution=10, tol=DEFAULT_TOL):
    """Best mixture of admissible schedules over the gridded weight simplex.

    Weights run over multiples of 1/resolution; all vertices are on the
    grid, so the result never falls below the best single candidate. The
    mixture law is the exact weighted concatenation of the component laws.
    """
    if not 1 <= len(candidates) <= MIXTURE_MAX_CANDIDATES:
        raise ValueError(f"need between 1 and {MIXTURE_MAX_CANDIDATES} candidates")
    if resolution < 1:
        raise ValueError("weight grid resolution must be >= 1")
    for i, cand in enumerate(candidates):
        if not is_admissible(cand, tree, tol=tol):
            raise InadmissibleStrategyError(f"candidate {i} is inadmissible")
    laws = [terminal_distribution(c, tree, numeraire, tol=tol) for c in candidates]
    outs = [law.outcomes for law in laws]
    probs = [law.probabilities for law in laws]

    best_value = -np.inf
    best_weights = None
    for comp in _compositions(resolution, len(candidates)):
        weights = np.array(comp, dtype=float) / resolution
        live = [i for i in range(len(candidates)) if weights[i] > 0]
        mix_out = np.concatenate([outs[i] for i in live])
        mix_prob = np.concatenate([weights[i] * probs[i] for i in live])
        value = cpt_value_arrays(mix_out, mix_prob, cpt.utility, cpt.distortion)
        if value > best_value:
            best_value = value
            best_weights = weights
    strategy = RandomizedStrategy(best_weights, list(candidates))
    return strategy, float(best_value)


# ---------------------------------------------------------------------------
# diagnostics

@dataclass
class DiagnosticsSummary:
    n_records: int
    final_value: float
    max_value: float
    min_value: float
    max_incumbent_tv: float
    evaluations: int
    monotone: bool
    message: str


def run_diagnostics(trace: OptimizationTrace) -> DiagnosticsSummary:
    """Summarize a trace: value range, peak incumbent total variation, and
    whether best-so-far was nondecreasing (a violation is an internal error)."""
    if not trace.records:
        raise ValueError("empty trace")
    values = [r.best_value for r in trace.records]
    tvs = [r.incumbent_tv for r in trace.records]
    monotone = all(b >= a for a, b in zip(values, values[1:]))
    message = "ok" if monotone else "internal error: best-so-far decreased"
    return DiagnosticsSummary(
        n_records=len(trace.records),
        final_value=values[-1],
        max_value=max(values),
        min_value=min(values),
        max_incumbent_tv=max(tvs),
        evaluations=trace.records[-1].evaluations,
        monotone=monotone,
        message=message,
    )


def search_randomization_benefit(tree: ScenarioTree, x, grid: TradeGrid, cpt: CPTSpec,
                                 numeraire, top_k=4, resolution=10, tol=DEFAULT_TOL,
                                 cap=DEFAULT_EVAL_CAP, margin=1e-9):
    """Look for a mixture that strictly beats every deterministic schedule.

    Runs the exact oracle, keeps the best ``top_k`` schedules with distinct
    terminal laws, and optimizes mixture weights over them. Reports whether
    a strict improvement (beyond ``margin``) was found; absence on a given
    instance is a report, not a claim of impossibility.
    """
    top_k = min(top_k, MIXTURE_MAX_CANDIDATES)
    oracle = oracle_optimize(tree, x, grid, cpt, numeraire, tol=tol, cap=cap,
                             top_k=top_k)
    report = {
        "oracle_value": oracle.value,
        "oracle_evaluations": oracle.evaluations,
        "n_candidates": len(oracle.candidates),
    }
    if len(oracle.candidates) < 2:
        report.update({
            "mixture_value": oracle.value,
            "improvement": 0.0,
            "strict_improvement_found": False,
            "weights": [1.0],
            "note": "fewer than two distinct terminal laws; mixing cannot help",
        })
        return report
    schedules = [sched for _, sched in oracle.candidates]
    strategy, value = mixture_optimize(schedules, tree, cpt, numeraire,
                                       resolution=resolution, tol=tol)
    improvement = value - oracle.value
    report.update({
        "mixture_value": value,
        "improvement": improvement,
        "strict_improvement_found": bool(improvement > margin),
        "weights": strategy.weights.tolist(),
    })
    return report
