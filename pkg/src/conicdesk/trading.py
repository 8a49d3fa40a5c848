"""Trade schedules on scenario trees: admissibility checks and objectives.

A trade schedule assigns one trade increment per node; the running position
is the endowment plus all increments along the path. Self-financing means
every increment lies in the negative of the node's cone (checked two ways:
by generator-combination LP and by dual-generator inner products), solvency
means the running position stays inside the cones. The investor's objective
is the prospect value of the liquidated terminal surplus over the
benchmark.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cones import DEFAULT_TOL, liquidation_value, membership_lp
from .markets import ConsistentPriceSystem, ScenarioTree
from .preferences import CPTSpec, DiscreteDistribution, cpt_value


class InadmissibleStrategyError(ValueError):
    """Strategy violates self-financing or solvency on the given tree."""


@dataclass
class TradeSchedule:
    """Node-indexed trade increments from an initial endowment."""

    endowment: np.ndarray
    trades: np.ndarray  # (n_nodes, d)

    def __post_init__(self):
        self.endowment = np.asarray(self.endowment, dtype=float)
        self.trades = np.asarray(self.trades, dtype=float)
        if self.trades.ndim != 2 or self.trades.shape[1] != len(self.endowment):
            raise ValueError("trades must be one d-vector per node")

    @classmethod
    def zero(cls, tree: ScenarioTree, endowment):
        return cls(np.asarray(endowment, dtype=float), np.zeros((tree.n_nodes, tree.d)))

    def cumulative_trades(self, tree: ScenarioTree):
        """Accumulated trades along each node's history (excludes the endowment)."""
        out = np.zeros_like(self.trades)
        for node in tree.nodes:
            base = out[node.parent] if node.parent is not None else 0.0
            out[node.index] = base + self.trades[node.index]
        return out

    def positions(self, tree: ScenarioTree):
        """Running portfolio positions: endowment plus accumulated trades."""
        return self.endowment + self.cumulative_trades(tree)

    def to_dict(self):
        return {
            "endowment": self.endowment.tolist(),
            "trades": {str(i): self.trades[i].tolist() for i in range(len(self.trades))},
        }

    @classmethod
    def from_dict(cls, doc):
        endowment = np.asarray(doc["endowment"], dtype=float)
        items = sorted(((int(k), v) for k, v in doc["trades"].items()))
        trades = np.array([v for _, v in items], dtype=float)
        return cls(endowment, trades)


@dataclass
class RandomizedStrategy:
    """Finite mixture of trade schedules; the weights partition one uniform draw."""

    weights: np.ndarray
    components: list[TradeSchedule]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.weights) != len(self.components) or len(self.components) == 0:
            raise ValueError("one weight per component required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be a probability vector")


@dataclass
class CheckRow:
    node: int
    check: str
    margin: float
    passed: bool


@dataclass
class CheckReport:
    check: str
    rows: list[CheckRow]

    @property
    def passed(self):
        return all(r.passed for r in self.rows)

    def failures(self):
        return [r for r in self.rows if not r.passed]

    def node_flags(self):
        return {r.node: r.passed for r in self.rows}

    def first_violation_per_path(self, tree: ScenarioTree):
        """For each leaf, the earliest failing node on its path (None if clean)."""
        flags = self.node_flags()
        out = {}
        for leaf in tree.leaves:
            chain = []
            i = leaf
            while i is not None:
                chain.append(i)
                i = tree.nodes[i].parent
            first = None
            for node in reversed(chain):
                if not flags.get(node, True):
                    first = node
                    break
            out[leaf] = first
        return out

    def to_csv_rows(self):
        header = ["node", "check", "margin", "pass"]
        rows = [[r.node, r.check, repr(r.margin), "pass" if r.passed else "fail"]
                for r in self.rows]
        return header, rows


def _check_index(schedule: TradeSchedule, tree: ScenarioTree):
    if schedule.trades.shape != (tree.n_nodes, tree.d):
        raise ValueError(
            f"schedule indexes {schedule.trades.shape[0]} nodes, tree has {tree.n_nodes}")


def self_financing_check_primal(schedule: TradeSchedule, tree: ScenarioTree,
                                tol=DEFAULT_TOL) -> CheckReport:
    """Check -trade in G at every node by LP over the primal generators."""
    _check_index(schedule, tree)
    rows = []
    for node in tree.nodes:
        delta = schedule.trades[node.index]
        ok, residual = membership_lp(node.cone.generators, -delta, tol=tol)
        rows.append(CheckRow(node.index, "self_financing_primal", -residual, ok))
    return CheckReport("self_financing_primal", rows)


def self_financing_check_dual(schedule: TradeSchedule, tree: ScenarioTree,
                              tol=DEFAULT_TOL) -> CheckReport:
    """Check every dual generator has nonpositive inner product with each trade."""
    _check_index(schedule, tree)
    rows = []
    for node in tree.nodes:
        delta = schedule.trades[node.index]
        dual = node.cone.dual
        worst = float(np.max(dual @ delta)) if dual.size else 0.0
        rows.append(CheckRow(node.index, "self_financing_dual", -worst, worst <= tol))
    return CheckReport("self_financing_dual", rows)


def solvency_check(schedule: TradeSchedule, tree: ScenarioTree,
                   tol=DEFAULT_TOL) -> CheckReport:
    """Check the running position stays in each node's cone."""
    _check_index(schedule, tree)
    positions = schedule.positions(tree)
    rows = []
    for node in tree.nodes:
        margin = node.cone.margin(positions[node.index])
        rows.append(CheckRow(node.index, "solvency", margin, margin >= -tol))
    return CheckReport("solvency", rows)


def is_admissible(schedule: TradeSchedule, tree: ScenarioTree, tol=DEFAULT_TOL):
    return (self_financing_check_dual(schedule, tree, tol=tol).passed
            and solvency_check(schedule, tree, tol=tol).passed)


def total_variation(schedule: TradeSchedule, tree: ScenarioTree):
    """Probability-weighted cumulative trading volume sum_nodes p |trade|_1."""
    _check_index(schedule, tree)
    probs = np.array([n.prob for n in tree.nodes])
    return float(np.sum(probs * np.abs(schedule.trades).sum(axis=1)))


def terminal_distribution(strategy, tree: ScenarioTree, numeraire,
                          tol=DEFAULT_TOL) -> DiscreteDistribution:
    """Law of the liquidated terminal surplus over the benchmark.

    For a plain schedule this is the leaf-probability law of
    l(position(leaf) - W(leaf)) in the leaf's cone; mixtures combine the
    component laws with their weights, exactly.
    """
    if isinstance(strategy, RandomizedStrategy):
        laws = [terminal_distribution(c, tree, numeraire, tol=tol)
                for c in strategy.components]
        return DiscreteDistribution.mixture(laws, strategy.weights)
    positions = strategy.positions(tree)
    outcomes = np.empty(len(tree.leaves))
    probs = np.empty(len(tree.leaves))
    for k, leaf in enumerate(tree.leaves):
        node = tree.nodes[leaf]
        surplus = positions[leaf] - tree.reference[k]
        outcomes[k] = liquidation_value(node.cone, surplus, numeraire, tol=tol)
        probs[k] = node.prob
    return DiscreteDistribution(outcomes, probs)


@dataclass
class EvaluationResult:
    value: float
    distribution: DiscreteDistribution


def objective_value(strategy, tree: ScenarioTree, cpt: CPTSpec, numeraire,
                    tol=DEFAULT_TOL, force=False) -> EvaluationResult:
    """Prospect value of a strategy's liquidated terminal surplus.

    Admissibility (dual self-financing plus solvency) is enforced unless
    ``force`` is set; mixtures require every component admissible.
    """
    components = strategy.components if isinstance(strategy, RandomizedStrategy) \
        else [strategy]
    if not force:
        for comp in components:
            if not is_admissible(comp, tree, tol=tol):
                raise InadmissibleStrategyError(
                    "strategy fails self-financing or solvency; pass force=True to override")
    dist = terminal_distribution(strategy, tree, numeraire, tol=tol)
    return EvaluationResult(cpt_value(dist, cpt.utility, cpt.distortion), dist)


def cps_supermartingale_gap(schedule: TradeSchedule, tree: ScenarioTree,
                            cps: ConsistentPriceSystem):
    """Expected price-system value of the accumulated trades at the leaves.

    Nonpositive (up to tolerance) for every admissible schedule, since each
    trade has Z(node).trade <= 0 and Z is a martingale. The endowment is
    excluded: only the trade part of the position is a supermartingale.
    """
    cumulative = schedule.cumulative_trades(tree)
    total = 0.0
    for k, leaf in enumerate(tree.leaves):
        total += tree.nodes[leaf].prob * float(cps.z[leaf] @ cumulative[leaf])
    return total
