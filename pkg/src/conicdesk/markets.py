"""Market assembly: driving-process simulation, scenario trees, price systems.

The driving process has independent increments on a finite time grid.
Finite-support increments build non-recombining scenario trees whose nodes
carry solvency cones; continuous samplers (Gaussian, optionally with
compound-Poisson jumps) produce Monte Carlo path batches. A strictly
consistent price system, when one exists, is found by a single linear
program over all tree nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .cones import DEFAULT_TOL, BidAskMatrix, SolvencyCone, from_bid_ask
from .lp import INFEASIBLE, OPTIMAL, SolverError, solve

DEFAULT_LEAF_CAP = 10 ** 6

SAMPLE_BLOCK = 4096


class LeafCapExceeded(RuntimeError):
    """Tree construction refused: leaf count above the configured cap."""


@dataclass
class DrivingProcessSpec:
    """Defines the law of the driving process on a time grid.

    Exactly one of ``increments`` (finite support, for trees) or ``sampler``
    (continuous, for Monte Carlo) must be given. ``increments`` is a list of
    (vector, probability) pairs applied independently at every step, or one
    such list per step.
    """

    m: int
    times: np.ndarray
    increments: list | None = None
    sampler: dict | None = None
    seed: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.times.ndim != 1 or len(self.times) < 1:
            raise ValueError("time grid must be a nonempty vector")
        if len(self.times) == 1:
            if self.times[0] != 0.0:
                raise ValueError("single-node grid must be [0.0]")
        else:
            if np.any(np.diff(self.times) <= 0):
                raise ValueError("time grid must be strictly increasing")
            if self.times[0] != 0.0 or self.times[-1] != 1.0:
                raise ValueError("time grid must run from 0 to 1")
        if (self.increments is None) == (self.sampler is None):
            raise ValueError("specify exactly one of increments / sampler")
        if self.increments is not None:
            self.increments = self._normalize_increments(self.increments)

    def _normalize_increments(self, inc):
        # accept one support list, or one list per step
        if len(inc) > 0 and isinstance(inc[0], (list, tuple)) and len(inc[0]) == 2 \
                and np.ndim(inc[0][0]) in (0, 1):
            inc = [inc] * self.n_steps
        if len(inc) != self.n_steps:
            raise ValueError(f"{len(inc)} per-step supports for {self.n_steps} steps")
        out = []
        for step in inc:
            support = []
            total = 0.0
            for vec, p in step:
                v = np.atleast_1d(np.asarray(vec, dtype=float))
                if v.shape != (self.m,):
                    raise ValueError(f"increment of shape {v.shape}, expected ({self.m},)")
                if p < 0:
                    raise ValueError("increment probabilities must be nonnegative")
                support.append((v, float(p)))
                total += p
            if abs(total - 1.0) > 1e-12:
                raise ValueError(f"step probabilities sum to {total!r}, not 1")
            out.append(support)
        return out

    @property
    def n_steps(self):
        return len(self.times) - 1

    @property
    def finite_support(self):
        return self.increments is not None


def sample_paths(spec: DrivingProcessSpec, n_paths, block_size=SAMPLE_BLOCK):
    """Draw a (n_paths, n_steps + 1, m) batch of driving-process paths.

    Paths start at zero and accumulate independent per-step increments.
    Path block i uses a generator seeded from (spec.seed, i), so batches are
    reproducible and blocks may be produced independently.
    """
    if n_paths <= 0:
        raise ValueError("need a positive number of paths")
    n_steps = spec.n_steps
    out = np.zeros((n_paths, n_steps + 1, spec.m))
    for block in range(0, n_paths, block_size):
        stop = min(block + block_size, n_paths)
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, block // block_size)))
        out[block:stop, 1:, :] = _sample_increments(spec, stop - block, rng)
    np.cumsum(out, axis=1, out=out)
    return out


def _sample_increments(spec, n, rng):
    steps = np.empty((n, spec.n_steps, spec.m))
    if spec.finite_support:
        for i, support in enumerate(spec.increments):
            vectors = np.array([v for v, _ in support])
            probs = np.array([p for _, p in support])
            idx = rng.choice(len(support), size=n, p=probs / probs.sum())
            steps[:, i, :] = vectors[idx]
        return steps
    kind = spec.sampler.get("kind", "gaussian")
    if kind not in ("gaussian", "gaussian_jump"):
        raise ValueError(f"unknown sampler kind {kind!r}")
    drift = np.asarray(spec.sampler.get("drift", np.zeros(spec.m)), dtype=float)
    if "cov" in spec.sampler:
        cov = np.asarray(spec.sampler["cov"], dtype=float)
        chol = np.linalg.cholesky(cov)
    else:
        vol = np.atleast_1d(np.asarray(spec.sampler.get("vol", np.ones(spec.m)), dtype=float))
        chol = np.diag(vol)
    dts = np.diff(spec.times)
    for i, dt in enumerate(dts):
        z = rng.standard_normal((n, spec.m))
        steps[:, i, :] = drift * dt + np.sqrt(dt) * z @ chol.T
    if kind == "gaussian_jump":
        rate = float(spec.sampler["jump_rate"])
        jmean = np.asarray(spec.sampler.get("jump_mean", np.zeros(spec.m)), dtype=float)
        jvol = np.asarray(spec.sampler.get("jump_vol", np.ones(spec.m)), dtype=float)
        for i, dt in enumerate(dts):
            counts = rng.poisson(rate * dt, size=n)[:, np.newaxis]
            z = rng.standard_normal((n, spec.m))
            # sum of k iid normals drawn in one shot
            steps[:, i, :] += counts * jmean + np.sqrt(counts) * jvol * z
    return steps


@dataclass
class TreeNode:
    index: int
    time_index: int
    y: np.ndarray
    parent: int | None
    children: list[int] = field(default_factory=list)
    child_probs: list[float] = field(default_factory=list)
    prob: float = 1.0
    cone: SolvencyCone | None = None


@dataclass
class ScenarioTree:
    """Non-recombining tree of driving-process values with per-node cones.

    Nodes are stored in breadth-first order (parents before children);
    ``reference`` holds one benchmark position per leaf, aligned with
    ``leaves``.
    """

    d: int
    m: int
    times: np.ndarray
    nodes: list[TreeNode]
    leaves: list[int]
    reference: np.ndarray

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def root(self):
        return self.nodes[0]

    def is_leaf(self, index):
        return not self.nodes[index].children

    def leaf_probs(self):
        return np.array([self.nodes[i].prob for i in self.leaves])

    def path_y(self, index):
        """Driving-process path from the root to a node, one row per time."""
        chain = []
        i = index
        while i is not None:
            chain.append(self.nodes[i].y)
            i = self.nodes[i].parent
        return np.array(chain[::-1])

    def internal_nodes(self):
        return [n.index for n in self.nodes if n.children]

    def to_dict(self):
        return {
            "d": self.d,
            "m": self.m,
            "times": self.times.tolist(),
            "nodes": [
                {
                    "index": n.index,
                    "time_index": n.time_index,
                    "y": n.y.tolist(),
                    "parent": n.parent,
                    "children": list(n.children),
                    "child_probs": list(n.child_probs),
                    "prob": n.prob,
                    "cone": n.cone.to_dict(),
                }
                for n in self.nodes
            ],
            "leaves": list(self.leaves),
            "reference": self.reference.tolist(),
        }


def build_tree(spec: DrivingProcessSpec, cone_map, reference_map, d,
               leaf_cap=DEFAULT_LEAF_CAP, tol=DEFAULT_TOL) -> ScenarioTree:
    """Expand a finite-support driving process into a scenario tree.

    ``cone_map(t, y)`` supplies the solvency cone at a node and
    ``reference_map(path)`` the benchmark position at a leaf, where ``path``
    is the (time, m) array of driving values along the leaf's history.
    """
    if not spec.finite_support:
        raise ValueError("tree construction needs a finite-support increment model")
    n_leaves = 1
    for support in spec.increments or []:
        n_leaves *= len(support)
    if n_leaves > leaf_cap:
        raise LeafCapExceeded(
            f"tree would have {n_leaves} leaves, above the cap of {leaf_cap}")

    nodes = [TreeNode(index=0, time_index=0, y=np.zeros(spec.m), parent=None,
                      prob=1.0, cone=cone_map(spec.times[0], np.zeros(spec.m)))]
    level = [0]
    for step in range(spec.n_steps):
        support = spec.increments[step]
        t_next = spec.times[step + 1]
        next_level = []
        for parent_idx in level:
            parent = nodes[parent_idx]
            for vec, p in support:
                y = parent.y + vec
                node = TreeNode(index=len(nodes), time_index=step + 1, y=y,
                                parent=parent_idx, prob=parent.prob * p,
                                cone=cone_map(t_next, y))
                parent.children.append(node.index)
                parent.child_probs.append(p)
                nodes.append(node)
                next_level.append(node.index)
        level = next_level

    leaves = level
    reference = np.zeros((len(leaves), d))
    tree = ScenarioTree(d=d, m=spec.m, times=spec.times, nodes=nodes,
                        leaves=leaves, reference=reference)
    for pos, leaf in enumerate(leaves):
        w = np.asarray(reference_map(tree.path_y(leaf)), dtype=float)
        if w.shape != (d,):
            raise ValueError(f"reference point of shape {w.shape}, expected ({d},)")
        reference[pos] = w
    for node in nodes:
        if node.cone.dim != d:
            raise ValueError("cone dimension disagrees with asset dimension")
    return tree


# ---------------------------------------------------------------------------
# configured cone maps and reference points

def make_cone_map(config, d, tol=DEFAULT_TOL):
    """Build a (t, y) -> SolvencyCone map from its configuration.

    ``config`` carries a cost spec ("lambda": constant, or {"base", "slope"}
    applied to |y|) and optional per-asset price specs. Identical bid-ask
    matrices share one cone object, so constant maps construct a single
    cone for the whole tree.
    """
    lam_spec = config.get("lambda", 0.0)
    price_specs = config.get("prices")
    if price_specs is not None and len(price_specs) != d:
        raise ValueError(f"{len(price_specs)} price specs for {d} assets")
    cache = {}

    def lam_of(y):
        if isinstance(lam_spec, dict):
            lam = float(lam_spec.get("base", 0.0)) + \
                float(lam_spec.get("slope", 0.0)) * float(np.linalg.norm(y))
        else:
            lam = float(lam_spec)
        if lam < 0:
            raise ValueError(f"negative transaction cost {lam} at y={y}")
        return lam

    def cone_map(t, y):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        lam = lam_of(y)
        if price_specs is None:
            pi = BidAskMatrix.uniform(d, lam)
        else:
            prices = np.array([_eval_price(s, t, y) for s in price_specs])
            if np.any(prices <= 0):
                raise ValueError(f"nonpositive price at t={t}, y={y}")
            pi = BidAskMatrix.from_prices(prices, lam)
        key = np.round(pi.pi, 12).tobytes()
        if key not in cache:
            cache[key] = from_bid_ask(pi, tol=tol)
        return cache[key]

    return cone_map


def _eval_price(spec, t, y):
    kind = spec.get("kind", "constant")
    if kind == "constant":
        return float(spec["value"])
    if kind == "affine":
        j = int(spec.get("index", 0))
        return float(spec.get("intercept", 0.0)) + float(spec.get("slope", 1.0)) * float(y[j])
    if kind == "exponential":
        j = int(spec.get("index", 0))
        return float(spec.get("initial", 1.0)) * float(np.exp(y[j]))
    raise ValueError(f"unknown price spec kind {kind!r}")


def eval_reference_point(config, path):
    """Benchmark position for a driving-process path.

    Supported kinds: "constant" (fixed vector), "linear" (matrix/offset
    applied to the terminal driving value), and "components"
    (componentwise scale/shift/clamp of terminal coordinates).
    """
    path = np.atleast_2d(np.asarray(path, dtype=float))
    terminal = path[-1]
    kind = config.get("kind", "constant")
    if kind == "constant":
        return np.asarray(config["value"], dtype=float)
    if kind == "linear":
        mat = np.asarray(config["matrix"], dtype=float)
        offset = np.asarray(config.get("offset", np.zeros(mat.shape[0])), dtype=float)
        return mat @ terminal + offset
    if kind == "components":
        out = []
        for comp in config["components"]:
            ckind = comp.get("kind", "constant")
            if ckind == "constant":
                v = float(comp["value"])
            elif ckind == "terminal":
                v = float(comp.get("scale", 1.0)) * float(terminal[int(comp.get("index", 0))]) \
                    + float(comp.get("shift", 0.0))
                if "clamp_min" in comp and comp["clamp_min"] is not None:
                    v = max(v, float(comp["clamp_min"]))
                if "clamp_max" in comp and comp["clamp_max"] is not None:
                    v = min(v, float(comp["clamp_max"]))
            else:
                raise ValueError(f"unknown component kind {ckind!r}")
            out.append(v)
        return np.array(out)
    raise ValueError(f"unknown reference point kind {kind!r}")


def make_reference_map(config, d):
    def reference_map(path):
        w = eval_reference_point(config, path)
        if w.shape != (d,):
            raise ValueError(f"reference point of shape {w.shape}, expected ({d},)")
        return w
    return reference_map


# ---------------------------------------------------------------------------
# strictly consistent price systems

@dataclass
class ConsistentPriceSystem:
    """Martingale selector of the dual-cone interiors, one vector per node."""

    z: np.ndarray  # (n_nodes, d)
    margin: float

    def node_value(self, index):
        return self.z[index]


@dataclass
class CPSResult:
    found: bool
    cps: ConsistentPriceSystem | None
    margin: float | None
    message: str


def find_cps(tree: ScenarioTree, tol=DEFAULT_TOL) -> CPSResult:
    """Search for a strictly consistent price system on a scenario tree.

    One LP over all nodes: maximize the interiority margin eps subject to
    the martingale equalities Z(node) = sum_c p_c Z(child), the constraints
    Z(node).g >= eps |g| for every primal cone generator, and the
    normalization Z(root).1 = 1. A system exists iff the optimum satisfies
    eps* > tol. LP backend failures raise SolverError; they are never
    reported as infeasibility.
    """
    n, d = tree.n_nodes, tree.d
    n_var = n * d + 1  # flattened Z plus the margin

    eq_rows, eq_cols, eq_vals, b_eq = [], [], [], []
    row = 0
    for node in tree.nodes:
        if not node.children:
            continue
        for i in range(d):
            eq_rows.append(row)
            eq_cols.append(node.index * d + i)
            eq_vals.append(1.0)
            for child, p in zip(node.children, node.child_probs):
                eq_rows.append(row)
                eq_cols.append(child * d + i)
                eq_vals.append(-p)
            b_eq.append(0.0)
            row += 1
    for i in range(d):
        eq_rows.append(row)
        eq_cols.append(i)
        eq_vals.append(1.0)
    b_eq.append(1.0)
    row += 1
    A_eq = sparse.coo_matrix((eq_vals, (eq_rows, eq_cols)), shape=(row, n_var)).tocsr()

    ub_rows, ub_cols, ub_vals, b_ub = [], [], [], []
    row = 0
    for node in tree.nodes:
        gens = node.cone.generators
        norms = np.linalg.norm(gens, axis=1)
        for g, ng in zip(gens, norms):
            for i in range(d):
                if g[i] != 0.0:
                    ub_rows.append(row)
                    ub_cols.append(node.index * d + i)
                    ub_vals.append(-g[i])
            ub_rows.append(row)
            ub_cols.append(n_var - 1)
            ub_vals.append(ng)
            b_ub.append(0.0)
            row += 1
    A_ub = sparse.coo_matrix((ub_vals, (ub_rows, ub_cols)), shape=(row, n_var)).tocsr()

    c = np.zeros(n_var)
    c[-1] = -1.0
    # Z >= 0 is valid because every cone contains the positive orthant
    bounds = [(0, None)] * (n * d) + [(0, None)]
    res = solve(c, A_ub=A_ub, b_ub=np.array(b_ub), A_eq=A_eq, b_eq=np.array(b_eq),
                bounds=bounds)
    if res.status == INFEASIBLE:
        return CPSResult(False, None, None,
                         "no martingale fits the dual cones under the normalization")
    if res.status != OPTIMAL:
        raise SolverError(f"price-system LP did not solve cleanly (status {res.status})")
    margin = float(-res.fun)
    z = res.x[:-1].reshape(n, d).copy()
    if margin > tol:
        return CPSResult(True, ConsistentPriceSystem(z=z, margin=margin), margin,
                         f"strictly consistent price system found (margin {margin:.3e})")
    return CPSResult(False, None, margin,
                     f"only boundary systems exist (best margin {margin:.3e})")


def cps_martingale_gap(tree: ScenarioTree, cps: ConsistentPriceSystem):
    """Largest violation of the martingale equalities, for verification."""
    gap = 0.0
    for node in tree.nodes:
        if not node.children:
            continue
        expect = np.zeros(tree.d)
        for child, p in zip(node.children, node.child_probs):
            expect += p * cps.z[child]
        gap = max(gap, float(np.max(np.abs(cps.z[node.index] - expect))))
    return gap


def cps_interior_margin(tree: ScenarioTree, cps: ConsistentPriceSystem):
    """Smallest normalized inner product of Z against the node generators."""
    worst = np.inf
    for node in tree.nodes:
        gens = node.cone.generators
        norms = np.linalg.norm(gens, axis=1)
        worst = min(worst, float(np.min(gens @ cps.z[node.index] / norms)))
    return worst
