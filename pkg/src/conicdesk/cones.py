"""Polyhedral solvency cones: construction, duality, membership, liquidation.

A solvency cone is the set of portfolio positions (in physical asset units)
that can be traded down to the zero position; it is generated by finitely
many vectors and always contains the positive orthant. Its dual cone is
generated by finitely many price-like vectors which certify membership via
inner products. Dual generators are computed by a sequential double
description pass, valid at desk scale (dimension <= 8).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .lp import INFEASIBLE, OPTIMAL, UNBOUNDED, SolverError, solve

DEFAULT_TOL = 1e-9

MAX_DIM = 8


class UnboundedLiquidationError(ValueError):
    """Liquidation LP is unbounded: the cone is not pointed in the numeraire direction."""


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def _matrix_rank(rows, tol):
    if len(rows) == 0:
        return 0
    s = np.linalg.svd(np.asarray(rows), compute_uv=False)
    if len(s) == 0:
        return 0
    return int(np.sum(s > tol * max(1.0, s[0])))


def double_description(normals, dim, tol=DEFAULT_TOL):
    """V-representation of the cone {x : n.x >= 0 for every n in normals}.

    Returns (rays, lineality): unit extreme rays plus an orthonormal basis
    of the lineality space, so the cone is the set of nonnegative
    combinations of the rays plus arbitrary combinations of the lineality
    basis. Constraints are inserted one at a time; adjacency of ray pairs
    is decided by the rank of their common active constraints.
    """
    if dim < 1:
        raise ValueError("dimension must be >= 1")
    lineal = [np.eye(dim)[i] for i in range(dim)]
    rays: list[np.ndarray] = []
    processed: list[np.ndarray] = []
    for raw in normals:
        a = np.asarray(raw, dtype=float)
        if a.shape != (dim,):
            raise ValueError(f"normal of shape {a.shape}, expected ({dim},)")
        norm_a = np.linalg.norm(a)
        if norm_a <= tol:
            continue
        a = a / norm_a
        comps = [abs(a @ l) for l in lineal]
        if lineal and max(comps) > tol:
            # constraint cuts the lineality space: peel one direction off
            i0 = int(np.argmax(comps))
            l0 = lineal.pop(i0)
            if a @ l0 < 0:
                l0 = -l0
            al0 = a @ l0
            new_lineal = []
            for l in lineal:
                lp = l - (a @ l) / al0 * l0
                for q in new_lineal:
                    lp = lp - (lp @ q) * q
                nl = np.linalg.norm(lp)
                if nl > tol:
                    new_lineal.append(lp / nl)
            lineal = new_lineal
            new_rays = []
            for r in rays:
                rp = r - (a @ r) / al0 * l0
                nr = np.linalg.norm(rp)
                if nr > tol:
                    new_rays.append(rp / nr)
            new_rays.append(l0)
            rays = _dedupe_rays(new_rays, tol)
        else:
            pos, zero, neg = [], [], []
            for r in rays:
                v = a @ r
                if v > tol:
                    pos.append(r)
                elif v < -tol:
                    neg.append(r)
                else:
                    zero.append(r)
            if neg:
                target = dim - len(lineal) - 2
                combos = []
                for rp, rn in itertools.product(pos, neg):
                    common = [n for n in processed
                              if abs(n @ rp) <= tol and abs(n @ rn) <= tol]
                    if target <= 0 or _matrix_rank(common, tol) >= target:
                        w = (a @ rp) * rn - (a @ rn) * rp
                        nw = np.linalg.norm(w)
                        if nw > tol:
                            combos.append(w / nw)
                rays = _dedupe_rays(pos + zero + combos, tol)
        processed.append(a)
    return rays, lineal


def _dedupe_rays(rays, tol):
    uniq: list[np.ndarray] = []
    for r in rays:
        if not any(r @ u > 1.0 - 10 * tol for u in uniq):
            uniq.append(r)
    return uniq


def dual_generators(generators, tol=DEFAULT_TOL):
    """Generators of the dual cone {z : z.g >= 0 for every generator g}.

    Output rows are unit vectors, lexicographically sorted; when the dual
    cone contains lines, both directions of each lineality basis vector are
    included so the result is a plain generating set.
    """
    gens = np.atleast_2d(np.asarray(generators, dtype=float))
    if gens.size == 0:
        raise ValueError("no generators given")
    dim = gens.shape[1]
    if dim > MAX_DIM:
        raise ValueError(f"dimension {dim} above desk-scale limit {MAX_DIM}")
    nonzero = gens[np.linalg.norm(gens, axis=1) > tol]
    if len(nonzero) == 0:
        raise ValueError("degenerate input: all generators are zero")
    rays, lineal = double_description(nonzero, dim, tol=tol)
    out = list(rays)
    for l in lineal:
        out.append(l)
        out.append(-l)
    if not out:
        return np.zeros((0, dim))
    arr = np.array(out)
    order = np.lexsort(arr.T[::-1])
    return arr[order]


@dataclass(frozen=True)
class BidAskMatrix:
    """Strictly positive exchange-rate matrix, pi[i][j] units of asset i per unit of asset j."""

    pi: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        if pi.ndim != 2 or pi.shape[0] != pi.shape[1]:
            raise ValueError("bid-ask matrix must be square")
        if not np.all(pi > 0):
            raise ValueError("bid-ask matrix entries must be strictly positive")
        if not np.all(np.diag(pi) == 1.0):
            raise ValueError("bid-ask matrix diagonal must be exactly 1")
        object.__setattr__(self, "pi", pi)

    @property
    def dim(self):
        return self.pi.shape[0]

    @classmethod
    def uniform(cls, d, lam):
        """Flat proportional cost: every off-diagonal rate is 1 + lam."""
        if lam < 0:
            raise ValueError("transaction cost must be nonnegative")
        pi = np.full((d, d), 1.0 + lam)
        np.fill_diagonal(pi, 1.0)
        return cls(pi)

    @classmethod
    def from_prices(cls, prices, lam):
        """Rates implied by per-asset prices p: pi[i][j] = (1 + lam) p_j / p_i."""
        p = np.asarray(prices, dtype=float)
        if np.any(p <= 0):
            raise ValueError("prices must be strictly positive")
        if lam < 0:
            raise ValueError("transaction cost must be nonnegative")
        pi = (1.0 + lam) * p[np.newaxis, :] / p[:, np.newaxis]
        np.fill_diagonal(pi, 1.0)
        return cls(pi)

    def to_dict(self):
        return {"pi": self.pi.tolist()}

    @classmethod
    def from_dict(cls, doc):
        return cls(np.asarray(doc["pi"], dtype=float))


class SolvencyCone:
    """Polyhedral cone of solvent positions with primal and dual generators.

    Membership is decided against the dual generators: v belongs to the cone
    iff min_z z.v >= -tol over the (unit) dual generators. The cone must
    contain the positive orthant; this is validated on construction.
    """

    def __init__(self, generators, dual=None, tol=DEFAULT_TOL):
        gens = np.atleast_2d(np.asarray(generators, dtype=float))
        if gens.size == 0:
            raise ValueError("no generators given")
        norms = np.linalg.norm(gens, axis=1)
        gens = gens[norms > tol]
        if len(gens) == 0:
            raise ValueError("degenerate input: all generators are zero")
        self.dim = gens.shape[1]
        self.generators = gens
        if dual is None:
            self.dual = dual_generators(gens, tol=tol)
        else:
            self.dual = np.atleast_2d(np.asarray(dual, dtype=float))
        self._validate(tol)

    def _validate(self, tol):
        if self.dual.size:
            if np.any(np.linalg.norm(self.dual, axis=1) <= tol):
                raise ValueError("zero dual generator")
            cross = self.dual @ self.generators.T
            scale = np.linalg.norm(self.generators, axis=1)
            if np.min(cross / scale[np.newaxis, :]) < -100 * tol:
                raise ValueError("dual generators inconsistent with primal generators")
            # positive orthant containment
            if np.min(self.dual) < -100 * tol:
                raise ValueError("cone does not contain the positive orthant")

    @property
    def n_generators(self):
        return len(self.generators)

    def margin(self, v):
        """Smallest inner product of v with the unit dual generators (+inf if dual is trivial)."""
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise ValueError(f"vector of shape {v.shape}, expected ({self.dim},)")
        if self.dual.size == 0:
            return float("inf")
        return float(np.min(self.dual @ v))

    def contains(self, v, tol=DEFAULT_TOL):
        return self.margin(v) >= -tol

    def contains_negated(self, v, tol=DEFAULT_TOL):
        """True iff v lies in -G, i.e. v is a feasible self-financing trade."""
        v = np.asarray(v, dtype=float)
        if self.dual.size == 0:
            return True
        return float(np.max(self.dual @ v)) <= tol

    def to_dict(self):
        return {
            "dim": self.dim,
            "primal_generators": self.generators.tolist(),
            "dual_generators": self.dual.tolist(),
        }

    @classmethod
    def from_dict(cls, doc, tol=DEFAULT_TOL):
        return cls(np.asarray(doc["primal_generators"], dtype=float),
                   dual=np.asarray(doc["dual_generators"], dtype=float),
                   tol=tol)

    def __repr__(self):
        return (f"SolvencyCone(dim={self.dim}, generators={self.n_generators}, "
                f"dual={len(self.dual)})")


def from_bid_ask(pi: BidAskMatrix, tol=DEFAULT_TOL) -> SolvencyCone:
    """Solvency cone of a bid-ask matrix.

    Generators are the basis vectors plus, for every ordered pair i != j,
    the position pi[i][j] e_i - e_j (holding pi[i][j] units of asset i
    covers a one-unit short in asset j).
    """
    d = pi.dim
    gens = [np.eye(d)[i] for i in range(d)]
    for i in range(d):
        for j in range(d):
            if i != j:
                g = np.zeros(d)
                g[i] = pi.pi[i, j]
                g[j] = -1.0
                gens.append(g)
    return SolvencyCone(np.array(gens), tol=tol)


def kabanov_cone(d, lam, tol=DEFAULT_TOL) -> SolvencyCone:
    """Solvency cone with flat proportional cost lam in d assets."""
    return from_bid_ask(BidAskMatrix.uniform(d, lam), tol=tol)


def membership_lp(generators, v, tol=DEFAULT_TOL):
    """LP route for cone membership: is v a nonnegative combination of the generators?

    Solves min ||v - G^T lambda||_1 over lambda >= 0 (via slack variables)
    and accepts when the optimal residual is <= tol. Returns
    (is_member, residual). Independent of the dual-generator route.
    """
    gens = np.atleast_2d(np.asarray(generators, dtype=float))
    v = np.asarray(v, dtype=float)
    k, d = gens.shape
    if v.shape != (d,):
        raise ValueError(f"vector of shape {v.shape}, expected ({d},)")
    c = np.concatenate([np.zeros(k), np.ones(2 * d)])
    A_eq = np.hstack([gens.T, np.eye(d), -np.eye(d)])
    res = solve(c, A_eq=A_eq, b_eq=v, bounds=(0, None))
    if res.status != OPTIMAL:
        raise SolverError(f"membership LP did not solve cleanly (status {res.status})")
    residual = float(res.fun)
    return residual <= tol, residual


def membership_lp_batch(generators, vectors, tol=DEFAULT_TOL):
    """Batched membership LPs: one block-diagonal solve for many vectors.

    Identical to calling membership_lp per vector (the objective is
    separable across blocks) but orders of magnitude faster. Returns
    (bool array, residual array).
    """
    gens = np.atleast_2d(np.asarray(generators, dtype=float))
    V = np.atleast_2d(np.asarray(vectors, dtype=float))
    k, d = gens.shape
    n = len(V)
    blk = sparse.csr_matrix(np.hstack([gens.T, np.eye(d), -np.eye(d)]))
    A_eq = sparse.block_diag([blk] * n, format="csr")
    b_eq = V.ravel()
    c = np.tile(np.concatenate([np.zeros(k), np.ones(2 * d)]), n)
    res = solve(c, A_eq=A_eq, b_eq=b_eq, bounds=(0, None))
    if res.status != OPTIMAL:
        raise SolverError(f"batched membership LP did not solve cleanly (status {res.status})")
    x = res.x.reshape(n, k + 2 * d)
    residuals = x[:, k:].sum(axis=1)
    return residuals <= tol, residuals


@dataclass(frozen=True)
class InteriorCertificate:
    """Outcome of the efficient-friction test: dual interior nonempty iff margin > tol."""

    nonempty: bool
    margin: float
    certificate: np.ndarray | None


def interior_nonempty(cone: SolvencyCone, tol=DEFAULT_TOL) -> InteriorCertificate:
    """Test int G* != 0 by LP: max eps s.t. z.g >= eps|g| for all generators, |z|_inf <= 1.

    The optimum is reached at eps* >= 0 (z = 0 is feasible); the interior is
    nonempty exactly when eps* > tol, and then z* is a strict certificate.
    Solver breakdown raises SolverError, distinct from an "empty" verdict.
    """
    gens = cone.generators
    k, d = gens.shape
    norms = np.linalg.norm(gens, axis=1)
    # variables (z_1..z_d, eps); minimize -eps
    c = np.zeros(d + 1)
    c[-1] = -1.0
    A_ub = np.hstack([-gens, norms[:, np.newaxis]])
    b_ub = np.zeros(k)
    bounds = [(-1.0, 1.0)] * d + [(None, None)]
    res = solve(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds)
    if res.status != OPTIMAL:
        raise SolverError(f"efficient-friction LP did not solve cleanly (status {res.status})")
    eps = float(-res.fun)
    if eps > tol:
        return InteriorCertificate(True, eps, res.x[:d].copy())
    return InteriorCertificate(False, eps, None)


def liquidation_value(cone: SolvencyCone, x, numeraire, tol=DEFAULT_TOL):
    """Largest cash amount extractable from position x.

    Value of the LP max{c : x - c e_num in G}, computed in closed form from
    the dual generators: the constraints read c z_num <= z.x per dual
    generator z, so the optimum is the smallest ratio z.x / z_num. Returns
    -inf when no c is feasible; raises UnboundedLiquidationError when the
    LP is unbounded (no dual generator sees the numeraire).
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (cone.dim,):
        raise ValueError(f"position of shape {x.shape}, expected ({cone.dim},)")
    if not 0 <= numeraire < cone.dim:
        raise ValueError(f"numeraire index {numeraire} out of range")
    Z = cone.dual
    if Z.size == 0:
        raise UnboundedLiquidationError("cone is the whole space; liquidation value unbounded")
    zn = Z[:, numeraire]
    active = zn > tol
    if not np.any(active):
        raise UnboundedLiquidationError(
            "no dual generator has weight on the numeraire; liquidation value unbounded")
    inactive = ~active
    if np.any(inactive):
        scale = 1.0 + float(np.linalg.norm(x))
        if np.min(Z[inactive] @ x) < -tol * scale:
            return float("-inf")
    return float(np.min((Z[active] @ x) / zn[active]))
