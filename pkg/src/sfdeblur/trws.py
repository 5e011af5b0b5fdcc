"""Sequential tree-reweighted message passing (TRW-S) for pairwise MRFs.

Nodes are processed in index order (forward) and reverse order (backward).
The lower bound is evaluated on the current reparameterization using a
decomposition of the graph into chains that are monotonic in the node
order, with node ``s`` shared by ``max(n_in(s), n_out(s))`` chains.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np


@dataclass
class DiscreteProblem:
    """Pairwise energy ``sum_i unary[i][x_i] + sum_e pairwise[e][x_i, x_j]`` over edges ``(i, j)``, ``i < j``."""

    unary: list
    edges: list
    pairwise: list

    def __post_init__(self):
        self.unary = [np.asarray(u, dtype=np.float64) for u in self.unary]
        fixed_edges, fixed_tables = [], []
        for (i, j), t in zip(self.edges, self.pairwise):
            t = np.asarray(t, dtype=np.float64)
            if i == j:
                raise ValueError("self loops are not supported")
            if i > j:
                i, j, t = j, i, t.T
            if t.shape != (len(self.unary[i]), len(self.unary[j])):
                raise ValueError(f"pairwise table of edge {(i, j)} has shape {t.shape}")
            fixed_edges.append((int(i), int(j)))
            fixed_tables.append(t)
        self.edges, self.pairwise = fixed_edges, fixed_tables
        for u in self.unary:
            if u.ndim != 1 or u.size == 0 or not np.all(np.isfinite(u)):
                raise ValueError("unary tables must be non-empty and finite")
        for t in self.pairwise:
            if not np.all(np.isfinite(t)):
                raise ValueError("pairwise tables must be finite")

    @property
    def n_nodes(self) -> int:
        return len(self.unary)

    def energy(self, labeling) -> float:
        x = np.asarray(labeling)
        e = sum(float(u[x[i]]) for i, u in enumerate(self.unary))
        e += sum(float(t[x[i], x[j]]) for (i, j), t in zip(self.edges, self.pairwise))
        return e


def brute_force(problem: DiscreteProblem):
    """Exhaustive minimum ``(labeling, energy)``; only for tiny problems."""
    best, best_x = np.inf, None
    for x in itertools.product(*[range(len(u)) for u in problem.unary]):
        e = problem.energy(x)
        if e < best:
            best, best_x = e, np.array(x)
    return best_x, best


def _chains(n: int, edges: list) -> tuple[list, np.ndarray]:
    """Monotonic chains covering every edge once; returns (chains, n_s)."""
    out_edges = [[] for _ in range(n)]
    n_in = np.zeros(n, dtype=int)
    for e, (i, j) in enumerate(edges):
        out_edges[i].append(e)
        n_in[j] += 1
    arriving = [[] for _ in range(n)]
    chains = []
    for s in range(n):
        incoming = arriving[s]
        if not incoming and not out_edges[s]:
            chains.append(([s], []))
            continue
        for k, e in enumerate(out_edges[s]):
            t = edges[e][1]
            if k < len(incoming):
                c = incoming[k]
            else:
                c = ([s], [])
                chains.append(c)
            c[0].append(t)
            c[1].append(e)
            arriving[t].append(c)
    n_out = np.array([len(o) for o in out_edges])
    ns = np.maximum(np.maximum(n_in, n_out), 1)
    return chains, ns


class TRWS:
    def __init__(self, problem: DiscreteProblem):
        self.p = problem
        n = problem.n_nodes
        self.nbrs = [[] for _ in range(n)]  # (edge index, other node, s is first endpoint)
        for e, (i, j) in enumerate(problem.edges):
            self.nbrs[i].append((e, j, True))
            self.nbrs[j].append((e, i, False))
        self.chains, self.ns = _chains(n, problem.edges)
        self.gamma = 1.0 / self.ns
        # msg[e][0]: i -> j (length L_j); msg[e][1]: j -> i (length L_i)
        self.msg = [[np.zeros(len(problem.unary[j])), np.zeros(len(problem.unary[i]))]
                    for i, j in problem.edges]

    def _incoming(self, s: int) -> np.ndarray:
        acc = self.p.unary[s].copy()
        for e, _, first in self.nbrs[s]:
            acc += self.msg[e][1] if first else self.msg[e][0]
        return acc

    def _pass(self, forward: bool, x: np.ndarray) -> None:
        n = self.p.n_nodes
        order = range(n) if forward else range(n - 1, -1, -1)
        for s in order:
            theta_hat = self._incoming(s)
            # decode conditioned on already-visited neighbours
            cond = self.p.unary[s].copy()
            for e, t, first in self.nbrs[s]:
                visited = (t < s) if forward else (t > s)
                table = self.p.pairwise[e]
                if visited:
                    cond += table[x[t], :] if not first else table[:, x[t]]
                else:
                    cond += self.msg[e][0] if not first else self.msg[e][1]
            x[s] = int(np.argmin(cond))
            g = self.gamma[s]
            for e, t, first in self.nbrs[s]:
                ahead = (t > s) if forward else (t < s)
                if not ahead:
                    continue
                table = self.p.pairwise[e]
                if first:  # s = i, t = j; send i -> j
                    back = self.msg[e][1]
                    m = np.min((g * theta_hat - back)[:, None] + table, axis=0)
                    self.msg[e][0] = m - m.min()
                else:  # s = j, t = i; send j -> i
                    back = self.msg[e][0]
                    m = np.min((g * theta_hat - back)[None, :] + table, axis=1)
                    self.msg[e][1] = m - m.min()

    def lower_bound(self) -> float:
        unary_bar = [self._incoming(s) for s in range(self.p.n_nodes)]
        total = 0.0
        for nodes, es in self.chains:
            f = unary_bar[nodes[0]] / self.ns[nodes[0]]
            for k, e in enumerate(es):
                i, j = self.p.edges[e]
                t_bar = self.p.pairwise[e] - self.msg[e][0][None, :] - self.msg[e][1][:, None]
                nxt = nodes[k + 1]
                f = np.min(f[:, None] + t_bar, axis=0) + unary_bar[nxt] / self.ns[nxt]
            total += float(f.min())
        return total


def trws_solve(problem: DiscreteProblem, max_passes: int = 50, tol: float = 1e-9):
    """Run TRW-S; returns ``(best labeling, lower-bound trace, energy trace)``.

    One trace entry is recorded per forward+backward iteration.
    """
    solver = TRWS(problem)
    n = problem.n_nodes
    x = np.zeros(n, dtype=np.intp)
    best_x = np.array([int(np.argmin(u)) for u in problem.unary], dtype=np.intp)
    best_e = problem.energy(best_x)
    lbs, energies = [], []
    for _ in range(max(1, max_passes)):
        for forward in (True, False):
            solver._pass(forward, x)
            e = problem.energy(x)
            if e < best_e - 1e-12:
                best_e, best_x = e, x.copy()
        lb = solver.lower_bound()
        lbs.append(lb)
        energies.append(best_e)
        if best_e - lb <= tol * max(1.0, abs(best_e)):
            break
        if len(lbs) > 3 and lbs[-1] - lbs[-4] <= tol * max(1.0, abs(lb)):
            break
    return best_x, lbs, energies


def write_trace_csv(path, lower_bounds, energies) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pass", "lower_bound", "energy"])
        for k, (lb, e) in enumerate(zip(lower_bounds, energies)):
            w.writerow([k, repr(float(lb)), repr(float(e))])
