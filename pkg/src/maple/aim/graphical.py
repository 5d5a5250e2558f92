"""Log-linear models over a categorical domain, with junction-tree inference.

A model is defined by log-potentials on a set of attribute cliques. Inference
triangulates the clique graph greedily (smallest new clique first), joins the
maximal cliques into a junction tree, and runs two-pass sum-product message
passing in log space. Marginals over attribute sets that no single tree clique
covers are computed by eliminating along the smallest subtree covering them.
"""

from __future__ import annotations

import itertools
import math
from collections import deque
from typing import Iterable, Mapping, Sequence

import networkx as nx
import numpy as np

from ..errors import InvalidArgumentError

Clique = tuple[int, ...]


def _shape(attrs: Sequence[int], sizes: Sequence[int]) -> tuple[int, ...]:
    return tuple(sizes[a] for a in attrs)


def _aligned(values: np.ndarray, attrs: Clique, target: Clique) -> np.ndarray:
    """View of ``values`` (axes = ``attrs``) broadcastable against the axes ``target``."""
    pos = {a: i for i, a in enumerate(attrs)}
    shape = [values.shape[pos[a]] if a in pos else 1 for a in target]
    return values.reshape(shape)


def logsumexp(values: np.ndarray, axis=None) -> np.ndarray:
    peak = np.max(values, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    out = np.log(np.sum(np.exp(values - peak), axis=axis, keepdims=True)) + peak
    return np.squeeze(out, axis=axis) if axis is not None else out.reshape(())


def _reduce(values: np.ndarray, attrs: Clique, keep: Clique, log: bool) -> np.ndarray:
    axes = tuple(i for i, a in enumerate(attrs) if a not in keep)
    if not axes:
        return values
    if log:
        return logsumexp(values, axis=axes)
    return values.sum(axis=axes)


def cell_count(sizes: Sequence[int], clique: Iterable[int]) -> int:
    return math.prod(sizes[a] for a in clique)


class JunctionTree:
    """Junction tree over the attribute graph induced by ``cliques``.

    Every attribute in ``range(len(sizes))`` is included, so the tree also covers
    attributes that appear in no clique.
    """

    def __init__(self, sizes: Sequence[int], cliques: Iterable[Sequence[int]]):
        self.sizes = tuple(int(s) for s in sizes)
        self._homes: dict[Clique, int | None] = {}
        d = len(self.sizes)
        adj: dict[int, set[int]] = {v: set() for v in range(d)}
        for cl in cliques:
            for a, b in itertools.combinations(cl, 2):
                adj[a].add(b)
                adj[b].add(a)

        remaining = set(range(d))
        elim_cliques: list[frozenset[int]] = []
        while remaining:
            def cost(v):
                nbrs = adj[v] & remaining
                fill = sum(1 for a, b in itertools.combinations(nbrs, 2) if b not in adj[a])
                return cell_count(self.sizes, nbrs | {v}), fill, v

            v = min(remaining, key=cost)
            nbrs = adj[v] & remaining
            elim_cliques.append(frozenset(nbrs | {v}))
            for a, b in itertools.combinations(nbrs, 2):
                adj[a].add(b)
                adj[b].add(a)
            remaining.remove(v)

        maximal = []
        for c in elim_cliques:
            if not any(c < o for o in elim_cliques) and c not in maximal:
                maximal.append(c)
        self.cliques: list[Clique] = sorted((tuple(sorted(c)) for c in maximal), key=lambda c: (-len(c), c))

        graph = nx.Graph()
        graph.add_nodes_from(range(len(self.cliques)))
        for i, j in itertools.combinations(range(len(self.cliques)), 2):
            graph.add_edge(i, j, weight=len(set(self.cliques[i]) & set(self.cliques[j])))
        tree = nx.maximum_spanning_tree(graph) if len(self.cliques) > 1 else graph
        self.neighbors: dict[int, list[int]] = {i: sorted(tree.neighbors(i)) for i in tree.nodes}

        # BFS from clique 0 fixes parent pointers and a message schedule
        self.parent: dict[int, int | None] = {0: None}
        self.order: list[int] = []
        queue = deque([0])
        while queue:
            node = queue.popleft()
            self.order.append(node)
            for nb in self.neighbors[node]:
                if nb not in self.parent:
                    self.parent[nb] = node
                    queue.append(nb)
        self.children: dict[int, list[int]] = {i: [] for i in self.order}
        for node, par in self.parent.items():
            if par is not None:
                self.children[par].append(node)

    @property
    def total_cells(self) -> int:
        return sum(cell_count(self.sizes, c) for c in self.cliques)

    def separator(self, i: int, j: int) -> Clique:
        return tuple(sorted(set(self.cliques[i]) & set(self.cliques[j])))

    def home(self, attrs: Iterable[int]) -> int | None:
        """Index of the smallest tree clique containing ``attrs``, or None."""
        key = tuple(attrs)
        if key not in self._homes:
            self._homes[key] = self._find_home(set(key))
        return self._homes[key]

    def _find_home(self, attrs: set[int]) -> int | None:
        best = None
        for i, c in enumerate(self.cliques):
            if attrs <= set(c) and (best is None or cell_count(self.sizes, c) < cell_count(self.sizes, self.cliques[best])):
                best = i
        return best

    def covers(self, attrs: Iterable[int]) -> bool:
        return self.home(attrs) is not None

    def _schedule(self):
        """Per directed edge: the axes summed out of the sender and the receiver-side reshape."""
        if not hasattr(self, "_sched"):
            sched = {}
            for i, nbs in self.neighbors.items():
                for j in nbs:
                    sep = self.separator(i, j)
                    axes = tuple(k for k, a in enumerate(self.cliques[i]) if a not in sep)
                    shape = tuple(self.sizes[a] if a in sep else 1 for a in self.cliques[j])
                    sched[(i, j)] = (axes, shape)
            self._sched = sched
        return self._sched

    def _log_potentials(self, potentials: Mapping[Clique, np.ndarray]) -> list[np.ndarray]:
        log_pot = [np.zeros(_shape(c, self.sizes)) for c in self.cliques]
        for cl, theta in potentials.items():
            h = self.home(cl)
            if h is None:
                raise InvalidArgumentError(f"clique {cl} is not covered by the junction tree")
            log_pot[h] = log_pot[h] + _aligned(theta, cl, self.cliques[h])
        return log_pot

    def calibrate(self, potentials: Mapping[Clique, np.ndarray]) -> tuple[list[np.ndarray], float]:
        """Sum-product message passing. Returns normalized clique probability tables and log Z.

        Runs in probability space with per-message rescaling; falls back to log space if a
        message underflows.
        """
        log_pot = self._log_potentials(potentials)
        sched = self._schedule()
        shifts = [float(lp.max()) for lp in log_pot]
        pot = [np.exp(lp - m) for lp, m in zip(log_pot, shifts)]
        messages: dict[tuple[int, int], np.ndarray] = {}
        log_scale = math.fsum(shifts)

        def gathered(node: int, exclude: int | None) -> np.ndarray:
            acc = pot[node]
            for nb in self.neighbors[node]:
                if nb != exclude and (nb, node) in messages:
                    acc = acc * messages[(nb, node)]
            return acc

        def send(node: int, to: int) -> float:
            axes, shape = sched[(node, to)]
            msg = gathered(node, to)
            msg = msg.sum(axis=axes) if axes else msg
            total = float(msg.sum())
            if not (total > 0 and math.isfinite(total)):
                raise FloatingPointError
            messages[(node, to)] = (msg / total).reshape(shape)
            return math.log(total)

        try:
            for node in reversed(self.order):
                par = self.parent[node]
                if par is not None:
                    log_scale += send(node, par)
            for node in self.order:
                for child in self.children[node]:
                    send(node, child)
            beliefs = []
            for i in range(len(self.cliques)):
                b = gathered(i, None)
                if i == self.order[0]:
                    root_total = float(b.sum())
                total = float(b.sum())
                if not (total > 0 and math.isfinite(total)):
                    raise FloatingPointError
                beliefs.append(b / total)
            return beliefs, log_scale + math.log(root_total)
        except FloatingPointError:
            return self._calibrate_log(log_pot)

    def _calibrate_log(self, log_pot: list[np.ndarray]) -> tuple[list[np.ndarray], float]:
        messages: dict[tuple[int, int], np.ndarray] = {}

        def gathered(node: int, exclude: int | None) -> np.ndarray:
            acc = log_pot[node]
            for nb in self.neighbors[node]:
                if nb != exclude and (nb, node) in messages:
                    sep = self.separator(nb, node)
                    acc = acc + _aligned(messages[(nb, node)], sep, self.cliques[node])
            return acc

        for node in reversed(self.order):
            par = self.parent[node]
            if par is not None:
                sep = self.separator(node, par)
                messages[(node, par)] = _reduce(gathered(node, par), self.cliques[node], sep, log=True)
        for node in self.order:
            for child in self.children[node]:
                sep = self.separator(node, child)
                messages[(node, child)] = _reduce(gathered(node, child), self.cliques[node], sep, log=True)

        beliefs = [gathered(i, None) for i in range(len(self.cliques))]
        log_z = float(logsumexp(beliefs[0]))
        return [np.exp(b - logsumexp(b)) for b in beliefs], log_z


class LogLinearModel:
    """A distribution p(x) proportional to exp(sum_c theta_c(x_c)) over a categorical domain."""

    def __init__(self, sizes: Sequence[int], potentials: Mapping[Clique, np.ndarray], total: float = 1.0,
                 tree: JunctionTree | None = None):
        self.sizes = tuple(int(s) for s in sizes)
        self.potentials = {tuple(c): np.asarray(v, dtype=float) for c, v in potentials.items()}
        for c, v in self.potentials.items():
            if v.shape != _shape(c, self.sizes):
                raise InvalidArgumentError(f"potential for {c} has shape {v.shape}")
        self.total = float(total)
        self.tree = tree if tree is not None else JunctionTree(self.sizes, self.potentials.keys())
        self.beliefs, self.log_z = self.tree.calibrate(self.potentials)

    @property
    def cliques(self) -> list[Clique]:
        return list(self.potentials)

    def project(self, attrs: Sequence[int]) -> np.ndarray:
        """Probability table over the sorted attribute tuple ``attrs`` (axes in that order)."""
        attrs = tuple(attrs)
        if list(attrs) != sorted(set(attrs)):
            raise InvalidArgumentError(f"attributes must be sorted and distinct, got {attrs}")
        h = self.tree.home(attrs)
        if h is not None:
            return _reduce(self.beliefs[h], self.tree.cliques[h], attrs, log=False)
        return self._subtree_marginal(attrs)

    def _subtree_marginal(self, attrs: Clique) -> np.ndarray:
        tree = self.tree
        targets = [tree.home((a,)) for a in attrs]
        graph = nx.Graph([(i, j) for i in tree.neighbors for j in tree.neighbors[i]])
        graph.add_nodes_from(tree.neighbors)
        nodes = {targets[0]}
        for t in targets[1:]:
            nodes.update(nx.shortest_path(graph, targets[0], t))
        root = targets[0]
        # eliminate leaves of the covering subtree toward its root, carrying needed attributes
        order, parent, queue = [], {root: None}, deque([root])
        while queue:
            node = queue.popleft()
            order.append(node)
            for nb in tree.neighbors[node]:
                if nb in nodes and nb not in parent:
                    parent[nb] = node
                    queue.append(nb)
        wanted = set(attrs)
        incoming: dict[int, list[tuple[Clique, np.ndarray]]] = {n: [] for n in order}
        for node in reversed(order):
            scope = set(tree.cliques[node])
            for sc, _ in incoming[node]:
                scope |= set(sc)
            scope_t = tuple(sorted(scope))
            table = _aligned(self.beliefs[node], tree.cliques[node], scope_t)
            par = parent[node]
            if par is not None:
                sep = tree.separator(node, par)
                sep_marg = _reduce(self.beliefs[node], tree.cliques[node], sep, log=False)
                with np.errstate(divide="ignore", invalid="ignore"):
                    inv = np.where(sep_marg > 0, 1.0 / sep_marg, 0.0)
                table = table * _aligned(inv, sep, scope_t)
            for sc, msg in incoming[node]:
                table = table * _aligned(msg, sc, scope_t)
            table = np.broadcast_to(table, _shape(scope_t, self.sizes))
            if par is None:
                return _reduce(table, scope_t, attrs, log=False)
            keep = tuple(sorted((wanted & scope) | set(tree.separator(node, par))))
            # separator division belongs to the child, so what goes up is conditional on the separator
            incoming[par].append((keep, _reduce(table, scope_t, keep, log=False)))
        raise AssertionError("unreachable")

    def counts(self, attrs: Sequence[int]) -> np.ndarray:
        """Flattened model marginal scaled to the model's record total."""
        return self.total * self.project(attrs).ravel()

    def joint(self) -> np.ndarray:
        """Full joint table; only sensible for small domains."""
        return self.project(tuple(range(len(self.sizes))))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Ancestral sampling along the junction tree; returns an ``(n, d)`` index array."""
        d = len(self.sizes)
        out = np.zeros((n, d), dtype=np.int64)
        if n == 0:
            return out
        done: set[int] = set()
        tree = self.tree
        for node in tree.order:
            clique = tree.cliques[node]
            table = self.beliefs[node]
            given = tuple(a for a in clique if a in done)
            new = tuple(a for a in clique if a not in done)
            if not new:
                continue
            # reorder axes as (given..., new...) and flatten into a conditional table
            perm = [clique.index(a) for a in given + new]
            cond = np.transpose(table, perm).reshape(cell_count(self.sizes, given), cell_count(self.sizes, new))
            if given:
                row = np.ravel_multi_index(tuple(out[:, a] for a in given), _shape(given, self.sizes))
            else:
                row = np.zeros(n, dtype=np.int64)
            picks = np.empty(n, dtype=np.int64)
            u = rng.random(n)
            for r in np.unique(row):
                mask = row == r
                weights = np.clip(cond[r], 0.0, None)
                s = weights.sum()
                cdf = np.cumsum(weights / s) if s > 0 else np.linspace(1.0 / len(weights), 1.0, len(weights))
                picks[mask] = np.minimum(np.searchsorted(cdf, u[mask], side="right"), len(cdf) - 1)
            cols = np.unravel_index(picks, _shape(new, self.sizes))
            for a, col in zip(new, cols):
                out[:, a] = col
            done.update(new)
        return out

    def to_dict(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "total": self.total,
            "potentials": [{"clique": list(c), "values": v.ravel().tolist()} for c, v in self.potentials.items()],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "LogLinearModel":
        sizes = data["sizes"]
        pots = {}
        for item in data["potentials"]:
            c = tuple(item["clique"])
            pots[c] = np.asarray(item["values"], dtype=float).reshape(_shape(c, sizes))
        return cls(sizes, pots, data["total"])
