"""Back-door checks on causal DAGs, adjustment estimates, and the conditional
causal effect of model choice on a saliency map."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .model import Model
from .saliency import Target, saliency
from .tasks import TaskPosterior


class UnknownNodeError(KeyError):
    pass


class CyclicGraphError(ValueError):
    pass


class BackdoorViolation(ValueError):
    pass


class PositivityError(ValueError):
    pass


class CausalDag:
    def __init__(self, nodes: Iterable[str], edges: Iterable[tuple[str, str]]):
        self.nodes: tuple[str, ...] = tuple(nodes)
        if len(set(self.nodes)) != len(self.nodes):
            raise ValueError("node names must be unique")
        self.edges: tuple[tuple[str, str], ...] = tuple((a, b) for a, b in edges)
        known = set(self.nodes)
        for a, b in self.edges:
            if a not in known or b not in known:
                raise UnknownNodeError(f"edge {a} -> {b} references an unknown node")
        self._parents = {n: [] for n in self.nodes}
        self._children = {n: [] for n in self.nodes}
        for a, b in self.edges:
            self._parents[b].append(a)
            self._children[a].append(b)
        self.topological_order()

    @classmethod
    def from_edges(cls, edges: Iterable[tuple[str, str]]) -> "CausalDag":
        edges = list(edges)
        nodes = list(dict.fromkeys(n for e in edges for n in e))
        return cls(nodes, edges)

    @classmethod
    def parse(cls, text: str) -> "CausalDag":
        """One ``a -> b`` edge per line; a bare name declares an isolated node; ``#`` starts a comment."""
        nodes, edges = [], []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "->" in line:
                a, _, b = line.partition("->")
                a, b = a.strip(), b.strip()
                if not a or not b or "->" in b:
                    raise ValueError(f"line {lineno}: expected 'a -> b', got {raw!r}")
                edges.append((a, b))
                nodes += [a, b]
            else:
                nodes.append(line)
        return cls(list(dict.fromkeys(nodes)), edges)

    def parents(self, node: str) -> list[str]:
        return list(self._parents[self._check(node)])

    def children(self, node: str) -> list[str]:
        return list(self._children[self._check(node)])

    def _check(self, node: str) -> str:
        if node not in self._parents:
            raise UnknownNodeError(f"unknown node {node!r}")
        return node

    def topological_order(self) -> list[str]:
        indeg = {n: len(self._parents[n]) for n in self.nodes}
        ready = [n for n in self.nodes if indeg[n] == 0]
        order = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            for c in self._children[n]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
        if len(order) != len(self.nodes):
            raise CyclicGraphError("graph contains a directed cycle")
        return order

    def descendants(self, node: str) -> set[str]:
        seen, stack = set(), [self._check(node)]
        while stack:
            for c in self._children[stack.pop()]:
                if c not in seen:
                    seen.add(c)
                    stack.append(c)
        return seen

    def ancestors(self, nodes: Iterable[str]) -> set[str]:
        seen = set(nodes)
        stack = list(seen)
        while stack:
            for p in self._parents[stack.pop()]:
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return seen


SANITY_DAG_EDGES = (("T", "M"), ("T", "X"), ("X", "S"), ("M", "S"))


def sanity_check_dag() -> CausalDag:
    """Task T drives both the model M and the image X; S depends on X and M."""
    return CausalDag(("T", "X", "M", "S"), SANITY_DAG_EDGES)


def _d_separated(dag: CausalDag, x: str, y: str, z: set[str], drop_out_of: Optional[str] = None) -> bool:
    # Moralized ancestral graph; optionally with the out-edges of ``drop_out_of`` deleted.
    def parents(n):
        return [p for p in dag._parents[n] if p != drop_out_of]

    relevant = {x, y} | z
    stack = list(relevant)
    while stack:
        for p in parents(stack.pop()):
            if p not in relevant:
                relevant.add(p)
                stack.append(p)
    adj = {n: set() for n in relevant}
    for n in relevant:
        ps = parents(n)
        for p in ps:
            adj[n].add(p)
            adj[p].add(n)
        for a, b in itertools.combinations(ps, 2):
            adj[a].add(b)
            adj[b].add(a)
    seen, stack = {x}, [x]
    while stack:
        for m in adj[stack.pop()]:
            if m == y:
                return False
            if m not in seen and m not in z:
                seen.add(m)
                stack.append(m)
    return True


def path_is_blocked(dag: CausalDag, path: Sequence[str], z: set[str]) -> bool:
    for prev, mid, nxt in zip(path, path[1:], path[2:]):
        collider = prev in dag._parents[mid] and nxt in dag._parents[mid]
        if collider:
            if mid not in z and not (dag.descendants(mid) & z):
                return True
        elif mid in z:
            return True
    return False


def format_path(dag: CausalDag, path: Sequence[str]) -> str:
    out = [path[0]]
    for a, b in zip(path, path[1:]):
        out.append("→" if b in dag._children[a] else "←")
        out.append(b)
    return " ".join(out)


def _open_backdoor_path(dag: CausalDag, x: str, y: str, z: set[str]) -> Optional[list[str]]:
    def extend(path):
        last = path[-1]
        for nb in sorted(set(dag._parents[last]) | set(dag._children[last])):
            if nb in path:
                continue
            if len(path) == 1 and nb not in dag._parents[x]:
                continue  # back-door paths start with an arrow into x
            cand = path + [nb]
            if nb == y:
                if not path_is_blocked(dag, cand, z):
                    return cand
                continue
            found = extend(cand)
            if found:
                return found
        return None

    return extend([x])


@dataclass(frozen=True)
class BackdoorResult:
    satisfied: bool
    reason: str = ""
    path: Optional[tuple[str, ...]] = None
    descendant: Optional[str] = None
    certificate: str = ""

    def __bool__(self) -> bool:
        return self.satisfied


def backdoor_satisfies(dag: CausalDag, x: str, y: str, z: Iterable[str]) -> BackdoorResult:
    """Whether ``z`` satisfies the back-door criterion relative to ``(x, y)``.

    On failure the result carries a certificate: either a member of ``z`` that
    descends from ``x``, or an unblocked path that starts with an arrow into ``x``.
    """
    z = set(z)
    for n in [x, y, *sorted(z)]:
        dag._check(n)
    if x in z or y in z:
        raise ValueError("x and y must not belong to the adjustment set")
    if x == y:
        raise ValueError("x and y must differ")
    bad = sorted(dag.descendants(x) & z)
    if bad:
        return BackdoorResult(False, "descendant", descendant=bad[0],
                              certificate=f"{bad[0]} is a descendant of {x}")
    if _d_separated(dag, x, y, z, drop_out_of=x):
        return BackdoorResult(True)
    path = _open_backdoor_path(dag, x, y, z)
    return BackdoorResult(False, "open path", path=tuple(path), certificate=format_path(dag, path))


# --------------------------------------------------------------------------
# Discrete adjustment
# --------------------------------------------------------------------------

@dataclass
class DiscreteDistribution:
    variables: tuple[str, ...]
    domains: tuple[tuple, ...]
    table: np.ndarray

    def __post_init__(self):
        self.variables = tuple(self.variables)
        self.domains = tuple(tuple(d) for d in self.domains)
        self.table = np.asarray(self.table, dtype=np.float64)
        if len(self.variables) != len(self.domains) or len(set(self.variables)) != len(self.variables):
            raise ValueError("each variable needs exactly one domain and names must be unique")
        if self.table.shape != tuple(len(d) for d in self.domains):
            raise ValueError(f"table shape {self.table.shape} does not cover the product domain")
        if (self.table < 0).any() or abs(self.table.sum() - 1.0) > 1e-12:
            raise ValueError("joint table must be non-negative and sum to 1")

    @classmethod
    def from_cpts(cls, dag: CausalDag, domains: Mapping[str, Sequence],
                  cpts: Mapping[str, np.ndarray]) -> "DiscreteDistribution":
        """Joint of a Bayesian network. ``cpts[v]`` is indexed by (parents in dag order..., v)."""
        variables = tuple(dag.nodes)
        letters = {v: chr(ord("a") + i) for i, v in enumerate(variables)}
        operands, subs = [], []
        for v in variables:
            subs.append("".join(letters[p] for p in dag.parents(v)) + letters[v])
            operands.append(np.asarray(cpts[v], dtype=np.float64))
        table = np.einsum(",".join(subs) + "->" + "".join(letters[v] for v in variables), *operands)
        return cls(variables, tuple(tuple(domains[v]) for v in variables), table)

    def _index(self, var: str, value) -> int:
        if var not in self.variables:
            raise UnknownNodeError(f"unknown variable {var!r}")
        dom = self.domains[self.variables.index(var)]
        if value not in dom:
            raise ValueError(f"{value!r} is not in the domain of {var}")
        return dom.index(value)

    def prob(self, assignment: Mapping[str, object]) -> float:
        """Marginal probability of a partial assignment."""
        idx = [slice(None)] * len(self.variables)
        for var, val in assignment.items():
            pos = self._index(var, val)
            idx[self.variables.index(var)] = pos
        return float(self.table[tuple(idx)].sum())


def adjustment_estimate(dist: DiscreteDistribution, dag: CausalDag, x: Mapping[str, object],
                        y: Mapping[str, object], z: Iterable[str]) -> float:
    """Sum over z of Pr(y | x, z) Pr(z), after verifying the back-door criterion."""
    z = tuple(sorted(set(z)))
    if len(x) != 1 or len(y) != 1:
        raise ValueError("x and y must each assign exactly one variable")
    (xv, _), (yv, _) = next(iter(x.items())), next(iter(y.items()))
    check = backdoor_satisfies(dag, xv, yv, z)
    if not check:
        raise BackdoorViolation(f"{set(z) or '{}'} does not satisfy the back-door criterion "
                                f"for ({xv}, {yv}): {check.certificate}")
    domains = [dist.domains[dist.variables.index(v)] for v in z]
    total = 0.0
    for values in itertools.product(*domains):
        zs = dict(zip(z, values))
        p_z = dist.prob(zs)
        if p_z == 0:
            continue
        p_xz = dist.prob({**x, **zs})
        if p_xz == 0:
            raise PositivityError(f"Pr({xv}={x[xv]}, {zs}) = 0 while Pr({zs}) > 0")
        total += dist.prob({**y, **x, **zs}) / p_xz * p_z
    return total


# --------------------------------------------------------------------------
# Conditional causal effect of model choice
# --------------------------------------------------------------------------

SaliencyFn = Callable[[Model, np.ndarray, str, Target, Optional[int]], np.ndarray]


def _default_saliency(model, x, method, target, true_label) -> np.ndarray:
    return saliency(model, x, method, target, true_label).values


@dataclass
class EffectResult:
    lambda_map: np.ndarray
    differences: dict[str, np.ndarray]
    trained_maps: dict[str, np.ndarray]
    random_map: np.ndarray
    posterior: TaskPosterior
    method: str
    magnitude: float = 0.0

    def recompute(self) -> np.ndarray:
        return _weighted_sum(self.differences, self.posterior)


def _weighted_sum(maps: Mapping[str, np.ndarray], posterior: TaskPosterior) -> np.ndarray:
    out = np.zeros_like(next(iter(maps.values())))
    for task, p in zip(posterior.tasks, posterior.probs):
        out = out + p * maps[task]
    return out


def _abs_maxnorm(v: np.ndarray) -> np.ndarray:
    peak = np.abs(v).max()
    return np.abs(v) / peak if peak > 0 else np.zeros_like(v)


def effect_magnitude(trained_maps: Mapping[str, np.ndarray], random_map: np.ndarray,
                     posterior: TaskPosterior) -> float:
    """Mean |entry| of the effect map rebuilt from abs-maxnormed constituent maps."""
    r = _abs_maxnorm(random_map)
    diffs = {t: _abs_maxnorm(m) - r for t, m in trained_maps.items()}
    return float(np.abs(_weighted_sum(diffs, posterior)).mean())


def lambda_effect(x, tasks: Sequence[tuple[str, Model]], random_model: Model, method: str,
                  target: Union[str, Target], posterior: TaskPosterior,
                  true_label: Optional[int] = None,
                  saliency_fn: Optional[SaliencyFn] = None) -> EffectResult:
    """Posterior-weighted sum over tasks of S(x; M_t) - S(x; M'), on raw signed maps."""
    target = target if isinstance(target, Target) else Target(target)
    names = [t for t, _ in tasks]
    if len(set(names)) != len(names) or set(names) != set(posterior.tasks) or len(names) != len(posterior.tasks):
        raise ValueError(f"posterior covers {posterior.tasks} but models were given for {tuple(names)}")
    fn = saliency_fn or _default_saliency
    data = np.asarray(x, dtype=np.float64)
    random_map = np.asarray(fn(random_model, data, method, target, true_label), dtype=np.float64)
    trained, diffs = {}, {}
    for task, model in tasks:
        m = np.asarray(fn(model, data, method, target, true_label), dtype=np.float64)
        if m.shape != random_map.shape:
            raise ValueError(f"map for task {task!r} has shape {m.shape}, random map {random_map.shape}")
        trained[task] = m
        diffs[task] = m - random_map
    lam = _weighted_sum(diffs, posterior)
    return EffectResult(lam, diffs, trained, random_map, posterior, method,
                        effect_magnitude(trained, random_map, posterior))
