"""Synthetic datasets: Eulerian circuits on random graphs, copy and reverse.

Datasets are lists of :class:`TaskInstance` over a shared :class:`Vocab`.  On
disk a dataset is a text file whose first line is a header declaring the
task kind and the vocabulary, followed by one ``source<TAB>target`` line per
instance with space-separated token strings.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np

from .compute import ContractError

PAD, BOS, EOS, SEP, START = "PAD", "BOS", "EOS", "SEP", "START"
HEADER_TAG = "#plangen-dataset"


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self._index

    def id(self, tok: str) -> int:
        try:
            return self._index[tok]
        except KeyError:
            raise KeyError(f"token {tok!r} not in vocabulary") from None

    def encode(self, toks: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.id(t) for t in toks)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def bos(self) -> int:
        return self.id(BOS)

    @property
    def eos(self) -> int:
        return self.id(EOS)

    @property
    def pad(self) -> int:
        return self.id(PAD)


@dataclass(frozen=True)
class TaskInstance:
    source: tuple[int, ...]
    target: tuple[int, ...]
    id: int = 0
    kind: str = "copy"

    def __post_init__(self):
        if not self.target:
            raise ValueError("target must be non-empty")


@dataclass
class Dataset:
    vocab: Vocab
    kind: str
    instances: list[TaskInstance]

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def __getitem__(self, i):
        return self.instances[i]


# ---------------------------------------------------------------- graphs

@dataclass(frozen=True)
class Graph:
    """Undirected simple graph on nodes ``1..n``; edges stored as ``(u, v)`` with ``u < v``."""

    n: int
    edges: frozenset[tuple[int, int]]

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]]) -> "Graph":
        norm = set()
        for u, v in edges:
            if u == v:
                raise ValueError(f"self-loop at node {u}")
            if not (1 <= u <= n and 1 <= v <= n):
                raise ValueError(f"edge ({u}, {v}) outside nodes 1..{n}")
            e = (min(u, v), max(u, v))
            if e in norm:
                raise ValueError(f"duplicate edge {e}")
            norm.add(e)
        return cls(n, frozenset(norm))

    def adjacency(self) -> dict[int, list[int]]:
        adj: dict[int, list[int]] = {v: [] for v in range(1, self.n + 1)}
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        for nbrs in adj.values():
            nbrs.sort()
        return adj

    def degrees(self) -> dict[int, int]:
        return {v: len(nb) for v, nb in self.adjacency().items()}

    def is_connected(self) -> bool:
        """All ``n`` nodes reachable from node 1."""
        adj = self.adjacency()
        seen, stack = {1}, [1]
        while stack:
            for w in adj[stack.pop()]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return len(seen) == self.n

    def is_eulerian(self) -> bool:
        return bool(self.edges) and self.is_connected() and all(d % 2 == 0 for d in self.degrees().values())


def gen_eulerian_graph(n: int, rng: np.random.Generator) -> Graph:
    """Random connected even-degree simple graph on ``n`` nodes.

    Random simple cycles are combined by symmetric difference of edge sets
    until the result spans all nodes and is connected.  A symmetric
    difference of even-degree edge sets is again even-degree, so repeated
    edges cancel without ever breaking parity.
    """
    if n < 3:
        raise ValueError(f"n >= 3 required, got n={n}")
    edges: set[tuple[int, int]] = set()
    while True:
        length = int(rng.integers(3, n + 1))
        cycle = [int(v) + 1 for v in rng.permutation(n)[:length]]
        for a, b in zip(cycle, cycle[1:] + cycle[:1]):
            edges ^= {(min(a, b), max(a, b))}
        g = Graph(n, frozenset(edges))
        if g.edges and g.is_connected():
            return g


def hierholzer(g: Graph, start: int) -> list[int]:
    """Eulerian circuit from ``start``; unused edges are taken in ascending neighbour order."""
    if not g.is_eulerian():
        raise ContractError("graph must be connected with all degrees even")
    if not 1 <= start <= g.n:
        raise ContractError(f"start node {start} not in graph")
    adj = g.adjacency()
    cursor = {v: 0 for v in adj}
    used: set[tuple[int, int]] = set()
    stack, circuit = [start], []
    while stack:
        v = stack[-1]
        nbrs = adj[v]
        i = cursor[v]
        while i < len(nbrs) and (min(v, nbrs[i]), max(v, nbrs[i])) in used:
            i += 1
        cursor[v] = i
        if i == len(nbrs):
            circuit.append(stack.pop())
        else:
            w = nbrs[i]
            used.add((min(v, w), max(v, w)))
            stack.append(w)
    circuit.reverse()
    return circuit


def is_eulerian_circuit(g: Graph, walk: Sequence[int], start: int | None = None) -> bool:
    """True iff ``walk`` is closed, starts at ``start`` (if given) and uses every edge once."""
    if len(walk) != len(g.edges) + 1 or walk[0] != walk[-1]:
        return False
    if start is not None and walk[0] != start:
        return False
    used = set()
    for a, b in zip(walk, walk[1:]):
        e = (min(a, b), max(a, b))
        if e not in g.edges or e in used:
            return False
        used.add(e)
    return len(used) == len(g.edges)


def euler_vocab(n: int) -> Vocab:
    return Vocab((PAD, BOS, EOS, SEP, START, *(str(v) for v in range(1, n + 1))))


def serialize_instance(g: Graph, circuit: Sequence[int], vocab: Vocab | None = None, id: int = 0) -> TaskInstance:
    """Source ``u v SEP`` per sorted edge then ``START s``; target is the circuit then EOS."""
    vocab = vocab or euler_vocab(g.n)
    toks: list[str] = []
    for u, v in sorted(g.edges):
        toks += [str(u), str(v), SEP]
    toks += [START, str(circuit[0])]
    target = [str(v) for v in circuit] + [EOS]
    return TaskInstance(vocab.encode(toks), vocab.encode(target), id, "euler")


def parse_source(vocab: Vocab, source: Sequence[int]) -> tuple[Graph, int]:
    """Inverse of the source encoding: ``(graph, start)``."""
    toks = vocab.decode(source)
    if len(toks) < 2 or toks[-2] != START:
        raise ValueError("source does not end with START <node>")
    body, start = toks[:-2], int(toks[-1])
    if len(body) % 3:
        raise ValueError("edge list is not a sequence of 'u v SEP' triples")
    edges = []
    for i in range(0, len(body), 3):
        u, v, sep = body[i:i + 3]
        if sep != SEP:
            raise ValueError(f"expected SEP at position {i + 2}, got {sep!r}")
        edges.append((int(u), int(v)))
    n = sum(1 for t in vocab.tokens if t.isdigit())
    return Graph.from_edges(n, edges), start


def gen_euler_dataset(n: int, count: int, rng: np.random.Generator) -> Dataset:
    vocab = euler_vocab(n)
    out = []
    for i in range(count):
        g = gen_eulerian_graph(n, rng)
        start = int(rng.integers(1, n + 1))
        out.append(serialize_instance(g, hierholzer(g, start), vocab, i))
    return Dataset(vocab, "euler", out)


# ---------------------------------------------------------------- copy / reverse

def copy_vocab(vocab: int) -> Vocab:
    return Vocab((PAD, BOS, EOS, *(str(i) for i in range(vocab))))


def gen_copy_task(vocab: int, min_len: int, max_len: int, count: int, rng: np.random.Generator,
                  reverse: bool = False) -> Dataset:
    """Uniform random symbol strings; target is the string (or its reverse) then EOS."""
    if vocab < 2:
        raise ValueError("vocab >= 2 required")
    if not 1 <= min_len <= max_len:
        raise ValueError(f"need 1 <= min_len <= max_len, got {min_len}, {max_len}")
    v = copy_vocab(vocab)
    kind = "reverse" if reverse else "copy"
    out = []
    for i in range(count):
        length = int(rng.integers(min_len, max_len + 1))
        src = tuple(int(x) + 3 for x in rng.integers(0, vocab, size=length))
        tgt = src[::-1] if reverse else src
        out.append(TaskInstance(src, tgt + (v.eos,), i, kind))
    return Dataset(v, kind, out)


# ---------------------------------------------------------------- splitting and files

def split_dataset(dataset: Dataset, fractions: Sequence[float], rng: np.random.Generator,
                  group_key: Callable[[TaskInstance], Hashable] | None = None) -> tuple[Dataset, ...]:
    """Seeded disjoint partition.

    With ``group_key`` whole groups are assigned to one split (e.g. all
    instances sharing an edge set), and the fractions apply to groups.
    """
    fractions = list(fractions)
    if any(f <= 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"fractions must be positive and sum to 1, got {fractions}")
    groups: dict[Hashable, list[TaskInstance]] = defaultdict(list)
    for k, inst in enumerate(dataset.instances):
        groups[group_key(inst) if group_key else k].append(inst)
    keys = list(groups)
    order = rng.permutation(len(keys))
    n = len(keys)
    sizes = [int(round(f * n)) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    if any(s <= 0 for s in sizes):
        raise ValueError(f"split sizes {sizes} from {n} units leave an empty split")
    parts, pos = [], 0
    for s in sizes:
        members = [inst for j in order[pos:pos + s] for inst in groups[keys[j]]]
        parts.append(Dataset(dataset.vocab, dataset.kind, members))
        pos += s
    return tuple(parts)


def edge_set_key(vocab: Vocab) -> Callable[[TaskInstance], Hashable]:
    return lambda inst: parse_source(vocab, inst.source)[0].edges


def write_dataset(path: str | Path, dataset: Dataset) -> None:
    v = dataset.vocab
    lines = [f"{HEADER_TAG} kind={dataset.kind} vocab={','.join(v.tokens)}"]
    for inst in dataset.instances:
        lines.append(" ".join(v.decode(inst.source)) + "\t" + " ".join(v.decode(inst.target)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path: str | Path) -> Dataset:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(HEADER_TAG):
        raise ValueError(f"{path}: missing dataset header")
    fields = dict(part.split("=", 1) for part in text[0].split()[1:])
    vocab = Vocab(tuple(fields["vocab"].split(",")))
    kind = fields["kind"]
    out = []
    for i, line in enumerate(l for l in text[1:] if l.strip()):
        src, tgt = line.split("\t")
        out.append(TaskInstance(vocab.encode(src.split()), vocab.encode(tgt.split()), i, kind))
    return Dataset(vocab, kind, out)
