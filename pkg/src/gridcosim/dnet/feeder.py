"""Radial feeder data model and the line-oriented feeder file format.

File grammar (``#`` starts a comment; blank lines ignored)::

    [feeder]        key = value: name, head, base_kV (line-to-line), base_MVA
    [transformer]   key = value: kVA, r_pu, x_pu (on kVA base), tap
    [linecodes]     name Raa Xaa Rab Xab Rac Xac Rbb Xbb Rbc Xbc Rcc Xcc   (ohm/mile)
    [nodes]         id phases                     e.g. ``13 abc`` or ``35 a``
    [lines]         from to phases length_ft linecode
    [loads]         node phase kW kvar            phase is a, b, c or abc (split evenly)
"""

from __future__ import annotations

import collections
import dataclasses
import io
import os
from typing import Iterable, Mapping

import numpy as np

PHASES = "abc"


class FeederError(Exception):
    pass


class FeederParseError(FeederError, ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "") -> None:
        where = f"{source}:{line}: " if line is not None else (f"{source}: " if source else "")
        super().__init__(where + message)
        self.line = line


class TopologyError(FeederError):
    def __init__(self, message: str, edge: tuple[str, str] | None = None) -> None:
        super().__init__(message)
        self.edge = edge


def normalize_phases(text: str) -> str:
    phases = "".join(p for p in PHASES if p in text.lower())
    if not phases or len(phases) != len(text) or set(text.lower()) - set(PHASES):
        raise ValueError(f"invalid phase set {text!r}")
    return phases


@dataclasses.dataclass
class FeederNode:
    id: str
    phases: str
    load_kW: dict[str, float] = dataclasses.field(default_factory=dict)
    load_kvar: dict[str, float] = dataclasses.field(default_factory=dict)
    attached_der_ids: list[str] = dataclasses.field(default_factory=list)

    @property
    def total_load_kW(self) -> float:
        return sum(self.load_kW.values())


@dataclasses.dataclass
class LineSegment:
    from_node: str
    to_node: str
    phases: str
    length_ft: float
    code: str
    z_ohm: np.ndarray  # len(phases) x len(phases), complex


@dataclasses.dataclass(frozen=True)
class Transformer:
    kVA: float = 5000.0
    r_pu: float = 0.01
    x_pu: float = 0.08
    tap: float = 1.0


@dataclasses.dataclass(frozen=True)
class DerSite:
    node: str
    phases: str


class Feeder:
    """Validated radial feeder rooted at ``head``."""

    def __init__(self, name: str, nodes: Iterable[FeederNode], lines: Iterable[LineSegment],
                 head: str, base_kV: float, base_MVA: float,
                 transformer: Transformer | None = None,
                 der_sites: Mapping[str, DerSite] | None = None) -> None:
        self.name = name
        self.nodes: dict[str, FeederNode] = {}
        for node in nodes:
            if node.id in self.nodes:
                raise FeederError(f"duplicate node {node.id!r}")
            self.nodes[node.id] = node
        self.lines = list(lines)
        self.head = head
        self.base_kV = float(base_kV)
        self.base_MVA = float(base_MVA)
        self.transformer = transformer or Transformer()
        self.der_sites: dict[str, DerSite] = dict(der_sites or {})
        self._cache: dict = {}
        self.validate()

    # -- structure

    def validate(self) -> None:
        if self.head not in self.nodes:
            raise TopologyError(f"head node {self.head!r} is not defined")
        if self.base_kV <= 0 or self.base_MVA <= 0:
            raise FeederError("base_kV and base_MVA must be positive")
        adjacency: dict[str, list[LineSegment]] = collections.defaultdict(list)
        for line in self.lines:
            for end in (line.from_node, line.to_node):
                if end not in self.nodes:
                    raise TopologyError(f"line {line.from_node}-{line.to_node} references unknown node {end!r}",
                                        (line.from_node, line.to_node))
            if line.from_node == line.to_node:
                raise TopologyError(f"line {line.from_node}-{line.to_node} is a self-loop",
                                    (line.from_node, line.to_node))
            if np.any(line.z_ohm.real < 0):
                raise FeederError(f"line {line.from_node}-{line.to_node} has negative resistance")
            adjacency[line.from_node].append(line)
            adjacency[line.to_node].append(line)
        # union-find in declaration order: the first edge joining two already
        # connected nodes is the one reported as closing a loop
        root = {nid: nid for nid in self.nodes}

        def find(x: str) -> str:
            while root[x] != x:
                root[x] = root[root[x]]
                x = root[x]
            return x

        for line in self.lines:
            ra, rb = find(line.from_node), find(line.to_node)
            if ra == rb:
                raise TopologyError(f"line {line.from_node}-{line.to_node} closes a loop",
                                    (line.from_node, line.to_node))
            root[ra] = rb
        parent: dict[str, LineSegment | None] = {self.head: None}
        order = [self.head]
        queue = collections.deque([self.head])
        seen_lines: set[int] = set()
        while queue:
            nid = queue.popleft()
            for line in adjacency[nid]:
                if id(line) in seen_lines:
                    continue
                seen_lines.add(id(line))
                other = line.to_node if line.from_node == nid else line.from_node
                if other in parent:
                    raise TopologyError(f"line {line.from_node}-{line.to_node} closes a loop",
                                        (line.from_node, line.to_node))
                parent[other] = line
                order.append(other)
                queue.append(other)
        missing = [n for n in self.nodes if n not in parent]
        if missing:
            raise TopologyError(f"nodes not reachable from head: {', '.join(missing[:10])}")
        for nid, line in parent.items():
            node = self.nodes[nid]
            if line is not None and node.phases != line.phases:
                raise FeederError(f"node {nid!r} phases {node.phases!r} differ from its supply line "
                                  f"{line.from_node}-{line.to_node} ({line.phases!r})")
            for ph in list(node.load_kW) + list(node.load_kvar):
                if ph not in node.phases:
                    raise FeederError(f"node {nid!r} has a load on absent phase {ph!r}")
            if any(v < 0 for v in node.load_kW.values()):
                raise FeederError(f"node {nid!r} has a negative kW load")
        for dev, site in self.der_sites.items():
            node = self.nodes.get(site.node)
            if node is None:
                raise FeederError(f"DER {dev!r} sited at unknown node {site.node!r}")
            if set(site.phases) - set(node.phases):
                raise FeederError(f"DER {dev!r} uses phase(s) absent at node {site.node!r}")
        self.parent_line = parent
        self.bfs_order = order

    def parent_of(self, node_id: str) -> str | None:
        line = self.parent_line[node_id]
        if line is None:
            return None
        return line.from_node if line.to_node == node_id else line.to_node

    def path_to_head(self, node_id: str) -> list[str]:
        path = [node_id]
        while (p := self.parent_of(path[-1])) is not None:
            path.append(p)
        return path

    @property
    def total_load_kW(self) -> float:
        return sum(n.total_load_kW for n in self.nodes.values())

    @property
    def total_load_kvar(self) -> float:
        return sum(sum(n.load_kvar.values()) for n in self.nodes.values())

    # -- derived feeders

    def with_loads_scaled(self, factor: float) -> "Feeder":
        nodes = [dataclasses.replace(n, load_kW={p: v * factor for p, v in n.load_kW.items()},
                                     load_kvar={p: v * factor for p, v in n.load_kvar.items()},
                                     attached_der_ids=list(n.attached_der_ids))
                 for n in self.nodes.values()]
        return Feeder(self.name, nodes, self.lines, self.head, self.base_kV, self.base_MVA,
                      self.transformer, self.der_sites)

    def with_ders(self, sites: Mapping[str, DerSite]) -> "Feeder":
        nodes = [dataclasses.replace(n, attached_der_ids=[]) for n in self.nodes.values()]
        by_id = {n.id: n for n in nodes}
        for dev, site in sites.items():
            if site.node in by_id:
                by_id[site.node].attached_der_ids.append(dev)
        return Feeder(self.name, nodes, self.lines, self.head, self.base_kV, self.base_MVA,
                      self.transformer, sites)

    def load_nodes(self) -> list[tuple[str, str, float]]:
        """(node, phase, kW) for every loaded phase, in breadth-first order."""
        out = []
        for nid in self.bfs_order:
            node = self.nodes[nid]
            for ph in node.phases:
                kw = node.load_kW.get(ph, 0.0)
                if kw > 0:
                    out.append((nid, ph, kw))
        return out


# ---------------------------------------------------------------------------
# parsing

_SECTIONS = ("feeder", "transformer", "linecodes", "nodes", "lines", "loads")


def _linecode(values: list[float]) -> np.ndarray:
    raa, xaa, rab, xab, rac, xac, rbb, xbb, rbc, xbc, rcc, xcc = values
    zab, zac, zbc = complex(rab, xab), complex(rac, xac), complex(rbc, xbc)
    return np.array([[complex(raa, xaa), zab, zac],
                     [zab, complex(rbb, xbb), zbc],
                     [zac, zbc, complex(rcc, xcc)]])


def parse_feeder(text: str, source: str = "<feeder>") -> Feeder:
    rows: dict[str, list[tuple[int, list[str]]]] = {s: [] for s in _SECTIONS}
    section = None
    for lineno, raw in enumerate(io.StringIO(text), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise FeederParseError(f"bad section header {line!r}", lineno, source)
            section = line[1:-1].strip().lower()
            if section not in rows:
                raise FeederParseError(f"unknown section [{section}]", lineno, source)
            continue
        if section is None:
            raise FeederParseError("content before the first section header", lineno, source)
        if section in ("feeder", "transformer"):
            if "=" not in line:
                raise FeederParseError(f"expected key = value, got {line!r}", lineno, source)
            key, value = (s.strip() for s in line.split("=", 1))
            rows[section].append((lineno, [key, value]))
        else:
            rows[section].append((lineno, line.split()))
    if not any(rows.values()):
        raise FeederParseError("empty feeder description", None, source)

    def keyvals(sec: str) -> dict[str, tuple[int, str]]:
        return {k: (n, v) for n, (k, v) in rows[sec]}

    def number(lineno: int, text: str, what: str) -> float:
        try:
            return float(text)
        except ValueError:
            raise FeederParseError(f"{what}: {text!r} is not a number", lineno, source) from None

    head_kv = keyvals("feeder")
    for req in ("head", "base_kV", "base_MVA"):
        if req not in head_kv:
            raise FeederParseError(f"[feeder] is missing '{req}'", None, source)
    name = head_kv.get("name", (0, os.path.basename(source)))[1]
    head = head_kv["head"][1]
    base_kV = number(*head_kv["base_kV"], "base_kV")
    base_MVA = number(*head_kv["base_MVA"], "base_MVA")
    tx_kv = keyvals("transformer")
    tx = Transformer(**{k: number(n, v, f"transformer {k}") for k, (n, v) in tx_kv.items()
                        if k in ("kVA", "r_pu", "x_pu", "tap")})

    codes: dict[str, np.ndarray] = {}
    for lineno, fields in rows["linecodes"]:
        if len(fields) != 13:
            raise FeederParseError("linecode needs a name and 12 numbers", lineno, source)
        codes[fields[0]] = _linecode([number(lineno, f, "linecode") for f in fields[1:]])

    nodes: dict[str, FeederNode] = {}
    for lineno, fields in rows["nodes"]:
        if len(fields) != 2:
            raise FeederParseError("node row is 'id phases'", lineno, source)
        try:
            phases = normalize_phases(fields[1])
        except ValueError as exc:
            raise FeederParseError(str(exc), lineno, source) from None
        if fields[0] in nodes:
            raise FeederParseError(f"duplicate node {fields[0]!r}", lineno, source)
        nodes[fields[0]] = FeederNode(fields[0], phases)

    lines = []
    for lineno, fields in rows["lines"]:
        if len(fields) != 5:
            raise FeederParseError("line row is 'from to phases length_ft linecode'", lineno, source)
        a, b, ph, length, code = fields
        try:
            phases = normalize_phases(ph)
        except ValueError as exc:
            raise FeederParseError(str(exc), lineno, source) from None
        if code not in codes:
            raise FeederParseError(f"unknown linecode {code!r}", lineno, source)
        length_ft = number(lineno, length, "length_ft")
        idx = [PHASES.index(p) for p in phases]
        z = codes[code][np.ix_(idx, idx)] * (length_ft / 5280.0)
        lines.append(LineSegment(a, b, phases, length_ft, code, z))

    for lineno, fields in rows["loads"]:
        if len(fields) != 4:
            raise FeederParseError("load row is 'node phase kW kvar'", lineno, source)
        nid, ph, kw, kvar = fields
        if nid not in nodes:
            raise FeederParseError(f"load on unknown node {nid!r}", lineno, source)
        kw_v, kvar_v = number(lineno, kw, "kW"), number(lineno, kvar, "kvar")
        try:
            phases = normalize_phases(ph)
        except ValueError as exc:
            raise FeederParseError(str(exc), lineno, source) from None
        node = nodes[nid]
        for p in phases:
            if p not in node.phases:
                raise FeederParseError(f"load on absent phase {p!r} of node {nid!r}", lineno, source)
            node.load_kW[p] = node.load_kW.get(p, 0.0) + kw_v / len(phases)
            node.load_kvar[p] = node.load_kvar.get(p, 0.0) + kvar_v / len(phases)

    try:
        return Feeder(name, nodes.values(), lines, head, base_kV, base_MVA, tx)
    except TopologyError as exc:
        if exc.edge is not None:
            for lineno, fields in rows["lines"]:
                if tuple(fields[:2]) == exc.edge:
                    raise TopologyError(f"{source}:{lineno}: {exc}", exc.edge) from None
        raise


def load_feeder(path: str | os.PathLike) -> Feeder:
    with open(path, encoding="utf-8") as fh:
        return parse_feeder(fh.read(), source=str(path))
