"""Tentative match graph: components, track separation, reference selection.

Nodes are keypoints keyed by (image_id, keypoint_id). Connected components of
the match graph form tentative tracks; a valid track holds at most one
keypoint per image, so components violating that are split while removing as
little match confidence as possible.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Sequence, Set, Tuple

from .errors import SelfMatch

NodeKey = Tuple[int, int]
EdgeKey = Tuple[NodeKey, NodeKey]

# components up to this size are separated by exact search over partitions
EXACT_SEPARATION_LIMIT = 10


@dataclass(frozen=True)
class Match:
    """Undirected keypoint correspondence with a confidence in (0, 1]."""

    image_id_a: int
    keypoint_id_a: int
    image_id_b: int
    keypoint_id_b: int
    confidence: float = 1.0

    def __post_init__(self):
        if (self.image_id_a, self.keypoint_id_a) == (self.image_id_b, self.keypoint_id_b):
            raise SelfMatch(
                f"match joins keypoint ({self.image_id_a}, {self.keypoint_id_a}) to itself"
            )
        if self.image_id_a == self.image_id_b:
            raise ValueError("match endpoints lie in the same image")
        if not (0.0 < self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside (0, 1]")

    @property
    def a(self) -> NodeKey:
        return (self.image_id_a, self.keypoint_id_a)

    @property
    def b(self) -> NodeKey:
        return (self.image_id_b, self.keypoint_id_b)

    @property
    def edge_key(self) -> EdgeKey:
        return (self.a, self.b) if self.a < self.b else (self.b, self.a)


class MatchGraph:
    """Undirected, deduplicated match graph."""

    def __init__(self):
        self.nodes: Set[NodeKey] = set()
        self.edges: Dict[EdgeKey, float] = {}
        self.adjacency: Dict[NodeKey, Dict[NodeKey, float]] = {}

    def add_match(self, match: Match):
        a, b = match.edge_key
        self.nodes.add(a)
        self.nodes.add(b)
        prev = self.edges.get((a, b))
        w = match.confidence if prev is None else max(prev, match.confidence)
        self.edges[(a, b)] = w
        self.adjacency.setdefault(a, {})[b] = w
        self.adjacency.setdefault(b, {})[a] = w

    def neighbors(self, node: NodeKey) -> Dict[NodeKey, float]:
        return self.adjacency.get(node, {})

    def subgraph_edges(self, nodes: Iterable[NodeKey]) -> List[Tuple[NodeKey, NodeKey, float]]:
        node_set = set(nodes)
        out = []
        for (a, b), w in self.edges.items():
            if a in node_set and b in node_set:
                out.append((a, b, w))
        out.sort()
        return out


@dataclass(frozen=True)
class TentativeTrack:
    """One candidate multi-view track, before geometric verification."""

    track_id: int
    members: Tuple[NodeKey, ...]
    edges: Tuple[Tuple[NodeKey, NodeKey, float], ...]
    reference: NodeKey

    def __post_init__(self):
        if self.reference not in self.members:
            raise ValueError("track reference must be a member")

    def __len__(self) -> int:
        return len(self.members)

    def degree(self, node: NodeKey) -> int:
        return sum(1 for a, b, _ in self.edges if a == node or b == node)


def build_graph(matches: Iterable[Match]) -> MatchGraph:
    """Deduplicated undirected graph; duplicate edges keep the max confidence."""
    graph = MatchGraph()
    for m in matches:
        graph.add_match(m)
    return graph


def connected_components(graph: MatchGraph) -> List[Set[NodeKey]]:
    """Node partition by connectivity; singleton components are dropped.

    Components are returned sorted by their smallest node key.
    """
    seen: Set[NodeKey] = set()
    components: List[Set[NodeKey]] = []
    for start in sorted(graph.nodes):
        if start in seen:
            continue
        comp = {start}
        queue = deque([start])
        seen.add(start)
        while queue:
            node = queue.popleft()
            for nbr in sorted(graph.neighbors(node)):
                if nbr not in seen:
                    seen.add(nbr)
                    comp.add(nbr)
                    queue.append(nbr)
        if len(comp) > 1:
            components.append(comp)
    return components


def _grouped_by_image(nodes: Iterable[NodeKey]) -> Dict[int, List[NodeKey]]:
    groups: Dict[int, List[NodeKey]] = {}
    for node in sorted(nodes):
        groups.setdefault(node[0], []).append(node)
    return groups


def _split_connected(
    nodes: Set[NodeKey], edges: Sequence[Tuple[NodeKey, NodeKey, float]]
) -> List[Set[NodeKey]]:
    adj: Dict[NodeKey, List[NodeKey]] = {n: [] for n in nodes}
    for a, b, _ in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen: Set[NodeKey] = set()
    out = []
    for start in sorted(nodes):
        if start in seen:
            continue
        comp = {start}
        seen.add(start)
        queue = deque([start])
        while queue:
            node = queue.popleft()
            for nbr in sorted(adj[node]):
                if nbr not in seen:
                    seen.add(nbr)
                    comp.add(nbr)
                    queue.append(nbr)
        out.append(comp)
    return out


def _optimal_partition(
    nodes: List[NodeKey], edges: Sequence[Tuple[NodeKey, NodeKey, float]]
) -> List[Set[NodeKey]]:
    """Exact search for the node partition keeping maximal match confidence.

    Parts must not contain two keypoints from the same image; edges crossing
    parts are the ones removed. Enumerates set partitions depth-first with an
    optimistic bound, assigning nodes in sorted order so ties resolve
    deterministically (first maximum found wins).
    """
    index = {n: i for i, n in enumerate(nodes)}
    n = len(nodes)
    incident: List[List[Tuple[int, float]]] = [[] for _ in range(n)]
    for a, b, w in edges:
        ia, ib = index[a], index[b]
        lo, hi = min(ia, ib), max(ia, ib)
        incident[hi].append((lo, w))  # counted when the later node is placed
    suffix_weight = [0.0] * (n + 1)
    for i in range(n - 1, -1, -1):
        suffix_weight[i] = suffix_weight[i + 1] + sum(w for _, w in incident[i])

    assignment = [-1] * n
    part_images: List[Set[int]] = []
    best_kept = -1.0
    best_assignment: List[int] = []

    def recurse(i: int, kept: float):
        nonlocal best_kept, best_assignment
        if i == n:
            if kept > best_kept:
                best_kept = kept
                best_assignment = assignment.copy()
            return
        if kept + suffix_weight[i] <= best_kept:
            return
        image = nodes[i][0]
        for part in range(len(part_images) + 1):
            if part < len(part_images):
                if image in part_images[part]:
                    continue
                part_images[part].add(image)
                new_part = False
            else:
                part_images.append({image})
                new_part = True
            assignment[i] = part
            gained = sum(w for j, w in incident[i] if assignment[j] == part)
            recurse(i + 1, kept + gained)
            assignment[i] = -1
            if new_part:
                part_images.pop()
            else:
                part_images[part].discard(image)

    recurse(0, 0.0)
    parts: Dict[int, Set[NodeKey]] = {}
    for i, part in enumerate(best_assignment):
        parts.setdefault(part, set()).add(nodes[i])
    return [parts[k] for k in sorted(parts)]


def _greedy_partition(
    nodes: Set[NodeKey], edges: Sequence[Tuple[NodeKey, NodeKey, float]]
) -> List[Set[NodeKey]]:
    """Iteratively delete the weakest edge lying on a path between two
    same-image keypoints until no component violates the constraint."""
    alive: Dict[EdgeKey, float] = {(a, b): w for a, b, w in edges}

    def bfs_path(adj, src, dst):
        prev = {src: None}
        queue = deque([src])
        while queue:
            node = queue.popleft()
            if node == dst:
                break
            for nbr in sorted(adj[node]):
                if nbr not in prev:
                    prev[nbr] = node
                    queue.append(nbr)
        if dst not in prev:
            return None
        path = []
        node = dst
        while prev[node] is not None:
            a, b = prev[node], node
            path.append((a, b) if a < b else (b, a))
            node = prev[node]
        return path

    while True:
        adj: Dict[NodeKey, List[NodeKey]] = {n: [] for n in nodes}
        for a, b in alive:
            adj[a].append(b)
            adj[b].append(a)
        comps = _split_connected(nodes, [(a, b, 0.0) for a, b in alive])
        candidate = None  # (confidence, edge_key)
        for comp in comps:
            for group in _grouped_by_image(comp).values():
                if len(group) < 2:
                    continue
                for i in range(len(group)):
                    for j in range(i + 1, len(group)):
                        path = bfs_path(adj, group[i], group[j])
                        if not path:
                            continue
                        for ek in path:
                            item = (alive[ek], ek)
                            if candidate is None or item < candidate:
                                candidate = item
        if candidate is None:
            return comps
        del alive[candidate[1]]


def separate_tracks(
    graph: MatchGraph,
    component: Set[NodeKey],
    first_track_id: int = 0,
    exact_limit: int = EXACT_SEPARATION_LIMIT,
) -> List[TentativeTrack]:
    """Split one connected component into valid tentative tracks.

    Small components are separated exactly (minimum total confidence
    removed); larger ones fall back to greedy weakest-conflict-edge deletion.
    Tracks of size 1 are dropped.
    """
    edges = graph.subgraph_edges(component)
    nodes_sorted = sorted(component)
    if all(len(g) == 1 for g in _grouped_by_image(component).values()):
        parts = [set(component)]
    elif len(component) <= exact_limit:
        parts = _optimal_partition(nodes_sorted, edges)
        # a part may be internally disconnected; split it into real components
        refined = []
        for part in parts:
            internal = [(a, b, w) for a, b, w in edges if a in part and b in part]
            refined.extend(_split_connected(part, internal))
        parts = refined
    else:
        parts = _greedy_partition(set(component), edges)
    parts = sorted((p for p in parts if len(p) > 1), key=min)
    tracks = []
    for offset, part in enumerate(parts):
        internal = tuple((a, b, w) for a, b, w in edges if a in part and b in part)
        members = tuple(sorted(part))
        track = TentativeTrack(
            first_track_id + offset, members, internal, members[0]
        )
        tracks.append(
            TentativeTrack(track.track_id, members, internal, topological_center(track))
        )
    return tracks


def topological_center(track: TentativeTrack) -> NodeKey:
    """Track member with the highest degree; ties go to the lowest key."""
    if not track.members:
        raise ValueError("empty track")
    best = None
    for node in sorted(track.members):
        deg = track.degree(node)
        if best is None or deg > best[0]:
            best = (deg, node)
    return best[1]


def extract_tracks(
    graph: MatchGraph, exact_limit: int = EXACT_SEPARATION_LIMIT
) -> List[TentativeTrack]:
    """Connected components followed by track separation, with global ids."""
    tracks: List[TentativeTrack] = []
    for comp in connected_components(graph):
        tracks.extend(
            separate_tracks(graph, comp, first_track_id=len(tracks), exact_limit=exact_limit)
        )
    return tracks


def removed_confidence(
    graph: MatchGraph, component: Set[NodeKey], tracks: Sequence[TentativeTrack]
) -> float:
    """Total confidence of component edges absent from the separated tracks."""
    kept = set()
    for tr in tracks:
        for a, b, _ in tr.edges:
            kept.add((a, b))
    total = 0.0
    for a, b, w in graph.subgraph_edges(component):
        if (a, b) not in kept:
            total += w
    return total
