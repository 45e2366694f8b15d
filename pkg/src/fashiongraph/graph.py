"""Three-level fashion graph, category co-occurrence weights, item subgraphs.

The co-occurrence weight of an ordered category pair is

    w(c_i, c_j) = (co(c_i, c_j) / o(c_j)) / sum_k (co(c_i, c_k) / o(c_k))

where co counts distinct outfits containing both categories (an outfit
with two or more items of one category also counts for the same-category
pair) and o(c_j) counts outfits containing c_j at all.  Rows normalize to
one; the weight is directional because the denominator depends on the
first category.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .dataio import Dataset, Splits, validate_dataset


@dataclass(frozen=True)
class CategoryGraph:
    weights: dict[tuple[int, int], float]  # (c_i, c_j) -> w(c_i, c_j)
    co_counts: dict[tuple[int, int], int]  # (c_i, c_j) -> outfits containing both
    cat_counts: dict[int, int]  # c_j -> outfits containing c_j

    def weight(self, c_i: int, c_j: int) -> float:
        return self.weights.get((c_i, c_j), 0.0)


@dataclass(frozen=True)
class ItemSubgraph:
    """Complete graph over one outfit's items with inherited category weights."""

    outfit_id: int
    items: list[int]
    edges: list[tuple[int, int, float]]  # (i, j, w(c_i, c_j)) per unordered pair


@dataclass(frozen=True)
class ItemItemEdges:
    """Directed item-item edges (unions of co-outfit neighborhoods).

    ``tgt``/``src`` are item indices; ``weight[e]`` is w(cat(tgt), cat(src)),
    the co-occurrence prior for updating the target from the source.
    """

    tgt: np.ndarray
    src: np.ndarray
    weight: np.ndarray


@dataclass(frozen=True, eq=False)
class FashionGraph:
    user_ids: np.ndarray  # sorted
    outfit_ids: np.ndarray
    item_ids: np.ndarray
    user_index: dict[int, int]
    outfit_index: dict[int, int]
    item_index: dict[int, int]
    user_outfits: dict[int, list[int]]  # user id -> sorted outfit ids (train edges)
    outfit_users: dict[int, list[int]]
    outfit_items: dict[int, list[int]]  # outfit id -> item ids in outfit order
    item_outfits: dict[int, list[int]]
    category_graph: CategoryGraph
    item_edges: ItemItemEdges
    uo_tgt: np.ndarray = field(repr=False)  # user index per user-outfit edge
    uo_src: np.ndarray = field(repr=False)  # outfit index per user-outfit edge
    oi_tgt: np.ndarray = field(repr=False)  # outfit index per outfit-item edge
    oi_src: np.ndarray = field(repr=False)  # item index per outfit-item edge

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_outfits(self) -> int:
        return len(self.outfit_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_outfits + self.n_items

    @property
    def n_edges(self) -> int:
        """Undirected edge count: user-outfit interactions + outfit memberships."""
        return len(self.uo_tgt) + len(self.oi_tgt)


def category_cooccurrence_weights(ds: Dataset) -> CategoryGraph:
    """Count category co-occurrence over outfits and normalize per row."""
    if not any(len(m) >= 2 for m in ds.outfits.values()):
        raise ValueError("need at least one outfit with >= 2 items")
    co: dict[tuple[int, int], int] = {}
    cat_counts: dict[int, int] = {}
    for members in ds.outfits.values():
        cats = [ds.items[i].category for i in members]
        present = set(cats)
        for c in present:
            cat_counts[c] = cat_counts.get(c, 0) + 1
        pairs = {(a, b) for a in present for b in present if a != b}
        for c, n in zip(*np.unique(cats, return_counts=True)):
            if n >= 2:
                pairs.add((int(c), int(c)))
        for pair in pairs:
            co[pair] = co.get(pair, 0) + 1
    weights: dict[tuple[int, int], float] = {}
    by_row: dict[int, list[int]] = {}
    for (c_i, c_j) in co:
        by_row.setdefault(c_i, []).append(c_j)
    for c_i, partners in by_row.items():
        ratios = {c_j: co[(c_i, c_j)] / cat_counts[c_j] for c_j in partners}
        total = sum(ratios.values())
        for c_j, r in ratios.items():
            weights[(c_i, c_j)] = r / total
    return CategoryGraph(weights=weights, co_counts=co, cat_counts=cat_counts)


def outfit_item_subgraph(outfit_id: int, ds: Dataset, cg: CategoryGraph) -> ItemSubgraph:
    """Complete item graph of one outfit; weights looked up from ``cg``."""
    if outfit_id not in ds.outfits:
        raise KeyError(f"unknown outfit id {outfit_id}")
    members = ds.outfits[outfit_id]
    edges = [
        (i, j, cg.weight(ds.items[i].category, ds.items[j].category))
        for i, j in combinations(members, 2)
    ]
    return ItemSubgraph(outfit_id=outfit_id, items=list(members), edges=edges)


def build_item_item_edges(
    ds: Dataset, cg: CategoryGraph, item_index: dict[int, int]
) -> ItemItemEdges:
    """Directed co-outfit neighborhoods with category-prior weights.

    An item's neighborhood is the union of its co-outfit items across every
    outfit containing it; a pair co-occurring in several outfits yields one
    edge.  Edges are sorted by (target, source) so summation order is fixed.
    """
    pairs: set[tuple[int, int]] = set()
    for members in ds.outfits.values():
        for i in members:
            for j in members:
                if i != j:
                    pairs.add((item_index[i], item_index[j]))
    ordered = sorted(pairs)
    tgt = np.array([p[0] for p in ordered], dtype=np.int64)
    src = np.array([p[1] for p in ordered], dtype=np.int64)
    ids = list(item_index)
    weight = np.array(
        [
            cg.weight(ds.items[ids[t]].category, ds.items[ids[s]].category)
            for t, s in ordered
        ],
        dtype=np.float64,
    )
    return ItemItemEdges(tgt=tgt, src=src, weight=weight)


def build_fashion_graph(ds: Dataset, splits: Splits | None = None) -> FashionGraph:
    """Assemble the user-outfit-item graph.

    When ``splits`` is given, only training interactions form user-outfit
    edges (evaluation interactions must not leak into propagation).
    """
    validate_dataset(ds)
    user_ids = np.array(sorted(ds.users), dtype=np.uint64)
    outfit_ids = np.array(sorted(ds.outfits), dtype=np.uint64)
    item_ids = np.array(sorted(ds.items), dtype=np.uint64)
    user_index = {int(u): i for i, u in enumerate(user_ids)}
    outfit_index = {int(o): i for i, o in enumerate(outfit_ids)}
    item_index = {int(i): k for k, i in enumerate(item_ids)}

    if splits is None:
        edge_pairs = sorted(ds.interactions)
    else:
        edge_pairs = sorted(
            (u, o) for u, outfits in splits.train.items() for o in outfits
        )
    user_outfits: dict[int, list[int]] = {int(u): [] for u in user_ids}
    outfit_users: dict[int, list[int]] = {int(o): [] for o in outfit_ids}
    for u, o in edge_pairs:
        user_outfits[u].append(o)
        outfit_users[o].append(u)

    outfit_items = {int(o): list(ds.outfits[int(o)]) for o in outfit_ids}
    item_outfits: dict[int, list[int]] = {int(i): [] for i in item_ids}
    for o in sorted(ds.outfits):
        for i in ds.outfits[o]:
            item_outfits[i].append(o)

    uo_tgt = np.array([user_index[u] for u, _ in edge_pairs], dtype=np.int64)
    uo_src = np.array([outfit_index[o] for _, o in edge_pairs], dtype=np.int64)
    oi_pairs = [(o, i) for o in sorted(ds.outfits) for i in ds.outfits[o]]
    oi_tgt = np.array([outfit_index[o] for o, _ in oi_pairs], dtype=np.int64)
    oi_src = np.array([item_index[i] for _, i in oi_pairs], dtype=np.int64)

    cg = category_cooccurrence_weights(ds)
    item_edges = build_item_item_edges(ds, cg, item_index)

    return FashionGraph(
        user_ids=user_ids,
        outfit_ids=outfit_ids,
        item_ids=item_ids,
        user_index=user_index,
        outfit_index=outfit_index,
        item_index=item_index,
        user_outfits=user_outfits,
        outfit_users=outfit_users,
        outfit_items=outfit_items,
        item_outfits=item_outfits,
        category_graph=cg,
        item_edges=item_edges,
        uo_tgt=uo_tgt,
        uo_src=uo_src,
        oi_tgt=oi_tgt,
        oi_src=oi_src,
    )


def export_edge_list(graph: FashionGraph, ds: Dataset, path: str | Path) -> None:
    """Write ``src<TAB>dst<TAB>weight`` rows for external visualization.

    Structural edges carry weight 1; item-item rows carry the category
    co-occurrence weight of each outfit pair.
    """
    cg = graph.category_graph
    with open(path, "w", encoding="utf-8") as fh:
        for u in sorted(graph.user_outfits):
            for o in graph.user_outfits[u]:
                fh.write(f"u{u}\to{o}\t1\n")
        for o in sorted(graph.outfit_items):
            for i in graph.outfit_items[o]:
                fh.write(f"o{o}\ti{i}\t1\n")
        for o in sorted(ds.outfits):
            sub = outfit_item_subgraph(o, ds, cg)
            for i, j, w in sub.edges:
                fh.write(f"i{i}\ti{j}\t{w:.12g}\n")
