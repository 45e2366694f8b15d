"""Ranking and compatibility evaluation.

Per user, every outfit outside the train/validation sets is ranked by the
preference score (full ranking, no sampled candidate subset); HR, Recall,
Precision, and NDCG are computed at k and averaged over users with at
least one relevant outfit.  Compatibility is measured by AUC of stored
outfits against category-template negatives and by fill-in-the-blank
accuracy: one outfit item is masked and the model must pick it from four
candidates by compatibility score.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import Dataset, Splits
from .embed import ModelState
from .graph import FashionGraph
from .propagate import PropagationOutput, forward
from .rng import substream
from .score import order_candidates, rec_score, score_items, score_outfit
from .train import category_template_negative


@dataclass(frozen=True)
class UserMetrics:
    user: int
    hr: float
    recall: float
    precision: float
    ndcg: float


@dataclass(frozen=True)
class RankingReport:
    k: int
    split_part: str
    hr: float
    recall: float
    precision: float
    ndcg: float
    auc: float | None
    fltb_accuracy: float | None
    n_users_evaluated: int
    n_users_skipped: int
    n_fltb_trials: int
    per_user: tuple[UserMetrics, ...] = field(repr=False, default=())


def topk_metrics(ranked, relevants, k: int) -> tuple[float, float, float, float]:
    """HR, Recall, Precision, NDCG of one ranked list against a relevant set."""
    if k < 1:
        raise ValueError("k must be >= 1")
    relevants = set(relevants)
    if not relevants:
        raise ValueError("empty relevant set; caller must skip this user")
    top = list(ranked)[:k]
    hits = sum(1 for o in top if o in relevants)
    hr = 1.0 if hits else 0.0
    recall = hits / len(relevants)
    precision = hits / k
    dcg = sum(1.0 / math.log2(rank + 1) for rank, o in enumerate(top, start=1) if o in relevants)
    ideal = sum(1.0 / math.log2(rank + 1) for rank in range(1, min(len(relevants), k) + 1))
    ndcg = dcg / ideal
    return hr, recall, precision, ndcg


def auc(pos_scores, neg_scores) -> float:
    """Probability a positive outscores a negative; ties count one half."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both score sets must be nonempty")
    scores = np.concatenate([pos, neg])
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = ranks[: pos.size].sum()
    m, n = pos.size, neg.size
    return float((rank_sum - m * (m + 1) / 2.0) / (m * n))


def _candidate_scores(
    user: int, prop: PropagationOutput, graph: FashionGraph, excluded: set[int]
) -> dict[int, float]:
    u_idx = graph.user_index[user]
    h_u = prop.h_user_star[u_idx]
    return {
        int(o): rec_score(h_u, prop.h_outfit_star[graph.outfit_index[int(o)]])
        for o in graph.outfit_ids
        if int(o) not in excluded
    }


def rank_outfits(
    user: int, prop: PropagationOutput, graph: FashionGraph, split: Splits
) -> list[int]:
    """All outfits outside the user's train/val sets, best score first;
    ties broken by ascending outfit id."""
    if user not in graph.user_index:
        raise KeyError(f"unknown user {user}")
    excluded = set(split.train.get(user, frozenset())) | set(split.val.get(user, frozenset()))
    scores = _candidate_scores(user, prop, graph, excluded)
    return order_candidates(scores.keys(), scores)


def fltb(
    outfit_id: int,
    masked_index: int,
    candidates,
    true_item: int,
    prop: PropagationOutput,
    m: ModelState,
) -> tuple[int, bool]:
    """Score the outfit with each candidate substituted at ``masked_index``.

    Returns (chosen slot, chosen is the true item); ties resolve to the
    lowest slot.
    """
    members = prop.graph.outfit_items.get(outfit_id)
    if members is None:
        raise KeyError(f"unknown outfit id {outfit_id}")
    if len(members) < 2:
        raise ValueError(f"outfit {outfit_id} has fewer than 2 items")
    if not 0 <= masked_index < len(members):
        raise ValueError(f"masked index {masked_index} out of range")
    scores = []
    for candidate in candidates:
        items = list(members)
        items[masked_index] = candidate
        scores.append(score_items(items, prop, m))
    chosen = int(np.argmax(scores))  # argmax takes the first maximum
    return chosen, candidates[chosen] == true_item


def _fltb_candidates(
    ds: Dataset, split: Splits, outfit_id: int, masked_index: int, rng: np.random.Generator
) -> tuple[list[int], int]:
    """True item plus three distractors in shuffled order.

    Distractors come from the negative pool, category-matched to the masked
    item when enough such items exist, then the rest of the pool, then any
    item outside the outfit.
    """
    members = ds.outfits[outfit_id]
    true_item = members[masked_index]
    category = ds.items[true_item].category
    pool = sorted(split.compat_negative_pool - {true_item})
    same_cat = [i for i in pool if ds.items[i].category == category]
    chosen: list[int] = []
    for source in (same_cat, pool, sorted(set(ds.items) - set(members))):
        options = [i for i in source if i not in chosen and i != true_item]
        while options and len(chosen) < 3:
            pick = int(rng.choice(options))
            chosen.append(pick)
            options.remove(pick)
        if len(chosen) == 3:
            break
    if len(chosen) < 3:
        raise ValueError("not enough items to build FLTB distractors")
    candidates = [true_item] + chosen
    order = rng.permutation(4)
    return [candidates[i] for i in order], true_item


def fltb_test_outfits(ds: Dataset, split: Splits) -> list[int]:
    """Outfits appearing in at least one test interaction (all outfits if none)."""
    test_outfits = sorted({o for outfits in split.test.values() for o in outfits})
    return test_outfits if test_outfits else sorted(ds.outfits)


def fltb_accuracy(
    ds: Dataset,
    split: Splits,
    prop: PropagationOutput,
    m: ModelState,
    seed: int,
    outfit_ids=None,
    trials_per_outfit: int = 1,
) -> tuple[float, int]:
    """Mean FLTB correctness over the test outfits."""
    outfit_ids = fltb_test_outfits(ds, split) if outfit_ids is None else list(outfit_ids)
    correct = 0
    total = 0
    for oid in outfit_ids:
        for trial in range(trials_per_outfit):
            rng = substream(seed, "fltb", oid, trial)
            masked_index = int(rng.integers(len(ds.outfits[oid])))
            candidates, true_item = _fltb_candidates(ds, split, oid, masked_index, rng)
            _, ok = fltb(oid, masked_index, candidates, true_item, prop, m)
            correct += int(ok)
            total += 1
    return (correct / total if total else 0.0), total


def compat_auc(
    ds: Dataset, prop: PropagationOutput, m: ModelState, seed: int
) -> float | None:
    """AUC of stored-outfit scores against category-template negatives."""
    by_category: dict[int, list[int]] = {}
    for iid in sorted(ds.items):
        by_category.setdefault(ds.items[iid].category, []).append(iid)
    outfit_sets = {frozenset(v) for v in ds.outfits.values()}
    pos, neg = [], []
    for oid in sorted(ds.outfits):
        pos.append(score_outfit(oid, prop, m))
        rng = substream(seed, "auc", oid)
        negative = category_template_negative(ds, oid, by_category, outfit_sets, rng)
        if negative is not None:
            neg.append(score_items(negative, prop, m))
    if not neg:
        return None
    return auc(pos, neg)


def evaluate(
    m: ModelState,
    graph: FashionGraph,
    ds: Dataset,
    split: Splits,
    seed: int,
    k: int = 10,
    on: str = "test",
    include_compat: bool = True,
    threads: int = 1,
    prop: PropagationOutput | None = None,
) -> RankingReport:
    """Aggregate all metrics over evaluable users; deterministic under seed.

    ``on='val'`` ranks validation outfits against everything outside the
    train set.  Per-user work is read-only, so ``threads`` only changes
    wall time, never the report.
    """
    if on not in ("test", "val"):
        raise ValueError(f"unknown split part {on!r}")
    if prop is None:
        prop = forward(graph, ds, m, mode="eval")
    relevant_map = split.test if on == "test" else split.val

    def user_row(user: int) -> UserMetrics | None:
        relevants = relevant_map.get(user, frozenset())
        if not relevants:
            return None
        excluded = set(split.train.get(user, frozenset()))
        if on == "test":
            excluded |= set(split.val.get(user, frozenset()))
        scores = _candidate_scores(user, prop, graph, excluded)
        ranked = order_candidates(scores.keys(), scores)
        hr, recall, precision, ndcg = topk_metrics(ranked, relevants, k)
        return UserMetrics(user=user, hr=hr, recall=recall, precision=precision, ndcg=ndcg)

    users = sorted(int(u) for u in graph.user_ids)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(user_row, users))
    else:
        rows = [user_row(u) for u in users]
    kept = [r for r in rows if r is not None]

    auc_value = fltb_value = None
    n_trials = 0
    if include_compat:
        auc_value = compat_auc(ds, prop, m, seed)
        fltb_value, n_trials = fltb_accuracy(ds, split, prop, m, seed)

    def mean_of(attr: str) -> float:
        return float(np.mean([getattr(r, attr) for r in kept])) if kept else 0.0

    return RankingReport(
        k=k,
        split_part=on,
        hr=mean_of("hr"),
        recall=mean_of("recall"),
        precision=mean_of("precision"),
        ndcg=mean_of("ndcg"),
        auc=auc_value,
        fltb_accuracy=fltb_value,
        n_users_evaluated=len(kept),
        n_users_skipped=len(rows) - len(kept),
        n_fltb_trials=n_trials,
        per_user=tuple(kept),
    )


def format_report(report: RankingReport, per_user: bool = False) -> str:
    """Human-readable summary plus a machine-readable metric=value block."""
    lines = [
        f"ranking evaluation on the {report.split_part} split (k={report.k})",
        f"users evaluated: {report.n_users_evaluated} "
        f"(skipped, no relevant outfits: {report.n_users_skipped})",
        "",
        "[metrics]",
        f"hr@{report.k}={report.hr:.10f}",
        f"recall@{report.k}={report.recall:.10f}",
        f"precision@{report.k}={report.precision:.10f}",
        f"ndcg@{report.k}={report.ndcg:.10f}",
    ]
    if report.auc is not None:
        lines.append(f"auc={report.auc:.10f}")
    if report.fltb_accuracy is not None:
        lines.append(f"fltb_accuracy={report.fltb_accuracy:.10f}")
        lines.append(f"fltb_trials={report.n_fltb_trials}")
    if per_user:
        lines.append("")
        lines.append("[per-user]")
        for r in report.per_user:
            lines.append(
                f"{r.user},{r.hr:.10f},{r.recall:.10f},{r.precision:.10f},{r.ndcg:.10f}"
            )
    return "\n".join(lines) + "\n"


def write_report(report: RankingReport, path: str | Path, per_user: bool = False) -> None:
    Path(path).write_text(format_report(report, per_user=per_user), encoding="utf-8")
