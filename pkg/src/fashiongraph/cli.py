"""Command-line entry point.

Runs are driven by a line-oriented ``key=value`` config file; any flag
given on the command line overrides the file.  All randomness flows from
the single ``seed`` key through named substreams, so reruns with the same
config are byte-identical.

Subcommands: ingest, train, evaluate, recommend, fltb, export-embeddings.
Exit codes: 0 ok, 1 validation failure, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .dataio import (
    Dataset,
    DatasetError,
    SyntheticConfig,
    Splits,
    generate_synthetic,
    load_dataset,
    split_interactions,
    write_features,
)
from .embed import load_checkpoint, save_checkpoint
from .evaluate import evaluate, fltb_accuracy, format_report, write_report
from .graph import FashionGraph, build_fashion_graph
from .propagate import forward
from .score import rec_score
from .train import Adam, TrainConfig, TrainingDivergedError, make_model, train_epoch


@dataclass(frozen=True)
class RunConfig:
    seed: int
    mode: str = "synthetic"  # synthetic | files
    out_dir: str = "out"
    k: int = 10
    split_scheme: str = "per_user_80_20"
    # files mode
    interactions: str = ""
    outfits: str = ""
    items: str = ""
    visual_features: str = ""
    textual_features: str = ""
    # synthetic mode
    synth_users: int = 20
    synth_outfits: int = 40
    synth_items: int = 60
    synth_categories: int = 6
    synth_clusters: int = 2
    synth_dv: int = 16
    synth_dt: int = 8
    synth_items_per_outfit: int = 4
    synth_interactions_per_user: int = 12
    synth_purity: float = 0.95
    synth_noise: float = 0.2
    synth_unused_fraction: float = 0.2
    # training
    epochs: int = 50
    batch_size: int = 512
    lr: float = 0.001
    l2: float = 1e-4
    dropout_embed: float = 0.2
    dropout_attn: float = 0.3
    heads: int = 4
    r_views: int = 6
    d: int = 64
    d_h: int = 256
    view_hidden: int = 32
    lambda_rec: float = 1.0
    lambda_comp: float = 1.0
    dtype: str = "float64"

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            d=self.d,
            batch_size=self.batch_size,
            lr=self.lr,
            dropout_embed=self.dropout_embed,
            dropout_attn=self.dropout_attn,
            l2=self.l2,
            heads=self.heads,
            r_views=self.r_views,
            epochs=self.epochs,
            seed=self.seed,
            lambda_rec=self.lambda_rec,
            lambda_comp=self.lambda_comp,
            d_h=self.d_h,
            view_hidden=self.view_hidden,
            dtype=self.dtype,
        )

    def synthetic_config(self) -> SyntheticConfig:
        return SyntheticConfig(
            n_users=self.synth_users,
            n_outfits=self.synth_outfits,
            n_items=self.synth_items,
            n_categories=self.synth_categories,
            n_clusters=self.synth_clusters,
            d_v=self.synth_dv,
            d_t=self.synth_dt,
            items_per_outfit=self.synth_items_per_outfit,
            interactions_per_user=self.synth_interactions_per_user,
            cluster_purity=self.synth_purity,
            feature_noise=self.synth_noise,
            unused_item_fraction=self.synth_unused_fraction,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def make_run_config(file_values: dict[str, str], overrides: dict[str, object]) -> RunConfig:
    merged: dict[str, object] = {}
    for key, raw in file_values.items():
        if key not in _FIELD_TYPES:
            raise ValueError(f"unknown config key {key!r}")
        merged[key] = raw
    merged.update({k: v for k, v in overrides.items() if v is not None})
    if "seed" not in merged:
        raise ValueError("config must set a seed (wall-clock seeding is not allowed)")
    typed: dict[str, object] = {}
    for key, value in merged.items():
        annotation = str(_FIELD_TYPES[key])
        if isinstance(value, str):
            if "int" in annotation:
                value = int(value)
            elif "float" in annotation:
                value = float(value)
        typed[key] = value
    rc = RunConfig(**typed)
    if rc.mode not in ("synthetic", "files"):
        raise ValueError(f"mode must be 'synthetic' or 'files', got {rc.mode!r}")
    if rc.mode == "files":
        paths = {
            "interactions": rc.interactions,
            "outfits": rc.outfits,
            "items": rc.items,
            "visual_features": rc.visual_features,
            "textual_features": rc.textual_features,
        }
        for name, p in paths.items():
            if not p:
                raise ValueError(f"files mode requires the {name} path")
            if not Path(p).exists():
                raise FileNotFoundError(f"{name} file not found: {p}")
    return rc


def load_run_data(rc: RunConfig) -> Dataset:
    if rc.mode == "synthetic":
        return generate_synthetic(rc.synthetic_config(), rc.seed)
    return load_dataset(
        interactions=rc.interactions,
        outfits=rc.outfits,
        items=rc.items,
        visual=rc.visual_features,
        textual=rc.textual_features,
    )


def prepare(rc: RunConfig) -> tuple[Dataset, Splits, FashionGraph]:
    ds = load_run_data(rc)
    splits = split_interactions(ds, rc.seed, scheme=rc.split_scheme)
    graph = build_fashion_graph(ds, splits)
    return ds, splits, graph


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(rc: RunConfig) -> int:
    ds = load_run_data(rc)
    graph = build_fashion_graph(ds)
    print(f"users: {len(ds.users)}")
    print(f"outfits: {len(ds.outfits)}")
    print(f"items: {len(ds.items)}")
    print(f"interactions: {len(ds.interactions)}")
    print(f"categories: {len(ds.categories)}")
    print(f"graph nodes: {graph.n_nodes}")
    print(f"graph edges: {graph.n_edges}")
    print("category histogram (items per category):")
    counts = {name: 0 for name in ds.categories}
    for item in ds.items.values():
        counts[ds.categories[item.category]] += 1
    for name in ds.categories:
        print(f"  {name}: {counts[name]}")
    pair_counts: dict[tuple[int, int], int] = {}
    for (c_i, c_j), n in graph.category_graph.co_counts.items():
        key = (min(c_i, c_j), max(c_i, c_j))
        pair_counts[key] = n
    top = sorted(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))[:5]
    print("top-5 co-occurring category pairs:")
    for (c_i, c_j), n in top:
        print(f"  {ds.categories[c_i]}+{ds.categories[c_j]}: {n}")
    return 0


def cmd_train(rc: RunConfig, resume: bool = False) -> int:
    out_dir = Path(rc.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"
    log_path = out_dir / "train_log.csv"

    ds, splits, graph = prepare(rc)
    cfg = rc.train_config()
    model = make_model(graph, ds, cfg)
    optimizer = Adam.from_config(cfg)

    start_epoch = 1
    best_hr = np.float32(-np.inf)
    best_epoch = 0
    if resume:
        if not last_path.exists():
            raise FileNotFoundError(f"cannot resume: {last_path} does not exist")
        extra = load_checkpoint(model, last_path)
        optimizer.load_state_arrays(extra, model.dtype)
        start_epoch = int(extra["meta/epoch"][0]) + 1
        best_hr = np.float32(extra["meta/best_hr"][0])
        best_epoch = int(extra["meta/best_epoch"][0])

    with open(log_path, "a" if resume else "w", encoding="utf-8") as log:
        for epoch in range(start_epoch, cfg.epochs + 1):
            stats = train_epoch(model, graph, ds, splits, cfg, optimizer, epoch)
            val = evaluate(
                model, graph, ds, splits, seed=rc.seed, k=rc.k, on="val", include_compat=False
            )
            log.write(
                f"{epoch},{stats.l_rec:.10f},{stats.l_comp:.10f},{stats.l_total:.10f},"
                f"{val.hr:.10f},{val.ndcg:.10f}\n"
            )
            hr32 = np.float32(val.hr)
            if hr32 > best_hr:
                best_hr = hr32
                best_epoch = epoch
                save_checkpoint(
                    model, best_path, extra={"meta/epoch": np.array([epoch], dtype=np.float32)}
                )
            save_checkpoint(
                model,
                last_path,
                extra={
                    **optimizer.state_arrays(),
                    "meta/epoch": np.array([epoch], dtype=np.float32),
                    "meta/best_hr": np.array([best_hr], dtype=np.float32),
                    "meta/best_epoch": np.array([best_epoch], dtype=np.float32),
                },
            )
    print(f"trained {cfg.epochs} epochs; best val HR@{rc.k} {float(best_hr):.6f} "
          f"at epoch {best_epoch}")
    print(f"checkpoints: {best_path} (best), {last_path} (last); log: {log_path}")
    return 0


def cmd_evaluate(rc: RunConfig, checkpoint: str, out: str | None, per_user: bool,
                 threads: int) -> int:
    ds, splits, graph = prepare(rc)
    model = make_model(graph, ds, rc.train_config())
    load_checkpoint(model, checkpoint)
    report = evaluate(
        model, graph, ds, splits, seed=rc.seed, k=rc.k, on="test", threads=threads
    )
    text = format_report(report, per_user=per_user)
    if out:
        write_report(report, out, per_user=per_user)
    sys.stdout.write(text)
    return 0


def cmd_recommend(rc: RunConfig, checkpoint: str, user: int, k: int | None) -> int:
    ds, splits, graph = prepare(rc)
    if user not in graph.user_index:
        raise KeyError(f"unknown user id {user}")
    model = make_model(graph, ds, rc.train_config())
    load_checkpoint(model, checkpoint)
    prop = forward(graph, ds, model, mode="eval")
    from .evaluate import rank_outfits

    ranked = rank_outfits(user, prop, graph, splits)
    top_k = k if k is not None else rc.k
    h_u = prop.h_user_star[graph.user_index[user]]
    for rank, oid in enumerate(ranked[:top_k], start=1):
        score = rec_score(h_u, prop.h_outfit_star[graph.outfit_index[oid]])
        print(f"{rank}\t{oid}\t{score:.10f}")
    return 0


def cmd_fltb(rc: RunConfig, checkpoint: str, trials: int) -> int:
    ds, splits, graph = prepare(rc)
    model = make_model(graph, ds, rc.train_config())
    load_checkpoint(model, checkpoint)
    prop = forward(graph, ds, model, mode="eval")
    accuracy, n = fltb_accuracy(
        ds, splits, prop, model, seed=rc.seed, trials_per_outfit=trials
    )
    print(f"fltb_accuracy={accuracy:.10f}")
    print(f"fltb_trials={n}")
    return 0


def cmd_export_embeddings(rc: RunConfig, checkpoint: str, which: str, out: str) -> int:
    ds, splits, graph = prepare(rc)
    model = make_model(graph, ds, rc.train_config())
    load_checkpoint(model, checkpoint)
    prop = forward(graph, ds, model, mode="eval")
    table = {
        "users": (graph.user_ids, prop.h_user_star),
        "outfits": (graph.outfit_ids, prop.h_outfit_star),
        "items": (graph.item_ids, prop.h_item_star),
    }
    if which not in table:
        raise ValueError(f"--which must be one of {sorted(table)}, got {which!r}")
    ids, embeddings = table[which]
    write_features(out, {int(i): embeddings[k].astype(np.float32) for k, i in enumerate(ids)})
    print(f"wrote {len(ids)} {which} embeddings to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(sub: argparse.ArgumentParser):
    sub.add_argument("--config", required=True, help="key=value config file")
    sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub.add_argument("--out-dir", default=None, help="override the output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fashiongraph",
        description="Graph-attention outfit recommendation and compatibility engine",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("ingest", help="load, validate, and summarize a dataset")
    _add_common(p)

    p = subs.add_parser("train", help="train and write checkpoints plus a log")
    _add_common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--resume", action="store_true", help="continue from last.ckpt")

    p = subs.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None, help="report file path")
    p.add_argument("--per-user", action="store_true")
    p.add_argument("--threads", type=int, default=1)

    p = subs.add_parser("recommend", help="top-k outfits for one user")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--k", type=int, default=None)

    p = subs.add_parser("fltb", help="fill-in-the-blank accuracy on test outfits")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trials", type=int, default=1, help="trials per outfit")

    p = subs.add_parser("export-embeddings", help="write embeddings as a features file")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--which", default="items", choices=["users", "outfits", "items"])
    p.add_argument("--out", required=True)
    return parser


def _run(args: argparse.Namespace) -> int:
    overrides: dict[str, object] = {"seed": args.seed, "out_dir": args.out_dir}
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    rc = make_run_config(parse_config_file(args.config), overrides)
    if args.command == "ingest":
        return cmd_ingest(rc)
    if args.command == "train":
        return cmd_train(rc, resume=args.resume)
    if args.command == "evaluate":
        return cmd_evaluate(rc, args.checkpoint, args.out, args.per_user, args.threads)
    if args.command == "recommend":
        return cmd_recommend(rc, args.checkpoint, args.user, args.k)
    if args.command == "fltb":
        return cmd_fltb(rc, args.checkpoint, args.trials)
    if args.command == "export-embeddings":
        return cmd_export_embeddings(rc, args.checkpoint, args.which, args.out)
    raise ValueError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except (DatasetError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDivergedError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
