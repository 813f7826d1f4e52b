"""Command-line front end: one subcommand per pipeline stage.

Stages compose through files: edge maps (PGM/PNG), weight files, descriptor
and index files, graph files, ranking TSVs, and evaluation reports. Every
run is reproducible from the configuration document plus --seed; text
artifacts carry the config hash in a header comment.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace as dc_replace
from pathlib import Path

import numpy as np

from . import convnet, descriptors, retrieval
from .classify import evaluate_domain_generalization
from .config import (
    RunConfig,
    config_hash,
    parse_config,
    parse_network,
    to_train_config,
    validate_config,
)
from .edgemap import EdgeMap, detect_edges_fallback, preprocess_sketch, read_edge_map, write_edge_map
from .errors import EdgemacError, InputError, ProtocolError
from .training import TrainingData, TrainingItem, TrainingTuple, initial_negatives, train

log = logging.getLogger("edgemac.cli")


def _parallel_map(fn, items, threads: int):
    items = list(items)
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _require_files(*paths) -> None:
    # fail on missing inputs before any computation starts
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"input file not found: {p}")


def _unique_stems(paths):
    stems = [Path(p).stem for p in paths]
    if len(set(stems)) != len(stems):
        raise InputError("input file names (stems) must be unique; they become item ids")
    return stems


def _write_tsv(path, cfg: RunConfig, columns, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# config={config_hash(cfg)}\n")
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(str(v) for v in row) + "\n")


def _read_tsv(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            rows.append(line.split("\t"))
    return rows


# ---------------------------------------------------------------------------
# Manifest loading (training data on disk)
# ---------------------------------------------------------------------------

ROLES = ("query", "positive-pool", "negative-pool", "validation")


def load_manifest(path) -> TrainingData:
    """Read a training manifest: one 'id<TAB>path<TAB>model_id<TAB>role' per line.

    Raster paths are relative to the manifest's directory. Each query is
    paired with the first positive-pool item (by id) of the same model;
    validation items are paired within each model the same way. Initial
    negatives are deterministic placeholders; hard mining replaces them at
    the start of the first epoch.
    """
    base = Path(path).parent
    by_role = {role: [] for role in ROLES}
    seen_ids = set()
    for parts in _read_tsv(path):
        if len(parts) != 4:
            raise InputError(f"manifest line needs 4 tab-separated fields, got {parts}")
        item_id, rel_path, model_id, role = parts
        if role not in ROLES:
            raise InputError(f"unknown manifest role {role!r}")
        if item_id in seen_ids:
            raise InputError(f"duplicate manifest id {item_id!r}")
        seen_ids.add(item_id)
        em = read_edge_map(base / rel_path)
        by_role[role].append(
            TrainingItem(id=item_id, edge_map=em, model_id=model_id, is_query=(role == "query"))
        )

    positives = sorted(by_role["positive-pool"], key=lambda it: it.id)
    pool = sorted(by_role["negative-pool"], key=lambda it: it.id)
    tuples = []
    for q in sorted(by_role["query"], key=lambda it: it.id):
        match = next((p for p in positives if p.model_id == q.model_id), None)
        if match is None:
            raise InputError(f"query {q.id!r} has no positive-pool item for model {q.model_id!r}")
        tuples.append(TrainingTuple(q, match, initial_negatives(pool, q.model_id)))

    val_items = sorted(by_role["validation"], key=lambda it: it.id)
    by_model = {}
    for item in val_items:
        by_model.setdefault(item.model_id, []).append(item)
    val_tuples = []
    for model_id in sorted(by_model):
        group = by_model[model_id]
        if len(group) < 2:
            continue
        val_tuples.append(
            TrainingTuple(
                dc_replace(group[0], is_query=True), group[1],
                initial_negatives(val_items, model_id),
            )
        )
    if not val_tuples:
        raise InputError("manifest has no validation model with at least two items")
    return TrainingData(tuples=tuples, pool=pool, val_tuples=val_tuples, val_pool=val_items)


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_edges(cfg, ns):
    _require_files(*ns.inputs)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    stems = _unique_stems(ns.inputs)
    for stem, src in zip(stems, ns.inputs):
        raster = read_edge_map(src)  # grayscale in [0, 1]
        write_edge_map(detect_edges_fallback(raster.strengths), out / f"{stem}.pgm")
    return 0


def _cmd_sketch_prep(cfg, ns):
    _require_files(*ns.inputs)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    stems = _unique_stems(ns.inputs)
    for stem, src in zip(stems, ns.inputs):
        em = read_edge_map(src)
        if ns.threshold is not None:
            em = EdgeMap((em.strengths > ns.threshold).astype(float))
        write_edge_map(preprocess_sketch(em), out / f"{stem}.pgm")
    return 0


def _cmd_train(cfg, ns):
    _require_files(ns.manifest)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_manifest(ns.manifest)
    weights, history = train(
        data, to_train_config(cfg), net_config=parse_network(cfg.network), threads=ns.threads
    )
    convnet.save_weights(weights, out / "weights.emwt")
    with open(out / "history.csv", "w", encoding="utf-8") as fh:
        fh.write(f"# config={config_hash(cfg)}\n")
        fh.write("epoch,train_loss,val_loss,lr\n")
        for row in history:
            fh.write(f"{row.epoch},{row.train_loss:.8f},{row.val_loss:.8f},{row.lr:.8g}\n")
    return 0


def _cmd_extract(cfg, ns):
    _require_files(ns.weights, *ns.inputs)
    weights = convnet.load_weights(ns.weights)
    stems = _unique_stems(ns.inputs)

    def one(src):
        em = read_edge_map(src)
        instances = descriptors.extract_edgemac(
            weights, em, is_sketch=ns.sketch,
            max_side=cfg.extract_max_side, pad_border=cfg.pad_border,
        )
        if ns.multi:
            return instances
        return descriptors.aggregate_sum(instances)

    vecs = _parallel_map(one, ns.inputs, ns.threads)
    descriptors.save_descriptors(ns.out, stems, np.stack(vecs))
    return 0


def _cmd_index(cfg, ns):
    _require_files(*ns.inputs)
    all_ids, mats = [], []
    for src in ns.inputs:
        ids, vectors = descriptors.load_descriptors(src)
        all_ids.extend(ids)
        mats.append(vectors)
    if len({m.shape[1:] for m in mats}) != 1:
        raise InputError("descriptor files disagree on per-item count or dimension")
    merged = np.concatenate(mats)
    index = retrieval.Index(ids=all_ids, vectors=merged, per_item_count=merged.shape[1])
    retrieval.save_index(ns.out, index)
    return 0


def _cmd_search(cfg, ns):
    _require_files(ns.index, ns.queries)
    index = retrieval.load_index(ns.index)
    qids, qvecs = descriptors.load_descriptors(ns.queries)
    k = ns.k if ns.k and ns.k > 0 else len(index)
    rows = []
    for qid, qv in zip(qids, qvecs):
        if index.per_item_count == 1:
            if qv.shape[0] != 1:
                raise ProtocolError("index stores one descriptor per item; queries must too")
            ranking = retrieval.knn_search(qv[0], index, k)
        else:
            ranking = retrieval.search_multi(qv, index)[:k]
        rows.extend((qid, rank, item_id, f"{score:.6f}")
                    for rank, (item_id, score) in enumerate(ranking, start=1))
    _write_tsv(ns.out, cfg, ("query_id", "rank", "item_id", "score"), rows)
    return 0


def _cmd_whiten(cfg, ns):
    if ns.learn:
        _require_files(*ns.learn)
        a_ids, a = descriptors.load_descriptors(ns.learn[0])
        b_ids, b = descriptors.load_descriptors(ns.learn[1])
        if a.shape != b.shape:
            raise InputError("paired descriptor files must have identical layout")
        if a.shape[1] != 1:
            raise ProtocolError("whitening pairs must be single descriptors per item")
        transform = descriptors.learn_whitening(list(zip(a[:, 0, :], b[:, 0, :])))
        descriptors.save_whitening(ns.out, transform)
        return 0
    _require_files(ns.transform, ns.input)
    transform = descriptors.load_whitening(ns.transform)
    ids, vectors = descriptors.load_descriptors(ns.input)
    out = np.stack([
        np.stack([descriptors.apply_whitening(transform, inst) for inst in item])
        for item in vectors
    ])
    descriptors.save_descriptors(ns.out, ids, out)
    return 0


def _cmd_graph(cfg, ns):
    _require_files(ns.descriptors)
    ids, vectors = descriptors.load_descriptors(ns.descriptors)
    if vectors.shape[1] != 1:
        raise ProtocolError("graphs are built over single descriptors per item")
    g = retrieval.build_knn_graph(vectors[:, 0, :].astype(np.float64), cfg.graph_k, cfg.gamma)
    retrieval.save_graph(ns.out, g, ids)
    return 0


def _load_rankings(path):
    rankings = {}
    for parts in _read_tsv(path):
        if parts[0] == "query_id":
            continue
        qid, rank, item_id, score = parts
        rankings.setdefault(qid, []).append((int(rank), item_id, float(score)))
    return {
        qid: [(item_id, score) for _, item_id, score in sorted(entries)]
        for qid, entries in rankings.items()
    }


def _cmd_diffuse(cfg, ns):
    _require_files(ns.rankings, *ns.graph)
    loaded = [retrieval.load_graph(p) for p in ns.graph]
    node_ids = loaded[0][1]
    for _, other_ids in loaded[1:]:
        if other_ids != node_ids:
            raise InputError("all graphs must be built over the same items in the same order")
    graphs = [g for g, _ in loaded]
    rankings = _load_rankings(ns.rankings)
    rows = []
    for qid in rankings:
        reranked = retrieval.diffusion_rerank(rankings[qid], graphs, cfg.alpha, cfg.seed_k, node_ids)
        rows.extend((qid, rank, item_id, f"{score:.6g}")
                    for rank, (item_id, score) in enumerate(reranked, start=1))
    _write_tsv(ns.out, cfg, ("query_id", "rank", "item_id", "score"), rows)
    return 0


def _cmd_eval_retrieval(cfg, ns):
    _require_files(ns.rankings, ns.relevance)
    rankings = _load_rankings(ns.rankings)
    pairs = [(p[0], p[1]) for p in _read_tsv(ns.relevance)]
    if ns.metric == "map":
        relevance = {}
        for qid, item_id in pairs:
            relevance.setdefault(qid, set()).add(item_id)
        value = retrieval.evaluate_map(rankings, relevance)
        name = "mAP"
    else:
        true_match = {}
        for qid, item_id in pairs:
            if qid in true_match:
                raise InputError(f"query {qid!r} has more than one true match")
            true_match[qid] = item_id
        value = retrieval.evaluate_acc_at_k(rankings, true_match, ns.k)
        name = f"acc@{ns.k}"
    print(f"{name}\t{value:.4f}")
    if ns.out:
        _write_tsv(ns.out, cfg, ("metric", "value"), [(name, f"{value:.6f}")])
    return 0


def _cmd_eval_classify(cfg, ns):
    _require_files(ns.descriptors, ns.labels)
    ids, vectors = descriptors.load_descriptors(ns.descriptors)
    if vectors.shape[1] != 1:
        raise ProtocolError("classification needs one aggregated descriptor per item")
    meta = {parts[0]: (parts[1], parts[2]) for parts in _read_tsv(ns.labels)
            if parts[0] != "id"}
    domain_sets = {}
    for item_id, vec in zip(ids, vectors[:, 0, :]):
        if item_id not in meta:
            raise InputError(f"descriptor id {item_id!r} missing from the label manifest")
        label, domain = meta[item_id]
        domain_sets.setdefault(domain, ([], []))
        domain_sets[domain][0].append(vec)
        domain_sets[domain][1].append(label)
    domain_sets = {k: (np.stack(v[0]), v[1]) for k, v in domain_sets.items()}
    train_domains = [d.strip() for d in ns.train_domains.split(",") if d.strip()]
    acc = evaluate_domain_generalization(domain_sets, train_domains, ns.test_domain,
                                         cfg.classifier_lambda)
    print(f"accuracy\t{acc:.4f}")
    if ns.out:
        _write_tsv(ns.out, cfg, ("train_domains", "test_domain", "accuracy"),
                   [("+".join(train_domains), ns.test_domain, f"{acc:.6f}")])
    return 0


def _cmd_report(cfg, ns):
    out = Path(ns.out)
    lines = [f"run report (config={config_hash(cfg)})", ""]
    history = out / "history.csv"
    if history.exists():
        rows = [l for l in history.read_text().splitlines() if l and not l.startswith("#")]
        lines.append(f"training: {len(rows) - 1} epochs recorded in {history.name}")
        if len(rows) > 1:
            lines.append(f"  first: {rows[1]}")
            lines.append(f"  last:  {rows[-1]}")
    for tsv in sorted(out.glob("*.tsv")):
        rows = _read_tsv(tsv)
        lines.append(f"{tsv.name}: {max(len(rows) - 1, 0)} data rows")
        for parts in rows[1:6]:
            lines.append("  " + "\t".join(parts))
    report = out / "report.txt"
    report.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------

_HANDLERS = {
    "edges": _cmd_edges,
    "sketch-prep": _cmd_sketch_prep,
    "train": _cmd_train,
    "extract": _cmd_extract,
    "whiten": _cmd_whiten,
    "index": _cmd_index,
    "search": _cmd_search,
    "graph": _cmd_graph,
    "diffuse": _cmd_diffuse,
    "eval-retrieval": _cmd_eval_retrieval,
    "eval-classify": _cmd_eval_classify,
    "report": _cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgemac", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration document")
    common.add_argument("--seed", type=int, help="global random seed (overrides config)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker pool size")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("edges", parents=[common], help="detect edges in grayscale rasters")
    p.add_argument("--out", required=True, help="output directory for PGM edge maps")
    p.add_argument("inputs", nargs="+")

    p = sub.add_parser("sketch-prep", parents=[common], help="thin + dilate binary sketches")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=None,
                   help="binarize non-binary inputs at this strength first")
    p.add_argument("inputs", nargs="+")

    p = sub.add_parser("train", parents=[common], help="fine-tune the network on a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("manifest")

    p = sub.add_parser("extract", parents=[common], help="extract descriptors from edge maps")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True, help="output descriptor file")
    p.add_argument("--sketch", action="store_true", help="inputs are preprocessed sketches")
    p.add_argument("--multi", action="store_true",
                   help="store all 10 pyramid instances instead of the aggregated descriptor")
    p.add_argument("inputs", nargs="+")

    p = sub.add_parser("whiten", parents=[common], help="learn or apply descriptor whitening")
    p.add_argument("--learn", nargs=2, metavar=("A", "B"),
                   help="two aligned descriptor files of matching pairs")
    p.add_argument("--transform", help="whitening file to apply")
    p.add_argument("--input", help="descriptor file to whiten")
    p.add_argument("--out", required=True)

    p = sub.add_parser("index", parents=[common], help="build an index from descriptor files")
    p.add_argument("--out", required=True)
    p.add_argument("inputs", nargs="+")

    p = sub.add_parser("search", parents=[common], help="rank index items for each query")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, default=0, help="results per query (0 = all)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("graph", parents=[common], help="build a kNN affinity graph")
    p.add_argument("--descriptors", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("diffuse", parents=[common], help="diffusion re-ranking of search results")
    p.add_argument("--rankings", required=True)
    p.add_argument("--graph", action="append", required=True,
                   help="graph file (repeat to combine graphs)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval-retrieval", parents=[common], help="score rankings against relevance")
    p.add_argument("--rankings", required=True)
    p.add_argument("--relevance", required=True, help="TSV of query_id<TAB>item_id")
    p.add_argument("--metric", choices=("map", "acc"), default="map")
    p.add_argument("--k", type=int, default=10, help="cutoff for acc@K")
    p.add_argument("--out")

    p = sub.add_parser("eval-classify", parents=[common], help="domain-generalization accuracy")
    p.add_argument("--descriptors", required=True)
    p.add_argument("--labels", required=True, help="TSV of id<TAB>class<TAB>domain")
    p.add_argument("--train-domains", required=True, dest="train_domains")
    p.add_argument("--test-domain", required=True, dest="test_domain")
    p.add_argument("--out")

    p = sub.add_parser("report", parents=[common], help="summarize artifacts in a run directory")
    p.add_argument("--out", required=True, help="run directory to summarize")

    return parser


def load_run_config(ns) -> RunConfig:
    if ns.config:
        _require_files(ns.config)
        cfg = parse_config(Path(ns.config).read_text(encoding="utf-8"))
    else:
        cfg = RunConfig()
    if ns.seed is not None:
        cfg = dc_replace(cfg, seed=ns.seed)
    validate_config(cfg)
    return cfg


def run_pipeline(command: str, cfg: RunConfig, ns) -> int:
    """Dispatch one pipeline stage; returns the process exit status."""
    handler = _HANDLERS.get(command)
    if handler is None:
        raise InputError(f"unknown command {command!r}")
    return handler(cfg, ns)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    ns = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(ns)
        return run_pipeline(ns.command, cfg, ns)
    except (EdgemacError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
