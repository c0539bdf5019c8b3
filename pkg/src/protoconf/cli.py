"""Command-line driver: ``synth``, ``train``, ``rank`` and ``eval``.

All outputs are line-delimited JSON. Exit codes::

    0 ok              4 non-finite loss during training
    1 unreadable input 5 checkpoint K differs from corpus K
    2 invalid flags   6 ids in rankings cannot be resolved
    3 write failure
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import io as pio
from .confidence import Transform
from .core import ProtoconfError, WeightVector
from .evaluation import Aggregation, aggregate, precision_at_k, recall_at_k
from .losses import DiversityMode, LossConfig, NonFiniteLoss, train
from .ranking import CandidatePool, default_workers, initial_rank, rank_queries, rerank

log = logging.getLogger("protoconf")

EXIT_INPUT, EXIT_FLAGS, EXIT_WRITE, EXIT_NONFINITE, EXIT_KMISMATCH, EXIT_IDS = 1, 2, 3, 4, 5, 6


class CliExit(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _k_list(text: str) -> list[int]:
    try:
        ks = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not ks or any(k < 1 for k in ks):
        raise argparse.ArgumentTypeError(f"K values must be >= 1, got {text!r}")
    return ks


def _dump(records, out) -> None:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    if out is None or out == "-":
        sys.stdout.write(text)
        return
    try:
        Path(out).write_text(text, encoding="utf-8")
    except OSError as e:
        raise CliExit(EXIT_WRITE, f"cannot write {out}: {e}")


def _corpus_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--images", required=True, help="image embedding file (.pecm or .jsonl)")
    p.add_argument("--reports", required=True, help="report embedding file (.pecm or .jsonl)")
    p.add_argument("--pairing", required=True, help="report_id<TAB>image_id pairing file")
    p.add_argument("--labels", help="optional item_id<TAB>label[<TAB>ambiguous] file")
    p.add_argument("--group-size", type=int, default=3, help="patch block size for grid inputs")


def _load(args):
    if args.group_size < 1:
        raise CliExit(EXIT_FLAGS, "--group-size must be >= 1")
    try:
        return pio.load_corpus(args.images, args.reports, args.pairing, args.group_size, args.labels)
    except (ProtoconfError, OSError) as e:
        raise CliExit(EXIT_INPUT, str(e))


def cmd_synth(args) -> None:
    for flag in ("noise_sigma", "ambiguity_sigma", "instance_sigma"):
        if getattr(args, flag) < 0:
            raise CliExit(EXIT_FLAGS, f"--{flag.replace('_', '-')} must be >= 0")
    spec = pio.SyntheticSpec(
        n_pairs=args.pairs, n_classes=args.classes, dim=args.dim, K=args.k,
        noise_sigma=args.noise_sigma, ambiguity_fraction=args.ambiguity_fraction,
        ambiguity_sigma=args.ambiguity_sigma, seed=args.seed, instance_sigma=args.instance_sigma,
    )
    try:
        corpus = pio.generate_synthetic(spec)
    except pio.InvalidSpec as e:
        raise CliExit(EXIT_FLAGS, str(e))
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        pio.save_corpus(
            corpus, out / "images.pecm", out / "reports.pecm", out / "pairing.tsv",
            labels_path=args.meta,
        )
    except OSError as e:
        raise CliExit(EXIT_WRITE, f"cannot write corpus to {out}: {e}")


def cmd_train(args) -> None:
    if args.epochs < 1:
        raise CliExit(EXIT_FLAGS, "--epochs must be >= 1")
    if args.batch_size < 1:
        raise CliExit(EXIT_FLAGS, "--batch-size must be >= 1")
    if args.lr < 0:
        raise CliExit(EXIT_FLAGS, "--lr must be >= 0")
    try:
        cfg = LossConfig(args.lam, args.mu, args.temperature, args.transform, args.diversity)
    except ValueError as e:
        raise CliExit(EXIT_FLAGS, str(e))
    corpus = _load(args)
    init = None
    if args.init:
        try:
            init = pio.load_weights(args.init, expected_K=corpus.K)
        except pio.KMismatch as e:
            raise CliExit(EXIT_KMISMATCH, str(e))
        except (ProtoconfError, OSError) as e:
            raise CliExit(EXIT_INPUT, str(e))
    try:
        result = train(corpus, cfg, args.epochs, args.batch_size, args.lr, seed=args.seed, init=init)
    except NonFiniteLoss as e:
        raise CliExit(EXIT_NONFINITE, str(e))
    header = {
        "record": "header", "epochs": args.epochs, "batch_size": args.batch_size, "lr0": args.lr,
        "schedule": "cosine", "lambda": cfg.lam, "mu": cfg.mu, "temperature": cfg.temperature,
        "transform": cfg.transform.value, "diversity": cfg.diversity_mode.value, "seed": args.seed,
        "pairs": len(corpus.images), "K": corpus.K, "dim": corpus.dim,
    }
    rows = [header] + [
        {"record": "epoch", "epoch": r.epoch, "sim_loss": r.sim_loss, "conf_loss": r.conf_loss,
         "div_loss": r.div_loss, "total": r.total}
        for r in result.trace
    ]
    try:
        pio.save_weights(result.weights, args.out)
    except OSError as e:
        raise CliExit(EXIT_WRITE, f"cannot write checkpoint {args.out}: {e}")
    _dump(rows, args.trace)


def cmd_rank(args) -> None:
    if args.shortlist is not None and args.shortlist < 1:
        raise CliExit(EXIT_FLAGS, "--shortlist must be >= 1")
    try:
        workers = default_workers()
    except ValueError as e:
        raise CliExit(EXIT_FLAGS, str(e))
    corpus = _load(args)
    if args.weights:
        try:
            w = pio.load_weights(args.weights, expected_K=corpus.K)
        except pio.KMismatch as e:
            raise CliExit(EXIT_KMISMATCH, str(e))
        except (ProtoconfError, OSError) as e:
            raise CliExit(EXIT_INPUT, str(e))
    else:
        w = WeightVector.uniform(corpus.K)
    if args.direction == "i2r":
        queries, candidates = corpus.images, corpus.reports
    else:
        queries, candidates = corpus.reports, corpus.images
    try:
        pool = CandidatePool([candidates[c] for c in sorted(candidates)], w)
        qs = [queries[q] for q in sorted(queries)]
        if args.no_rerank:
            lists = rank_queries(qs, pool, lambda q, p: initial_rank(q, p, w), workers)
            results = [
                {"query_id": rl.query_id, "results": [
                    {"id": cid, "initial": s, "confidence": None, "final": None} for cid, s in rl.entries]}
                for rl in lists
            ]
        else:
            lists = rank_queries(
                qs, pool, lambda q, p: rerank(q, p, w, args.transform, args.shortlist), workers)
            results = [
                {"query_id": rl.query_id, "results": [
                    {"id": cid, "initial": s.initial, "confidence": s.confidence, "final": s.final}
                    for cid, s in rl.entries]}
                for rl in lists
            ]
    except ProtoconfError as e:
        raise CliExit(EXIT_INPUT, str(e))
    meta = {"direction": args.direction, "rerank": not args.no_rerank, "transform": args.transform}
    _dump([{**meta, **r} for r in results], args.out)


def _read_rankings(path) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]
    except (OSError, json.JSONDecodeError) as e:
        raise CliExit(EXIT_INPUT, f"cannot read rankings {path}: {e}")


def cmd_eval(args) -> None:
    records = _read_rankings(args.rankings)
    try:
        pairing = pio.read_pairing(args.pairing)
        labels = pio.read_labels(args.labels)[0] if args.labels else None
    except (ProtoconfError, OSError) as e:
        raise CliExit(EXIT_INPUT, str(e))
    report_of = {i: r for r, imgs in pairing.items() for i in imgs}
    if args.relevance == "class" and labels is None:
        raise CliExit(EXIT_FLAGS, "--relevance class needs --labels")

    per: dict[tuple, list] = {}
    for rec in records:
        direction, qid = rec.get("direction"), rec.get("query_id")
        ids = [e["id"] for e in rec.get("results", [])]
        if args.relevance == "class":
            unknown = [i for i in [qid] + ids if i not in labels]
            if unknown:
                raise CliExit(EXIT_IDS, f"no label for id {unknown[0]!r}")
            relevant = {i for i in ids if labels[i] == labels[qid]}
            if not relevant:
                continue
        elif direction == "i2r":
            if qid not in report_of:
                raise CliExit(EXIT_IDS, f"image {qid!r} is not in the pairing file")
            relevant = {report_of[qid]}
        elif direction == "r2i":
            if qid not in pairing:
                raise CliExit(EXIT_IDS, f"report {qid!r} is not in the pairing file")
            relevant = pairing[qid]
        else:
            raise CliExit(EXIT_INPUT, f"ranking record for {qid!r} has unknown direction {direction!r}")
        label = labels.get(qid) if labels else None
        for k in args.recall_k:
            per.setdefault((direction, "recall", k), []).append((qid, label, recall_at_k(ids, relevant, k)))
        for k in args.precision_k or []:
            per.setdefault((direction, "precision", k), []).append((qid, label, precision_at_k(ids, relevant, k)))

    modes = [Aggregation.MICRO] + ([Aggregation.MACRO] if labels else [])
    rows = []
    order = {"recall": 0, "precision": 1}
    for (direction, metric, k) in sorted(per, key=lambda t: (t[0], order[t[1]], t[2])):
        values = per[(direction, metric, k)]
        for mode in modes:
            rows.append({
                "direction": direction, "metric": metric, "k": k, "mode": mode.value,
                "value": aggregate(values, mode), "queries": len(values),
            })
    _dump(rows, args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protoconf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--noise-sigma", type=float, default=0.5)
    p.add_argument("--ambiguity-fraction", type=float, default=0.0)
    p.add_argument("--ambiguity-sigma", type=float, default=3.0)
    p.add_argument("--instance-sigma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--meta", help="also write an item_id<TAB>label<TAB>ambiguous file here")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="learn the shared prototype weights")
    _corpus_args(p)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--transform", choices=[t.value for t in Transform], default="shifted")
    p.add_argument("--diversity", choices=[m.value for m in DiversityMode], default="verbatim")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", help="start from this checkpoint")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--trace", default="-", help="trace output (default stdout)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rank", help="rank candidates for every query")
    _corpus_args(p)
    p.add_argument("--weights", help="checkpoint; uniform weights if omitted")
    p.add_argument("--direction", choices=["i2r", "r2i"], default="i2r")
    p.add_argument("--no-rerank", action="store_true", help="stop at the global-similarity ranking")
    p.add_argument("--transform", choices=[t.value for t in Transform], default="shifted")
    p.add_argument("--shortlist", type=int, help="re-rank only the top M initial candidates")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("eval", help="score ranking records")
    p.add_argument("--rankings", required=True)
    p.add_argument("--pairing", required=True)
    p.add_argument("--labels", help="class labels; enables macro rows and --relevance class")
    p.add_argument("--relevance", choices=["pairing", "class"], default="pairing")
    p.add_argument("--recall-k", type=_k_list, default=[1, 5, 10])
    p.add_argument("--precision-k", type=_k_list, default=None)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except CliExit as e:
        print(f"protoconf {args.command}: {e}", file=sys.stderr)
        return e.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
