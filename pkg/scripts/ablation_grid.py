#!/usr/bin/env python3
"""Component ablation on a synthetic corpus, driven entirely through the CLI.

Axes: per-region prototypes (off = global-only K=1 files), learned weights
(off = uniform, untrained), re-ranking (off = --no-rerank), and the two auxiliary
loss terms (off = --lambda 0 / --mu 0). Prints one JSON row per configuration.
"""

import argparse
import itertools
import json
import tempfile
from pathlib import Path

from protoconf.cli import main
from protoconf.core import Corpus, Modality, PrototypeSet
from protoconf.io import load_corpus, save_corpus


def run(*argv):
    code = main([str(a) for a in argv])
    if code:
        raise SystemExit(f"command failed ({code}): {' '.join(map(str, argv))}")


def global_only(corpus: Corpus) -> Corpus:
    def strip(ps):
        return PrototypeSet(ps.item_id, ps.modality, ps.prototypes[-1:])

    return Corpus(
        {k: strip(v) for k, v in corpus.images.items()},
        {k: strip(v) for k, v in corpus.reports.items()},
        corpus.pairing, corpus.labels, corpus.ambiguous,
    )


def read_metric(path: Path, metric: str, k: int) -> float:
    for line in path.read_text().splitlines():
        row = json.loads(line)
        if row["metric"] == metric and row["k"] == k and row["mode"] == "micro":
            return row["value"]
    raise KeyError((metric, k))


def main_(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--pairs", type=int, default=600)
    ap.add_argument("--classes", type=int, default=30)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--ambiguity-fraction", type=float, default=0.3)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--direction", choices=["i2r", "r2i"], default="i2r")
    args = ap.parse_args(argv)

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        full = tmp / "full"
        run("synth", "--pairs", args.pairs, "--classes", args.classes, "--dim", args.dim, "--k", args.k,
            "--ambiguity-fraction", args.ambiguity_fraction, "--seed", args.seed, "--out", full)
        glob = tmp / "global"
        glob.mkdir()
        corpus = load_corpus(full / "images.pecm", full / "reports.pecm", full / "pairing.tsv")
        save_corpus(global_only(corpus), glob / "images.pecm", glob / "reports.pecm", glob / "pairing.tsv")

        for per, learned, rerank, lam, mu in itertools.product([True, False], [True, False], [True, False], [1.0, 0.0], [1.0, 0.0]):
            if not learned and (lam, mu) != (1.0, 1.0):
                continue  # loss weights are irrelevant without training
            src = full if per else glob
            files = ["--images", src / "images.pecm", "--reports", src / "reports.pecm", "--pairing", src / "pairing.tsv"]
            tag = f"{int(per)}{int(learned)}{int(rerank)}{lam:g}{mu:g}"
            rank_args = ["rank", *files, "--direction", args.direction, "--out", tmp / f"{tag}.jsonl"]
            if learned:
                run("train", *files, "--lambda", lam, "--mu", mu, "--epochs", args.epochs, "--lr", args.lr,
                    "--seed", args.seed, "--out", tmp / f"{tag}.w", "--trace", tmp / f"{tag}.trace")
                rank_args += ["--weights", tmp / f"{tag}.w"]
            if not rerank:
                rank_args.append("--no-rerank")
            run(*rank_args)
            run("eval", "--rankings", tmp / f"{tag}.jsonl", "--pairing", src / "pairing.tsv",
                "--out", tmp / f"{tag}.eval")
            row = {"per_region": per, "learned_weights": learned, "rerank": rerank, "lambda": lam, "mu": mu}
            row.update({f"R@{k}": round(read_metric(tmp / f"{tag}.eval", "recall", k), 4) for k in (1, 5, 10)})
            print(json.dumps(row))


if __name__ == "__main__":
    main_()
