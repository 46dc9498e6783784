"""Stylize every memorized (content, style) pair and score the outputs.

    python3 scripts/evaluate_memorized.py --models runs/models

Prints per-pair FS-Ratio and predicted style, then SRA over all pairs.
"""
import argparse
from pathlib import Path

from partstyle import lm
from partstyle import metrics as E
from partstyle import tasks as TK
from partstyle import vocab as V
from partstyle import vq
from partstyle.pipeline import GlobalText, LocalModels, Pipeline


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--models", default="runs/models")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    d = Path(args.models)
    local = LocalModels(V.Vocabulary.load(d / "vocab.json"), lm.Seq2Seq.load(d / "lm.ckpt"), vq.VqBundle.load(d / "vq"))
    emb = E.EvalEmbedders.load(d / "embedders")
    mem = TK.build_memory_set(seed=args.seed)
    motions, labels = [], []
    for c, s in mem.samples:
        res = Pipeline(local).stylize(GlobalText(mem.content_text(c)), GlobalText(mem.style_text(s)), seed=args.seed)
        pred = emb.predict_styles([res.motion])[0]
        print(f"{c:12s} {s:18s} fs {E.fs_ratio(res.motion):.3f}  predicted {pred}")
        motions.append(res.motion)
        labels.append(s)
    print(f"SRA {E.sra(emb, motions, labels):.3f}")


if __name__ == "__main__":
    main()
