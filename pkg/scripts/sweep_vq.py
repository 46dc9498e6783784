"""Train one part tokenizer under several settings and report reconstruction error.

    python3 scripts/sweep_vq.py --part right_arm "dict(lr=4e-3)" "dict(lr=2e-3, hidden=64)"
"""
import argparse
import ast
import time

from partstyle import corpus as C
from partstyle import vq


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--part", default="right_arm")
    ap.add_argument("--clips", type=int, default=64)
    ap.add_argument("settings", nargs="*", default=["dict()"])
    args = ap.parse_args()
    motions = [s.motion for s in C.generate_corpus(args.clips, seed=0)]
    streams = vq.part_streams(motions, args.part)
    for text in args.settings:
        call = ast.parse(text, mode="eval").body
        kw = {k.arg: ast.literal_eval(k.value) for k in call.keywords}
        t0 = time.process_time()
        model = vq.train_vq(motions, vq.VqConfig(args.part, **kw))
        print(f"{text:40s} mse {model.reconstruction_mse(streams):.5f}  {time.process_time() - t0:.0f}s")


if __name__ == "__main__":
    main()
