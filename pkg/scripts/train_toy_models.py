"""Train the full desk-scale model set into one directory.

    python3 scripts/train_toy_models.py --out runs/models

Writes vq/, vocab.json, lm.ckpt (memorization set), reader.ckpt (motion ->
part texts), embedders/ and timings.json. The result is what ``partstyle
--models`` expects.
"""
import argparse
import json
import time
from pathlib import Path

from partstyle import corpus as C
from partstyle import metrics as E
from partstyle import motion as M
from partstyle import tasks as TK
from partstyle import vocab as V
from partstyle import vq


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/models")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--clips", type=int, default=64)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}

    corpus = C.generate_corpus(args.clips, seed=args.seed)
    motions = [s.motion for s in corpus]
    models = {}
    for part in M.PARTS:
        t0 = time.process_time()
        models[part] = vq.train_vq(motions, vq.VqConfig(part, seed=args.seed))
        timings[f"vq/{part}"] = time.process_time() - t0
        print(f"{part:10s} mse {models[part].reconstruction_mse(vq.part_streams(motions, part)):.5f}  {timings[f'vq/{part}']:.0f}s")
    bundle = vq.VqBundle(models)
    bundle.save(out / "vq")

    mem = TK.build_memory_set(seed=args.seed)
    voc = V.build_vocab(TK.vocab_texts(corpus + list(mem.samples.values())))
    voc.save(out / "vocab.json")

    tasks, _ = TK.memory_tasks(voc, mem, bundle)
    t0 = time.process_time()
    model = TK.fit_memory_model(voc, tasks, seed=args.seed)
    timings["lm"] = time.process_time() - t0
    model.save(out / "lm.ckpt")
    print(f"lm      steps {model.log[-1]['step']}  {timings['lm']:.0f}s")

    t0 = time.process_time()
    reader = TK.fit_memory_model(voc, TK.reader_tasks(voc, mem, bundle), seed=args.seed)
    timings["reader"] = time.process_time() - t0
    reader.save(out / "reader.ckpt")

    train = E.labeled(C.generate_corpus(240, seed=args.seed + 11, frames=(40, 120)))
    held = E.labeled(C.generate_corpus(96, seed=args.seed + 12, frames=(40, 120)))
    emb = E.train_eval_embedders(train, held, E.EmbedderConfig(seed=args.seed))
    emb.save(out / "embedders")
    print("embedders", emb.report)

    (out / "timings.json").write_text(json.dumps(timings, indent=2))


if __name__ == "__main__":
    main()
