"""Command-line entry point: ``partstyle <subcommand> [flags]``.

Settings resolve as built-in defaults < TOML file (``--config``) < flags.
Every subcommand writes its artifacts plus ``<subcommand>.provenance.json``
under ``--out``. Exit status is 0 on success, 1 when inputs fail validation
and 2 on usage errors.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import tomli

from . import corpus as C
from . import lm
from . import metrics as E
from . import motion as M
from . import tasks as TK
from . import vocab as V
from . import vq
from .compose import PartTexts
from .llm_client import LlmClient, LlmEndpointConfig, LlmError
from .pipeline import GlobalText, LocalModels, MotionInput, Pipeline, PipelineConfig, PipelineError
from .tensor import ContractError

log = logging.getLogger("partstyle")

FORMAT_VERSION = 1
VALIDATION_ERRORS = (
    ValueError,
    ContractError,
    FileNotFoundError,
    C.DatasetError,
    PipelineError,
    LlmError,
    lm.LmTrainingError,
    vq.VqTrainingError,
    tomli.TOMLDecodeError,
)


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/latest"
    models: str = "runs/models"
    reason_backend: str = "local"
    compose_backend: str = "local"
    corpus: dict = field(default_factory=lambda: {"n": 64, "frames_min": 64, "frames_max": 120})
    vq: dict = field(default_factory=dict)
    lm: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    decode: dict = field(default_factory=dict)
    pipeline: dict = field(default_factory=dict)
    fs: dict = field(default_factory=dict)
    embedders: dict = field(default_factory=dict)
    llm: dict = field(default_factory=dict)


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    cfg = RunConfig()
    if path:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
        known = {f.name for f in fields(RunConfig)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"{path}: unknown config keys {unknown}")
        for k, v in data.items():
            cur = getattr(cfg, k)
            if isinstance(cur, dict):
                if not isinstance(v, dict):
                    raise ValueError(f"{path}: [{k}] must be a table")
                v = {**cur, **v}
            setattr(cfg, k, v)
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


# ---------------------------------------------------------------------------
# helpers


def _sha_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_provenance(out: Path, command: str, argv: list[str], cfg: RunConfig, extra: dict) -> Path:
    record = {
        "command": command,
        "argv": argv,
        "format_version": FORMAT_VERSION,
        "config": asdict(cfg),
        **extra,
    }
    path = out / f"{command}.provenance.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str))
    return path


def _models_dir(cfg: RunConfig) -> Path:
    return Path(cfg.models)


def _load_vocab(cfg: RunConfig) -> V.Vocabulary:
    return V.Vocabulary.load(_models_dir(cfg) / "vocab.json")


def _load_local(cfg: RunConfig, need_lm: bool = True) -> LocalModels:
    d = _models_dir(cfg)
    bundle = vq.VqBundle.load(d / "vq")
    voc = _load_vocab(cfg)
    model = lm.Seq2Seq.load(d / "lm.ckpt") if need_lm else None
    reader = lm.Seq2Seq.load(d / "reader.ckpt") if (d / "reader.ckpt").exists() else None
    return LocalModels(voc, model, bundle, reader)


def _llm(cfg: RunConfig) -> LlmClient | None:
    if not cfg.llm:
        return None
    return LlmClient(LlmEndpointConfig(**cfg.llm))


def _pipeline(cfg: RunConfig, need_lm: bool = True) -> Pipeline:
    uses_llm = "llm" in (cfg.reason_backend, cfg.compose_backend)
    if uses_llm and not cfg.llm:
        raise ValueError("an llm backend needs an [llm] table with base_url and model in the config file")
    decode = lm.DecodeConfig(**{"max_len": 512, "seed": cfg.seed, **cfg.decode})
    pcfg = PipelineConfig(reason_backend=cfg.reason_backend, compose_backend=cfg.compose_backend, decode=decode, **cfg.pipeline)
    return Pipeline(_load_local(cfg, need_lm), _llm(cfg), pcfg)


def _input(text: str | None, motion: str | None, what: str):
    if (text is None) == (motion is None):
        raise UsageError(f"give exactly one of --{what} or --{what}-motion")
    if text is not None:
        return GlobalText(text)
    return MotionInput(M.load_mbin(motion))


def _read_parts(path: str) -> PartTexts:
    return PartTexts.from_dict(json.loads(Path(path).read_text()))


def _motion_files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if (path / "index.json").exists():
        path = path / "motions"
    files = sorted(path.glob("*.mbin"))
    if not files:
        raise FileNotFoundError(f"no .mbin files under {path}")
    return files


def _sidecar(path: Path) -> dict:
    """Annotations for a motion file: a sibling .json, or a dataset's texts/ entry."""
    ann = M.load_sidecar(path)
    if ann is None:
        alt = path.parent.parent / "texts" / (path.stem + ".json")
        ann = json.loads(alt.read_text()) if alt.exists() else {}
    return ann


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_corpus(args, cfg: RunConfig, out: Path) -> dict:
    c = cfg.corpus
    samples = C.generate_corpus(int(c["n"]), seed=cfg.seed, frames=(int(c["frames_min"]), int(c["frames_max"])))
    root = C.save_dataset(samples, out / "corpus")
    log.info("wrote %d samples to %s", len(samples), root)
    return {"outputs": {"corpus": str(root)}, "dataset_hash": C.dataset_hash(root)}


def cmd_train_vq(args, cfg: RunConfig, out: Path) -> dict:
    samples = C.load_dataset(args.corpus)
    motions = [s.motion for s in samples]
    parts = args.parts.split(",") if args.parts else list(M.PARTS)
    models, report = {}, {}
    for p in parts:
        model = vq.train_vq(motions, vq.VqConfig(p, seed=cfg.seed, **cfg.vq))
        models[p] = model
        report[p] = {"final": model.log[-1] if getattr(model, "log", None) else None}
        log.info("trained %s", p)
    target = out / "vq"
    for m in models.values():
        m.save(target)
    return {"inputs": {"corpus": C.dataset_hash(args.corpus)}, "outputs": {"vq": str(target)}, "report": report}


def _lm_tasks(args, cfg: RunConfig, voc: V.Vocabulary, bundle: vq.VqBundle):
    if args.tasks == "memory":
        return TK.memory_tasks(voc, TK.build_memory_set(seed=cfg.seed), bundle)[0]
    if args.tasks == "reader":
        return TK.reader_tasks(voc, TK.build_memory_set(seed=cfg.seed), bundle)
    samples = C.load_dataset(args.corpus)
    tasks = []
    for s in samples:
        tokens = vq.tokenize(bundle, s.motion)
        if args.stage == "pretrain":
            tasks += TK.pretrain_tasks(voc, s.part_texts, tokens)
        else:
            tasks.append(TK.reason_task(voc, s.global_text, s.part_texts))
            if s.composition is not None:
                tasks.append(TK.compose_task(voc, *s.composition))
            tasks.append(TK.generate_task(voc, s.part_texts, tokens))
    return tasks


def cmd_train_lm(args, cfg: RunConfig, out: Path) -> dict:
    d = _models_dir(cfg)
    bundle = vq.VqBundle.load(d / "vq")
    if (d / "vocab.json").exists():
        voc = _load_vocab(cfg)
    else:
        if not args.corpus:
            raise UsageError("building a vocabulary needs --corpus")
        texts = TK.vocab_texts(C.load_dataset(args.corpus) + list(TK.build_memory_set(seed=cfg.seed).samples.values()))
        voc = V.build_vocab(texts, codebook_size=bundle.codebook_size)
    if args.tasks == "corpus" and not args.corpus:
        raise UsageError("--tasks corpus needs --corpus")
    tasks = _lm_tasks(args, cfg, voc, bundle)
    init = Path(args.init) if args.init else None
    if init is not None:
        model = lm.Seq2Seq.load(init)
    else:
        model = lm.Seq2Seq(lm.SeqModelConfig(vocab_size=len(voc), seed=cfg.seed, **cfg.model))
    base = TK.MEMORY_TRAIN if args.tasks != "corpus" else lm.LmTrainConfig()
    tcfg = replace(base, seed=cfg.seed, **cfg.lm)
    lm.train_lm(model, tasks, args.stage, tcfg, lm.SpecialIds.of(voc))
    out.mkdir(parents=True, exist_ok=True)
    name = "reader.ckpt" if args.tasks == "reader" else "lm.ckpt"
    model.save(out / name)
    voc.save(out / "vocab.json")
    lm.write_curve(model, out / f"{Path(name).stem}_curve.csv")
    nll = lm.dataset_nll(model, tasks, voc.bos_id, voc.pad_id)
    return {
        "outputs": {"model": str(out / name), "vocab": str(out / "vocab.json")},
        "vocab_fingerprint": voc.fingerprint(),
        "train": asdict(tcfg),
        "report": {"tasks": len(tasks), "steps": model.log[-1]["step"] if model.log else 0, "dataset_nll": nll},
    }


def cmd_reason(args, cfg: RunConfig, out: Path) -> dict:
    pipe = _pipeline(cfg)
    parts = pipe.reason(_input(args.text, args.motion, "text"))
    (out / "parts.json").write_text(json.dumps(parts.as_dict(), indent=2))
    print(V.render_answer(parts))
    return {"outputs": {"parts": parts.as_dict()}, "calls": pipe.trace}


def cmd_compose(args, cfg: RunConfig, out: Path) -> dict:
    pipe = _pipeline(cfg, need_lm=cfg.compose_backend == "local")
    unified = pipe.compose(_read_parts(args.content_parts), _read_parts(args.style_parts))
    (out / "unified.json").write_text(json.dumps(unified.as_dict(), indent=2))
    print(V.render_answer(unified))
    return {"outputs": {"unified": unified.as_dict()}, "calls": pipe.trace}


def _save_motion(out: Path, name: str, motion: M.MotionSequence, ann: dict) -> Path:
    path = out / f"{name}.mbin"
    M.save_mbin(path, motion, ann)
    return path


def cmd_generate(args, cfg: RunConfig, out: Path) -> dict:
    pipe = _pipeline(cfg)
    unified = _read_parts(args.parts)
    tokens = pipe.generate_tokens(unified)
    motion = pipe._decode(tokens)
    path = _save_motion(out, "generated", motion, {"part_texts": unified.as_dict()})
    return {
        "outputs": {"motion": str(path), "motion_sha256": _sha_file(path), "frames": len(motion)},
        "tokens": {p: list(t.indices) for p, t in tokens.items()},
        "calls": pipe.trace,
    }


def cmd_stylize(args, cfg: RunConfig, out: Path) -> dict:
    pipe = _pipeline(cfg)
    content = _input(args.content, args.content_motion, "content")
    style = _input(args.style, args.style_motion, "style")
    result = pipe.stylize(content, style, seed=cfg.seed)
    ann = {"part_texts": result.provenance["unified_parts"], "content": args.content, "style": args.style}
    path = _save_motion(out, "stylized", result.motion, ann)
    return {"outputs": {"motion": str(path), "motion_sha256": _sha_file(path)}, "pipeline": result.provenance}


def _embedders(args, cfg: RunConfig, out: Path) -> tuple[E.EvalEmbedders, dict]:
    if args.embedders and Path(args.embedders, "embedders.json").exists():
        return E.EvalEmbedders.load(args.embedders), {"embedders": str(args.embedders)}
    ecfg = E.EmbedderConfig(seed=cfg.seed, **cfg.embedders)
    train = E.labeled(C.generate_corpus(240, seed=cfg.seed + 11, frames=(40, 120)))
    held = E.labeled(C.generate_corpus(96, seed=cfg.seed + 12, frames=(40, 120)))
    emb = E.train_eval_embedders(train, held, ecfg)
    target = Path(args.embedders) if args.embedders else out / "embedders"
    emb.save(target)
    return emb, {"embedders": str(target), "fitted": emb.report}


def cmd_eval(args, cfg: RunConfig, out: Path) -> dict:
    files = _motion_files(Path(args.input))
    motions = [M.load_mbin(f) for f in files]
    extra: dict = {"inputs": {f.name: _sha_file(f) for f in files}}
    metric = args.metric
    if metric == "fs-ratio":
        fcfg = E.FsConfig(**cfg.fs)
        per = [E.fs_ratio(m, fcfg) for m in motions]
        value, conf = float(np.mean(per)), asdict(fcfg)
        extra["per_file"] = dict(zip([f.name for f in files], per))
    else:
        emb, info = _embedders(args, cfg, out)
        extra.update(info)
        anns = [_sidecar(f) for f in files]
        conf = {"embedders": info["embedders"]}
        if metric == "sra":
            labels = [a.get("style") for a in anns]
            if any(lab is None for lab in labels):
                raise ValueError("sra needs a style label in each motion's annotations")
            value = E.sra(emb, motions, labels)
        else:
            texts = [a.get("global_text") or a.get("text") for a in anns]
            if any(t is None for t in texts):
                raise ValueError(f"{metric} needs a global_text in each motion's annotations")
            if metric == "mm-dist":
                value = E.mm_dist(emb, texts, motions)
            else:
                conf.update(pool=args.pool, k=args.k)
                value = E.r_precision(emb, texts, motions, pool=args.pool, k=args.k, seed=cfg.seed)
    index = Path(args.input) / "index.json"
    report = E.MetricReport(metric, float(value), conf, C.dataset_hash(args.input) if index.exists() else None, cfg.seed)
    report.write(out / f"{metric}.json")
    print(report.to_json())
    return {"outputs": {"report": asdict(report)}, **extra}


def cmd_export_anim(args, cfg: RunConfig, out: Path) -> dict:
    motion = M.load_mbin(args.input)
    findings = M.validate_layout(motion)
    if findings:
        raise M.LayoutError("; ".join(findings))
    pos = M.recover_global_positions(motion)
    doc = {
        "format": "partstyle-keyframes",
        "version": 1,
        "fps": M.FPS,
        "joints": list(M.JOINT_NAMES),
        "parents": list(C.PARENTS),
        "frames": np.round(pos, 5).tolist(),
    }
    path = out / (Path(args.input).stem + ".anim.json")
    path.write_text(json.dumps(doc))
    return {"inputs": {"motion": _sha_file(Path(args.input))}, "outputs": {"anim": str(path), "frames": len(pos)}}


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-vq": cmd_train_vq,
    "train-lm": cmd_train_lm,
    "reason": cmd_reason,
    "compose": cmd_compose,
    "generate": cmd_generate,
    "stylize": cmd_stylize,
    "eval": cmd_eval,
    "export-anim": cmd_export_anim,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--models", help="directory holding vq/, vocab.json, lm.ckpt and optionally reader.ckpt")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="partstyle", description="Part-wise motion stylization toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    sub.add_parser("gen-corpus", parents=[common], help="write a synthetic triplet corpus")

    p = sub.add_parser("train-vq", parents=[common], help="train the per-part tokenizers")
    p.add_argument("--corpus", required=True)
    p.add_argument("--parts", help="comma-separated subset of parts")

    p = sub.add_parser("train-lm", parents=[common], help="train the sequence model")
    p.add_argument("--stage", required=True, choices=["pretrain", "posttrain"])
    p.add_argument("--corpus")
    p.add_argument("--tasks", choices=["corpus", "memory", "reader"], default="corpus")
    p.add_argument("--init", help="checkpoint to continue from")

    p = sub.add_parser("reason", parents=[common], help="global text or motion to six part texts")
    p.add_argument("--text")
    p.add_argument("--motion")
    p.add_argument("--backend", dest="reason_backend", choices=["local", "llm"])

    p = sub.add_parser("compose", parents=[common], help="merge content and style part texts")
    p.add_argument("--content-parts", required=True)
    p.add_argument("--style-parts", required=True)
    p.add_argument("--backend", dest="compose_backend", choices=["local", "llm", "rule"])

    p = sub.add_parser("generate", parents=[common], help="part texts to motion")
    p.add_argument("--parts", required=True)

    p = sub.add_parser("stylize", parents=[common], help="content + style to motion")
    p.add_argument("--content")
    p.add_argument("--content-motion")
    p.add_argument("--style")
    p.add_argument("--style-motion")
    p.add_argument("--backend", dest="reason_backend", choices=["local", "llm"])
    p.add_argument("--compose-backend", choices=["local", "llm", "rule"])

    p = sub.add_parser("eval", parents=[common], help="score motions")
    p.add_argument("--metric", required=True, choices=["fs-ratio", "sra", "mm-dist", "r-precision"])
    p.add_argument("--input", required=True, help="motion file, directory of .mbin files, or dataset")
    p.add_argument("--embedders", help="evaluator directory; fitted and saved there when absent")
    p.add_argument("--pool", type=int, default=32)
    p.add_argument("--k", type=int, default=3)

    p = sub.add_parser("export-anim", parents=[common], help="motion to JSON joint keyframes")
    p.add_argument("--input", required=True)
    return parser


def dispatch(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {
        "seed": args.seed,
        "out": args.out,
        "models": args.models,
        "reason_backend": getattr(args, "reason_backend", None),
        "compose_backend": getattr(args, "compose_backend", None),
    }
    try:
        cfg = load_run_config(args.config, overrides)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        extra = COMMANDS[args.command](args, cfg, out)
        _write_provenance(out, args.command, argv, cfg, extra)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"partstyle {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as exc:
        print(f"partstyle {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())
