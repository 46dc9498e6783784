"""Training tasks for the sequence model, and the small memorization set."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import corpus as C
from . import vocab as V
from .compose import ANSWER_ORDER, PART_LABELS, PartTexts, compose_rules
from . import lm
from .lm import TrainingTask
from .vq import PartTokenSeq, VqBundle, tokenize


def _target(vocab: V.Vocabulary, text: str) -> tuple[int, ...]:
    return tuple(vocab.encode_text(text)) + (vocab.eos_id,)


def part_motion_text(part: str, indices) -> str:
    return " ".join([V.SOM[part]] + [V.motion_surface(part, int(i)) for i in indices] + [V.EOM[part]])


def pretrain_tasks(vocab: V.Vocabulary, texts: PartTexts, tokens: dict[str, PartTokenSeq]) -> list[TrainingTask]:
    """Both translation directions for every part with a non-empty text."""
    out = []
    for p in ANSWER_ORDER:
        if not texts[p]:
            continue
        label = f"{PART_LABELS[p]}: {texts[p]}"
        motion = part_motion_text(p, tokens[p].indices)
        out.append(TrainingTask("part_text_to_motion", tuple(vocab.encode_text(label)), _target(vocab, motion)))
        out.append(TrainingTask("part_motion_to_text", tuple(vocab.encode_text(motion)), _target(vocab, texts[p])))
    return out


def reason_task(vocab: V.Vocabulary, global_text: str, answer: PartTexts) -> TrainingTask:
    return TrainingTask(
        "global_to_parts",
        tuple(V.render_prompt(vocab, "reason", global_text=global_text)),
        _target(vocab, V.render_answer(answer)),
    )


def motion_reason_task(vocab: V.Vocabulary, tokens: dict[str, PartTokenSeq], answer: PartTexts) -> TrainingTask:
    return TrainingTask(
        "part_motion_to_text",
        tuple(V.render_prompt(vocab, "global_to_parts", motion=tokens)),
        _target(vocab, V.render_answer(answer)),
    )


def compose_task(vocab: V.Vocabulary, content: PartTexts, style: PartTexts, unified: PartTexts) -> TrainingTask:
    return TrainingTask(
        "compose",
        tuple(V.render_prompt(vocab, "compose", content_parts=content, style_parts=style)),
        _target(vocab, V.render_answer(unified)),
    )


def generate_task(vocab: V.Vocabulary, unified: PartTexts, tokens: dict[str, PartTokenSeq]) -> TrainingTask:
    return TrainingTask(
        "parts_to_motion",
        tuple(V.render_prompt(vocab, "generate", parts=unified)),
        _target(vocab, V.render_answer(tokens)),
    )


# ---------------------------------------------------------------------------
# memorization set

DEFAULT_PAIRS = (
    ("walk", "neutral"),
    ("walk", "arms_overhead"),
    ("walk", "hunched_slow"),
    ("walk", "exaggerated_swing"),
    ("walk_circle", "neutral"),
    ("walk_circle", "hunched_slow"),
    ("wave", "arms_overhead"),
    ("throw", "arms_overhead"),
    ("jump", "exaggerated_swing"),
    ("idle", "hunched_slow"),
    ("idle", "arms_overhead"),
)


@dataclass
class MemorySet:
    """Canonical texts per content and per style, plus one clip per (content, style) pair."""

    n_frames: int
    content_params: dict[str, dict]
    style_params: dict[str, dict]
    samples: dict[tuple[str, str], C.TripletSample] = field(default_factory=dict)

    def content_text(self, content: str) -> str:
        return C.CONTENTS[content].phrase

    def style_text(self, style: str) -> str:
        return C.STYLES[style].prompt

    def content_parts(self, content: str) -> PartTexts:
        return C.content_part_texts(content, self.content_params[content])

    def style_parts(self, style: str) -> PartTexts:
        return C.style_part_texts(style, self.style_params[style])

    def unified(self, content: str, style: str) -> PartTexts:
        return compose_rules(self.content_parts(content), self.style_parts(style))

    @property
    def contents(self) -> list[str]:
        return sorted({c for c, _ in self.samples})

    @property
    def styles(self) -> list[str]:
        return sorted({s for _, s in self.samples})


def build_memory_set(pairs=DEFAULT_PAIRS, n_frames: int = 48, seed: int = 0) -> MemorySet:
    rng = np.random.default_rng(seed)
    contents = sorted({c for c, _ in pairs})
    styles = sorted({s for _, s in pairs})
    cp = {c: C.sample_params(c, "neutral", n_frames, rng) for c in contents}
    sp = {}
    for s in styles:
        full = C.sample_params("idle", s, n_frames, rng)
        sp[s] = {k: full[k] for k in ("elevation", "lean", "speed_pct", "swing") if k in full}
    mem = MemorySet(n_frames, cp, sp)
    for i, (c, s) in enumerate(pairs):
        params = {**cp[c], **sp[s]}
        mem.samples[(c, s)] = C.synth_generate(c, s, n_frames, seed=seed * 1000 + i, overrides=params, sample_id=f"mem-{c}-{s}")
    return mem


def memory_tasks(vocab: V.Vocabulary, mem: MemorySet, bundle: VqBundle) -> tuple[list[TrainingTask], dict]:
    """Reason tasks for every content and style text, then compose and generate per pair.

    Also returns the token sequences each generate task targets, keyed by pair.
    """
    tasks = [reason_task(vocab, mem.content_text(c), mem.content_parts(c)) for c in mem.contents]
    tasks += [reason_task(vocab, mem.style_text(s), mem.style_parts(s)) for s in mem.styles]
    targets = {}
    for (c, s), sample in mem.samples.items():
        unified = mem.unified(c, s)
        assert unified == sample.part_texts
        tasks.append(compose_task(vocab, mem.content_parts(c), mem.style_parts(s), unified))
        toks = tokenize(bundle, sample.motion)
        targets[(c, s)] = toks
        tasks.append(generate_task(vocab, unified, toks))
    return tasks, targets


def vocab_texts(samples: list[C.TripletSample]) -> list[str]:
    texts = []
    for s in samples:
        texts.append(s.global_text)
        texts += [t for t in s.part_texts.as_dict().values() if t]
        if s.content_texts is not None:
            texts += [t for t in s.content_texts.as_dict().values() if t]
        if s.style_texts is not None:
            texts += [t for t in s.style_texts.as_dict().values() if t]
    texts += [st.prompt for st in C.STYLES.values()]
    texts += [ct.phrase for ct in C.CONTENTS.values()]
    return texts


# overfit schedule for the memorization set; the stage default lr is far too slow here
MEMORY_TRAIN = lm.LmTrainConfig(steps=3000, batch=8, lr=1e-3, warmup=100, stop_below_nll=0.003, eval_every=100)


def reader_tasks(vocab: V.Vocabulary, mem: MemorySet, bundle: VqBundle) -> list[TrainingTask]:
    """Motion tokens of each memorized clip to that clip's six part texts."""
    return [motion_reason_task(vocab, tokenize(bundle, smp.motion), smp.part_texts) for smp in mem.samples.values()]


def fit_memory_model(vocab: V.Vocabulary, tasks: list[TrainingTask], config: lm.LmTrainConfig = MEMORY_TRAIN, seed: int = 0) -> lm.Seq2Seq:
    model = lm.Seq2Seq(lm.SeqModelConfig(vocab_size=len(vocab), seed=seed))
    return lm.train_lm(model, tasks, "posttrain", config, lm.SpecialIds.of(vocab))
