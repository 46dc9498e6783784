"""Reason, compose and generate over a local model, an external chat service, or rules."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np

from . import lm
from . import motion as M
from . import vocab as V
from . import vq
from .compose import ANSWER_ORDER, PART_LABELS, Affinity, PartTexts, compose_rules
from .llm_client import LlmClient

REASON_BACKENDS = ("local", "llm")
COMPOSE_BACKENDS = ("local", "llm", "rule")

REMINDER = (
    "Reply with exactly six sections in this order, separated by ' ; ': "
    + " ; ".join(f"{PART_LABELS[p]}: ..." for p in ANSWER_ORDER)
)
SYSTEM_PROMPT = "You describe human motion one body part at a time. Follow the requested answer format exactly."


@dataclass(frozen=True)
class GlobalText:
    text: str


@dataclass(frozen=True)
class MotionInput:
    motion: M.MotionSequence

    def __post_init__(self):
        findings = M.validate_layout(self.motion)
        if findings:
            raise M.LayoutError("; ".join(findings))


StyleOrContentInput = Union[GlobalText, MotionInput]


class PipelineError(RuntimeError):
    """A stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class GenerationError(ValueError):
    pass


@dataclass
class LocalModels:
    vocab: V.Vocabulary
    model: lm.Seq2Seq
    vq: vq.VqBundle
    # an optional separate model for motion -> part texts
    reader: lm.Seq2Seq | None = None

    @property
    def ids(self) -> lm.SpecialIds:
        return lm.SpecialIds.of(self.vocab)


@dataclass
class PipelineConfig:
    reason_backend: str = "local"
    compose_backend: str = "local"
    decode: lm.DecodeConfig = field(default_factory=lambda: lm.DecodeConfig(max_len=512))
    min_frames: int = 40
    max_frames: int = 196
    max_prompt: int = V.MAX_INPUT
    affinity: dict[str, Affinity] | None = None

    def __post_init__(self):
        if self.reason_backend not in REASON_BACKENDS:
            raise ValueError(f"reason backend must be one of {REASON_BACKENDS}")
        if self.compose_backend not in COMPOSE_BACKENDS:
            raise ValueError(f"compose backend must be one of {COMPOSE_BACKENDS}")
        if not 0 < self.min_frames <= self.max_frames:
            raise ValueError("need 0 < min_frames <= max_frames")


@dataclass
class StylizeResult:
    motion: M.MotionSequence
    tokens: dict[str, vq.PartTokenSeq]
    provenance: dict

    def provenance_json(self) -> str:
        return json.dumps(self.provenance, indent=2, sort_keys=True)


def _motion_digest(m: M.MotionSequence) -> str:
    return hashlib.sha256(np.ascontiguousarray(m.frames, dtype="<f4").tobytes()).hexdigest()


def _describe(inp: StyleOrContentInput) -> dict:
    if isinstance(inp, GlobalText):
        return {"kind": "text", "text": inp.text}
    return {"kind": "motion", "frames": len(inp.motion), "sha256": _motion_digest(inp.motion)}


class Pipeline:
    def __init__(self, local: LocalModels | None = None, llm: LlmClient | None = None, config: PipelineConfig | None = None):
        self.local = local
        self.llm = llm
        self.config = config or PipelineConfig()
        self.trace: list[dict] = []

    # -- backends --------------------------------------------------------------

    def _need_local(self, what: str) -> LocalModels:
        if self.local is None:
            raise PipelineError(what, "no local model configured")
        return self.local

    def _run_local(self, model: lm.Seq2Seq, template_id: str, kind: str, reminder: bool, **fields):
        loc = self._need_local(template_id)
        text = V.render_text(template_id, **fields)
        if reminder:
            text = f"{text} {REMINDER}"
        ids = loc.vocab.encode_text(text)
        if len(ids) > self.config.max_prompt:
            raise V.PromptTooLongError(len(ids), self.config.max_prompt)
        out = lm.generate_tokens(model, ids, self.config.decode, loc.vocab.bos_id, loc.vocab.eos_id)
        self.trace.append({"template": template_id, "backend": "local", "reminder": reminder, "output_len": len(out)})
        return V.parse_answer(loc.vocab, out, kind)

    def _run_llm(self, template_id: str, reminder: bool, **fields) -> PartTexts:
        if self.llm is None:
            raise PipelineError(template_id, "no external service configured")
        messages = [
            {"role": "system", "content": SYSTEM_PROMPT},
            {"role": "user", "content": V.render_text(template_id, **fields)},
        ]
        if reminder:
            messages.append({"role": "user", "content": REMINDER})
        reply = self.llm.complete(messages)
        self.trace.append({"template": template_id, "backend": "llm", "reminder": reminder})
        return V.parse_part_texts(reply)

    def _with_retry(self, call, check=None):
        """Run ``call(reminder)``; on a parse failure re-query once with the format reminder."""
        try:
            out = call(False)
            if check:
                check(out)
            return out
        except V.AnswerParseError:
            out = call(True)
            if check:
                check(out)
            return out

    # -- stages ----------------------------------------------------------------

    def reason(self, inp: StyleOrContentInput, backend: str | None = None) -> PartTexts:
        backend = backend or self.config.reason_backend
        if backend not in REASON_BACKENDS:
            raise ValueError(f"unknown reason backend {backend!r}")
        if isinstance(inp, MotionInput):
            # motion tokens mean nothing to a generic chat model, so motions stay local
            loc = self._need_local("reason")
            tokens = vq.tokenize(loc.vq, inp.motion)
            model = loc.reader or loc.model
            return self._with_retry(lambda r: self._run_local(model, "global_to_parts", "texts", r, motion=tokens))
        if not isinstance(inp, GlobalText):
            raise TypeError(f"expected GlobalText or MotionInput, got {type(inp).__name__}")
        if backend == "llm":
            return self._with_retry(lambda r: self._run_llm("reason", r, global_text=inp.text))
        loc = self._need_local("reason")
        return self._with_retry(lambda r: self._run_local(loc.model, "reason", "texts", r, global_text=inp.text))

    def compose(self, content: PartTexts, style: PartTexts, backend: str | None = None) -> PartTexts:
        backend = backend or self.config.compose_backend
        if backend == "rule":
            return compose_rules(content, style, self.config.affinity)
        if backend not in COMPOSE_BACKENDS:
            raise ValueError(f"unknown compose backend {backend!r}")

        def complete(texts: PartTexts) -> None:
            empty = [p for p in ANSWER_ORDER if not texts[p].strip()]
            if empty:
                raise V.AnswerParseError(f"composed section {PART_LABELS[empty[0]]!r} is empty", empty[0], 0)

        if backend == "llm":
            call = lambda r: self._run_llm("compose", r, content_parts=content, style_parts=style)  # noqa: E731
        else:
            loc = self._need_local("compose")
            call = lambda r: self._run_local(loc.model, "compose", "texts", r, content_parts=content, style_parts=style)  # noqa: E731
        return self._with_retry(call, complete)

    def generate_tokens(self, unified: PartTexts) -> dict[str, vq.PartTokenSeq]:
        loc = self._need_local("generate")
        r = next(iter(loc.vq.models.values())).r

        def check(parts: dict[str, list[int]]) -> None:
            lengths = {p: len(v) for p, v in parts.items()}
            if len(set(lengths.values())) != 1:
                raise V.AnswerParseError(f"part blocks differ in length: {lengths}", "", 0)

        parts = self._with_retry(lambda rem: self._run_local(loc.model, "generate", "motions", rem, parts=unified), check)
        n_tok = len(parts[ANSWER_ORDER[0]])
        keep = min(n_tok, self.config.max_frames // r)
        if keep * r < self.config.min_frames:
            raise GenerationError(f"{n_tok} tokens give {n_tok * r} frames, below the minimum {self.config.min_frames}")
        return {p: vq.PartTokenSeq(p, tuple(parts[p][:keep]), keep * r) for p in M.PARTS}

    def generate_motion(self, unified: PartTexts) -> M.MotionSequence:
        return self._decode(self.generate_tokens(unified))

    def _decode(self, tokens: dict[str, vq.PartTokenSeq]) -> M.MotionSequence:
        motion = vq.detokenize(self._need_local("generate").vq, tokens)
        findings = M.validate_layout(motion)
        if findings:
            raise GenerationError("generated motion fails layout validation: " + "; ".join(findings))
        return motion

    # -- end to end ------------------------------------------------------------

    def stylize(self, content: StyleOrContentInput, style: StyleOrContentInput, seed: int | None = None) -> StylizeResult:
        if seed is not None:
            self.config.decode.seed = seed
        self.trace = []
        stages = {}
        try:
            stage = "reason_content"
            stages["content_parts"] = self.reason(content)
            stage = "reason_style"
            stages["style_parts"] = self.reason(style)
            stage = "compose"
            stages["unified"] = self.compose(stages["content_parts"], stages["style_parts"])
            stage = "generate"
            tokens = self.generate_tokens(stages["unified"])
            motion = self._decode(tokens)
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(stage, f"{type(exc).__name__}: {exc}") from exc
        return StylizeResult(motion, tokens, self._provenance(content, style, stages, tokens, motion))

    def _provenance(self, content, style, stages, tokens, motion) -> dict:
        cfg = self.config
        rec = {
            "inputs": {"content": _describe(content), "style": _describe(style)},
            "content_parts": stages["content_parts"].as_dict(),
            "style_parts": stages["style_parts"].as_dict(),
            "unified_parts": stages["unified"].as_dict(),
            "backends": {"reason": cfg.reason_backend, "compose": cfg.compose_backend, "generate": "local"},
            "decode": asdict(cfg.decode),
            "frame_bounds": [cfg.min_frames, cfg.max_frames],
            "template_hashes": {t: V.template_hash(t) for t in V.TEMPLATE_IDS},
            "tokens": {p: list(tokens[p].indices) for p in ANSWER_ORDER},
            "frames": len(motion),
            "motion_sha256": _motion_digest(motion),
            "calls": list(self.trace),
        }
        if self.local is not None:
            rec["vocab_fingerprint"] = self.local.vocab.fingerprint()
        if self.llm is not None:
            rec["llm"] = {"model": self.llm.config.model, "base_url": self.llm.config.base_url, "temperature": self.llm.config.temperature}
        return rec
