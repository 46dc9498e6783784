import json

import httpx
import numpy as np
import pytest

from partstyle import motion as M
from partstyle import vocab as V
from partstyle import vq
from partstyle.compose import ANSWER_ORDER, PartTexts
from partstyle.llm_client import LlmClient, LlmEndpointConfig
from partstyle.pipeline import (
    REMINDER,
    GenerationError,
    GlobalText,
    MotionInput,
    Pipeline,
    PipelineConfig,
    PipelineError,
)

WAVE = PartTexts("stands in place", "upright", "hangs relaxed", "waves overhead", "stands still", "stands still")


def chat_mock(*answers):
    """Transport that replays ``answers`` in order (last one repeats) and records request bodies."""
    sent = []
    queue = list(answers)

    def handler(request):
        sent.append(json.loads(request.content))
        text = queue.pop(0) if len(queue) > 1 else queue[0]
        return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": text}}]})

    client = LlmClient(LlmEndpointConfig("http://llm.test/v1", "mock"), transport=httpx.MockTransport(handler), sleep=lambda s: None)
    return client, sent


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(reason_backend="rule")
    with pytest.raises(ValueError):
        PipelineConfig(min_frames=200, max_frames=100)


def test_rule_compose_is_idempotent():
    pipe = Pipeline(config=PipelineConfig(compose_backend="rule"))
    assert pipe.compose(WAVE, WAVE) == WAVE


def test_llm_reason_parses_the_answer():
    client, sent = chat_mock(V.render_answer(WAVE))
    pipe = Pipeline(llm=client, config=PipelineConfig(reason_backend="llm"))
    assert pipe.reason(GlobalText("a person waves")) == WAVE
    assert len(sent) == 1
    assert "a person waves" in sent[0]["messages"][-1]["content"]


def test_malformed_answer_is_requeried_once_with_a_reminder():
    client, sent = chat_mock("Root: stands ; Left Arm: hangs", V.render_answer(WAVE))
    pipe = Pipeline(llm=client, config=PipelineConfig(reason_backend="llm"))
    assert pipe.reason(GlobalText("a person waves")) == WAVE
    assert len(sent) == 2
    assert sent[1]["messages"][-1]["content"] == REMINDER
    assert [c["reminder"] for c in pipe.trace] == [False, True]


def test_persistently_malformed_answer_surfaces_with_its_stage():
    client, sent = chat_mock("I cannot comply")
    pipe = Pipeline(llm=client, config=PipelineConfig(reason_backend="llm", compose_backend="rule"))
    with pytest.raises(V.AnswerParseError):
        pipe.reason(GlobalText("x"))
    with pytest.raises(PipelineError) as err:
        pipe.stylize(GlobalText("walk"), GlobalText("proudly"))
    assert err.value.stage == "reason_content"
    assert isinstance(err.value.__cause__, V.AnswerParseError)


def test_llm_compose_rejects_empty_sections():
    half = PartTexts("walks", "upright", "", "", "steps", "steps")
    client, sent = chat_mock(V.render_answer(half), V.render_answer(WAVE))
    pipe = Pipeline(llm=client, config=PipelineConfig(compose_backend="llm"))
    assert pipe.compose(WAVE, half) == WAVE
    assert len(sent) == 2


def test_missing_backends_are_reported():
    with pytest.raises(PipelineError) as err:
        Pipeline().reason(GlobalText("walk"))
    assert err.value.stage == "reason"
    with pytest.raises(PipelineError):
        Pipeline(config=PipelineConfig(reason_backend="llm")).reason(GlobalText("walk"))


def test_motion_input_must_be_valid():
    bad = np.zeros((10, M.FRAME_DIM), dtype=np.float32)
    bad[3, 260] = 2.0
    with pytest.raises(M.LayoutError):
        MotionInput(M.MotionSequence(bad))


# -- trained local models ------------------------------------------------------


def _texts(mem, c, s):
    return GlobalText(mem.content_text(c)), GlobalText(mem.style_text(s))


def test_local_reason_recalls_memorized_texts(local_models, memory_set):
    pipe = Pipeline(local_models)
    for c in memory_set.contents:
        assert pipe.reason(GlobalText(memory_set.content_text(c))) == memory_set.content_parts(c)


def test_motion_input_is_read_by_the_local_reader(local_models, memory_set):
    pipe = Pipeline(local_models, config=PipelineConfig(reason_backend="llm"))
    for sample in list(memory_set.samples.values())[:4]:
        assert pipe.reason(MotionInput(sample.motion)) == sample.part_texts


def test_stylize_is_deterministic_with_provenance(local_models, memory_set, memory_tasks):
    _, targets = memory_tasks
    content, style = _texts(memory_set, "wave", "arms_overhead")
    a = Pipeline(local_models).stylize(content, style, seed=0)
    b = Pipeline(local_models).stylize(content, style, seed=0)
    assert a.motion.frames.tobytes() == b.motion.frames.tobytes()
    assert a.provenance == b.provenance
    assert {p: a.tokens[p].indices for p in M.PARTS} == {p: targets[("wave", "arms_overhead")][p].indices for p in M.PARTS}
    prov = json.loads(a.provenance_json())
    assert prov["unified_parts"] == memory_set.unified("wave", "arms_overhead").as_dict()
    assert prov["frames"] == len(a.motion) == memory_set.n_frames
    assert set(prov["template_hashes"]) == set(V.TEMPLATE_IDS)
    assert prov["vocab_fingerprint"] == local_models.vocab.fingerprint()
    assert [c["template"] for c in prov["calls"]] == ["reason", "reason", "compose", "generate"]


def test_neutral_style_reproduces_the_content_round_trip(local_models, memory_set):
    """A clip stylized with the neutral style decodes to the tokenizer round trip of its own clip."""
    sample = memory_set.samples[("walk", "neutral")]
    pipe = Pipeline(local_models, config=PipelineConfig(compose_backend="rule"))
    out = pipe.stylize(*_texts(memory_set, "walk", "neutral"))
    assert pipe.compose(memory_set.content_parts("walk"), memory_set.style_parts("neutral")) == sample.part_texts
    expect = vq.detokenize(local_models.vq, vq.tokenize(local_models.vq, sample.motion))
    assert np.array_equal(out.motion.frames, expect.frames)


def test_frame_bounds(local_models, memory_set):
    pipe = Pipeline(local_models, config=PipelineConfig(max_frames=40, min_frames=40))
    out = pipe.stylize(*_texts(memory_set, "idle", "hunched_slow"))
    assert len(out.motion) == 40
    assert all(len(out.tokens[p].indices) == 10 for p in ANSWER_ORDER)
    strict = Pipeline(local_models, config=PipelineConfig(min_frames=100, max_frames=196))
    with pytest.raises(PipelineError) as err:
        strict.stylize(*_texts(memory_set, "idle", "hunched_slow"))
    assert err.value.stage == "generate"
    assert isinstance(err.value.__cause__, GenerationError)


def test_over_long_prompt_is_rejected(local_models):
    pipe = Pipeline(local_models, config=PipelineConfig(max_prompt=8))
    with pytest.raises(V.PromptTooLongError):
        pipe.reason(GlobalText("a person walks forward in a perfectly ordinary way"))
