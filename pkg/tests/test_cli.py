import json

import numpy as np
import pytest

from partstyle import corpus as C
from partstyle import motion as M
from partstyle.cli import dispatch, load_run_config


def run(*argv):
    return dispatch([str(a) for a in argv])


def test_unknown_subcommand_is_a_usage_error(capsys):
    assert run("dance") == 2
    assert "usage" in capsys.readouterr().err


def test_missing_required_flag_names_it(capsys):
    assert run("train-lm", "--corpus", "x") == 2
    assert "--stage" in capsys.readouterr().err


def test_config_layering(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text('seed = 4\nout = "from-file"\n[corpus]\nn = 9\n[lm]\nsteps = 5\n')
    got = load_run_config(str(cfg), {"seed": 7, "out": None})
    assert got.seed == 7 and got.out == "from-file"
    assert got.corpus == {"n": 9, "frames_min": 64, "frames_max": 120}
    assert got.lm == {"steps": 5}
    assert load_run_config(None, {}).seed == 0


def test_unknown_config_key_fails_validation(tmp_path, capsys):
    cfg = tmp_path / "run.toml"
    cfg.write_text("colour = 'blue'\n")
    assert run("gen-corpus", "--config", cfg, "--out", tmp_path / "o") == 1
    assert "colour" in capsys.readouterr().err


def test_gen_corpus_is_reproducible(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text("[corpus]\nn = 4\nframes_min = 40\nframes_max = 48\n")
    for name in ("a", "b"):
        assert run("gen-corpus", "--config", cfg, "--seed", 3, "--out", tmp_path / name) == 0
    prov = [json.loads((tmp_path / n / "gen-corpus.provenance.json").read_text()) for n in "ab"]
    assert prov[0]["dataset_hash"] == prov[1]["dataset_hash"]
    assert len(C.load_dataset(tmp_path / "a" / "corpus")) == 4


def test_eval_fs_ratio_report(tmp_path):
    f = np.zeros((30, M.FRAME_DIM), dtype=np.float32)
    f[:, 3] = 0.9
    for j, x in ((10, 0.1), (11, -0.1)):
        c = M.RIC_SLICE.start + 3 * (j - 1)
        f[:, c], f[:, c + 1] = x, 0.02
    f[:, 2] = 0.05
    (tmp_path / "motions").mkdir()
    M.save_mbin(tmp_path / "motions" / "slide.mbin", M.MotionSequence(f))
    M.save_mbin(tmp_path / "motions" / "still.mbin", M.MotionSequence(f * np.r_[1, 1, 0, np.ones(260)].astype(np.float32)))
    assert run("eval", "--metric", "fs-ratio", "--input", tmp_path / "motions", "--out", tmp_path / "o") == 0
    rep = json.loads((tmp_path / "o" / "fs-ratio.json").read_text())
    assert rep["metric"] == "fs-ratio" and rep["value"] == 0.5
    prov = json.loads((tmp_path / "o" / "eval.provenance.json").read_text())
    assert prov["per_file"] == {"slide.mbin": 1.0, "still.mbin": 0.0}


def test_eval_rejects_bad_input(tmp_path, capsys):
    (tmp_path / "junk.mbin").write_bytes(b"nope")
    assert run("eval", "--metric", "fs-ratio", "--input", tmp_path / "junk.mbin", "--out", tmp_path / "o") == 1
    assert "MBIN" in capsys.readouterr().err
    assert run("eval", "--metric", "fs-ratio", "--input", tmp_path / "empty", "--out", tmp_path / "o") == 1


def test_export_anim(tmp_path):
    sample = C.synth_generate("walk", "neutral", 40, seed=1)
    M.save_mbin(tmp_path / "walk.mbin", sample.motion)
    assert run("export-anim", "--input", tmp_path / "walk.mbin", "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "walk.anim.json").read_text())
    assert doc["fps"] == M.FPS and len(doc["joints"]) == 22
    assert np.allclose(doc["frames"], M.recover_global_positions(sample.motion), atol=1e-5)


# -- end to end on trained toy models ------------------------------------------


@pytest.fixture(scope="module")
def models_dir(tmp_path_factory, local_models):
    d = tmp_path_factory.mktemp("models")
    local_models.vq.save(d / "vq")
    local_models.vocab.save(d / "vocab.json")
    local_models.model.save(d / "lm.ckpt")
    local_models.reader.save(d / "reader.ckpt")
    return d


def test_stylize_end_to_end_and_reproducible(tmp_path, models_dir, memory_set):
    args = ["stylize", "--content", memory_set.content_text("walk"), "--style", memory_set.style_text("arms_overhead"),
            "--backend", "local", "--models", models_dir]
    assert run(*args, "--out", tmp_path / "a") == 0
    prov = json.loads((tmp_path / "a" / "stylize.provenance.json").read_text())
    # replay from the recorded argv into a fresh directory
    replay = [a for a in prov["argv"]]
    replay[replay.index("--out") + 1] = str(tmp_path / "b")
    assert dispatch(replay) == 0
    m_a = M.load_mbin(tmp_path / "a" / "stylized.mbin")
    m_b = M.load_mbin(tmp_path / "b" / "stylized.mbin")
    assert m_a.frames.tobytes() == m_b.frames.tobytes()
    assert prov["pipeline"]["unified_parts"] == memory_set.unified("walk", "arms_overhead").as_dict()
    assert M.validate_layout(m_a) == []


def test_reason_compose_generate_chain(tmp_path, models_dir, memory_set):
    assert run("reason", "--text", memory_set.content_text("wave"), "--models", models_dir, "--out", tmp_path / "c") == 0
    assert run("reason", "--text", memory_set.style_text("arms_overhead"), "--models", models_dir, "--out", tmp_path / "s") == 0
    assert run("compose", "--content-parts", tmp_path / "c" / "parts.json", "--style-parts", tmp_path / "s" / "parts.json",
               "--backend", "rule", "--models", models_dir, "--out", tmp_path / "u") == 0
    unified = json.loads((tmp_path / "u" / "unified.json").read_text())
    assert unified == memory_set.unified("wave", "arms_overhead").as_dict()
    assert run("generate", "--parts", tmp_path / "u" / "unified.json", "--models", models_dir, "--out", tmp_path / "g") == 0
    assert len(M.load_mbin(tmp_path / "g" / "generated.mbin")) == memory_set.n_frames


def test_stylize_needs_exactly_one_content(tmp_path, models_dir, capsys):
    assert run("stylize", "--style", "x", "--models", models_dir, "--out", tmp_path) == 2
    assert "--content" in capsys.readouterr().err


def test_llm_backend_without_endpoint_fails_validation(tmp_path, models_dir, capsys):
    assert run("reason", "--text", "walk", "--backend", "llm", "--models", models_dir, "--out", tmp_path) == 1
    assert "[llm]" in capsys.readouterr().err


def test_example_config_loads():
    from pathlib import Path

    cfg = load_run_config(str(Path(__file__).parent.parent / "configs" / "example.toml"), {})
    assert cfg.compose_backend == "local" and cfg.corpus["n"] == 64
