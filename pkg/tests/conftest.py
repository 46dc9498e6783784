"""Session fixtures for the expensive training runs.

The VQ bundle, vocabulary and overfit sequence model are trained once per
session. Set PARTSTYLE_TEST_CACHE to a directory to reuse them across
sessions while iterating; timings recorded on the first run are kept.
"""
from __future__ import annotations

import json
import os
import time
from pathlib import Path

import pytest

from partstyle import corpus as C
from partstyle import motion as M
from partstyle import vq


def _cache_dir(name: str) -> Path | None:
    root = os.environ.get("PARTSTYLE_TEST_CACHE")
    if not root:
        return None
    return Path(root) / name


@pytest.fixture(scope="session")
def toy_corpus():
    return C.generate_corpus(64, seed=0)


@pytest.fixture(scope="session")
def toy_motions(toy_corpus):
    return [s.motion for s in toy_corpus]


@pytest.fixture(scope="session")
def vq_run(toy_motions):
    """Six part models trained on the toy corpus, with per-part wall time."""
    cache = _cache_dir("vq")
    if cache is not None and (cache / "timing.json").exists():
        return vq.VqBundle.load(cache), json.loads((cache / "timing.json").read_text())
    models, timing = {}, {}
    for part in M.PARTS:
        t0 = time.process_time()
        models[part] = vq.train_vq(toy_motions, vq.VqConfig(part, seed=0))
        timing[part] = time.process_time() - t0
    bundle = vq.VqBundle(models)
    if cache is not None:
        bundle.save(cache)
        (cache / "timing.json").write_text(json.dumps(timing))
    return bundle, timing


@pytest.fixture(scope="session")
def vq_bundle(vq_run):
    return vq_run[0]


@pytest.fixture(scope="session")
def eval_splits():
    from partstyle import metrics as E

    train = E.labeled(C.generate_corpus(240, seed=11, frames=(40, 120)))
    held_out = E.labeled(C.generate_corpus(96, seed=12, frames=(40, 120)))
    return train, held_out


@pytest.fixture(scope="session")
def embedders(eval_splits):
    from partstyle import metrics as E

    train, held_out = eval_splits
    return E.train_eval_embedders(train, held_out, E.EmbedderConfig(seed=0))


@pytest.fixture(scope="session")
def memory_set():
    from partstyle import tasks as TK

    return TK.build_memory_set()


@pytest.fixture(scope="session")
def vocab(toy_corpus, memory_set):
    from partstyle import tasks as TK
    from partstyle import vocab as V

    return V.build_vocab(TK.vocab_texts(toy_corpus + list(memory_set.samples.values())))


def _fit_cached(name, vocab, tasks):
    """Overfit a 2+2 model on ``tasks``; returns (model, cpu seconds, final step)."""
    from partstyle import lm
    from partstyle import tasks as TK

    cache = _cache_dir(name)
    if cache is not None and (cache / "meta.json").exists():
        meta = json.loads((cache / "meta.json").read_text())
        if meta["vocab"] == vocab.fingerprint():
            return lm.Seq2Seq.load(cache / "model.ckpt"), meta["seconds"], meta["steps"]
    t0 = time.process_time()
    model = TK.fit_memory_model(vocab, tasks)
    seconds = time.process_time() - t0
    steps = model.log[-1]["step"]
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
        model.save(cache / "model.ckpt")
        (cache / "meta.json").write_text(json.dumps({"seconds": seconds, "steps": steps, "vocab": vocab.fingerprint()}))
    return model, seconds, steps


@pytest.fixture(scope="session")
def memory_tasks(vocab, memory_set, vq_bundle):
    from partstyle import tasks as TK

    return TK.memory_tasks(vocab, memory_set, vq_bundle)


@pytest.fixture(scope="session")
def memory_lm_run(vocab, memory_tasks):
    return _fit_cached("memory_lm", vocab, memory_tasks[0])


@pytest.fixture(scope="session")
def memory_lm(memory_lm_run):
    return memory_lm_run[0]


@pytest.fixture(scope="session")
def reader_lm(vocab, memory_set, vq_bundle):
    from partstyle import tasks as TK

    return _fit_cached("reader_lm", vocab, TK.reader_tasks(vocab, memory_set, vq_bundle))[0]


@pytest.fixture(scope="session")
def local_models(vocab, memory_lm, vq_bundle, reader_lm):
    from partstyle.pipeline import LocalModels

    return LocalModels(vocab, memory_lm, vq_bundle, reader_lm)


# -- acceptance summary ----------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        n, title = mark.args
        detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        _ACCEPTANCE[n] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, verdict, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {verdict}  {title}" + (f"  [{detail}]" if detail else ""))
