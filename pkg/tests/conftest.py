"""Shared fixtures: small device corpora built once per session.

Building a 1024x1024 scene takes about a second, so anything that only
needs *some* realistic corpus shares these instead of building its own.
Tests that check determinism or seeds build their own corpora in
tmp_path.
"""

import json
from pathlib import Path

import pytest

from qdalign.pipeline import run_locate
from qdalign.synth import CorpusConfig, emit_corpus

SESSION_SEED = 20260822


def _build(tmp_path_factory, preset: str) -> dict:
    out = tmp_path_factory.mktemp(f"{preset}-corpus")
    result = emit_corpus(
        CorpusConfig(preset=preset, out_dir=out, n_scenes=2, seed=SESSION_SEED)
    )
    config = json.loads(Path(result.config_path).read_text())
    return {
        "root": out,
        "config": config,
        "truth": result.truth_path,
        "images": result.image_paths,
    }


@pytest.fixture(scope="session")
def fig2b_corpus(tmp_path_factory):
    return _build(tmp_path_factory, "fig2b")


@pytest.fixture(scope="session")
def fig2c_corpus(tmp_path_factory):
    return _build(tmp_path_factory, "fig2c")


@pytest.fixture(scope="session")
def fig2b_located(fig2b_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("fig2b-locate")
    summary = run_locate(fig2b_corpus["config"], fig2b_corpus["root"], out, epoch="pre")
    return {"out": out, "summary": summary}


@pytest.fixture(scope="session")
def fig2c_located(fig2c_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("fig2c-locate")
    summary = run_locate(fig2c_corpus["config"], fig2c_corpus["root"], out, epoch="pre")
    return {"out": out, "summary": summary}
