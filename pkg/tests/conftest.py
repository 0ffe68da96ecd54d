from __future__ import annotations

from datetime import datetime

import pytest

from ehrrag.ccsr import load_ccsr
from ehrrag.corpus import ClinicalNote, NoteType
from ehrrag.linker import DictionaryLinker
from ehrrag.rxnorm import MedicationNormalizer
from ehrrag.synth import SynthConfig, generate_corpus, load_corpus_with_truth


def make_note(note_id: str, when: datetime, text: str,
              note_type: NoteType = NoteType.PROGRESS,
              author: str | None = "hospital medicine") -> ClinicalNote:
    return ClinicalNote(note_id=note_id, timestamp=when, note_type=note_type,
                        note_type_raw=note_type.value, author_service=author,
                        text=text)


@pytest.fixture(scope="session")
def synth50_dir(tmp_path_factory):
    """The seed-42, 50-encounter corpus used by the acceptance criteria."""
    out = tmp_path_factory.mktemp("synth50")
    generate_corpus(SynthConfig(seed=42, n_encounters=50), out)
    return out


@pytest.fixture(scope="session")
def corpus50(synth50_dir):
    corpus, oracle = load_corpus_with_truth(synth50_dir)
    return corpus, oracle


@pytest.fixture(scope="session")
def synth8_dir(tmp_path_factory):
    """A small corpus for fast integration tests."""
    out = tmp_path_factory.mktemp("synth8")
    generate_corpus(SynthConfig(seed=11, n_encounters=8), out)
    return out


@pytest.fixture(scope="session")
def corpus8(synth8_dir):
    corpus, oracle = load_corpus_with_truth(synth8_dir)
    return corpus, oracle


@pytest.fixture(scope="session")
def ccsr_table():
    from importlib import resources

    table, _report = load_ccsr(str(resources.files("ehrrag").joinpath("data", "ccsr_mini.csv")))
    return table


@pytest.fixture(scope="session")
def normalizer():
    return MedicationNormalizer()


@pytest.fixture(scope="session")
def dictionary_linker():
    return DictionaryLinker()


def oracle_config(synth_dir, out_dir, tasks, strategies, dims=1024, workers=1):
    """Config dict for an offline oracle experiment over a synth corpus."""
    return {
        "corpus": str(synth_dir / "corpus.jsonl"),
        "out_dir": str(out_dir),
        "truth_dir": str(synth_dir / "truth"),
        "mar": str(synth_dir / "mar.csv"),
        "tasks": tasks,
        "strategies": strategies,
        "embedding": {"provider": "deterministic-test", "dims": dims},
        "models": [{"provider": "oracle", "model": "oracle"}],
        "providers": {"oracle": {"type": "oracle"}},
        "workers": workers,
    }
