from __future__ import annotations

from datetime import datetime

import pytest

from ehrrag.contexts import (ContextBundle, FullContext, Passage, Rag, RecentNotes,
                             build_context, format_passage_block, parse_passage_block,
                             parse_strategy, passage_header, render_prompt,
                             template_overhead)
from ehrrag.corpus import GoldAttachments, Hospitalization, NoteType, TaskKind
from ehrrag.embeddings import DeterministicTestProvider
from ehrrag.errors import BudgetTooSmall, MissingNow
from ehrrag.indexer import build_index, default_query
from ehrrag.tokenization import count_tokens, get_tokenizer

from conftest import make_note

ADMIT = datetime(2024, 3, 1, 6)


def _tokens(n: int, prefix: str = "tok") -> str:
    return " ".join(f"{prefix}{i}" for i in range(n))


def _three_note_hospitalization():
    notes = [
        make_note("n1", datetime(2024, 3, 2, 9), _tokens(1000, "aa")),
        make_note("n2", datetime(2024, 3, 3, 9), _tokens(1000, "bb")),
        make_note("n3", datetime(2024, 3, 4, 9), _tokens(1000, "cc")),
    ]
    return Hospitalization("E1", ADMIT, datetime(2024, 3, 5, 12), tuple(notes),
                           GoldAttachments())


def test_strategy_labels_round_trip():
    for strategy in (Rag(20), RecentNotes(3000), FullContext(128000)):
        assert parse_strategy(strategy.label) == strategy


def test_strategy_validation():
    with pytest.raises(ValueError):
        Rag(0)
    with pytest.raises(ValueError):
        RecentNotes(0)


def test_recent_notes_budget_arithmetic():
    # three 1000-token notes; the oldest gets head-truncated to fill the
    # budget exactly (header lines cost 11 tokens each)
    h = _three_note_hospitalization()
    tok = get_tokenizer()
    base = template_overhead(TaskKind.DIAGNOSIS, tok)
    header_cost = tok.count(passage_header(h.notes[0].timestamp, "progress"))
    assert header_cost == 11
    budget = 3000
    bundle = build_context(h, RecentNotes(budget), TaskKind.DIAGNOSIS)
    assert [p.timestamp for p in bundle.passages] == [n.timestamp for n in h.notes]
    assert count_tokens(bundle.passages[1].text) == 1000
    assert count_tokens(bundle.passages[2].text) == 1000
    expected_tail = budget - base - 2 * (header_cost + 1000) - header_cost
    assert count_tokens(bundle.passages[0].text) == expected_tail
    assert bundle.prompt_tokens == budget
    # bundle accounting equals an actual render
    prompt = render_prompt(TaskKind.DIAGNOSIS, bundle)
    assert count_tokens(prompt.rendered_text) == bundle.prompt_tokens


def test_recent_notes_whole_note_mode():
    h = _three_note_hospitalization()
    bundle = build_context(h, RecentNotes(3000), TaskKind.DIAGNOSIS,
                           partial_notes=False)
    assert len(bundle.passages) == 2  # no partial third note
    assert bundle.prompt_tokens < 3000


def test_full_context_includes_everything():
    h = _three_note_hospitalization()
    bundle = build_context(h, FullContext(128000), TaskKind.DIAGNOSIS)
    assert len(bundle.passages) == 3
    assert bundle.actual_ehr_tokens == 3000
    assert bundle.prompt_tokens < 128000


@pytest.mark.parametrize("budget", [600, 1000, 2500, 5000])
def test_budget_respected(budget):
    h = _three_note_hospitalization()
    bundle = build_context(h, RecentNotes(budget), TaskKind.IMAGING)
    prompt = render_prompt(TaskKind.IMAGING, bundle)
    assert count_tokens(prompt.rendered_text) <= budget
    assert bundle.prompt_tokens == count_tokens(prompt.rendered_text)


def test_budget_too_small():
    h = _three_note_hospitalization()
    with pytest.raises(BudgetTooSmall):
        build_context(h, RecentNotes(50), TaskKind.IMAGING)


def test_rag_bundle_chronological(corpus8):
    corpus, _oracle = corpus8
    from ehrrag.corpus import truncate_for_task

    h = truncate_for_task(corpus.hospitalizations[0], TaskKind.IMAGING)
    index = build_index(h, DeterministicTestProvider(dims=256))
    bundle = build_context(h, Rag(20), TaskKind.IMAGING, index,
                           default_query(TaskKind.IMAGING))
    assert len(bundle.passages) == 20
    stamps = [p.timestamp for p in bundle.passages]
    assert stamps == sorted(stamps)
    assert all(p.timestamp < h.cutoff_time for p in bundle.passages)
    note_texts = {n.note_id: n.text for n in h.notes}
    assert all(any(p.text in t for t in note_texts.values())
               for p in bundle.passages)


def test_rag_requires_index_and_query():
    h = _three_note_hospitalization()
    with pytest.raises(ValueError):
        build_context(h, Rag(20), TaskKind.IMAGING)


# -- rendering -----------------------------------------------------------------


def _bundle(task, passages=(), now=None):
    return ContextBundle(strategy=FullContext(1000), task=task,
                         passages=tuple(passages), prompt_tokens=0,
                         actual_ehr_tokens=0, now=now)


def test_imaging_empty_bundle_renders():
    prompt = render_prompt(TaskKind.IMAGING, _bundle(TaskKind.IMAGING))
    assert "EHR passages:" in prompt.rendered_text
    assert "[INSERT TEXT]" not in prompt.rendered_text
    assert "No imaging procedures identified." in prompt.rendered_text  # instructions


def test_antibiotics_timestamp_rendered():
    now = datetime(2019, 9, 15, 14, 51)
    prompt = render_prompt(TaskKind.ANTIBIOTICS, _bundle(TaskKind.ANTIBIOTICS),
                           now=now)
    assert "Right now it is 2019-09-15 14:51:00." in prompt.rendered_text
    assert "[TIMESTAMP]" not in prompt.rendered_text


def test_antibiotics_requires_now():
    with pytest.raises(MissingNow):
        render_prompt(TaskKind.ANTIBIOTICS, _bundle(TaskKind.ANTIBIOTICS))


def test_render_deterministic():
    passages = [Passage(datetime(2024, 3, 2, 9), "progress", "some text")]
    a = render_prompt(TaskKind.DIAGNOSIS, _bundle(TaskKind.DIAGNOSIS, passages))
    b = render_prompt(TaskKind.DIAGNOSIS, _bundle(TaskKind.DIAGNOSIS, passages))
    assert a.rendered_text == b.rendered_text


def test_passages_inserted_exactly_once():
    passages = [Passage(datetime(2024, 3, 2, 9), "progress", "UNIQUE-MARKER-XYZ")]
    prompt = render_prompt(TaskKind.IMAGING, _bundle(TaskKind.IMAGING, passages))
    assert prompt.rendered_text.count("UNIQUE-MARKER-XYZ") == 1


def test_custom_template_dir(tmp_path):
    (tmp_path / "imaging.txt").write_text("custom prompt\n[INSERT TEXT]\nend\n",
                                          encoding="utf-8")
    prompt = render_prompt(TaskKind.IMAGING, _bundle(TaskKind.IMAGING),
                           template_dir=tmp_path)
    assert prompt.rendered_text.startswith("custom prompt")


def test_passage_block_round_trip():
    passages = [
        Passage(datetime(2024, 3, 2, 9, 30, 5), "progress", "line one\nline two"),
        Passage(datetime(2024, 3, 3, 10, 0, 0), "imaging_report", "impression: clear"),
    ]
    parsed = parse_passage_block(format_passage_block(passages))
    assert [(p.timestamp, p.note_type, p.text) for p in parsed] == \
        [(p.timestamp, p.note_type, p.text) for p in passages]


@pytest.mark.parametrize("budget", [600, 3000, 8000])
def test_budget_property_on_synthetic_notes(corpus8, budget):
    corpus, _oracle = corpus8
    from ehrrag.corpus import truncate_for_task

    for h in corpus.hospitalizations[:4]:
        t = truncate_for_task(h, TaskKind.IMAGING)
        bundle = build_context(t, RecentNotes(budget), TaskKind.IMAGING)
        rendered = render_prompt(TaskKind.IMAGING, bundle).rendered_text
        assert count_tokens(rendered) <= budget
        assert bundle.prompt_tokens == count_tokens(rendered)
