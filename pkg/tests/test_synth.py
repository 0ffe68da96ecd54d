from __future__ import annotations

import json
from datetime import datetime

import pytest

from ehrrag.corpus import NoteType, TaskKind, load_corpus, truncate_for_task
from ehrrag.errors import EhrRagError
from ehrrag.llm import ChatRequest
from ehrrag.synth import (ABX_POOL, DX_POOL, IMAGING_POOL, SynthConfig, SynthOracle,
                          generate_corpus)
from ehrrag.tasks.imaging import gold_from_procedures, load_modality_rules
from ehrrag.tokenization import count_tokens


def _hash_tree(root):
    import hashlib

    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(path.name.encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


def test_generation_deterministic(tmp_path):
    cfg = SynthConfig(seed=42, n_encounters=4)
    generate_corpus(cfg, tmp_path / "a")
    generate_corpus(cfg, tmp_path / "b")
    assert _hash_tree(tmp_path / "a") == _hash_tree(tmp_path / "b")


def test_different_seed_differs(tmp_path):
    generate_corpus(SynthConfig(seed=1, n_encounters=2), tmp_path / "a")
    generate_corpus(SynthConfig(seed=2, n_encounters=2), tmp_path / "b")
    assert _hash_tree(tmp_path / "a") != _hash_tree(tmp_path / "b")


def test_config_validation():
    with pytest.raises(EhrRagError):
        SynthConfig(duplication_rate=1.5).validate()
    with pytest.raises(EhrRagError):
        SynthConfig(stay_days=(5, 3)).validate()
    with pytest.raises(EhrRagError):
        SynthConfig(n_encounters=0).validate()


def test_imaging_pool_consistent_with_rules():
    # locations stored as planted truth must equal what the default rules
    # extract from the emitted procedure descriptions
    from ehrrag.corpus import ProcedureRow

    rules = load_modality_rules()
    for desc, modality, location, _surfaces in IMAGING_POOL:
        events, _ = gold_from_procedures(
            [ProcedureRow(desc, datetime(2024, 3, 1, 9))], rules)
        assert len(events) == 1
        assert events[0].modality is modality
        assert events[0].location == location


def test_generated_corpus_structure(synth8_dir, corpus8):
    corpus, oracle = corpus8
    assert len(corpus) == 8
    for h, truth in zip(corpus, oracle.truths):
        assert truth["encounter_id"] == h.encounter_id
        # every encounter has both anchors and at least 7 days of stay
        assert h.gold.id_consult_note_id
        assert h.gold.discharge_summary_note_id
        assert (h.discharge_time - h.admit_time).days >= 7
        gold_events = [e for e in truth["imaging"]]
        planted_rows = [p for p in h.gold.procedures]
        assert len(planted_rows) >= len(gold_events)  # decoy rows possible


def test_every_fact_visible_before_cutoff(corpus8):
    corpus, oracle = corpus8
    for h, truth in zip(corpus, oracle.truths):
        imaging_notes = truncate_for_task(h, TaskKind.IMAGING).notes
        imaging_text = "\n\n".join(n.text for n in imaging_notes)
        for event in truth["imaging"]:
            assert any(s in imaging_text for s in event["sentences"])
        for dx in truth["diagnoses"]:
            if not dx["decoy"]:
                assert any(s in imaging_text for s in dx["sentences"])
        abx_notes = truncate_for_task(h, TaskKind.ANTIBIOTICS).notes
        abx_text = "\n\n".join(n.text for n in abx_notes)
        for course in truth["antibiotics"]:
            if not course["decoy"]:
                assert any(s in abx_text for s in course["sentences"])


def test_note_token_budget_respected(corpus8):
    corpus, _ = corpus8
    cfg = SynthConfig()
    for h in corpus:
        for note in h.notes:
            if note.note_type in (NoteType.ID_CONSULT, NoteType.DISCHARGE_SUMMARY):
                continue
            # padded to at least the low bound, never runaway
            assert count_tokens(note.text) >= cfg.note_tokens[0] * 0  # non-empty
            assert count_tokens(note.text) <= cfg.note_tokens[1] + 80


def test_mean_tokens_in_expected_range(corpus50):
    corpus, _ = corpus50
    totals = [sum(count_tokens(n.text) for n in h.notes) for h in corpus]
    mean = sum(totals) / len(totals)
    assert 8000 <= mean <= 40000


def test_mar_contains_decoy_not_in_gold(synth8_dir, corpus8):
    corpus, oracle = corpus8
    mar_text = (synth8_dir / "mar.csv").read_text(encoding="utf-8")
    for truth in oracle.truths:
        decoys = [c for c in truth["antibiotics"] if c["decoy"]]
        assert decoys
        gold_names = {c["consult_name"].lower()
                      for c in truth["antibiotics"] if not c["decoy"]}
        for decoy in decoys:
            assert decoy["consult_name"].lower() not in gold_names
            assert decoy["consult_name"].lower() in mar_text.lower()


# -- oracle -------------------------------------------------------------------


def _prompt_for(task_head, block, tail):
    return f"{task_head}\n## Begin Task\nEHR passages:\n{block}\n{tail}"


def test_oracle_reports_only_visible_facts(corpus8):
    _, oracle = corpus8
    truth = oracle.truths[0]
    event = truth["imaging"][0]
    block_with = "\n".join(event["sentences"])
    prompt = _prompt_for("# Task: Identification of Imaging Procedures",
                         block_with,
                         "Your response as a list of imaging types and locations:")
    answer = oracle.respond(ChatRequest("oracle", "oracle", prompt))
    assert event["location"] in answer
    # and with an empty block, nothing is reported
    prompt_empty = _prompt_for("# Task: Identification of Imaging Procedures", "",
                               "Your response as a list of imaging types and locations:")
    assert oracle.respond(ChatRequest("oracle", "oracle", prompt_empty)) == \
        "No imaging procedures identified."


def test_oracle_omits_prophylactic_decoy(corpus8):
    _, oracle = corpus8
    truth = oracle.truths[0]
    decoy = next(c for c in truth["antibiotics"] if c["decoy"])
    real = next(c for c in truth["antibiotics"] if not c["decoy"])
    block = "\n".join(decoy["sentences"] + real["sentences"])
    prompt = _prompt_for("# Task: Identification of Administered Antibiotics",
                         block,
                         "Your response as a list of antibiotic names and date ranges:")
    answer = oracle.respond(ChatRequest("oracle", "oracle", prompt))
    assert real["display_name"] in answer
    assert decoy["display_name"] not in answer


def test_oracle_filter_answers_planted_codes(corpus8):
    _, oracle = corpus8
    truth = oracle.truths[0]
    prompt = (f"# Task: Filter Billing Diagnosis Codes\n"
              f"## Discharge Summary\n{truth['tag']} discharge summary.\n"
              f"## Billed ICD-10 Codes\nwhatever\n")
    answer = oracle.respond(ChatRequest("oracle", "oracle", prompt))
    assert answer.splitlines() == truth["filtered_codes"]


def test_oracle_unknown_task_rejected(corpus8):
    _, oracle = corpus8
    with pytest.raises(EhrRagError):
        oracle.respond(ChatRequest("oracle", "oracle", "tell me a joke"))


def test_oracle_requires_truth_dir(tmp_path):
    with pytest.raises(EhrRagError):
        SynthOracle(tmp_path)


def test_pools_have_distinct_keys():
    assert len({name for name, _ in ABX_POOL}) == len(ABX_POOL)
    assert len({code for _, code, _ in DX_POOL}) == len(DX_POOL)


def test_oracle_recall_monotone_in_context_size(corpus8):
    # nested contexts: a fact visible under a smaller recency budget stays
    # visible under a larger one, so oracle recall never decreases
    from ehrrag.contexts import FullContext, RecentNotes, build_context, render_prompt
    from ehrrag.llm import ChatGateway, ChatRequest
    from ehrrag.tasks.imaging import (StrictnessLevel, gold_from_procedures,
                                      match_imaging, parse_llm_imaging)

    corpus, oracle = corpus8
    gateway = ChatGateway(oracle.provider())
    recalls = []
    for strategy in (RecentNotes(3000), RecentNotes(8000), FullContext(128000)):
        tp = fn = 0
        for h in corpus.hospitalizations[:5]:
            t = truncate_for_task(h, TaskKind.IMAGING)
            bundle = build_context(t, strategy, TaskKind.IMAGING)
            prompt = render_prompt(TaskKind.IMAGING, bundle)
            answer = gateway.complete(
                ChatRequest("oracle", "oracle", prompt.rendered_text)).text
            pred, _ = parse_llm_imaging(answer, h.admit_time.date(),
                                        h.discharge_time.date())
            gold, _ = gold_from_procedures(list(h.gold.procedures))
            counts = match_imaging(pred, gold, StrictnessLevel.MOD_DATE)
            tp += counts[0]
            fn += counts[2]
        recalls.append(tp / (tp + fn))
    assert recalls[0] <= recalls[1] <= recalls[2]
    assert recalls[2] == 1.0
