import numpy as np
import pytest

from mqnt.calibration import CalibrationPolicy, build_calibration_set
from mqnt.evaluation import PromptTemplate, render_prompt_text
from mqnt.synth import build_dataset, build_lm_corpus, dataset_ids, manifest


def test_dataset_ids_cover_tasks():
    handles = [build_dataset(d) for d in dataset_ids()]
    tasks = {h.task for h in handles}
    assert {"SA", "TD", "NLI", "CDS", "generic_mc"} <= tasks
    # two SA sets with different vocabularies for the cross-dataset axis
    assert sum(h.task == "SA" for h in handles) >= 2


def test_build_is_deterministic():
    a = build_dataset("sst_films")
    b = build_dataset("sst_films")
    assert len(a) == len(b)
    for ra, rb in zip(a.records, b.records):
        np.testing.assert_array_equal(ra.tokens, rb.tokens)
        assert ra.fields == rb.fields and ra.gold == rb.gold


def test_splits_differ():
    test = build_dataset("amz_gadgets", split="test")
    train = build_dataset("amz_gadgets", split="train")
    ta = [r.tokens.tobytes() for r in test.records]
    tb = [r.tokens.tobytes() for r in train.records]
    assert ta != tb


def test_manifest_matches_regeneration():
    m = manifest()
    assert set(m) == set(dataset_ids())
    for did, entry in m.items():
        handle = build_dataset(did)
        assert entry["n_records"] == len(handle)
        assert entry["task"] == handle.task
    # the digests are content hashes, so a second manifest is identical
    assert manifest() == m


def test_datasets_have_distinct_distributions():
    digests = {m["sha256"] for m in manifest().values()}
    assert len(digests) == len(dataset_ids())
    # byte histograms of the two SA sets should differ a lot
    films = np.concatenate([r.tokens for r in build_dataset("sst_films").records])
    gadgets = np.concatenate([r.tokens for r in build_dataset("amz_gadgets").records])
    hf = np.bincount(films, minlength=256) / films.size
    hg = np.bincount(gadgets, minlength=256) / gadgets.size
    assert np.abs(hf - hg).sum() > 0.2


def test_gold_indices_and_choices_consistent():
    for did in dataset_ids():
        h = build_dataset(did)
        assert len(h.choices) >= 2
        for r in h.records:
            assert 0 <= r.gold < len(h.choices)


def test_subjects_present_for_ceval():
    h = build_dataset("ceval_mc")
    assert sorted(h.subjects()) == ["history", "math", "physics"]
    sub = h.filter_subject("math")
    assert all(r.subject == "math" for r in sub.records)


@pytest.mark.parametrize("did,task", [
    ("sst_films", "SA"),
    ("amz_gadgets", "SA"),
    ("civq_forum", "TD"),
    ("mnli_pairs", "NLI"),
    ("ceval_mc", "CDS"),
    ("arc_mc", "generic_mc"),
])
def test_records_fill_their_template(did, task):
    h = build_dataset(did)
    tpl = PromptTemplate.load(task)
    exemplars = h.records[:5]
    for rec in h.records[5:15]:
        text = render_prompt_text(tpl, rec.fields, shots=2, exemplars=exemplars)
        assert text.endswith((":",))
        assert "{{input" not in text


def test_rendering_collision_free_on_bundled_items():
    # distinct field values never render to the same prompt
    for did in dataset_ids():
        h = build_dataset(did)
        tpl = PromptTemplate.load(h.task)
        seen = {}
        for rec in h.records:
            key = tuple(sorted(rec.fields.items()))
            text = render_prompt_text(tpl, rec.fields, shots=0)
            if text in seen:
                assert seen[text] == key
            seen[text] = key


def test_carve_protocol_fits_bundled_sizes():
    h = build_dataset("sst_films")
    policy = CalibrationPolicy(mode="carve_from_test", n=16, reserve=24, seed=42)
    calib, remainder = build_calibration_set(h, policy)
    assert len(calib.sequences) == 16
    assert len(remainder) == len(h) - 24
    assert len(remainder.exemplar_pool) == 8


def test_lm_corpus_shape_and_determinism():
    c = build_lm_corpus(n_tokens=4096, seed=3)
    assert c.shape == (4096,)
    assert c.dtype == np.int64
    assert c.min() >= 0 and c.max() < 256
    np.testing.assert_array_equal(c, build_lm_corpus(n_tokens=4096, seed=3))
    assert not np.array_equal(c, build_lm_corpus(n_tokens=4096, seed=4))
