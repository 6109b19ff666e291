from __future__ import annotations

import warnings

import pytest

from mmfnd.core import Label, register_split
from mmfnd.manipulation import (
    AnnotationQueue,
    CuratedImage,
    EmptyPool,
    EntitySpan,
    EventAliasTable,
    EventMismatch,
    EventNotInText,
    ImageEntry,
    MissingCuration,
    NotPending,
    RuleTagger,
    Technique,
    TypeExhausted,
    UnknownId,
    entity_replace,
    entity_replace_pass,
    event_remove,
    event_remove_pass,
    event_replace,
    event_replace_pass,
    fake_image_pass,
    fake_image_replace,
    image_pool,
    import_annotations,
    read_annotations,
    read_provenance,
    real_image_replace,
    remove_spans,
    write_annotation_sheet,
    write_provenance,
)

from conftest import make_post
from oracles import manual_event_rewrite

IMG_A = "a" * 64 + "/a.jpg"
IMG_B = "b" * 64 + "/b.jpg"
IMG_C = "c" * 64 + "/c.jpg"

ALIASES = EventAliasTable({"citya-flood": ["CityA", "#CityAFlood"], "cityb-storm": ["CityB"], "eventx": ["EventX"]})


# ---------------------------------------------------------------------------
# event replacement


def test_event_replace_rewrites_mentions_and_turns_fake():
    post = make_post("p", text="Flooding in CityA today", event_id="citya-flood")
    new, rec = event_replace(post, {"cityb-storm"}, ALIASES, rng_seed=0)
    assert new.text == manual_event_rewrite(post.text, ["CityA"], "CityB") == "Flooding in CityB today"
    assert new.label is Label.FAKE and new.event_id == "cityb-storm"
    assert new.image_ref == post.image_ref
    assert new.id == "p~evtrep" and new.derived_from == "evtrep:p"
    assert rec.technique is Technique.EVT_REP and rec.resulting_label is Label.FAKE
    assert rec.replacements[0][0] == EntitySpan(12, 17, "CityA", "event")


def test_event_replace_matches_all_aliases_case_insensitively():
    post = make_post("p", text="citya under water #CityAFlood, CITYA again", event_id="citya-flood")
    new, rec = event_replace(post, {"cityb-storm"}, ALIASES, 0)
    assert new.text == "CityB under water CityB, CityB again"
    assert len(rec.replacements) == 3


def test_event_replace_ignores_partial_tokens():
    post = make_post("p", text="CityAB is not CityA", event_id="citya-flood")
    new, _ = event_replace(post, {"cityb-storm"}, ALIASES, 0)
    assert new.text == "CityAB is not CityB"


def test_event_replace_with_only_own_event_is_empty_pool():
    post = make_post("p", text="Flooding in CityA", event_id="citya-flood")
    with pytest.raises(EmptyPool):
        event_replace(post, {"citya-flood"}, ALIASES, 0)


def test_event_replace_without_mention_is_event_not_in_text():
    post = make_post("p", text="Flooding somewhere", event_id="citya-flood")
    with pytest.raises(EventNotInText):
        event_replace(post, {"cityb-storm"}, ALIASES, 0)


def test_event_replace_is_deterministic_per_seed(small_corpus):
    posts = [p for p in small_corpus.test if p.label is Label.REAL]
    a = event_replace_pass(posts, small_corpus.aliases, 5)
    b = event_replace_pass(posts, small_corpus.aliases, 5)
    assert a.posts == b.posts and a.records == b.records


def test_hundred_real_posts_become_hundred_fakes(tmp_path):
    from mmfnd.fixtures import SyntheticCorpusSpec, generate_synthetic

    c = generate_synthetic(SyntheticCorpusSpec(n_train=2, n_val=2, n_test=200, seed=11), tmp_path)
    real = [p for p in c.test if p.label is Label.REAL][:100]
    out = event_replace_pass(real, c.aliases, 1, pool=c.aliases.events())
    assert len(out.posts) == 100 and not out.skipped
    assert register_split("evtrep", out.posts).counts == {Label.FAKE: 100, Label.REAL: 0}


# ---------------------------------------------------------------------------
# event removal and annotations


def test_event_remove_deletes_mentions_and_waits_for_label():
    post = make_post("p", text="Fire at EventX station", event_id="eventx")
    new, rec = event_remove(post, ALIASES)
    assert new.text == "Fire at station"
    assert new.label is None and rec.resulting_label is None
    assert new.id == "p~evtrem"


@pytest.mark.parametrize(
    "text, expected",
    [
        ("Smoke at EventX, nobody hurt", "Smoke at nobody hurt"),
        ("Crowds near EventX.", "Crowds near."),
        ("EventX: the aftermath", "the aftermath"),
        ("  EventX   live  ", "live"),
        ("before EventX ; after", "before after"),
    ],
)
def test_event_remove_repairs_whitespace_and_punctuation(text, expected):
    post = make_post("p", text=text, event_id="eventx")
    assert event_remove(post, ALIASES)[0].text == expected


def test_event_remove_of_event_only_text_is_dropped(caplog):
    assert event_remove(make_post("p", text="EventX", event_id="eventx"), ALIASES) is None
    assert "empty" in caplog.text


def test_event_remove_without_mention_raises():
    with pytest.raises(EventNotInText):
        event_remove(make_post("p", text="nothing here", event_id="eventx"), ALIASES)


def test_remove_spans_matches_manual_deletion():
    text = "Fire at EventX station"
    assert remove_spans(text, [(8, 14)]) == "Fire at station"


def test_two_annotations_clear_two_pending():
    queue = AnnotationQueue([make_post("a", None), make_post("b", None)])
    assert import_annotations(queue, [("a", Label.REAL), ("b", Label.FAKE)]) == 2
    assert queue.pending == []


def test_annotation_for_labelled_post_is_not_pending():
    queue = AnnotationQueue([make_post("a", Label.REAL)])
    with pytest.raises(NotPending):
        queue.import_annotations([("a", Label.FAKE)])


def test_annotation_for_unknown_post():
    with pytest.raises(UnknownId):
        AnnotationQueue([make_post("a", None)]).import_annotations([("zzz", Label.FAKE)])


def test_hundred_rows_with_six_fake(tmp_path):
    posts = [make_post(f"p{k}", None) for k in range(100)]
    queue = AnnotationQueue(posts)
    sheet = tmp_path / "sheet.tsv"
    write_annotation_sheet(queue.posts(), sheet)
    rows = sheet.read_text().splitlines()
    filled = [rows[0]] + [
        "\t".join([r.split("\t")[0], "FAKE" if k < 6 else "REAL", r.split("\t")[2]]) for k, r in enumerate(rows[1:])
    ]
    sheet.write_text("\n".join(filled) + "\n")
    assert queue.import_annotations(read_annotations(sheet)) == 100
    assert register_split("evtrem", queue.posts()).counts == {Label.FAKE: 6, Label.REAL: 94}


# ---------------------------------------------------------------------------
# image techniques


def test_fake_image_single_qualifying_candidate_is_certain():
    post = make_post("p", image_ref=IMG_C, event_id="A")
    pool = [ImageEntry(IMG_A, "A", "x"), ImageEntry(IMG_B, "B", "y")]
    for seed in range(20):
        new, rec = fake_image_replace(post, pool, seed)
        assert new.image_ref == IMG_B and new.label is Label.FAKE and new.text == post.text
        assert rec.replacements == ((IMG_C, IMG_B),)


def test_fake_image_all_same_event_is_empty_pool():
    post = make_post("p", image_ref=IMG_C, event_id="A")
    with pytest.raises(EmptyPool):
        fake_image_replace(post, [ImageEntry(IMG_A, "A", "x"), ImageEntry(IMG_B, "A", "y")], 0)


def test_fake_image_without_events_needs_a_different_post():
    post = make_post("p", image_ref=IMG_A)
    pool = [ImageEntry(IMG_A, None, "p"), ImageEntry(IMG_B, None, "q")]
    assert fake_image_replace(post, pool, 3)[0].image_ref == IMG_B
    with pytest.raises(EmptyPool):
        fake_image_replace(post, pool[:1], 3)


def test_fake_image_pass_draws_without_replacement(small_corpus):
    posts = [p for p in small_corpus.train if p.label is Label.REAL]
    out = fake_image_pass(posts, 9, pool=image_pool(list(small_corpus.train)))
    assert len(out.posts) == len(posts)
    refs = [p.image_ref for p in out.posts]
    assert len(set(refs)) == len(refs)


def test_fake_image_pass_falls_back_to_replacement():
    posts = [make_post(f"p{k}", image_ref=IMG_C, event_id="A") for k in range(4)]
    pool = [ImageEntry(IMG_B, "B", "q")]
    out = fake_image_pass(posts, 1, pool=pool)
    assert [p.image_ref for p in out.posts] == [IMG_B] * 4


def test_real_image_swaps_curated_same_event_image():
    post = make_post("p", image_ref=IMG_A, event_id="A")
    new, rec = real_image_replace(post, {"p": CuratedImage(IMG_B, "A")})
    assert new.image_ref == IMG_B and new.label is Label.REAL and new.text == post.text
    assert rec.resulting_label is Label.REAL


def test_real_image_with_other_event_is_mismatch():
    post = make_post("p", image_ref=IMG_A, event_id="A")
    with pytest.raises(EventMismatch):
        real_image_replace(post, {"p": CuratedImage(IMG_B, "B")})
    with pytest.raises(MissingCuration):
        real_image_replace(post, {})


# ---------------------------------------------------------------------------
# entity replacement

TAGGER = RuleTagger({"Obama": "person", "Paris": "location", "Merkel": "person", "Berlin": "location", "42": "cardinal"})


def test_entity_replace_manual_substitution():
    post = make_post("p", text="Obama visited Paris")
    new, rec = entity_replace(post, TAGGER, {"person": ("Merkel",), "location": ("Berlin",)}, 0)
    assert new.text == "Merkel visited Berlin" and new.label is Label.FAKE
    assert [(s.surface, n) for s, n in rec.replacements] == [("Obama", "Merkel"), ("Paris", "Berlin")]


def test_entity_free_text_is_excluded():
    assert entity_replace(make_post("p", text="hello world"), TAGGER, {"person": ("Merkel",)}, 0) is None


def test_numeric_types_are_not_replaced():
    assert entity_replace(make_post("p", text="42 people"), TAGGER, {"cardinal": ("7",)}, 0) is None


def test_exhausted_type_warns_and_leaves_span():
    post = make_post("p", text="Obama visited Paris")
    with pytest.warns(TypeExhausted):
        new, rec = entity_replace(post, TAGGER, {"person": ("Obama",), "location": ("Berlin",)}, 0)
    assert new.text == "Obama visited Berlin" and len(rec.replacements) == 1


def test_all_spans_exhausted_counts_as_entity_free():
    post = make_post("p", text="Obama visited Paris")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TypeExhausted)
        assert entity_replace(post, TAGGER, {"person": ("Obama",), "location": ("Paris",)}, 0) is None


def test_entity_replace_offsets_and_length_deltas(small_corpus):
    out = entity_replace_pass(list(small_corpus.train), small_corpus.tagger, 4, small_corpus.entity_index)
    src = small_corpus.train.by_id()
    assert out.posts
    for post, rec in zip(out.posts, out.records):
        original = src[rec.source_id].text
        delta = sum(len(new) - len(span.surface) for span, new in rec.replacements)
        assert len(post.text) == len(original) + delta
        shift = 0
        for span, new in rec.replacements:
            assert post.text[span.start + shift : span.start + shift + len(new)] == new
            assert new != span.surface
            shift += len(new) - len(span.surface)


def test_entity_span_check():
    with pytest.raises(ValueError):
        EntitySpan(0, 3, "abc", "person").check("xyz")


# ---------------------------------------------------------------------------
# provenance and corpus-level rules


def test_provenance_round_trip(tmp_path, small_corpus):
    recs = event_replace_pass(list(small_corpus.test), small_corpus.aliases, 1).records
    recs += fake_image_pass(list(small_corpus.test), 1).records
    recs += event_remove_pass(list(small_corpus.test), small_corpus.aliases).records
    write_provenance(recs, tmp_path / "prov.jsonl")
    assert read_provenance(tmp_path / "prov.jsonl") == recs


def test_text_techniques_keep_images_and_image_techniques_keep_text(small_corpus):
    posts = list(small_corpus.test)
    src = small_corpus.test.by_id()
    for p in event_replace_pass(posts, small_corpus.aliases, 2).posts + entity_replace_pass(posts, small_corpus.tagger, 2).posts:
        assert p.image_ref == src[p.derived_from.split(":", 1)[1]].image_ref
    for p in fake_image_pass(posts, 2).posts:
        assert p.text == src[p.derived_from.split(":", 1)[1]].text
