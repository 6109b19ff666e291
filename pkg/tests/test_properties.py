from __future__ import annotations

import string

from hypothesis import given, settings
from hypothesis import strategies as st

from mmfnd.core import Label, Origin, Post, Split
from mmfnd.evaluation import Averaging, compute_metrics, majority_vote
from mmfnd.ingestion import manifest_bytes, read_posts, write_posts
from mmfnd.manipulation import EventAliasTable, event_replace, remove_spans
from mmfnd.models import Prediction

from conftest import make_post
from oracles import brute_force_metrics, manual_event_rewrite, vote_oracle

nonempty = st.text(min_size=1)
posts_strategy = st.builds(
    Post,
    id=nonempty,
    text=st.text(),
    image_ref=st.text(),
    label=st.sampled_from([Label.FAKE, Label.REAL, None]),
    split=st.sampled_from(list(Split)),
    origin=st.sampled_from(list(Origin)),
    event_id=st.none() | nonempty,
    derived_from=st.none() | nonempty,
)


@settings(max_examples=200, deadline=None)
@given(st.lists(posts_strategy, max_size=6))
def test_manifest_round_trip(tmp_path_factory, posts):
    path = tmp_path_factory.mktemp("m") / "m.tsv"
    write_posts(posts, path)
    assert read_posts(path) == posts
    assert manifest_bytes(read_posts(path)) == path.read_bytes()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([0, 1]), st.sampled_from([0, 1])), min_size=1, max_size=40),
       st.sampled_from(list(Averaging)))
def test_metrics_match_brute_force(pairs, mode):
    pred, true = [p for p, _ in pairs], [t for _, t in pairs]
    r = compute_metrics([Prediction(f"p{k}", float(p), Label(p)) for k, p in enumerate(pred)], true, mode)
    o = brute_force_metrics(pred, true)
    assert (r.accuracy, r.precision, r.recall, r.f1) == (o["accuracy"], *o[mode.value])
    assert sum(r.predicted_counts) == sum(r.ground_truth_counts) == len(pairs)
    assert 0.0 <= r.accuracy <= 1.0


@given(st.lists(st.lists(st.sampled_from([0, 1]), min_size=1, max_size=1), min_size=1, max_size=7).filter(lambda m: len(m) % 2))
def test_vote_is_the_mode(members):
    preds = [[Prediction("a", float(m[0]), Label(m[0]))] for m in members]
    assert int(majority_vote(preds)[0].label) == vote_oracle(tuple(m[0] for m in members))


words = st.text(alphabet=string.ascii_lowercase, min_size=1, max_size=6)


@given(st.lists(words, min_size=0, max_size=5), st.lists(words, min_size=0, max_size=5), st.integers(0, 2**32))
def test_event_replace_matches_word_rewrite(before, after, seed):
    aliases = EventAliasTable({"old": ["Zorbo"], "new": ["Quaxl"]})
    text = " ".join([*before, "Zorbo", *after])
    post = make_post("p", text=text, event_id="old")
    new, rec = event_replace(post, {"new"}, aliases, seed)
    assert new.text == manual_event_rewrite(text, ["Zorbo"], "Quaxl")
    assert new.label is Label.FAKE and new.image_ref == post.image_ref


@given(st.text(alphabet="ab .,", max_size=30), st.data())
def test_remove_spans_never_leaves_double_spaces(text, data):
    if text:
        start = data.draw(st.integers(0, len(text)))
        end = data.draw(st.integers(start, len(text)))
        spans = [(start, end)]
    else:
        spans = []
    out = remove_spans(text, spans)
    assert "  " not in out and out == out.strip()
