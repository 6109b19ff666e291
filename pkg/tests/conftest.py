from __future__ import annotations

import numpy as np
import pytest

from mmfnd.core import Label, Origin, Post, Split
from mmfnd.fixtures import SyntheticCorpusSpec, generate_synthetic


def make_post(pid="p1", label=Label.REAL, text="hello", image_ref="0" * 64 + "/a.ppm", **kw) -> Post:
    kw.setdefault("split", Split.TRAIN)
    kw.setdefault("origin", Origin.SYNTHETIC)
    return Post(id=pid, text=text, image_ref=image_ref, label=label, **kw)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A compact planted-signal corpus shared by read-only tests."""
    root = tmp_path_factory.mktemp("corpus")
    return generate_synthetic(SyntheticCorpusSpec(n_train=60, n_val=20, n_test=40, seed=3), root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ENCODERS = {"MLP_CLIP": ("clip-vit-b32", "clip-vit-b32"), "CLIP_MMBT": ("clip-vit-b32", "clip-vit-b32"),
            "BERT_RESNET": ("bert", "resnet50")}


def encode_posts(posts, store, aliases, signal_strength, arch="MLP_CLIP", dim=64):
    """Planted-pair mock features for ``posts`` as a given architecture sees them."""
    from mmfnd.encoding import PlantedKeys, encode_batch
    from mmfnd.models import HashingTokenizer, build_features
    from mmfnd.stages import make_encoders

    te, ie = make_encoders(*ENCODERS[arch], mock=True, dim=dim, signal_strength=signal_strength)
    posts = list(posts)
    pairs = encode_batch(posts, te, ie, store, planted=PlantedKeys.from_aliases(aliases))
    return build_features(posts, pairs, HashingTokenizer() if arch == "CLIP_MMBT" else None)


# ---------------------------------------------------------------------------
# one summary line per acceptance criterion

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")
    config.addinivalue_line("markers", "external: needs the real MediaEval / VisualNews downloads")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        previous = _CRITERIA.get(number, ("PASS", title))[0]
        # a criterion with several tests fails if any of them fails
        if previous == "FAIL" or (previous == "SKIP" and status == "PASS"):
            status = previous
        _CRITERIA[number] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {title}")
