import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from structsg.corpus import FeatureStore, RelationVocab, SceneSample  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("default")

MAN, WOMAN, HORSE, ELEPHANT = 0, 1, 2, 3
RIDE = 1

# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def toy_vocab():
    return RelationVocab(4, 2, ("man", "woman", "horse", "elephant"), ("__background__", "ride"))


def toy_samples():
    """man-ride-horse twice, woman-ride-elephant, man-ride-elephant."""
    box = [(0, 0, 10, 10), (20, 20, 10, 10)]
    rel = [(0, RIDE, 1)]
    return [
        SceneSample("a", 100, 100, [MAN, HORSE], box, rel),
        SceneSample("b", 100, 100, [MAN, HORSE], box, rel),
        SceneSample("c", 100, 100, [WOMAN, ELEPHANT], box, rel),
        SceneSample("d", 100, 100, [MAN, ELEPHANT], box, rel),
    ]


def random_sample(rng, image_id, vocab, n_range=(2, 6), rel_prob=0.4):
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    labels = [int(v) for v in rng.integers(0, vocab.num_classes, size=n)]
    boxes = []
    for _ in range(n):
        w, h = int(rng.integers(5, 60)), int(rng.integers(5, 60))
        boxes.append((int(rng.integers(0, 140)), int(rng.integers(0, 90)), w, h))
    rels = [(s, int(rng.integers(1, vocab.num_predicates)), t)
            for s in range(n) for t in range(n) if s != t and rng.random() < rel_prob]
    return SceneSample(image_id, 200, 150, labels, boxes, rels)


def random_features(rng, samples, d_f):
    store = FeatureStore(d_f)
    for s in samples:
        n = s.num_objects
        store.add(s.image_id, rng.standard_normal((n, d_f)), rng.standard_normal((n, n, d_f)))
    return store


@pytest.fixture
def vocab():
    return toy_vocab()


@pytest.fixture
def samples():
    return toy_samples()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
