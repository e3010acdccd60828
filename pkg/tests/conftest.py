import random

import pytest

from fablelm.corpus import Document


def make_docs(texts):
    return [Document(i, t) for i, t in enumerate(texts)]


@pytest.fixture
def fable_docs():
    """A small corpus with repeated structure so merges have signal."""
    rng = random.Random(7)
    stems = ["vulpe", "corb", "lup", "urs", "arici", "broasca"]
    verbs = ["alearga", "canta", "doarme", "sare", "vede", "striga"]
    places = ["padure", "munte", "lac", "sat", "camp"]
    texts = []
    for _ in range(80):
        n = rng.randint(4, 9)
        words = [rng.choice(stems + verbs + places) for _ in range(n)]
        texts.append(" ".join(words))
    return make_docs(texts)
