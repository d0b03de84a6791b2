import numpy as np
import pytest
from hypothesis import settings

from ternkb.data import Dataset, FeatureSchema, Sample
from ternkb.synth import SynthConfig, gen_synthetic

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_schema():
    """Two user fields (one multi), one item field, one context field."""
    return FeatureSchema.build([("uid", "single"), ("tags", "multi")], ["iid"], ["slot"])


def make_samples(schema: FeatureSchema, n: int, seed: int = 0, card: int = 6, max_len: int = 3):
    r = np.random.default_rng(seed)
    out = []
    for i in range(n):
        sides = []
        for fs in schema.sides():
            vals = []
            for f in fs:
                if f.multi:
                    vals.append(tuple(int(v) for v in r.integers(1, card, size=r.integers(1, max_len + 1))))
                else:
                    vals.append(int(r.integers(1, card)))
            sides.append(tuple(vals))
        out.append(Sample(*sides, label=int(r.integers(0, 2)), timestamp=1000 + i))
    return out


@pytest.fixture
def small_data(small_schema):
    return Dataset.from_samples(small_schema, make_samples(small_schema, 40, seed=3))


@pytest.fixture(scope="session")
def tiny_synth():
    cfg = SynthConfig(n_users=30, n_items=30, n_ctx=4, n_samples=3000, n_windows=4)
    return gen_synthetic(cfg, seed=5)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
