import numpy as np
import pytest

from aesm2.data import Dataset, DatasetSchema, Feature, FeatureGroup, ScenarioLevel, default_schema


def random_dataset(schema: DatasetSchema, n: int, seed: int = 0, ctr: float = 0.3, cvr: float = 0.3) -> Dataset:
    rng = np.random.default_rng(seed)
    scen = np.column_stack([rng.integers(0, k, size=n) for k in schema.level_sizes])
    feats = np.column_stack([rng.integers(0, v, size=n) for v in schema.vocab_sizes])
    click = (rng.random(n) < ctr).astype(int)
    conv = click * (rng.random(n) < cvr).astype(int)
    return Dataset(schema, scen, feats, click, conv)


def small_schema(levels=((2,), (2,)), vocabs=(5, 7)) -> DatasetSchema:
    return DatasetSchema(
        groups=(FeatureGroup("g", tuple(Feature(f"f{i}", v) for i, v in enumerate(vocabs))),),
        levels=tuple(
            ScenarioLevel(f"l{i}", tuple(f"b{i}{j}" for j in range(k[0]))) for i, k in enumerate(levels)
        ),
    )


@pytest.fixture
def schema():
    return default_schema()


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
