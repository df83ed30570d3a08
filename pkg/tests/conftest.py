from __future__ import annotations

import csv
import random
from pathlib import Path

import pytest

from fraud_desk.datastore import SPARKOV_SCHEMA, CCTD_SCHEMA, ingest_and_preprocess
from fraud_desk.gateway import ScriptedBackend, TranscriptEntry

FIXTURES = Path(__file__).parent / "fixtures"


class CapturingBackend:
    """Scripted backend that also keeps every request it answered."""

    def __init__(self, entries):
        self.inner = ScriptedBackend(
            [e if isinstance(e, TranscriptEntry) else TranscriptEntry(text=e)
             for e in entries]
        )
        self.requests = []

    @property
    def counter(self):
        return self.inner.counter

    def complete(self, request):
        self.requests.append(request)
        return self.inner.complete(request)

SPARKOV_HEADER = [c.name for c in SPARKOV_SCHEMA.columns]


@pytest.fixture(scope="session")
def sparkov_csv() -> Path:
    return FIXTURES / "sparkov_mini.csv"


@pytest.fixture(scope="session")
def cctd_csv() -> Path:
    return FIXTURES / "cctd_mini.csv"


@pytest.fixture(scope="session")
def sparkov_dataset(sparkov_csv):
    return ingest_and_preprocess(sparkov_csv, SPARKOV_SCHEMA)


@pytest.fixture(scope="session")
def cctd_dataset(cctd_csv):
    return ingest_and_preprocess(cctd_csv, CCTD_SCHEMA)


def sparkov_row(i: int, *, is_fraud: int, rng: random.Random) -> list[str]:
    lat = 30.0 + rng.random() * 15.0
    long = -110.0 + rng.random() * 30.0
    return [
        f"2020-07-{(i % 28) + 1:02d} {(i * 7) % 24:02d}:{(i * 13) % 60:02d}:00",
        f"{4000000000000 + (i % 5)}",
        rng.choice(["fraud_Koss and Sons", "Larkin Ltd", "fraud_Bins-Rice", "Mueller Group"]),
        rng.choice(["grocery_pos", "misc_net", "gas_transport", "entertainment"]),
        f"{rng.uniform(1, 500):.2f}",
        rng.choice(["Alex", "Sam", "Morgan", "Riley"]),
        rng.choice(["Lopez", "Chen", "Okafor", "Novak"]),
        rng.choice(["F", "M"]),
        f"{100 + i} Test Street",
        rng.choice(["Springfield", "Fairview", "Riverton"]),
        rng.choice(["NC", "WA", "TX"]),
        f"{10000 + i}",
        f"{lat:.4f}",
        f"{long:.4f}",
        str(1000 + i * 3),
        rng.choice(["Psychologist", "Engineer", "Teacher"]),
        "1985-01-15",
        f"synth{i:04d}",
        str(1340000000 + i * 1000),
        f"{lat + rng.uniform(-0.5, 0.5):.4f}",
        f"{long + rng.uniform(-0.5, 0.5):.4f}",
        str(is_fraud),
    ]


def write_sparkov_csv(path: Path, fraud: int, legit: int, seed: int = 7) -> Path:
    """Synthesize a sparkov-schema corpus big enough for sampling tests."""
    rng = random.Random(seed)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(SPARKOV_HEADER)
        for i in range(fraud + legit):
            writer.writerow(sparkov_row(i, is_fraud=1 if i < fraud else 0, rng=rng))
    return path


@pytest.fixture(scope="session")
def memcheck_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("memcheck") / "memcheck.csv"
    write_sparkov_csv(path, fraud=30, legit=30)
    return ingest_and_preprocess(path, SPARKOV_SCHEMA)
