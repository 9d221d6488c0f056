from __future__ import annotations

import random

import pytest

from ragkit.llmgw import ProviderConfig, mock_embedding
from ragkit.vecstore import ChunkRecord, open_store

MOCK = ProviderConfig(kind="mock")

TOPICS = [
    ("Paris", "France", "capital city located on the Seine river"),
    ("Berlin", "Germany", "capital city known for its museums and history"),
    ("Madrid", "Spain", "capital city situated in the center of the peninsula"),
    ("Rome", "Italy", "capital city famous for ancient ruins and fountains"),
    ("Lisbon", "Portugal", "capital city built on seven hills near the ocean"),
    ("Vienna", "Austria", "capital city celebrated for classical music and coffee houses"),
]


def synthetic_corpus(n_paragraphs: int, seed: int = 7) -> str:
    """Deterministic prose about a handful of capitals."""
    rng = random.Random(seed)
    paras = []
    for i in range(n_paragraphs):
        city, country, blurb = TOPICS[i % len(TOPICS)]
        extra = rng.choice(["railway", "harbour", "university", "cathedral", "market", "parliament"])
        paras.append(
            f"{city} is the capital of {country}. It is a {blurb}. "
            f"Visitors often mention the {extra} of {city}! Does {city} host festivals? "
            f"Yes, {city} hosts several festivals every year."
        )
    return "\n\n".join(paras)


QUESTIONS = [f"What is the capital of {country}?" for _, country, _ in TOPICS] + [
    f"Which festivals does {city} host?" for city, _, _ in TOPICS
]


def make_record(collection: str, chunk_id: str, text: str, embedding=None, index: int = 0) -> ChunkRecord:
    return ChunkRecord(
        collection=collection, chunk_id=chunk_id, text=text,
        embedding=list(embedding) if embedding is not None else mock_embedding(text),
        source_path="/corpus/doc.txt", source_index=index, start=0, end=len(text),
        created_at="2026-01-01T00:00:00Z", embedding_model="mock",
    )


@pytest.fixture
def mock_provider() -> ProviderConfig:
    return MOCK


@pytest.fixture
def store(tmp_path):
    s = open_store(tmp_path / "store", writable=True)
    yield s
    s.close()


@pytest.fixture
def corpus_file(tmp_path):
    path = tmp_path / "corpus" / "capitals.txt"
    path.parent.mkdir()
    path.write_text(synthetic_corpus(12), encoding="utf-8")
    return path


@pytest.fixture
def seeded_store(tmp_path, corpus_file):
    """A store holding the capitals corpus in collection ``default``, plus its root path."""
    from ragkit.ragflow import ingest_documents

    root = tmp_path / "seeded"
    with open_store(root, writable=True) as s:
        ingest_documents([corpus_file], "default", store=s, provider=MOCK, chunk_size=400, chunk_overlap=120)
    return root
