"""TF-IDF retrieval over curated knowledge entries."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.feature_extraction.text import TfidfVectorizer
from sklearn.utils.validation import check_is_fitted

from evident.enums import ISA_TAGS

KNOWLEDGE_SCHEMA = "knowledge.v1"

_SPLIT = re.compile(r"[^0-9a-z]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumerics, drop tokens shorter than 2."""
    return [t for t in _SPLIT.split(text.lower()) if len(t) >= 2]


@dataclass(frozen=True)
class KnowledgeEntry:
    id: str
    isa: str
    text: str
    tags: tuple[str, ...] = ()
    source: str = ""

    def __post_init__(self):
        if self.isa not in ISA_TAGS:
            raise ValueError(f"entry {self.id!r}: isa {self.isa!r} not in {ISA_TAGS}")

    @property
    def document(self) -> str:
        """Text that gets indexed: body followed by tags."""
        return " ".join([self.text, *self.tags])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tags"] = list(self.tags)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "KnowledgeEntry":
        return cls(
            id=str(d["id"]),
            isa=d.get("isa", "any"),
            text=d["text"],
            tags=tuple(d.get("tags", ())),
            source=d.get("source", ""),
        )


def validate_corpus(corpus: Iterable[KnowledgeEntry]) -> list[KnowledgeEntry]:
    corpus = list(corpus)
    seen = set()
    for entry in corpus:
        if entry.id in seen:
            raise ValueError(f"duplicate knowledge entry id {entry.id!r}")
        seen.add(entry.id)
    return corpus


def load_corpus(path: str | Path) -> list[KnowledgeEntry]:
    """Read a JSON Lines corpus, one entry per line; blank lines are skipped."""
    entries = []
    for no, line in enumerate(Path(path).read_text("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entries.append(KnowledgeEntry.from_dict(json.loads(line)))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{no}: {exc}") from exc
    return validate_corpus(entries)


def bundled_corpus(isa: str) -> Path:
    """Path of the sample corpus shipped for ``isa``."""
    ref = resources.files("evident.data").joinpath("corpora").joinpath(f"{isa}.jsonl")
    return Path(str(ref))


def dump_corpus(entries: Iterable[KnowledgeEntry], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")


@dataclass(frozen=True)
class RetrievedKnowledge:
    entry: KnowledgeEntry
    score: float

    def to_dict(self) -> dict:
        return {"entry": self.entry.to_dict(), "score": self.score}

    @classmethod
    def from_dict(cls, d: dict) -> "RetrievedKnowledge":
        return cls(KnowledgeEntry.from_dict(d["entry"]), float(d["score"]))


@dataclass
class TfIdfIndex:
    """Read-only view of a fitted retriever."""

    vocabulary: dict[str, int]
    idf: np.ndarray
    doc_vectors: object  # scipy.sparse CSR, one L2-normalized row per entry
    entries: list[KnowledgeEntry] = field(default_factory=list)


def build_query_text(signals: Sequence, isa: str | None = None) -> str:
    """Templates and keywords of every signal, plus the ISA tag as a hint."""
    parts = []
    for s in signals:
        parts.append(s.template)
        parts.extend(s.keywords)
    if isa and isa != "any":
        parts.append(isa)
    return " ".join(parts)


class KnowledgeRetriever(BaseEstimator):
    """Rank knowledge entries against failure signals by TF-IDF cosine.

    Parameters
    ----------
    isa : str or None
        Keep only entries tagged with this ISA or ``any``. ``None`` keeps all.
    k : int
        Default number of results.
    threshold : float
        Results with similarity below this are dropped.

    Notes
    -----
    Term frequency is the raw count, ``idf(t) = ln(N / df(t)) + 1`` and every
    document vector is L2-normalized.
    """

    def __init__(self, isa: str | None = None, k: int = 5, threshold: float = 0.15):
        self.isa = isa
        self.k = k
        self.threshold = threshold

    def fit(self, corpus: Iterable[KnowledgeEntry], y=None):
        corpus = validate_corpus(corpus)
        if self.isa is not None and self.isa not in ISA_TAGS:
            raise ValueError(f"isa must be one of {ISA_TAGS} or None, got {self.isa!r}")
        if self.isa is None:
            self.entries_ = corpus
        else:
            self.entries_ = [e for e in corpus if e.isa in (self.isa, "any")]
        self.vectorizer_ = TfidfVectorizer(
            tokenizer=tokenize,
            lowercase=False,
            token_pattern=None,
            smooth_idf=False,
            sublinear_tf=False,
            norm="l2",
        )
        docs = [e.document for e in self.entries_]
        if any(tokenize(d) for d in docs):
            self.doc_vectors_ = self.vectorizer_.fit_transform(docs).tocsr()
            self.vocabulary_ = dict(self.vectorizer_.vocabulary_)
            self.idf_ = self.vectorizer_.idf_
        else:
            self.doc_vectors_ = None
            self.vocabulary_ = {}
            self.idf_ = np.zeros(0)
        return self

    @property
    def index_(self) -> TfIdfIndex:
        check_is_fitted(self, "entries_")
        return TfIdfIndex(self.vocabulary_, self.idf_, self.doc_vectors_, self.entries_)

    def similarities(self, text: str) -> np.ndarray:
        """Cosine similarity of ``text`` against every indexed entry."""
        check_is_fitted(self, "entries_")
        if self.doc_vectors_ is None:
            return np.zeros(len(self.entries_))
        q = self.vectorizer_.transform([text])
        sims = (self.doc_vectors_ @ q.T).toarray().ravel()
        return np.clip(sims, 0.0, 1.0)

    def query_text(
        self, text: str, k: int | None = None, threshold: float | None = None
    ) -> list[tuple[str, float]]:
        k = self.k if k is None else k
        threshold = self.threshold if threshold is None else threshold
        if k < 0:
            raise ValueError("k must be >= 0")
        if k == 0 or not tokenize(text):
            return []
        sims = self.similarities(text)
        ranked = sorted(
            ((e.id, float(s)) for e, s in zip(self.entries_, sims) if s > 0 and s >= threshold),
            key=lambda pair: (-pair[1], pair[0]),
        )
        return ranked[:k]

    def query(
        self,
        signals: Sequence,
        k: int | None = None,
        threshold: float | None = None,
        isa: str | None = None,
    ) -> list[tuple[str, float]]:
        """Top-``k`` ``(entry id, similarity)`` pairs, best first, ties by id."""
        hint = self.isa if isa is None else isa
        return self.query_text(build_query_text(signals, hint), k, threshold)

    def retrieve(self, signals: Sequence, k: int | None = None, threshold: float | None = None):
        """Like :meth:`query` but returns :class:`RetrievedKnowledge` records."""
        by_id = {e.id: e for e in self.entries_}
        return [RetrievedKnowledge(by_id[i], s) for i, s in self.query(signals, k, threshold)]


def build_index(corpus: Iterable[KnowledgeEntry], isa_filter: str | None = None) -> KnowledgeRetriever:
    return KnowledgeRetriever(isa=isa_filter).fit(corpus)


def query(index: KnowledgeRetriever, signals: Sequence, k: int = 5, threshold: float = 0.15):
    return index.query(signals, k, threshold)
