"""Query construction, oracle dispatch and the persistent answer cache.

An oracle is anything with a ``complete(prompt, meta) -> str`` method. The
shipped implementations are a deterministic ground-truth mock (answers
with the candidate sharing the query's true label, falling back to the
most similar candidate), a noisy variant that only answers when the
true-label candidate is present, and an HTTP client for a chat-completion
endpoint.

Every dispatch goes through a :class:`CacheStore`; a key that is present
in the store is never sent to the live oracle again.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .sampling import NeighborIndex

logger = logging.getLogger(__name__)

QUERY_TEMPLATE_VERSION = "query-v1"
INTERPRET_TEMPLATE_VERSION = "interpret-v1"


class OracleError(RuntimeError):
    """Raised when a live oracle cannot be reached or misbehaves."""


@dataclass(frozen=True)
class OracleAnswer:
    """A parsed oracle reply: a 1-based choice, free text, or abstention."""

    choice: int | None = None
    text: str | None = None

    @property
    def is_abstain(self) -> bool:
        return self.choice is None and self.text is None

    def to_json(self) -> dict:
        if self.choice is not None:
            return {"choice": self.choice}
        if self.text is not None:
            return {"text": self.text}
        return {"abstain": True}

    @classmethod
    def from_json(cls, obj: dict) -> "OracleAnswer":
        if "choice" in obj:
            return cls(choice=int(obj["choice"]))
        if "text" in obj:
            return cls(text=str(obj["text"]))
        return cls()


ABSTAIN = OracleAnswer()


@dataclass
class OracleExchange:
    """One rendered query: the candidates shown and the parsed reply."""

    query_id: int
    candidates: list[tuple[int, int]]       # (sample id, cluster id), distinct clusters
    prompt: str
    cache_key: str
    candidate_sims: list[float] = field(default_factory=list)
    answer: OracleAnswer | None = None

    def __post_init__(self):
        clusters = [c for _, c in self.candidates]
        if len(set(clusters)) != len(clusters):
            raise ValueError("candidate cluster ids must be pairwise distinct")

    @property
    def q_size(self) -> int:
        return len(self.candidates)

    def meta(self) -> dict:
        return {
            "kind": "query",
            "query_id": self.query_id,
            "candidate_ids": [int(s) for s, _ in self.candidates],
            "candidate_sims": [float(v) for v in self.candidate_sims],
            "q_size": self.q_size,
        }


def effective_text(sample) -> str:
    """The sample's text, or a stable placeholder when none exists."""
    return sample.text if sample.text else f"<sample {sample.id}>"


def build_query_prompt(query_text: str, candidate_texts: list[str]) -> str:
    """Render the neighbor-choice prompt for one query and its candidates."""
    if not query_text or not query_text.strip():
        raise ValueError("query text must be non-empty")
    if len(candidate_texts) < 2:
        raise ValueError("need at least 2 candidate sentences")
    options = " or ".join(f"'Sentence {i}'" for i in range(1, len(candidate_texts) + 1))
    listing = "; ".join(
        f"Sentence {i}: {t}" for i, t in enumerate(candidate_texts, start=1)
    )
    return (
        "Select the sentence that better corresponds with the query sentence "
        f"in terms of intents or categories. Please respond with {options} "
        "without explanation.\n\n"
        f"Query: {query_text}. {listing}."
    )


def build_interpret_prompt(texts: list[str]) -> str:
    """Render the category-naming prompt over exactly three representatives."""
    if len(texts) != 3:
        raise ValueError("interpretation prompt takes exactly 3 sentences")
    listing = "; ".join(f"Sentence {i}: {t}" for i, t in enumerate(texts, start=1))
    return (
        "Given the following sentences, return a word or a phrase to summarize "
        "the common intent or category of these sentences without explanation.\n\n"
        f"{listing}."
    )


def parse_choice(response: str, q_size: int) -> OracleAnswer:
    """Scan a reply for 'sentence <n>'; one distinct in-range hit is a choice.

    Zero hits or conflicting hits yield an abstention, never an error.
    """
    import re

    hits = {
        int(m.group(1))
        for m in re.finditer(r"sentence\s*([0-9]+)", response, flags=re.IGNORECASE)
        if 1 <= int(m.group(1)) <= q_size
    }
    if len(hits) == 1:
        return OracleAnswer(choice=hits.pop())
    return ABSTAIN


def make_cache_key(template_version: str, query_text: str, candidate_texts: list[str]) -> str:
    """Stable digest of the template version and the texts shown, in order."""
    payload = json.dumps(
        [template_version, query_text, list(candidate_texts)],
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def prompt_tokens(prompt: str) -> float:
    """Coarse token estimate: whitespace-separated words times 4/3."""
    return len(prompt.split()) * 4.0 / 3.0


# ---------------------------------------------------------------------------
# Candidate construction
# ---------------------------------------------------------------------------


def candidate_clusters(
    query_id: int,
    index: NeighborIndex,
    pseudo_labels: np.ndarray,
    q_size: int,
    vectors: np.ndarray,
    centers: np.ndarray,
) -> list[int]:
    """Rank clusters by neighbor representation around one query sample.

    Clusters are ordered by how many of the query's neighbors they hold
    (descending), then by summed neighbor similarity, then ascending
    cluster id. When fewer than ``q_size`` clusters appear among the
    neighbors, the list is padded with the remaining clusters nearest
    (by center) to the query.
    """
    if q_size < 2:
        raise ValueError("q_size must be at least 2; a one-option query is vacuous")
    labels = np.asarray(pseudo_labels)
    nbr = index.neighbors[query_id]
    sims = index.similarities[query_id]
    counts: dict[int, int] = {}
    simsum: dict[int, float] = {}
    for j, s in zip(nbr, sims):
        c = int(labels[j])
        counts[c] = counts.get(c, 0) + 1
        simsum[c] = simsum.get(c, 0.0) + float(s)
    ranked = sorted(counts, key=lambda c: (-counts[c], -simsum[c], c))
    if len(ranked) < q_size:
        present = set(ranked)
        dists = np.linalg.norm(centers - vectors[query_id], axis=1)
        pad = sorted(
            (c for c in range(centers.shape[0]) if c not in present),
            key=lambda c: (dists[c], c),
        )
        ranked = ranked + pad
    return ranked[:q_size]


def pick_candidate_sample(
    cluster: int,
    query_id: int,
    index: NeighborIndex,
    pseudo_labels: np.ndarray,
    vectors: np.ndarray,
) -> int:
    """The query's most similar neighbor in ``cluster``; for clusters not
    represented among the neighbors, the cluster member nearest the query."""
    labels = np.asarray(pseudo_labels)
    nbr = index.neighbors[query_id]
    sims = index.similarities[query_id]
    in_cluster = [(float(s), int(j)) for j, s in zip(nbr, sims) if labels[j] == cluster]
    if in_cluster:
        best = max(in_cluster, key=lambda t: (t[0], -t[1]))
        return best[1]
    members = np.flatnonzero(labels == cluster)
    members = members[members != query_id]
    if members.size == 0:
        raise ValueError(f"cluster {cluster} has no candidate members")
    dists = np.linalg.norm(vectors[members] - vectors[query_id], axis=1)
    order = np.lexsort((members, dists))
    return int(members[order[0]])


def build_exchange(
    query_row: int,
    index: NeighborIndex,
    pseudo_labels: np.ndarray,
    q_size: int,
    vectors: np.ndarray,
    centers: np.ndarray,
    texts: dict[int, str],
    ids: np.ndarray | None = None,
) -> OracleExchange:
    """Assemble the full exchange for one selected query sample.

    ``query_row`` indexes the snapshot arrays; ``ids`` maps rows to public
    sample ids (identity when omitted). ``texts`` is keyed by sample id.
    """
    if ids is None:
        ids = np.arange(vectors.shape[0], dtype=np.int64)
    clusters = candidate_clusters(query_row, index, pseudo_labels, q_size, vectors, centers)
    candidates: list[tuple[int, int]] = []
    sims: list[float] = []
    for c in clusters:
        row = pick_candidate_sample(c, query_row, index, pseudo_labels, vectors)
        candidates.append((int(ids[row]), c))
        num = float(vectors[row] @ vectors[query_row])
        den = float(np.linalg.norm(vectors[row]) * np.linalg.norm(vectors[query_row]))
        sims.append(num / den if den > 0 else 0.0)
    query_id = int(ids[query_row])
    cand_texts = [texts[sid] for sid, _ in candidates]
    prompt = build_query_prompt(texts[query_id], cand_texts)
    key = make_cache_key(QUERY_TEMPLATE_VERSION, texts[query_id], cand_texts)
    return OracleExchange(
        query_id=query_id,
        candidates=candidates,
        prompt=prompt,
        cache_key=key,
        candidate_sims=sims,
    )


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------


class CacheStore:
    """Thread-safe answer cache with hit/miss and token-cost accounting.

    Concurrent misses on the same key coalesce: only the first caller
    dispatches, the rest wait for its stored answer.
    """

    def __init__(self, path: str | None = None):
        self.path = path
        self.entries: dict[str, OracleAnswer] = {}
        self.hits = 0
        self.misses = 0
        self.live_dispatches = 0
        self.token_count = 0.0
        self._lock = threading.Lock()
        self._inflight: dict[str, threading.Event] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, key: str) -> OracleAnswer | None:
        with self._lock:
            answer = self.entries.get(key)
            if answer is not None:
                self.hits += 1
            return answer

    def fetch(self, key: str, supplier) -> OracleAnswer:
        """Return the cached answer or compute it exactly once via ``supplier``."""
        while True:
            with self._lock:
                if key in self.entries:
                    self.hits += 1
                    return self.entries[key]
                event = self._inflight.get(key)
                if event is None:
                    event = threading.Event()
                    self._inflight[key] = event
                    self.misses += 1
                    break
            event.wait()
        try:
            answer = supplier()
        except BaseException:
            with self._lock:
                del self._inflight[key]
                self.misses -= 1
                event.set()
            raise
        with self._lock:
            self.entries[key] = answer
            del self._inflight[key]
            event.set()
        return answer

    def add_tokens(self, amount: float) -> None:
        with self._lock:
            self.token_count += amount

    def count_dispatch(self) -> None:
        with self._lock:
            self.live_dispatches += 1

    def save(self, path: str | None = None) -> None:
        """Atomically persist all entries as one JSON document."""
        target = path or self.path
        if target is None:
            raise ValueError("no cache path configured")
        os.makedirs(os.path.dirname(os.path.abspath(target)), exist_ok=True)
        doc = {key: ans.to_json() for key, ans in sorted(self.entries.items())}
        directory = os.path.dirname(os.path.abspath(target))
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(doc, fh, indent=2, sort_keys=True)
            os.replace(tmp, target)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)

    @classmethod
    def load(cls, path: str) -> "CacheStore":
        store = cls(path=path)
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
            store.entries = {k: OracleAnswer.from_json(v) for k, v in doc.items()}
        return store


# ---------------------------------------------------------------------------
# Oracle implementations
# ---------------------------------------------------------------------------


class MockOracle:
    """Ground-truth oracle: picks the candidate sharing the query's true
    label, else the candidate most similar to the query."""

    def __init__(self, true_labels: dict[int, int], label_names: dict[int, str] | None = None):
        self.true_labels = dict(true_labels)
        self.label_names = label_names or {}

    def _name_for(self, label: int) -> str:
        return self.label_names.get(label, f"category {label}")

    def complete(self, prompt: str, meta: dict) -> str:
        if meta["kind"] == "interpret":
            labels = [self.true_labels[i] for i in meta["representative_ids"]]
            counts: dict[int, int] = {}
            for lbl in labels:
                counts[lbl] = counts.get(lbl, 0) + 1
            majority = sorted(counts, key=lambda l: (-counts[l], l))[0]
            return self._name_for(majority)
        query_label = self.true_labels.get(meta["query_id"])
        cand_ids = meta["candidate_ids"]
        for pos, sid in enumerate(cand_ids, start=1):
            if query_label is not None and self.true_labels.get(sid) == query_label:
                return f"Sentence {pos}"
        sims = meta["candidate_sims"]
        best = max(range(len(cand_ids)), key=lambda i: (sims[i], -i))
        return f"Sentence {best + 1}"


class NoisyMockOracle(MockOracle):
    """Mock that answers only when the true-label candidate is on offer."""

    def complete(self, prompt: str, meta: dict) -> str:
        if meta["kind"] == "interpret":
            return super().complete(prompt, meta)
        query_label = self.true_labels.get(meta["query_id"])
        for pos, sid in enumerate(meta["candidate_ids"], start=1):
            if query_label is not None and self.true_labels.get(sid) == query_label:
                return f"Sentence {pos}"
        return "unsure"


class HttpOracle:
    """Chat-completion client with bounded retries and in-flight limiting.

    Expects an OpenAI-style endpoint; the API key is read from the
    configured environment variable at call time.
    """

    def __init__(
        self,
        url: str,
        model: str,
        api_key_env: str = "ORACLE_API_KEY",
        timeout: float = 30.0,
        max_retries: int = 3,
        backoff: float = 1.0,
        max_inflight: int = 4,
    ):
        self.url = url
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self._sem = threading.Semaphore(max_inflight)

    def complete(self, prompt: str, meta: dict) -> str:
        import requests

        api_key = os.environ.get(self.api_key_env)
        if not api_key:
            raise OracleError(f"environment variable {self.api_key_env} is not set")
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }
        headers = {"Authorization": f"Bearer {api_key}"}
        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                with self._sem:
                    resp = requests.post(
                        self.url, json=payload, headers=headers, timeout=self.timeout
                    )
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except Exception as exc:  # noqa: BLE001 - every transport error retries
                last_error = exc
                if attempt + 1 < self.max_retries:
                    time.sleep(self.backoff * (2**attempt))
        raise OracleError(f"oracle request failed after {self.max_retries} attempts: {last_error}")


# ---------------------------------------------------------------------------
# Dispatch helpers
# ---------------------------------------------------------------------------


def ask(oracle, exchange: OracleExchange, cache: CacheStore) -> OracleAnswer:
    """Answer a query exchange through the cache.

    A hit returns the stored answer with no live traffic. A miss counts
    the prompt's tokens, dispatches once, parses the reply and stores it.
    Transport failure after the oracle's own retries becomes an abstention
    (stored, so the failed key is not retried within the run).
    """

    def supplier() -> OracleAnswer:
        cache.add_tokens(prompt_tokens(exchange.prompt))
        cache.count_dispatch()
        try:
            raw = oracle.complete(exchange.prompt, exchange.meta())
        except OracleError as exc:
            logger.warning("query %s abstained: %s", exchange.query_id, exc)
            return ABSTAIN
        return parse_choice(raw, exchange.q_size)

    answer = cache.fetch(exchange.cache_key, supplier)
    exchange.answer = answer
    return answer


def ask_name(oracle, prompt: str, meta: dict, cache: CacheStore, cache_key: str) -> OracleAnswer:
    """Answer a naming prompt through the cache; the reply is kept verbatim."""

    def supplier() -> OracleAnswer:
        cache.add_tokens(prompt_tokens(prompt))
        cache.count_dispatch()
        try:
            raw = oracle.complete(prompt, meta)
        except OracleError as exc:
            logger.warning("naming prompt abstained: %s", exc)
            return ABSTAIN
        return OracleAnswer(text=raw.strip())

    return cache.fetch(cache_key, supplier)
