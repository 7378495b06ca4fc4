"""Retrieval of demonstration examples and arbitration of which one applies."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import httpx
import numpy as np

from .errors import IPerceptError
from .gateway import VlmGateway
from .gateway.parser import Choice, parse_choice
from .gateway.records import PerceptionVerdict
from .gateway.templates import fill
from .imaging import RgbImage


class RaigError(IPerceptError):
    pass


class ProviderError(RaigError):
    pass


class EmptyStore(RaigError):
    pass


class InvalidChoice(RaigError):
    pass


class StoreError(RaigError):
    pass


ACTION_TYPES = ("push", "grasp", "place", "go_to", "reach")

# which loop category an example's action type drives
ACTION_CATEGORY = {"push": "a2", "grasp": "a3", "place": "a3", "go_to": "a1", "reach": "a1"}

DEFAULT_K = 3
INDEX_FILE = "index.json"


@dataclass(frozen=True, eq=False)
class InContextExample:
    id: str
    query_description: str
    task_description: str
    action_type: str
    rationale: str = ""
    frames: tuple[RgbImage, ...] = ()
    end_effector_positions: tuple[tuple[float, float, float], ...] = ()

    def __post_init__(self) -> None:
        if self.action_type not in ACTION_TYPES:
            raise ValueError(f"action_type must be one of {ACTION_TYPES}, got {self.action_type!r}")
        pos = tuple(tuple(float(v) for v in p) for p in self.end_effector_positions)
        if any(len(p) != 3 or not np.all(np.isfinite(p)) for p in pos):
            raise ValueError("end-effector positions must be finite 3-vectors")
        if len(pos) != len(self.frames):
            raise ValueError("frames and end-effector positions must pair up one to one")
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "end_effector_positions", pos)

    @property
    def text(self) -> str:
        return f"{self.query_description}\n{self.task_description}"

    @property
    def category(self) -> str:
        return ACTION_CATEGORY[self.action_type]


# -- embedding -------------------------------------------------------------------


class Embedder(Protocol):
    name: str

    def embed(self, text: str) -> np.ndarray: ...


_WORD = re.compile(r"\w+", re.UNICODE)


@dataclass(frozen=True)
class HashedBagOfWords:
    """Deterministic local embedder: token counts hashed into ``dim`` buckets."""

    dim: int = 256
    name: str = "hashed-bow"

    def bucket(self, token: str) -> int:
        h = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(h, "little") % self.dim

    def embed(self, text: str) -> np.ndarray:
        tokens = _WORD.findall((text or "").lower())
        if not tokens:
            raise ProviderError("cannot embed empty text")
        v = np.zeros(self.dim, dtype=np.float64)
        for t in tokens:
            v[self.bucket(t)] += 1.0
        return v


@dataclass
class HttpEmbedder:
    """Embeddings from an OpenAI-style ``/embeddings`` endpoint."""

    endpoint: str
    model: str
    api_key: str = ""
    timeout: float = 30.0
    transport: httpx.BaseTransport | None = None
    name: str = "http"

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ProviderError("cannot embed empty text")
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        url = self.endpoint.rstrip("/") + "/embeddings"
        try:
            with httpx.Client(timeout=self.timeout, transport=self.transport) as c:
                r = c.post(url, json={"model": self.model, "input": text}, headers=headers)
            r.raise_for_status()
            vec = np.asarray(r.json()["data"][0]["embedding"], dtype=np.float64)
        except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as e:
            raise ProviderError(f"embedding request failed: {e}") from None
        if vec.ndim != 1 or not np.all(np.isfinite(vec)):
            raise ProviderError("provider returned a malformed vector")
        return vec


# -- retrieval --------------------------------------------------------------------


def cosine_similarities(vectors: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Cosine of each row with ``query``; zero vectors score 0."""
    vectors = np.asarray(vectors, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1) * np.linalg.norm(query)
    dots = vectors @ query
    out = np.zeros(len(vectors))
    ok = norms > 0
    out[ok] = dots[ok] / norms[ok]
    return out


def retrieve_top_k(ids: Sequence[str], vectors: np.ndarray, query: np.ndarray, k: int = DEFAULT_K) -> list[tuple[str, float]]:
    """Rank stored vectors by cosine similarity, ties by ascending id; ``k`` is clamped."""
    if len(ids) == 0:
        raise EmptyStore("the example store is empty")
    if k < 1:
        raise ValueError("k must be at least 1")
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.shape[0] != len(ids):
        raise ValueError("one vector per id is required")
    sims = cosine_similarities(vectors, query)
    # lexsort sorts by the last key first
    order = np.lexsort((np.asarray(ids), -sims))
    return [(ids[i], float(sims[i])) for i in order[: min(k, len(ids))]]


# -- store ------------------------------------------------------------------------


@dataclass
class ExampleStore:
    examples: dict[str, InContextExample]
    vectors: np.ndarray
    ids: list[str] = field(default_factory=list)
    provider: str = ""

    def __post_init__(self) -> None:
        if not self.ids:
            self.ids = sorted(self.examples)
        if self.vectors.shape[0] != len(self.ids):
            raise StoreError("vectors and examples disagree in count")
        if set(self.ids) != set(self.examples):
            raise StoreError("index ids and examples disagree")

    def __len__(self) -> int:
        return len(self.ids)

    def retrieve(self, query_vec: np.ndarray, k: int = DEFAULT_K) -> list[tuple[InContextExample, float]]:
        return [(self.examples[i], s) for i, s in retrieve_top_k(self.ids, self.vectors, query_vec, k)]


def _example_from_dir(path: Path) -> InContextExample:
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
        frames = tuple(RgbImage.load(path.parent / f) for f in d.get("frames", []))
        return InContextExample(
            id=str(d["id"]),
            query_description=d["query_description"],
            task_description=d["task_description"],
            action_type=d["action_type"],
            rationale=d.get("rationale", ""),
            frames=frames,
            end_effector_positions=tuple(d.get("end_effector_positions", [])),
        )
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as e:
        raise StoreError(f"bad example manifest {path}: {e}") from None


def read_examples(directory: str | Path) -> dict[str, InContextExample]:
    root = Path(directory)
    if not root.is_dir():
        raise StoreError(f"no example store at {root}")
    out = {}
    for p in sorted(root.glob("*.json")):
        if p.name == INDEX_FILE:
            continue
        ex = _example_from_dir(p)
        if ex.id in out:
            raise StoreError(f"duplicate example id {ex.id!r}")
        out[ex.id] = ex
    return out


def write_example(directory: str | Path, ex: InContextExample) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for k, img in enumerate(ex.frames):
        name = f"{ex.id}-frame{k}.png"
        img.save(root / name)
        names.append(name)
    d = {
        "id": ex.id,
        "query_description": ex.query_description,
        "task_description": ex.task_description,
        "action_type": ex.action_type,
        "rationale": ex.rationale,
        "frames": names,
        "end_effector_positions": [list(p) for p in ex.end_effector_positions],
    }
    path = root / f"{ex.id}.json"
    path.write_text(json.dumps(d, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def ingest(directory: str | Path, embedder: Embedder) -> ExampleStore:
    """Embed every example in ``directory`` and write the index file beside them."""
    examples = read_examples(directory)
    if not examples:
        raise EmptyStore(f"no examples under {directory}")
    ids = sorted(examples)
    vectors = np.stack([embedder.embed(examples[i].text) for i in ids])
    index = {"provider": embedder.name, "dim": int(vectors.shape[1]), "ids": ids, "vectors": vectors.tolist()}
    (Path(directory) / INDEX_FILE).write_text(json.dumps(index) + "\n", encoding="utf-8")
    return ExampleStore(examples, vectors, ids, embedder.name)


def load_store(directory: str | Path) -> ExampleStore:
    examples = read_examples(directory)
    try:
        index = json.loads((Path(directory) / INDEX_FILE).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise StoreError(f"missing or unreadable index in {directory}: {e}") from None
    ids = list(index["ids"])
    if set(ids) != set(examples):
        raise StoreError("index is stale: re-run ingest")
    vectors = np.asarray(index["vectors"], dtype=np.float64).reshape(len(ids), int(index["dim"]))
    return ExampleStore(examples, vectors, ids, index.get("provider", ""))


# -- arbitration --------------------------------------------------------------------


def _describe(k: int, ex: InContextExample) -> str:
    return (
        f"Demonstration {k}:\n"
        f"  Query: {ex.query_description}\n"
        f"  Task: {ex.task_description}\n"
        f"  Action type: {ex.action_type}\n"
        f"  Rationale: {ex.rationale or '-'}"
    )


def select_example(
    gateway: VlmGateway,
    query: str,
    image: RgbImage,
    verdict: PerceptionVerdict,
    candidates: Sequence[InContextExample],
    step: int = 0,
) -> tuple[InContextExample, str | None]:
    """Ask the VLM which retrieved demonstration applies and to which object."""
    if not 1 <= len(candidates) <= 8:
        raise ValueError(f"between 1 and 8 candidates are required, got {len(candidates)}")
    text = fill(
        "select",
        query=query,
        summary=verdict.scene_summary,
        candidates="\n\n".join(_describe(k + 1, ex) for k, ex in enumerate(candidates)),
    )
    choice: Choice = gateway.ask("select", step, text, [image], parse_choice)
    if not 1 <= choice.index <= len(candidates):
        raise InvalidChoice(f"choice {choice.index} is not among 1..{len(candidates)}")
    return candidates[choice.index - 1], choice.target_object or verdict.target_object


@dataclass
class RaigSelector:
    """Replaces the verdict's action word with the one from the chosen demonstration.

    With ``naive`` set the top-ranked example is used without asking the VLM.
    """

    store: ExampleStore
    embedder: Embedder
    gateway: VlmGateway
    k: int = DEFAULT_K
    naive: bool = False

    def candidates(self, query: str, verdict: PerceptionVerdict) -> list[InContextExample]:
        vec = self.embedder.embed(f"{query}\n{verdict.scene_summary}")
        return [ex for ex, _ in self.store.retrieve(vec, self.k)]

    def choose(self, query: str, image: RgbImage, verdict: PerceptionVerdict, step: int) -> tuple[str, str | None]:
        cands = self.candidates(query, verdict)
        if self.naive:
            ex, target = cands[0], verdict.target_object
        else:
            ex, target = select_example(self.gateway, query, image, verdict, cands, step)
        return ex.action_type, target
