"""Re-rank prompt assembly, tolerant response parsing and the re-rank call."""

from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping

from ..corpus import ItemMeta
from ..retrieval import CandidateList
from .backends import LlmBackend, TransportError, complete_with_retries
from .documents import UserProfileDoc

logger = logging.getLogger(__name__)

TASK_LINE = (
    "TASK: Given this profile and the following candidate movies, "
    "return your top-{k} recommendations as a JSON array of item IDs."
)
STRICT_LINE = "Respond with exactly {k} distinct integer IDs taken from the CANDIDATES list, best first."
EXPLAIN_LINE = 'For each recommendation include a short rationale, using the shape [{"id": <int>, "why": <string>}, ...].'


class Source(str, Enum):
    LLM = "Llm"
    FALLBACK_KNN = "FallbackKnn"


@dataclass(frozen=True)
class RerankResult:
    user_id: int
    ranked_items: tuple[int, ...]
    source: Source
    raw_response: str = ""
    explanations: dict[int, str] | None = None
    defects: tuple[str, ...] = field(default=())

    def to_json(self) -> str:
        return json.dumps(
            {
                "user": self.user_id,
                "ranked": list(self.ranked_items),
                "source": self.source.value,
                "explanations": None if self.explanations is None else {str(k): v for k, v in self.explanations.items()},
                "defects": list(self.defects),
                "raw": self.raw_response,
            },
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, line: str) -> "RerankResult":
        o = json.loads(line)
        expl = o.get("explanations")
        return cls(
            int(o["user"]),
            tuple(int(i) for i in o["ranked"]),
            Source(o["source"]),
            o.get("raw", ""),
            None if expl is None else {int(k): v for k, v in expl.items()},
            tuple(o.get("defects", ())),
        )


def _candidate_line(item_id: int, meta: Mapping[int, ItemMeta]) -> str:
    m = meta.get(item_id)
    if m is None:
        return f"{item_id} | Item {item_id} | "
    fields = [str(item_id), m.title, ", ".join(m.genres)]
    desc = m.best_description
    if desc:
        fields.append(" ".join(desc.split()))
    return " | ".join(fields)


def compose_rerank_prompt(
    profile: UserProfileDoc,
    candidates: CandidateList,
    meta: Mapping[int, ItemMeta],
    k: int,
    explain: bool = False,
) -> str:
    """Build the re-rank prompt. Candidates appear in retrieval order, without scores."""
    if not candidates.entries:
        raise ValueError("no candidates to re-rank")
    if k > len(candidates):
        raise ValueError(f"k={k} exceeds {len(candidates)} candidates")
    lines = ["USER PROFILE:", profile.to_json(), "CANDIDATES:"]
    lines += [_candidate_line(i, meta) for i in candidates.item_ids]
    lines.append(TASK_LINE.format(k=k))
    lines.append(STRICT_LINE.format(k=k))
    if explain:
        lines.append(EXPLAIN_LINE)
    return "\n".join(lines) + "\n"


def _balanced_end(text: str, start: int) -> int | None:
    """Index of the ``]`` closing the ``[`` at ``start``, honouring JSON strings."""
    depth = 0
    in_str = False
    escaped = False
    for j in range(start, len(text)):
        c = text[j]
        if in_str:
            if escaped:
                escaped = False
            elif c == "\\":
                escaped = True
            elif c == '"':
                in_str = False
        elif c == '"':
            in_str = True
        elif c in "[{":
            depth += 1
        elif c in "]}":
            depth -= 1
            if depth == 0:
                return j if c == "]" else None
            if depth < 0:
                return None
    return None


def extract_json_array(text: str) -> list | None:
    """First balanced ``[...]`` region of ``text`` that parses as a JSON list."""
    for m in re.finditer(r"\[", text):
        end = _balanced_end(text, m.start())
        if end is None:
            continue
        try:
            value = json.loads(text[m.start() : end + 1])
        except (ValueError, RecursionError):
            continue
        if isinstance(value, list):
            return value
    return None


def _as_id(value) -> int | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str) and re.fullmatch(r"\s*\d+\s*", value):
        return int(value)
    return None


def parse_llm_ranking(response: str, candidates: CandidateList, k: int) -> RerankResult:
    """Turn a free-form response into a k-permutation of candidate ids.

    Never raises: unparseable output falls back to kNN order, short or dirty
    lists are filtered, de-duplicated and padded in kNN order.
    """
    knn = candidates.item_ids
    k = min(k, len(knn))
    allowed = set(knn)
    defects: list[str] = []
    arr = extract_json_array(response if isinstance(response, str) else "")
    if arr is None:
        logger.info("user %s: no JSON array in response; falling back", candidates.user_id)
        return RerankResult(candidates.user_id, tuple(knn[:k]), Source.FALLBACK_KNN, str(response), None, ("no_json_array",))

    ranked: list[int] = []
    explanations: dict[int, str] = {}
    for el in arr:
        why = None
        if isinstance(el, dict):
            why = el.get("why")
            el = el.get("id")
        item = _as_id(el)
        if item is None:
            defects.append("non_integer_id")
            continue
        if item not in allowed:
            defects.append("unknown_id")
            continue
        if item in ranked:
            defects.append("duplicate_id")
            continue
        if len(ranked) == k:
            defects.append("extra_ids")
            break
        ranked.append(item)
        if isinstance(why, str):
            explanations[item] = why
    source = Source.LLM
    if not ranked:
        defects.append("no_valid_ids")
        source = Source.FALLBACK_KNN
    if len(ranked) < k:
        defects.append("padded")
        chosen = set(ranked)
        ranked += [i for i in knn if i not in chosen][: k - len(ranked)]
    return RerankResult(
        candidates.user_id, tuple(ranked), source, response, explanations or None, tuple(dict.fromkeys(defects))
    )


def knn_result(candidates: CandidateList, k: int, cause: str = "") -> RerankResult:
    return RerankResult(
        candidates.user_id, tuple(candidates.item_ids[:k]), Source.FALLBACK_KNN, "", None, (cause,) if cause else ()
    )


def rerank(
    profile: UserProfileDoc,
    candidates: CandidateList,
    meta: Mapping[int, ItemMeta],
    backend: LlmBackend,
    k: int = 10,
    explain: bool = False,
    temperature: float = 0.7,
    max_tokens: int = 200,
    seed: int | None = None,
    attempts: int = 3,
    backoff_s: float = 1.0,
    sleep: Callable[[float], None] = time.sleep,
) -> RerankResult:
    prompt = compose_rerank_prompt(profile, candidates, meta, k, explain)
    try:
        response = complete_with_retries(
            backend, prompt, temperature=temperature, max_tokens=max_tokens, seed=seed,
            attempts=attempts, backoff_s=backoff_s, sleep=sleep,
        )
    except TransportError as exc:
        logger.warning("user %s: re-rank fell back to kNN: %s", candidates.user_id, exc)
        return knn_result(candidates, k, "transport_exhausted")
    return parse_llm_ranking(response, candidates, k)
