"""Caption records, sentence splitting, and sub-caption sampling.

A dataset is a JSON-Lines file of caption records. Each record pairs an image
with its original alt-text (the raw caption) plus, per generator source, one
short caption and one long caption already split into sentences. The unit fed
to the contrastive losses is the sub-caption: the raw caption, a short
caption, or a single sentence of a long caption.
"""

import json
import re
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptySet, MalformedRecord, UnknownSource

# A sentence ends at '.', '!' or '?' (runs allowed) followed by whitespace or
# end of string. Terminal punctuation stays attached to the sentence.
_SENTENCE_BOUNDARY = re.compile(r"(?<=[.!?])(?=\s)")


def split_sentences(text: str) -> List[str]:
    """Split a long caption into sentences.

    Rule-based: boundaries are '.', '!' or '?' followed by whitespace or end
    of string. No abbreviation handling; generated captions are clean prose.
    Fragments are stripped and empty ones dropped, so the result never
    contains an internal boundary.
    """
    parts = _SENTENCE_BOUNDARY.split(text)
    return [p.strip() for p in parts if p.strip()]


@dataclass
class CaptionRecord:
    """One image's captions from every source.

    Fields:
        image_id: unique id, also names the image tensor file.
        raw_caption: original alt-text T.
        short_captions: one summary sentence per source.
        long_captions: per source, the long caption as a list of sentences.
        sources: generator names, metadata only.
        prompts: optional (long_prompt, short_prompt) metadata.
    """

    image_id: str
    raw_caption: str
    short_captions: List[str] = field(default_factory=list)
    long_captions: List[List[str]] = field(default_factory=list)
    sources: List[str] = field(default_factory=list)
    prompts: Optional[Tuple[str, str]] = None

    def n_sources(self) -> int:
        return len(self.sources)


KIND_RAW = "raw"
KIND_SHORT = "short"
KIND_LONG_SENTENCE = "long_sentence"


@dataclass
class SubCaptionSet:
    """The ordered candidate pool one image's sub-captions are drawn from.

    candidates[0] is always the raw caption; each included source then
    contributes its short caption followed by its long-caption sentences.
    Candidates may exceed the token budget textually; enforcement is by
    truncation at tokenization time, recorded here as `token_budget`.
    """

    image_id: str
    candidates: List[Tuple[str, str, int]]  # (text, kind, source_index)
    token_budget: Optional[int] = None

    def texts(self) -> List[str]:
        return [c[0] for c in self.candidates]


def build_subcaption_set(
    record: CaptionRecord,
    include_sources: Optional[Sequence[int]] = None,
    token_budget: Optional[int] = None,
) -> SubCaptionSet:
    """Assemble [T, c_s, c_1..c_M] per included source, raw caption first.

    With multiple sources the raw caption is included once, then each source
    appends its short caption and long-caption sentences in order. With
    include_sources=None every source is used.
    """
    if include_sources is None:
        include_sources = range(record.n_sources())
    candidates: List[Tuple[str, str, int]] = [(record.raw_caption, KIND_RAW, -1)]
    for src in include_sources:
        if not 0 <= src < record.n_sources():
            raise UnknownSource(
                f"record {record.image_id!r} has {record.n_sources()} sources, "
                f"index {src} is out of range"
            )
        candidates.append((record.short_captions[src], KIND_SHORT, src))
        for sentence in record.long_captions[src]:
            candidates.append((sentence, KIND_LONG_SENTENCE, src))
    return SubCaptionSet(record.image_id, candidates, token_budget)


def sample_subcaptions(sset: SubCaptionSet, k: int, rng_seed: int) -> List[int]:
    """Draw K candidate indices uniformly with replacement, deterministically.

    Returns indices into sset.candidates. Repeats are allowed; repeated
    positives are harmless in the multi-positive loss.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n = len(sset.candidates)
    if n == 0:
        raise EmptySet(f"no candidates for image {sset.image_id!r}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(rng_seed)))
    return [int(i) for i in rng.integers(0, n, size=k)]


@dataclass
class SubCaptionBatch:
    """One training step's sampled sub-captions.

    sampled[i][j] indexes into the i-th image's SubCaptionSet. Rebuilding
    with the same dataset, K, and rng_seed reproduces the batch exactly.
    """

    image_ids: List[str]
    sampled: List[List[int]]
    k: int
    rng_seed: int

    def to_json(self) -> str:
        """Canonical serialization used by the determinism tests."""
        return json.dumps(
            {
                "image_ids": self.image_ids,
                "sampled": self.sampled,
                "k": self.k,
                "rng_seed": self.rng_seed,
            },
            sort_keys=True,
            separators=(",", ":"),
        )


def build_batch(
    sets: Sequence[SubCaptionSet], k: int, rng_seed: int
) -> SubCaptionBatch:
    """Sample one row per image; row i uses seed (rng_seed, i).

    Per-image seeding keeps rows independent of batch composition order only
    through their position, which is all the determinism contract needs.
    """
    sampled = []
    for i, sset in enumerate(sets):
        row_seed = np.random.SeedSequence([rng_seed, i]).generate_state(1)[0]
        sampled.append(sample_subcaptions(sset, k, int(row_seed)))
    return SubCaptionBatch([s.image_id for s in sets], sampled, k, rng_seed)


# ---- dataset file IO ----

_REQUIRED_FIELDS = ("image_id", "raw_caption", "short_captions", "long_captions", "sources")


def _validate_record(obj: dict, line_no: int, seen_ids: set) -> CaptionRecord:
    for name in _REQUIRED_FIELDS:
        if name not in obj:
            raise MalformedRecord(line_no, name, "missing field")
    image_id = obj["image_id"]
    if not isinstance(image_id, str) or not image_id:
        raise MalformedRecord(line_no, "image_id", "must be a non-empty string")
    if image_id in seen_ids:
        raise MalformedRecord(line_no, "image_id", f"duplicate id {image_id!r}")
    raw = obj["raw_caption"]
    if not isinstance(raw, str) or not raw.strip():
        raise MalformedRecord(line_no, "raw_caption", "must be a non-empty string")
    shorts = obj["short_captions"]
    longs = obj["long_captions"]
    sources = obj["sources"]
    if not isinstance(shorts, list) or any(not isinstance(s, str) for s in shorts):
        raise MalformedRecord(line_no, "short_captions", "must be a list of strings")
    if not isinstance(longs, list) or any(
        not isinstance(l, list) or any(not isinstance(s, str) for s in l) for l in longs
    ):
        raise MalformedRecord(line_no, "long_captions", "must be a list of sentence lists")
    if not isinstance(sources, list) or any(not isinstance(s, str) for s in sources):
        raise MalformedRecord(line_no, "sources", "must be a list of strings")
    if not len(shorts) == len(longs) == len(sources):
        raise MalformedRecord(
            line_no,
            "sources",
            f"short_captions ({len(shorts)}), long_captions ({len(longs)}) and "
            f"sources ({len(sources)}) must have equal length",
        )
    for s in shorts:
        if not s.strip():
            raise MalformedRecord(line_no, "short_captions", "empty sentence")
    for l in longs:
        for s in l:
            if not s.strip():
                raise MalformedRecord(line_no, "long_captions", "empty sentence")
    prompts = obj.get("prompts")
    if prompts is not None:
        if (
            not isinstance(prompts, (list, tuple))
            or len(prompts) != 2
            or any(not isinstance(p, str) for p in prompts)
        ):
            raise MalformedRecord(line_no, "prompts", "must be a pair of strings or null")
        prompts = (prompts[0], prompts[1])
    return CaptionRecord(image_id, raw, list(shorts), [list(l) for l in longs], list(sources), prompts)


def load_dataset(path) -> List[CaptionRecord]:
    """Read a JSONL caption dataset, validating every line."""
    records: List[CaptionRecord] = []
    seen: set = set()
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedRecord(line_no, "json", str(e)) from e
            if not isinstance(obj, dict):
                raise MalformedRecord(line_no, "json", "line is not an object")
            rec = _validate_record(obj, line_no, seen)
            seen.add(rec.image_id)
            records.append(rec)
    return records


def save_dataset(records: Sequence[CaptionRecord], path) -> None:
    """Write records as UTF-8 JSONL with LF line endings."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            obj = {
                "image_id": rec.image_id,
                "raw_caption": rec.raw_caption,
                "short_captions": rec.short_captions,
                "long_captions": rec.long_captions,
                "sources": rec.sources,
                "prompts": list(rec.prompts) if rec.prompts is not None else None,
            }
            f.write(json.dumps(obj, ensure_ascii=False, separators=(",", ": ")) + "\n")
