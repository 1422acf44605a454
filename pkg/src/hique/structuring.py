"""Turn a timestamped transcript into question-answer segments on the 85-slot grid.

Pipeline: ``segment_transcript`` -> ``assign_hierarchy`` -> ``build_slot_layout``.
Interviewer turns that are not catalogue questions (backchannels such as
"mhm" or "okay") are dropped and reported back to the caller.
"""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .encoders import TextEncoder, greedy_match_f1
from .errors import TranscriptError
from .taxonomy import N_QUESTIONS, QuestionEntry, QuestionTaxonomy, Role, normalize_text

log = logging.getLogger(__name__)


class Speaker(str, Enum):
    INTERVIEWER = "interviewer"
    PARTICIPANT = "participant"


class Label(str, Enum):
    NORMAL = "normal"
    DEPRESSION = "depression"

    @property
    def as_int(self) -> int:
        return int(self is Label.DEPRESSION)

    @classmethod
    def parse(cls, value) -> "Label":
        if isinstance(value, Label):
            return value
        text = str(value).strip().lower()
        if text in ("1", "depression", "depressed", "true"):
            return cls.DEPRESSION
        if text in ("0", "normal", "false"):
            return cls.NORMAL
        raise ValueError(f"unrecognised label {value!r}")


@dataclass(frozen=True)
class TranscriptTurn:
    speaker: Speaker
    start_time: float
    end_time: float
    text: str

    def __post_init__(self):
        if self.start_time < 0 or self.end_time < self.start_time:
            raise TranscriptError(
                f"invalid turn span ({self.start_time}, {self.end_time}) for {self.text!r}"
            )


@dataclass(frozen=True)
class QASegment:
    question_text: str
    answer_turns: tuple[TranscriptTurn, ...]
    question_span: tuple[float, float]
    answer_span: tuple[float, float]
    matched_entry: QuestionEntry
    similarity: float = 1.0

    @property
    def answer_text(self) -> str:
        return " ".join(t.text.strip() for t in self.answer_turns if t.text.strip())


@dataclass(frozen=True)
class HierarchicalPosition:
    slot_index: int
    role: Role
    effective_topic_slot: int
    chain_depth: int
    orphan: bool = False

    def to_dict(self) -> dict:
        return {
            "slot_index": self.slot_index,
            "role": self.role.value,
            "effective_topic_slot": self.effective_topic_slot,
            "chain_depth": self.chain_depth,
            "orphan": self.orphan,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HierarchicalPosition":
        return cls(
            int(d["slot_index"]),
            Role(d["role"]),
            int(d["effective_topic_slot"]),
            int(d["chain_depth"]),
            bool(d.get("orphan", False)),
        )


@dataclass
class Segmentation:
    segments: list[QASegment]
    unmatched: list[TranscriptTurn] = field(default_factory=list)


@dataclass
class StructuredInterview:
    participant_id: str
    segments: list[tuple[QASegment, HierarchicalPosition]]
    label: Optional[Label] = None
    unmatched: list[TranscriptTurn] = field(default_factory=list)


@dataclass
class SlotLayout:
    """``slots[k]`` holds the segment occupying slot ``k + 1`` (or None)."""

    slots: list[Optional[tuple[QASegment, HierarchicalPosition]]]
    collisions: list[tuple[int, QASegment]] = field(default_factory=list)

    @property
    def mask(self) -> np.ndarray:
        return np.array([s is not None for s in self.slots], dtype=bool)

    def __len__(self) -> int:
        return len(self.slots)


# ---------------------------------------------------------------------------
# transcript readers

_PAREN_TEXT = re.compile(r"^\s*\S+\s*\((.*)\)\s*$")
_SPEAKER_ALIASES = {
    "ellie": Speaker.INTERVIEWER,
    "interviewer": Speaker.INTERVIEWER,
    "participant": Speaker.PARTICIPANT,
}


def _speaker(value: str) -> Speaker:
    try:
        return _SPEAKER_ALIASES[value.strip().lower()]
    except KeyError:
        raise TranscriptError(f"unknown speaker {value!r}") from None


def read_transcript_jsonl(path: Union[str, Path]) -> list[TranscriptTurn]:
    turns = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                turns.append(
                    TranscriptTurn(_speaker(rec["speaker"]), float(rec["start"]), float(rec["end"]), str(rec["text"]))
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise TranscriptError(f"{path}:{lineno}: {exc}") from None
    return _sorted(turns)


def read_daic_transcript(path: Union[str, Path]) -> list[TranscriptTurn]:
    """Read a DAIC-WOZ ``*_TRANSCRIPT.csv`` (tab-separated start/stop/speaker/value).

    Interviewer lines of the form ``topic_code (question text)`` are reduced to
    the parenthesised question text.
    """
    turns = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            value = (row.get("value") or "").strip()
            speaker = _speaker(row["speaker"])
            if speaker is Speaker.INTERVIEWER:
                m = _PAREN_TEXT.match(value)
                if m:
                    value = m.group(1)
            turns.append(TranscriptTurn(speaker, float(row["start_time"]), float(row["stop_time"]), value))
    return _sorted(turns)


def read_transcript(path: Union[str, Path]) -> list[TranscriptTurn]:
    path = Path(path)
    if path.suffix in (".jsonl", ".json"):
        return read_transcript_jsonl(path)
    return read_daic_transcript(path)


def _sorted(turns: list[TranscriptTurn]) -> list[TranscriptTurn]:
    return sorted(turns, key=lambda t: t.start_time)


# ---------------------------------------------------------------------------
# unseen-question mapping

_WH = {"what", "why", "how", "when", "where", "who", "which"}
_DEICTIC = {"that", "it", "this", "them", "those", "these", "there", "they"}
_QUESTION_START = _WH | {
    "do", "does", "did", "are", "is", "was", "were", "have", "has", "had",
    "can", "could", "would", "will", "should", "tell", "describe", "explain",
}


def looks_like_question(text: str) -> bool:
    """Heuristic gate that keeps backchannels away from the unseen-question mapper."""
    norm = normalize_text(text)
    words = norm.split()
    if not words:
        return False
    if text.strip().endswith("?"):
        return True
    return words[0] in _QUESTION_START and (len(words) >= 2 or words[0] in _WH)


def infer_role(text: str) -> Role:
    """Short deictic probes ("how hard is that", "why") are treated as follow-ups."""
    words = normalize_text(text).split()
    if len(words) <= 5 and (len(words) == 1 and words[0] in _WH or _DEICTIC.intersection(words)):
        return Role.FOLLOW_UP
    return Role.PRIMARY


class QuestionMatcher:
    """Maps free-form interviewer questions onto the taxonomy.

    The acceptance threshold is the average, over the base questions, of each
    question's best similarity to any *other* base question. A new question
    whose best match scores below that typical nearest-neighbour similarity is
    appended to the taxonomy.
    """

    def __init__(self, taxonomy: QuestionTaxonomy, encoder: TextEncoder, threshold: Optional[float] = None):
        self.taxonomy = taxonomy
        self.encoder = encoder
        self._emb: dict[int, np.ndarray] = {}
        self.threshold = self._reference_threshold() if threshold is None else float(threshold)

    def _embedding(self, entry: QuestionEntry) -> np.ndarray:
        if entry.index not in self._emb:
            self._emb[entry.index] = self.encoder.token_embeddings(normalize_text(entry.text))
        return self._emb[entry.index]

    def _reference_threshold(self) -> float:
        base = self.taxonomy.entries
        embs = [self._embedding(e) for e in base]
        best = []
        for i, ei in enumerate(embs):
            best.append(max(greedy_match_f1(ei, ej) for j, ej in enumerate(embs) if j != i))
        return float(np.mean(best))

    def similarities(self, text: str) -> list[tuple[QuestionEntry, float]]:
        cand = self.encoder.token_embeddings(normalize_text(text))
        return [(e, greedy_match_f1(cand, self._embedding(e))) for e in self.taxonomy.all_entries()]

    def map(self, text: str) -> tuple[QuestionEntry, float]:
        exact = self.taxonomy.lookup_by_text(text)
        if exact is not None:
            return exact, 1.0
        scored = self.similarities(text)
        entry, best = max(scored, key=lambda p: (p[1], -p[0].index))
        if best >= self.threshold:
            return entry, best
        new = self.taxonomy.extend(text, infer_role(text))
        log.info("appended unseen question %r as entry %d (best similarity %.3f)", text, new.index, best)
        return new, best


def map_unseen_question(
    text: str,
    taxonomy: QuestionTaxonomy,
    encoder: TextEncoder,
    threshold: Optional[float] = None,
) -> tuple[QuestionEntry, float]:
    return QuestionMatcher(taxonomy, encoder, threshold).map(text)


# ---------------------------------------------------------------------------
# segmentation and hierarchy


def segment_transcript(
    turns: Sequence[TranscriptTurn],
    taxonomy: QuestionTaxonomy,
    matcher: Optional[QuestionMatcher] = None,
) -> Segmentation:
    """Open a segment at every recognised question; collect participant turns until the next one.

    Without a ``matcher`` only exact (normalised) catalogue matches open
    segments. With one, question-like interviewer turns are mapped or
    appended as unseen questions.
    """
    if not turns:
        raise TranscriptError("empty transcript")
    if not any(t.speaker is Speaker.INTERVIEWER for t in turns):
        raise TranscriptError("transcript has no interviewer turns")

    segments: list[QASegment] = []
    unmatched: list[TranscriptTurn] = []
    current: Optional[tuple[TranscriptTurn, QuestionEntry, float]] = None
    answers: list[TranscriptTurn] = []

    def close():
        if current is None:
            return
        q, entry, sim = current
        span = (answers[0].start_time, answers[-1].end_time) if answers else (q.end_time, q.end_time)
        segments.append(QASegment(q.text, tuple(answers), (q.start_time, q.end_time), span, entry, sim))

    for turn in turns:
        if turn.speaker is Speaker.PARTICIPANT:
            if current is not None:
                answers.append(turn)
            continue
        entry = taxonomy.lookup_by_text(turn.text)
        sim = 1.0
        if entry is None and matcher is not None and looks_like_question(turn.text):
            entry, sim = matcher.map(turn.text)
        if entry is None:
            unmatched.append(turn)
            continue
        close()
        current, answers = (turn, entry, sim), []
    close()

    if not segments:
        texts = [t.text for t in unmatched]
        raise TranscriptError(f"no catalogue questions matched; unmatched interviewer utterances: {texts}")
    return Segmentation(segments, unmatched)


def assign_hierarchy(segments: Sequence[QASegment]) -> list[HierarchicalPosition]:
    positions: list[HierarchicalPosition] = []
    for seg in segments:
        entry = seg.matched_entry
        if entry.role is Role.PRIMARY:
            pos = HierarchicalPosition(entry.index, Role.PRIMARY, entry.index, 0)
        elif positions:
            prev = positions[-1]
            pos = HierarchicalPosition(entry.index, Role.FOLLOW_UP, prev.effective_topic_slot, prev.chain_depth + 1)
        else:
            log.warning("follow-up question %r opens the interview; treating as orphan", seg.question_text)
            pos = HierarchicalPosition(entry.index, Role.FOLLOW_UP, entry.index, 1, orphan=True)
        positions.append(pos)
    return positions


def structure_interview(
    participant_id: str,
    turns: Sequence[TranscriptTurn],
    taxonomy: QuestionTaxonomy,
    label: Optional[Label] = None,
    matcher: Optional[QuestionMatcher] = None,
) -> StructuredInterview:
    seg = segment_transcript(turns, taxonomy, matcher)
    positions = assign_hierarchy(seg.segments)
    return StructuredInterview(participant_id, list(zip(seg.segments, positions)), label, seg.unmatched)


def build_slot_layout(
    interview: StructuredInterview,
    taxonomy: Optional[QuestionTaxonomy] = None,
    n_slots: Optional[int] = None,
) -> SlotLayout:
    """Place each segment in the slot of its own question index; first occurrence wins.

    ``n_slots`` defaults to 85, widened to cover any extension entries of
    ``taxonomy``.
    """
    if n_slots is None:
        n_slots = max([N_QUESTIONS] + [e.index for e in (taxonomy.extension_entries if taxonomy else ())])
    slots: list[Optional[tuple[QASegment, HierarchicalPosition]]] = [None] * n_slots
    collisions = []
    for seg, pos in interview.segments:
        k = pos.slot_index - 1
        if not 0 <= k < n_slots:
            raise TranscriptError(f"slot {pos.slot_index} outside layout of {n_slots} slots")
        if slots[k] is None:
            slots[k] = (seg, pos)
        else:
            log.info("slot %d asked again (%r); keeping first occurrence", pos.slot_index, seg.question_text)
            collisions.append((pos.slot_index, seg))
    return SlotLayout(slots, collisions)


# ---------------------------------------------------------------------------
# JSON form


def _turn_dict(t: TranscriptTurn) -> dict:
    return {"speaker": t.speaker.value, "start": t.start_time, "end": t.end_time, "text": t.text}


def _turn_from(d: dict) -> TranscriptTurn:
    return TranscriptTurn(Speaker(d["speaker"]), float(d["start"]), float(d["end"]), d["text"])


def interview_to_dict(interview: StructuredInterview, layout: Optional[SlotLayout] = None) -> dict:
    out = {
        "participant_id": interview.participant_id,
        "label": interview.label.value if interview.label else None,
        "segments": [
            {
                "question_text": seg.question_text,
                "question_span": list(seg.question_span),
                "answer_span": list(seg.answer_span),
                "answer_turns": [_turn_dict(t) for t in seg.answer_turns],
                "matched_index": seg.matched_entry.index,
                "matched_text": seg.matched_entry.text,
                "similarity": seg.similarity,
                "position": pos.to_dict(),
            }
            for seg, pos in interview.segments
        ],
        "unmatched": [_turn_dict(t) for t in interview.unmatched],
    }
    if layout is not None:
        out["slot_layout"] = {
            "n_slots": len(layout),
            "occupied": [k + 1 for k, s in enumerate(layout.slots) if s is not None],
            "collisions": [{"slot": k, "question_text": s.question_text} for k, s in layout.collisions],
        }
    return out


def interview_from_dict(d: dict, taxonomy: QuestionTaxonomy) -> StructuredInterview:
    segments = []
    for s in d["segments"]:
        try:
            entry = taxonomy[int(s["matched_index"])]
        except KeyError:
            # unseen question appended in another session
            pos = s["position"]
            entry = taxonomy.extend(s["matched_text"], Role(pos["role"]))
        seg = QASegment(
            s["question_text"],
            tuple(_turn_from(t) for t in s["answer_turns"]),
            tuple(s["question_span"]),
            tuple(s["answer_span"]),
            entry,
            float(s["similarity"]),
        )
        segments.append((seg, HierarchicalPosition.from_dict(s["position"])))
    label = Label(d["label"]) if d.get("label") else None
    return StructuredInterview(d["participant_id"], segments, label, [_turn_from(t) for t in d.get("unmatched", [])])


def iter_participant_turns(segments: Iterable[QASegment]):
    for seg in segments:
        yield from seg.answer_turns
