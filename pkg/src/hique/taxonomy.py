"""The fixed catalogue of 85 interviewer questions used to lay out an interview.

Questions 1-66 are primary (topic-opening) questions and 67-85 are follow-up
probes. Follow-ups carry the placeholder topic code ``follow_up``; their topic
is inherited from the preceding question when an interview is structured.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

from .errors import TaxonomyError

N_QUESTIONS = 85
N_PRIMARY = 66
N_FOLLOW_UP = 19
FOLLOW_UP_CODE = "follow_up"

_TERMINAL_PUNCT = ".,;:!?\"'()[]…-–—"
_WS = re.compile(r"\s+")


class Role(str, Enum):
    PRIMARY = "primary"
    FOLLOW_UP = "follow_up"


@dataclass(frozen=True)
class QuestionEntry:
    index: int
    text: str
    topic_code: str
    role: Role

    @property
    def is_primary(self) -> bool:
        return self.role is Role.PRIMARY


def normalize_text(text: str) -> str:
    """Case-fold, collapse whitespace and strip surrounding punctuation.

    Typographic apostrophes are folded to ASCII so that transcripts written
    with ``'`` match catalogue entries written with ``’``.
    """
    text = text.replace("’", "'").replace("‘", "'").lower()
    text = _WS.sub(" ", text).strip()
    return text.strip(_TERMINAL_PUNCT + " ")


class QuestionTaxonomy:
    """Ordered base entries plus runtime extension entries (index > 85)."""

    def __init__(self, entries: Iterable[QuestionEntry], extension_entries: Iterable[QuestionEntry] = ()):
        self._entries = tuple(entries)
        self._extensions: list[QuestionEntry] = []
        self._lock = threading.Lock()
        validate_entries(self._entries)
        self._by_text = {normalize_text(e.text): e for e in self._entries}
        self._by_index = {e.index: e for e in self._entries}
        for entry in extension_entries:
            self._add_extension(entry)

    @property
    def entries(self) -> tuple[QuestionEntry, ...]:
        return self._entries

    @property
    def extension_entries(self) -> tuple[QuestionEntry, ...]:
        return tuple(self._extensions)

    def all_entries(self) -> tuple[QuestionEntry, ...]:
        return self._entries + tuple(self._extensions)

    def __len__(self) -> int:
        return len(self._entries) + len(self._extensions)

    def __iter__(self) -> Iterator[QuestionEntry]:
        return iter(self.all_entries())

    def __getitem__(self, index: int) -> QuestionEntry:
        try:
            return self._by_index[index]
        except KeyError:
            raise KeyError(f"no question with index {index}") from None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QuestionTaxonomy):
            return NotImplemented
        return self.all_entries() == other.all_entries()

    def lookup_by_text(self, text: str) -> Optional[QuestionEntry]:
        return self._by_text.get(normalize_text(text))

    def extend(self, text: str, role: Role, topic_code: Optional[str] = None) -> QuestionEntry:
        """Append a previously unseen question and return its new entry."""
        with self._lock:
            existing = self.lookup_by_text(text)
            if existing is not None:
                return existing
            index = max(self._by_index) + 1
            if topic_code is None:
                topic_code = f"extra_{index}" if role is Role.PRIMARY else FOLLOW_UP_CODE
            entry = QuestionEntry(index, normalize_text(text), topic_code, role)
            self._add_extension(entry)
            return entry

    def _add_extension(self, entry: QuestionEntry) -> None:
        last = max(self._by_index)
        if entry.index <= last:
            raise TaxonomyError(
                f"extension index {entry.index} must exceed current last index {last}"
            )
        self._extensions.append(entry)
        self._by_index[entry.index] = entry
        self._by_text.setdefault(normalize_text(entry.text), entry)

    def to_tsv(self) -> str:
        lines = ["# index\trole\ttopic_code\ttext"]
        for e in self.all_entries():
            lines.append(f"{e.index}\t{e.role.value}\t{e.topic_code}\t{e.text}")
        return "\n".join(lines) + "\n"

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")


def validate_entries(entries: tuple[QuestionEntry, ...]) -> None:
    if len(entries) != N_QUESTIONS:
        raise TaxonomyError(f"expected {N_QUESTIONS} entries, found {len(entries)}")
    indexes = sorted(e.index for e in entries)
    if indexes != list(range(1, N_QUESTIONS + 1)):
        missing = sorted(set(range(1, N_QUESTIONS + 1)) - set(indexes))
        raise TaxonomyError(f"indexes must cover 1..{N_QUESTIONS} exactly once; missing {missing}")
    n_primary = sum(e.role is Role.PRIMARY for e in entries)
    n_follow = len(entries) - n_primary
    if (n_primary, n_follow) != (N_PRIMARY, N_FOLLOW_UP):
        raise TaxonomyError(
            f"expected {N_PRIMARY} primary / {N_FOLLOW_UP} follow-up questions, "
            f"found {n_primary} primary / {n_follow} follow-up"
        )
    codes = [e.topic_code for e in entries if e.role is Role.PRIMARY]
    if any(not c for c in (e.topic_code for e in entries)):
        raise TaxonomyError("empty topic code")
    dupes = sorted({c for c in codes if codes.count(c) > 1})
    if dupes:
        raise TaxonomyError(f"duplicate primary topic codes: {dupes}")


def parse_taxonomy(text: str, origin: str = "<string>") -> QuestionTaxonomy:
    base: list[QuestionEntry] = []
    extra: list[QuestionEntry] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise TaxonomyError(f"{origin}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        idx_s, role_s, code, qtext = parts
        try:
            index = int(idx_s)
            role = Role(role_s.strip())
        except ValueError as exc:
            raise TaxonomyError(f"{origin}:{lineno}: {exc}") from None
        if not qtext.strip():
            raise TaxonomyError(f"{origin}:{lineno}: empty question text")
        entry = QuestionEntry(index, qtext.strip(), code.strip(), role)
        (base if index <= N_QUESTIONS else extra).append(entry)
    base.sort(key=lambda e: e.index)
    return QuestionTaxonomy(base, extra)


def load_taxonomy(source: Union[str, Path, None] = None) -> QuestionTaxonomy:
    """Load from a TSV file, or the bundled catalogue when ``source`` is None/"builtin"."""
    if source is None or source == "builtin":
        text = resources.files("hique.data").joinpath("questions.tsv").read_text(encoding="utf-8")
        return parse_taxonomy(text, origin="builtin")
    path = Path(source)
    return parse_taxonomy(path.read_text(encoding="utf-8"), origin=str(path))
