"""
RxExtract v1.0.0 - Lexicon Matcher
Hybrid Levenshtein / fuzzy matching of recognized text against a medicine lexicon

Decision order:
1. Levenshtein gate: best S_L over the lexicon; accept if S_L >= T_L
2. Fuzzy fallback: best S_F (Ratcliff/Obershelp); accept if S_F >= T_F
3. Otherwise the sentinel "no"

Ties: higher score, then smaller edit distance, then lexicographic order.
Comparison happens on normalized forms; display keeps the lexicon's original form.
"""

import csv
import io
import logging
import re
from dataclasses import dataclass, field
from difflib import SequenceMatcher
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import editdistance

from app.errors import ConfigurationError, FormatError

logger = logging.getLogger('rxextract.matcher')

NO_MATCH = 'no'

STAGE_LEVENSHTEIN = 'levenshtein'
STAGE_FUZZY = 'fuzzy'
STAGE_NONE = 'none'

# Quick-ratio bounds are compared with this slack so pruning never drops a tie
_PRUNE_MARGIN = 1e-9

_WHITESPACE = re.compile(r'\s+')
_OUT_OF_VOCAB = re.compile(r'[^a-z0-9 \-]')


def normalize_token(raw: str) -> str:
    """Lowercase, drop characters the recognizer cannot emit, collapse whitespace, trim."""
    text = _WHITESPACE.sub(' ', raw.lower())
    text = _OUT_OF_VOCAB.sub('', text)
    return _WHITESPACE.sub(' ', text).strip()


# ==================== LEXICON ====================

@dataclass(frozen=True)
class Lexicon:
    """Ordered, deduplicated normalized entries plus their display forms."""
    entries: Tuple[str, ...]
    display: Dict[str, str] = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, entry: str) -> bool:
        return entry in self.display

    def __iter__(self):
        return iter(self.entries)

    def display_form(self, entry: str) -> str:
        return self.display.get(entry, entry)

    @classmethod
    def from_entries(cls, items: Iterable[Union[str, Tuple[str, str]]]) -> 'Lexicon':
        """
        Build from raw names or (name, display) pairs. Entries that
        normalize to nothing are skipped; later duplicates are dropped.
        """
        entries: List[str] = []
        display: Dict[str, str] = {}
        for item in items:
            raw, shown = (item, item) if isinstance(item, str) else item
            entry = normalize_token(raw)
            if not entry:
                continue
            if entry in display:
                logger.warning(f"Duplicate lexicon entry dropped: {raw!r}")
                continue
            entries.append(entry)
            display[entry] = shown.strip() or raw
        return cls(entries=tuple(entries), display=display)


def parse_lexicon(text: str, source: str = '<string>') -> Lexicon:
    """
    Parse lexicon CSV: one entry per line, optional second column with the
    display form, '#' comment lines and blank lines ignored.
    """
    items: List[Tuple[str, str]] = []
    seen: Dict[str, int] = {}
    lines = text.splitlines()
    for line_no, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith('#'):
            continue
        try:
            row = next(csv.reader(io.StringIO(line), strict=True))
        except csv.Error as e:
            raise FormatError(f"{source}: malformed CSV row: {e}", line=line_no)
        if len(row) > 2:
            raise FormatError(f"{source}: expected 1 or 2 columns, got {len(row)}", line=line_no)
        name = row[0]
        shown = row[1].strip() if len(row) == 2 and row[1].strip() else name.strip()
        entry = normalize_token(name)
        if not entry:
            logger.warning(f"{source}:{line_no}: entry {name!r} is empty after normalization, skipped")
            continue
        if entry in seen:
            logger.warning(f"{source}:{line_no}: duplicate entry {entry!r} (first on line {seen[entry]}), dropped")
            continue
        seen[entry] = line_no
        items.append((entry, shown))

    lexicon = Lexicon(entries=tuple(e for e, _ in items), display=dict(items))
    if not lexicon.entries:
        raise ConfigurationError(f"{source}: lexicon is empty")
    return lexicon


def load_lexicon(path: Union[str, Path]) -> Lexicon:
    """Load a UTF-8 lexicon CSV file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"lexicon file not found: {path}")
    try:
        text = path.read_text(encoding='utf-8')
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: not valid UTF-8 ({e.reason})", offset=e.start)
    lexicon = parse_lexicon(text, source=str(path))
    logger.info(f"Loaded {len(lexicon)} lexicon entries from {path}")
    return lexicon


# ==================== SIMILARITY ====================

def levenshtein(w1: str, w2: str) -> int:
    """Minimum single-character insertions, deletions and substitutions."""
    return int(editdistance.eval(w1, w2))


def _similarity_from_distance(distance: int, w1: str, w2: str) -> float:
    longest = max(len(w1), len(w2))
    if longest == 0:
        return 100.0
    return 100.0 * (longest - distance) / longest


def similarity_l(w1: str, w2: str) -> float:
    """S_L = (1 - D / max(|w1|, |w2|)) x 100; two empty strings score 100."""
    return _similarity_from_distance(levenshtein(w1, w2), w1, w2)


def _matching_characters(w1: str, w2: str) -> int:
    matcher = SequenceMatcher(None, w1, w2, autojunk=False)
    return sum(block.size for block in matcher.get_matching_blocks())


def fuzzy_ratio(w1: str, w2: str) -> float:
    """
    Ratcliff/Obershelp similarity 200 * M / (|w1| + |w2|), where M counts the
    characters in the matching blocks (longest common block first, then the
    pieces to its left and right). Two empty strings score 100.
    """
    total = len(w1) + len(w2)
    if total == 0:
        return 100.0
    return 200.0 * _matching_characters(w1, w2) / total


def _require_entries(lexicon: Lexicon):
    if not lexicon.entries:
        raise ConfigurationError("lexicon is empty")


def best_match(w1: str, lexicon: Lexicon) -> Tuple[str, float]:
    """
    Entry with the highest fuzzy ratio. Ties go to the smaller Levenshtein
    distance, then to the lexicographically smaller entry.

    Returns:
        (entry, S_F)
    """
    _require_entries(lexicon)
    best_key: Optional[Tuple[float, int, str]] = None
    best_score = -1.0

    for entry in lexicon.entries:
        total = len(w1) + len(entry)
        if total and best_key is not None:
            # Upper bounds on the ratio; skip entries that can neither beat nor tie the leader
            bound = 200.0 * min(len(w1), len(entry)) / total
            if bound + _PRUNE_MARGIN < best_score:
                continue
            quick = SequenceMatcher(None, w1, entry, autojunk=False).quick_ratio() * 100.0
            if quick + _PRUNE_MARGIN < best_score:
                continue
        score = fuzzy_ratio(w1, entry)
        key = (-score, levenshtein(w1, entry), entry)
        if best_key is None or key < best_key:
            best_key = key
            best_score = score
    return best_key[2], best_score


@dataclass(frozen=True)
class MatcherConfig:
    t_l: float = 70.0
    t_f: float = 80.0

    def validate(self):
        for name, value in (('T_L', self.t_l), ('T_F', self.t_f)):
            if not 0.0 <= value <= 100.0:
                raise ConfigurationError(f"{name} = {value} outside [0, 100]")


@dataclass(frozen=True)
class MatchDecision:
    """
    Outcome of the two-stage matcher.

    outcome is the matched normalized entry or "no"; stage names the gate
    that accepted it (levenshtein | fuzzy | none). When the Levenshtein gate
    accepts, s_f is the fuzzy ratio of the accepted entry.
    """
    query: str
    outcome: str
    s_l: float
    s_f: float
    stage: str
    display: Optional[str] = None

    @property
    def matched(self) -> bool:
        return self.stage != STAGE_NONE

    @property
    def hypothesis(self) -> str:
        """Text scored as the post-matching hypothesis; "no" counts as empty."""
        return self.outcome if self.matched else ''

    def to_record(self) -> dict:
        return {
            'query': self.query,
            'outcome': self.outcome,
            'display': self.display,
            's_l': round(self.s_l, 4),
            's_f': round(self.s_f, 4),
            'stage': self.stage,
        }


def best_levenshtein(w1: str, lexicon: Lexicon) -> Tuple[str, float, int]:
    """Entry with the highest S_L; ties by smaller distance, then lexicographic."""
    _require_entries(lexicon)
    best: Optional[Tuple[float, int, str]] = None
    for entry in lexicon.entries:
        distance = levenshtein(w1, entry)
        key = (-_similarity_from_distance(distance, w1, entry), distance, entry)
        if best is None or key < best:
            best = key
    return best[2], -best[0], best[1]


def decide(w1: str, lexicon: Lexicon, config: MatcherConfig = MatcherConfig()) -> MatchDecision:
    """
    Levenshtein gate first, fuzzy fallback second, "no" otherwise.

    Args:
        w1: raw recognized text; normalized before matching
        lexicon: medicine lexicon
        config: thresholds T_L and T_F

    Returns:
        MatchDecision
    """
    _require_entries(lexicon)
    config.validate()
    query = normalize_token(w1)
    if not query:
        return MatchDecision(query=query, outcome=NO_MATCH, s_l=0.0, s_f=0.0, stage=STAGE_NONE)

    entry, s_l, _ = best_levenshtein(query, lexicon)
    if s_l >= config.t_l:
        return MatchDecision(query=query, outcome=entry, s_l=s_l, s_f=fuzzy_ratio(query, entry),
                             stage=STAGE_LEVENSHTEIN, display=lexicon.display_form(entry))

    fuzzy_entry, s_f = best_match(query, lexicon)
    if s_f >= config.t_f:
        return MatchDecision(query=query, outcome=fuzzy_entry, s_l=s_l, s_f=s_f,
                             stage=STAGE_FUZZY, display=lexicon.display_form(fuzzy_entry))

    return MatchDecision(query=query, outcome=NO_MATCH, s_l=s_l, s_f=s_f, stage=STAGE_NONE)
