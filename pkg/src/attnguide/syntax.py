"""Prompt tokenization and noun/verb pair extraction.

Prompts follow the benchmark template "a(n) <subject> is <motion> and a(n)
<subject> is <motion> ...".  Tagging falls back from template position to a
shipped lexicon to an "-ing after is" heuristic, so mild deviations from
the template still resolve.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from importlib import resources

from .errors import ExtractionError, InputError

NOUN = "NOUN"
VERB = "VERB"
OTHER = "OTHER"
SPECIAL = "SPECIAL"

_ARTICLES = {"a", "an", "the"}
_COPULAS = {"is", "are", "was", "were"}


@dataclass(frozen=True)
class Token:
    text: str
    index: int
    tag: str = OTHER


@dataclass
class TokenSequence:
    tokens: list

    def __iter__(self):
        return iter(self.tokens)

    def __len__(self):
        return len(self.tokens)

    def __getitem__(self, i):
        return self.tokens[i]

    @property
    def words(self):
        return [t.text for t in self.tokens]


@dataclass
class SyntaxPairs:
    """Noun/verb index pairs plus per-pair negative index sets."""

    pairs: list = field(default_factory=list)
    negatives: dict = field(default_factory=dict)

    def negatives_for(self, pair):
        return self.negatives[pair]


def _load_lexicon():
    text = resources.files("attnguide.data").joinpath("lexicon.txt").read_text()
    section, subjects, actions = None, set(), set()
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("["):
            section = line.strip("[]")
        elif section == "subjects":
            subjects.add(line)
        elif section == "actions":
            actions.add(line)
    return subjects, actions


_SUBJECTS, _ACTIONS = _load_lexicon()


def tokenize(prompt):
    """Whitespace-split, punctuation-stripped, lowercased tokens in order."""
    if not prompt or not prompt.strip():
        raise InputError("prompt is empty")
    words = []
    for raw in prompt.lower().split():
        word = raw.strip(string.punctuation)
        if word:
            words.append(word)
    if not words:
        raise InputError("prompt contains no words after normalization")
    return TokenSequence([Token(w, i) for i, w in enumerate(words)])


def _split_clauses(tokens):
    clauses, current = [], []
    for tok in tokens:
        if tok.text == "and":
            if current:
                clauses.append(current)
            current = []
        else:
            current.append(tok)
    if current:
        clauses.append(current)
    return clauses


def _find_noun(clause):
    # template position: word right after a leading article
    for k, tok in enumerate(clause[:-1]):
        if tok.text in _ARTICLES:
            nxt = clause[k + 1]
            if nxt.text not in _COPULAS:
                return nxt.index
    for tok in clause:
        if tok.text in _SUBJECTS:
            return tok.index
    # last resort: first word before the copula that is not an article
    for tok in clause:
        if tok.text in _COPULAS:
            break
        if tok.text not in _ARTICLES:
            return tok.index
    return None


def _find_verb(clause, noun_index):
    for k, tok in enumerate(clause):
        if tok.text in _COPULAS and k + 1 < len(clause):
            nxt = clause[k + 1]
            if nxt.text in _ACTIONS or nxt.text.endswith("ing"):
                return nxt.index
    for tok in clause:
        if tok.index != noun_index and (tok.text in _ACTIONS or tok.text.endswith("ing")):
            return tok.index
    return None


def extract_pairs(tokens, negatives_exclude_other_pairs=False):
    """One (noun, verb) pair per "and"-separated clause, with negatives.

    By default U_i is every other token index (a literal reading of "other
    words"), so members of other pairs repel each other; set
    ``negatives_exclude_other_pairs`` to drop them from U_i.
    """
    clauses = _split_clauses(tokens)
    pairs = []
    for clause in clauses:
        noun = _find_noun(clause)
        verb = _find_verb(clause, noun)
        if noun is None or verb is None or noun == verb:
            words = " ".join(t.text for t in clause)
            raise ExtractionError(f"cannot resolve a noun/verb pair in clause: '{words}'")
        pairs.append((noun, verb))

    used = [i for p in pairs for i in p]
    if len(set(used)) != len(used):
        raise ExtractionError("a token index appears in two pairs")

    all_indices = {t.index for t in tokens if t.tag != SPECIAL}
    pair_members = set(used)
    result = SyntaxPairs(pairs=pairs)
    for pair in pairs:
        excluded = set(pair) | (pair_members if negatives_exclude_other_pairs else set(pair))
        result.negatives[pair] = frozenset(sorted(all_indices - excluded))
    return result


def tagged(tokens, pairs):
    """Re-tag a TokenSequence from extracted pairs (NOUN/VERB/OTHER)."""
    nouns = {p[0] for p in pairs.pairs}
    verbs = {p[1] for p in pairs.pairs}
    out = []
    for tok in tokens:
        tag = NOUN if tok.index in nouns else VERB if tok.index in verbs else tok.tag
        out.append(Token(tok.text, tok.index, tag))
    return TokenSequence(out)
