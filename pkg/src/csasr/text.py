"""Transcript normalization for mixed Latin/Indic text and a BPE tokenizer."""

import enum
import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ContractError, DataError, FormatError

KEPT_SYMBOLS = frozenset("_/=+%@")
WORD_END = "</w>"
UNK_MARKER = "<unk>"
SPECIALS = ("<blank>", "<unk>", "<pad>", "<sos>", "<eos>")


class Script(str, enum.Enum):
    LATIN = "Latin"
    DEVANAGARI = "Devanagari"
    BENGALI = "Bengali"
    OTHER = "Other"
    DIGIT = "Digit"
    SYMBOL = "Symbol"
    MIXED = "Mixed"


def _letter_script(ch):
    cp = ord(ch)
    if 0x0900 <= cp <= 0x097F:
        return Script.DEVANAGARI
    if 0x0980 <= cp <= 0x09FF:
        return Script.BENGALI
    if ("a" <= ch <= "z") or ("A" <= ch <= "Z") or unicodedata.name(ch, "").startswith("LATIN"):
        return Script.LATIN
    return Script.OTHER


def char_class(ch, kept=KEPT_SYMBOLS):
    """Coarse class of one character: a Script, ``"mark"``, ``"space"`` or None (dropped)."""
    if ch.isspace():
        return "space"
    if ch in kept:
        return Script.SYMBOL
    cat = unicodedata.category(ch)
    if cat == "Nd":
        return Script.DIGIT
    if cat[0] == "L":
        return _letter_script(ch)
    if cat[0] == "M" or ch in "‌‍":
        return "mark"
    return None


def script_of(word):
    if not word:
        raise ContractError("script_of needs a non-empty word")
    letters, digits, other = set(), False, False
    for ch in word:
        c = char_class(ch)
        if c == "mark":
            continue
        if c == Script.DIGIT:
            digits = True
        elif isinstance(c, Script) and c != Script.SYMBOL:
            letters.add(c)
        else:
            other = True
    if len(letters) > 1:
        return Script.MIXED
    if letters:
        return letters.pop()
    if digits and not other:
        return Script.DIGIT
    return Script.SYMBOL


@dataclass(frozen=True)
class NormalizationRules:
    kept_symbols: frozenset = KEPT_SYMBOLS
    lowercase_latin: bool = True
    split_script_boundaries: bool = True
    split_digit_boundaries: bool = True


def normalize_transcript(raw, rules=NormalizationRules()):
    """Clean one transcript line.

    Punctuation outside ``rules.kept_symbols`` is deleted, Latin letters are
    lowercased, and a space separates runs of different scripts, letters from
    digits, and every kept symbol from its neighbours. Combining marks stay
    attached to the preceding character.
    """
    out = []
    prev = "space"
    for ch in raw:
        c = char_class(ch, rules.kept_symbols)
        if c is None:
            continue
        if c == "space":
            if prev != "space":
                out.append(" ")
            prev = "space"
            continue
        if c == "mark":
            if prev == "space" or prev == Script.SYMBOL:
                # orphan mark: classify by its own block
                c = _letter_script(ch)
            else:
                out.append(ch)
                continue
        if c == Script.LATIN and rules.lowercase_latin:
            ch = ch.lower()
        if prev != "space" and _boundary(prev, c, rules):
            out.append(" ")
        out.append(ch)
        prev = c
    return "".join(out).strip()


def _boundary(a, b, rules):
    if a == Script.SYMBOL or b == Script.SYMBOL:
        return True
    if a == b:
        return False
    if Script.DIGIT in (a, b):
        return rules.split_digit_boundaries
    return rules.split_script_boundaries


# -- BPE -------------------------------------------------------------------

@dataclass
class TokenSequence:
    ids: list
    framed: bool = False

    def __len__(self):
        return len(self.ids)


@dataclass
class BpeModel:
    merges: list
    vocab: dict
    specials: tuple = SPECIALS
    _ranks: dict = field(default=None, init=False, repr=False)
    _inv: list = field(default=None, init=False, repr=False)
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self._ranks = {tuple(p): i for i, p in enumerate(self.merges)}
        self._inv = [None] * len(self.vocab)
        for tok, i in self.vocab.items():
            self._inv[i] = tok
        if None in self._inv:
            raise DataError("vocabulary ids must be dense from 0")

    def __len__(self):
        return len(self.vocab)

    @property
    def blank(self):
        return self.vocab["<blank>"]

    @property
    def unk(self):
        return self.vocab["<unk>"]

    @property
    def pad(self):
        return self.vocab["<pad>"]

    @property
    def sos(self):
        return self.vocab["<sos>"]

    @property
    def eos(self):
        return self.vocab["<eos>"]

    def token(self, i):
        return self._inv[i]

    def _segment(self, word):
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        syms = list(word) + [WORD_END]
        while len(syms) > 1:
            best, best_rank = None, None
            for i in range(len(syms) - 1):
                r = self._ranks.get((syms[i], syms[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best is None:
                break
            pair = (syms[best], syms[best + 1])
            merged, i = [], 0
            while i < len(syms):
                if i < len(syms) - 1 and (syms[i], syms[i + 1]) == pair:
                    merged.append(syms[i] + syms[i + 1])
                    i += 2
                else:
                    merged.append(syms[i])
                    i += 1
            syms = merged
        self._cache[word] = syms
        return syms

    def encode(self, text, frame=False):
        ids = []
        for word in text.split():
            ids.extend(self.vocab.get(s, self.unk) for s in self._segment(word))
        if frame:
            ids = [self.sos] + ids + [self.eos]
        return TokenSequence(ids, frame)

    def decode(self, seq):
        ids = seq.ids if isinstance(seq, TokenSequence) else list(seq)
        skip = {self.blank, self.pad, self.sos, self.eos}
        parts = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self._inv):
                raise ContractError(f"token id {i} outside vocabulary of {len(self._inv)}")
            if i in skip:
                continue
            parts.append(UNK_MARKER if i == self.unk else self._inv[i])
        return " ".join("".join(parts).replace(WORD_END, " ").split())

    def save(self, path):
        lines = [f"csasr-bpe 1 {len(self.vocab)}", "specials\t" + "\t".join(self.specials),
                 f"merges {len(self.merges)}"]
        lines += [f"{a}\t{b}" for a, b in self.merges]
        lines.append(f"vocab {len(self.vocab)}")
        lines += [f"{i}\t{self._inv[i]}" for i in range(len(self._inv))]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        try:
            magic, version, size = lines[0].split(" ")
            if magic != "csasr-bpe" or version != "1":
                raise FormatError("not a BPE model file", 1, unit="line")
            specials = tuple(lines[1].split("\t")[1:])
            n_merges = int(lines[2].split(" ")[1])
            merges = [tuple(l.split("\t")) for l in lines[3 : 3 + n_merges]]
            pos = 3 + n_merges
            n_vocab = int(lines[pos].split(" ")[1])
            vocab = {}
            for k, l in enumerate(lines[pos + 1 : pos + 1 + n_vocab]):
                i, tok = l.split("\t")
                vocab[tok] = int(i)
        except (ValueError, IndexError) as e:
            raise FormatError(f"malformed BPE model file: {e}") from e
        if len(vocab) != int(size) or any(len(m) != 2 for m in merges):
            raise FormatError("BPE model header does not match body")
        return cls(merges, vocab, specials)


def bpe_train(corpus, vocab_size):
    """Learn merges greedily by pair frequency.

    Ties go to the lexicographically smallest pair. Training stops when the
    vocabulary reaches ``vocab_size`` or no adjacent pair occurs twice.
    """
    words = Counter()
    for line in corpus:
        words.update(line.split())
    if not words:
        raise DataError("cannot train BPE on an empty corpus")
    chars = sorted({c for w in words for c in w} | {WORD_END})
    base = len(SPECIALS) + len(chars)
    if vocab_size < base:
        raise DataError(f"vocab_size {vocab_size} smaller than the {base} base symbols")

    seqs = [list(w) + [WORD_END] for w in words]
    freq = [words[w] for w in words]
    pair_counts = Counter()
    where = defaultdict(set)
    for k, s in enumerate(seqs):
        for p in zip(s, s[1:]):
            pair_counts[p] += freq[k]
            where[p].add(k)

    merges = []
    while base + len(merges) < vocab_size and pair_counts:
        pair, count = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if count < 2:
            break
        merges.append(pair)
        joined = pair[0] + pair[1]
        for k in sorted(where.pop(pair, ())):
            s = seqs[k]
            for p in zip(s, s[1:]):
                pair_counts[p] -= freq[k]
                if pair_counts[p] <= 0:
                    del pair_counts[p]
            new, i = [], 0
            while i < len(s):
                if i < len(s) - 1 and s[i] == pair[0] and s[i + 1] == pair[1]:
                    new.append(joined)
                    i += 2
                else:
                    new.append(s[i])
                    i += 1
            seqs[k] = new
            for p in zip(new, new[1:]):
                pair_counts[p] += freq[k]
                where[p].add(k)
        pair_counts.pop(pair, None)

    vocab = {tok: i for i, tok in enumerate(SPECIALS)}
    for tok in chars + [a + b for a, b in merges]:
        vocab.setdefault(tok, len(vocab))
    return BpeModel(merges, vocab)
