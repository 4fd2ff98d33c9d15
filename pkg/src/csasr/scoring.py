"""Word alignment, WER, and transliteration-tolerant WER (T-WER)."""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import DataError, FormatError
from .text import Script, script_of

MATCH, SUB, DEL, INS = "match", "sub", "del", "ins"


@dataclass(frozen=True)
class EditOp:
    op: str
    ref: str = None
    hyp: str = None


@dataclass
class Alignment:
    ops: list

    def count(self, kind):
        return sum(1 for o in self.ops if o.op == kind)

    @property
    def matches(self):
        return self.count(MATCH)

    @property
    def subs(self):
        return self.count(SUB)

    @property
    def dels(self):
        return self.count(DEL)

    @property
    def ins(self):
        return self.count(INS)

    @property
    def cost(self):
        return len(self.ops) - self.matches


def _words(x):
    return x.split() if isinstance(x, str) else list(x)


def align(ref, hyp):
    """Minimum unit-cost alignment of two word sequences.

    Among equal-cost alignments the backtrace prefers match, then
    substitution, then deletion, then insertion.
    """
    ref, hyp = _words(ref), _words(hyp)
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        d[i][0] = i
    for j in range(1, m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        r, row, up = ref[i - 1], d[i], d[i - 1]
        for j in range(1, m + 1):
            diag = up[j - 1] + (r != hyp[j - 1])
            row[j] = min(diag, up[j] + 1, row[j - 1] + 1)

    ops, i, j = [], n, m
    while i or j:
        cur = d[i][j]
        if i and j and ref[i - 1] == hyp[j - 1] and d[i - 1][j - 1] == cur:
            ops.append(EditOp(MATCH, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i and j and d[i - 1][j - 1] + 1 == cur:
            ops.append(EditOp(SUB, ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i and d[i - 1][j] + 1 == cur:
            ops.append(EditOp(DEL, ref[i - 1], None))
            i -= 1
        else:
            ops.append(EditOp(INS, None, hyp[j - 1]))
            j -= 1
    ops.reverse()
    return Alignment(ops)


class TransliterationLexicon:
    """English word to the set of its accepted native-script spellings."""

    def __init__(self, entries=None):
        self.entries = {}
        for eng, natives in (entries or {}).items():
            for nat in [natives] if isinstance(natives, str) else natives:
                self.add(eng, nat)

    def add(self, english, native):
        if script_of(english) != Script.LATIN:
            raise DataError(f"lexicon key {english!r} is not Latin script")
        if script_of(native) not in (Script.DEVANAGARI, Script.BENGALI):
            raise DataError(f"lexicon value {native!r} is not Devanagari or Bengali script")
        self.entries.setdefault(english, set()).add(native)

    def accepts(self, ref_word, hyp_word):
        return hyp_word in self.entries.get(ref_word, ())

    def __len__(self):
        return len(self.entries)

    @classmethod
    def load(cls, path):
        lex = cls()
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError("expected english<TAB>native", lineno, unit="line")
            lex.add(parts[0].strip(), parts[1].strip())
        return lex


@dataclass
class UttScore:
    utt_id: str
    n: int
    s: int
    d: int
    i: int
    forgiven: int = 0
    missing: bool = False
    ref: str = ""
    hyp: str = ""


def _forgiven(alignment, lexicon):
    if lexicon is None:
        return 0
    return sum(
        1
        for o in alignment.ops
        if o.op == SUB and script_of(o.ref) == Script.LATIN and lexicon.accepts(o.ref, o.hyp)
    )


def _pairs(refs, hyps):
    """Yield ``(utt_id, ref, hyp or None)`` pairing by id (mappings) or by position."""
    if isinstance(refs, dict):
        hyps = hyps if isinstance(hyps, dict) else dict(hyps)
        for uid, ref in refs.items():
            yield uid, ref, hyps.get(uid)
    else:
        refs, hyps = list(refs), list(hyps)
        if len(refs) != len(hyps):
            raise DataError(f"{len(refs)} references but {len(hyps)} hypotheses")
        for k, (ref, hyp) in enumerate(zip(refs, hyps)):
            yield str(k), ref, hyp


def score_utterances(refs, hyps, lexicon=None):
    out = []
    for uid, ref, hyp in _pairs(refs, hyps):
        missing = hyp is None
        a = align(ref, [] if missing else hyp)
        out.append(UttScore(uid, len(_words(ref)), a.subs, a.dels, a.ins, _forgiven(a, lexicon),
                            missing, " ".join(_words(ref)), "" if missing else " ".join(_words(hyp))))
    return out


def _rate(errors, n):
    if n == 0:
        raise DataError("reference corpus contains no words")
    return 100.0 * errors / n


def wer(refs, hyps):
    """Corpus WER in percent; a reference without a hypothesis counts as all deletions."""
    scores = score_utterances(refs, hyps)
    return _rate(sum(u.s + u.d + u.i for u in scores), sum(u.n for u in scores))


def t_wer(refs, hyps, lexicon):
    """WER where an English reference word hypothesized in an accepted native spelling is correct."""
    scores = score_utterances(refs, hyps, lexicon)
    return _rate(sum(u.s - u.forgiven + u.d + u.i for u in scores), sum(u.n for u in scores))


@dataclass
class ScoreReport:
    n: int
    s: int
    d: int
    i: int
    forgiven: int
    wer: float
    t_wer: float
    missing: list
    extra: list
    utterances: list = field(repr=False)

    def to_dict(self):
        d = asdict(self)
        d["utterances"] = [asdict(u) for u in self.utterances]
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=1)

    def to_text(self):
        lines = [
            f"N={self.n} S={self.s} D={self.d} I={self.i} forgiven={self.forgiven}",
            f"WER={self.wer:.2f} T-WER={self.t_wer:.2f}",
        ]
        if self.missing:
            lines.append("MISSING " + " ".join(self.missing))
        if self.extra:
            lines.append("EXTRA " + " ".join(self.extra))
        lines.append("utt_id\tN\tS\tD\tI\tforgiven\tflag")
        for u in self.utterances:
            lines.append(f"{u.utt_id}\t{u.n}\t{u.s}\t{u.d}\t{u.i}\t{u.forgiven}\t{'missing' if u.missing else '-'}")
        return "\n".join(lines) + "\n"


def score_corpus(refs, hyps, lexicon=None):
    """Full report over ``{utt_id: text}`` mappings, flagging missing and unexpected ids."""
    scores = score_utterances(refs, hyps, lexicon)
    n = sum(u.n for u in scores)
    s, d, i = (sum(getattr(u, k) for u in scores) for k in "sdi")
    forgiven = sum(u.forgiven for u in scores)
    extra = sorted(set(hyps) - set(refs)) if isinstance(refs, dict) else []
    return ScoreReport(
        n, s, d, i, forgiven, _rate(s + d + i, n), _rate(s - forgiven + d + i, n),
        [u.utt_id for u in scores if u.missing], extra, scores,
    )
