"""Word-level backoff n-gram language models in ARPA format.

Estimation is either plain maximum likelihood or interpolated modified
Kneser-Ney with three discounts per order taken from count-of-counts.
"""

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, DataError, FormatError

log = logging.getLogger(__name__)

BOS, EOS, UNK = "<s>", "</s>", "<unk>"
LOG_ZERO = -99.0
FALLBACK_DISCOUNT = 0.75


@dataclass
class NgramCounts:
    order: int
    counts: list  # counts[n - 1]: Counter of n-gram tuples
    vocab: set

    def __add__(self, other):
        if self.order != other.order:
            raise ConfigError("cannot merge counts of different orders")
        merged = [a + b for a, b in zip(self.counts, other.counts)]
        return NgramCounts(self.order, merged, self.vocab | other.vocab)


def count_ngrams(corpus, order, unk_threshold=0):
    """Count every n-gram up to ``order`` over ``<s> … </s>``-framed lines.

    Words seen at most ``unk_threshold`` times are replaced by ``<unk>``
    before counting.
    """
    if order < 1:
        raise ConfigError(f"n-gram order must be at least 1, got {order}")
    sentences = [line.split() for line in corpus]
    if unk_threshold > 0:
        freq = Counter(w for s in sentences for w in s)
        sentences = [[w if freq[w] > unk_threshold else UNK for w in s] for s in sentences]
    counts = [Counter() for _ in range(order)]
    for s in sentences:
        toks = [BOS] + s + [EOS]
        for n in range(1, order + 1):
            c = counts[n - 1]
            for i in range(len(toks) - n + 1):
                c[tuple(toks[i : i + n])] += 1
    vocab = {w for s in sentences for w in s} | {BOS, EOS, UNK}
    return NgramCounts(order, counts, vocab)


@dataclass
class ArpaModel:
    """Backoff model; ``probs[n-1]`` and ``backoffs[n-1]`` map n-gram tuples to log10 values."""

    order: int
    probs: list
    backoffs: list
    warnings: list = field(default_factory=list)

    @property
    def vocab(self):
        return {g[0] for g in self.probs[0]}

    def log10_prob(self, word, context=()):
        """log10 P(word | context) with standard ARPA backoff."""
        if (word,) not in self.probs[0]:
            word = UNK
        context = tuple(w if (w,) in self.probs[0] else UNK for w in context)
        context = context[len(context) - self.order + 1 :] if self.order > 1 else ()
        bow = 0.0
        while True:
            g = context + (word,)
            lp = self.probs[len(g) - 1].get(g)
            if lp is not None:
                return lp + bow
            if not context:
                return LOG_ZERO + bow
            bow += self.backoffs[len(context) - 1].get(context, 0.0)
            context = context[1:]

    def sentence_score(self, words):
        """Total log10 probability of ``words`` followed by ``</s>``, starting from ``<s>``."""
        hist = [BOS]
        total = 0.0
        for w in list(words) + [EOS]:
            total += self.log10_prob(w, tuple(hist[-(self.order - 1) :]) if self.order > 1 else ())
            hist.append(w)
        return total

    def perplexity(self, corpus):
        total, n = 0.0, 0
        for line in corpus:
            words = line.split()
            total += self.sentence_score(words)
            n += len(words) + 1
        if n == 0:
            raise DataError("perplexity of an empty corpus")
        return 10.0 ** (-total / n)

    def contexts(self):
        """Every stored n-gram below the top order, plus the empty context."""
        yield ()
        for n in range(1, self.order):
            yield from self.probs[n - 1]

    def truncated(self, order):
        """The same model restricted to its first ``order`` orders."""
        backoffs = [dict(b) for b in self.backoffs[:order]]
        if order < self.order:
            backoffs[order - 1] = {}
        return ArpaModel(order, [dict(p) for p in self.probs[:order]], backoffs)

    # -- ARPA text ----------------------------------------------------------

    def write(self, path):
        Path(path).write_text(self.to_arpa(), encoding="utf-8")

    def to_arpa(self):
        lines = ["", "\\data\\"]
        lines += [f"ngram {n}={len(self.probs[n - 1])}" for n in range(1, self.order + 1)]
        for n in range(1, self.order + 1):
            lines += ["", f"\\{n}-grams:"]
            bows = self.backoffs[n - 1]
            for g in sorted(self.probs[n - 1]):
                row = f"{_fmt(self.probs[n - 1][g])}\t{' '.join(g)}"
                if g in bows:
                    row += f"\t{_fmt(bows[g])}"
                lines.append(row)
        lines += ["", "\\end\\", ""]
        return "\n".join(lines)

    @classmethod
    def read(cls, path):
        return parse_arpa(Path(path).read_text(encoding="utf-8").split("\n"))


def _fmt(x):
    return f"{max(x, LOG_ZERO):.6f}"


def parse_arpa(lines):
    """Parse ARPA text; every error names its 1-based line number."""
    declared = {}
    pos = 0
    n_lines = len(lines)

    def bad(msg, k):
        return FormatError(msg, k + 1, unit="line")

    while pos < n_lines and lines[pos].strip() != "\\data\\":
        if lines[pos].strip():
            raise bad("expected \\data\\ header", pos)
        pos += 1
    if pos == n_lines:
        raise bad("missing \\data\\ header", pos - 1 if pos else 0)
    pos += 1
    while pos < n_lines and lines[pos].strip().startswith("ngram "):
        try:
            n, c = lines[pos].strip()[6:].split("=")
            declared[int(n)] = int(c)
        except ValueError:
            raise bad("malformed ngram count line", pos)
        pos += 1
    if not declared:
        raise bad("no ngram counts declared", pos)
    order = max(declared)
    if sorted(declared) != list(range(1, order + 1)):
        raise bad("ngram count orders are not contiguous from 1", pos)
    probs = [dict() for _ in range(order)]
    backoffs = [dict() for _ in range(order)]
    current = None
    ended = False
    for k in range(pos, n_lines):
        line = lines[k].strip()
        if not line:
            continue
        if line == "\\end\\":
            ended = True
            break
        if line.startswith("\\") and line.endswith("-grams:"):
            try:
                current = int(line[1:-7])
            except ValueError:
                raise bad("malformed section header", k)
            if current not in declared:
                raise bad(f"section for undeclared order {current}", k)
            continue
        if current is None:
            raise bad("n-gram entry outside any section", k)
        parts = line.split("\t") if "\t" in line else line.split()
        if "\t" in line:
            if len(parts) not in (2, 3):
                raise bad("expected log10prob<TAB>ngram[<TAB>backoff]", k)
            words = tuple(parts[1].split())
        else:
            words = tuple(parts[1 : 1 + current])
            parts = [parts[0], " ".join(words)] + parts[1 + current :]
        if len(words) != current:
            raise bad(f"expected a {current}-gram, got {len(words)} words", k)
        try:
            probs[current - 1][words] = float(parts[0])
            if len(parts) > 2:
                backoffs[current - 1][words] = float(parts[2])
        except ValueError:
            raise bad("non-numeric probability or backoff", k)
    if not ended:
        raise bad("missing \\end\\ marker", n_lines - 1)
    for n, c in declared.items():
        if len(probs[n - 1]) != c:
            raise FormatError(
                f"header declares {c} {n}-grams but the body has {len(probs[n - 1])}",
                pos, unit="line",
            )
    return ArpaModel(order, probs, backoffs)


# -- estimation -------------------------------------------------------------

def estimate(counts, smoothing="kneser_ney"):
    if not any(counts.counts):
        raise DataError("cannot estimate a model from empty counts")
    if smoothing == "mle":
        return _estimate_mle(counts)
    if smoothing in ("kneser_ney", "kn"):
        return _estimate_kn(counts)
    raise ConfigError(f"unknown smoothing {smoothing!r}")


def _log10(p):
    return math.log10(p) if p > 0 else LOG_ZERO


def _estimate_mle(c):
    order = c.order
    probs = [dict() for _ in range(order)]
    backoffs = [dict() for _ in range(order)]
    uni = {g: k for g, k in c.counts[0].items() if g != (BOS,)}
    total = sum(uni.values())
    for w in c.vocab:
        probs[0][(w,)] = LOG_ZERO if w == BOS else _log10(uni.get((w,), 0) / total)
    for n in range(2, order + 1):
        ctx_tot = Counter()
        for g, k in c.counts[n - 1].items():
            ctx_tot[g[:-1]] += k
        for g, k in c.counts[n - 1].items():
            probs[n - 1][g] = _log10(k / ctx_tot[g[:-1]])
        for h in ctx_tot:
            # every unit of mass is already on seen words
            backoffs[n - 2][h] = LOG_ZERO
    return ArpaModel(order, probs, backoffs)


def _discounts(adjusted, n, warnings):
    coc = Counter(adjusted.values())
    n1, n2, n3, n4 = (coc[i] for i in (1, 2, 3, 4))
    try:
        y = n1 / (n1 + 2 * n2)
        d = (1 - 2 * y * n2 / n1, 2 - 3 * y * n3 / n2, 3 - 4 * y * n4 / n3)
    except ZeroDivisionError:
        d = None
    if d is None or not all(0 < di <= i + 1 for i, di in enumerate(d)):
        msg = f"order {n}: degenerate count-of-counts {n1, n2, n3, n4}; using discount {FALLBACK_DISCOUNT}"
        log.warning(msg)
        warnings.append(msg)
        d = (FALLBACK_DISCOUNT,) * 3
    return d


def _estimate_kn(c):
    order = c.order
    warnings = []
    # adjusted counts: raw at the top order and for <s>-initial n-grams, else continuation counts
    adjusted = [Counter() for _ in range(order)]
    adjusted[order - 1] = Counter(c.counts[order - 1])
    for n in range(order - 1, 0, -1):
        for g in c.counts[n]:
            adjusted[n - 1][g[1:]] += 1
        for g, k in c.counts[n - 1].items():
            if g[0] == BOS:
                adjusted[n - 1][g] = k
    adjusted[0].pop((BOS,), None)

    vocab = sorted(c.vocab - {BOS})
    probs = [dict() for _ in range(order)]
    backoffs = [dict() for _ in range(order)]
    lin = {}  # interpolated probability of every stored n-gram
    gamma = {}  # left-over mass of every observed context

    def lookup(g):
        if g in lin:
            return lin[g]
        # unstored n-gram: back off, scaling by the context's left-over mass
        return gamma.get(g[:-1], 1.0) * lookup(g[1:])

    for n in range(1, order + 1):
        adj = adjusted[n - 1]
        d = _discounts(adj, n, warnings)
        ctx_tot = Counter()
        ctx_n = defaultdict(lambda: [0, 0, 0])
        for g, k in adj.items():
            ctx_tot[g[:-1]] += k
            ctx_n[g[:-1]][min(k, 3) - 1] += 1
        for h, m in ctx_n.items():
            gamma[h] = (d[0] * m[0] + d[1] * m[1] + d[2] * m[2]) / ctx_tot[h]
        grams = list(adj) if n > 1 else [(w,) for w in vocab]
        level = {}
        for g in grams:
            k = adj.get(g, 0)
            h = g[:-1]
            p_low = 1.0 / len(vocab) if n == 1 else lookup(g[1:])
            disc = max(k - d[min(k, 3) - 1], 0.0) if k else 0.0
            level[g] = disc / ctx_tot[h] + gamma[h] * p_low
        lin.update(level)
        for g, p in level.items():
            probs[n - 1][g] = _log10(p)
        if n > 1:
            for h in ctx_n:
                backoffs[n - 2][h] = _log10(gamma[h])
    probs[0][(BOS,)] = LOG_ZERO
    backoffs[0].setdefault((BOS,), 0.0)
    return ArpaModel(order, probs, backoffs, warnings)
