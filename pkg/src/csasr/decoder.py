"""Greedy and joint CTC/attention beam-search decoding with n-best LM rescoring."""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractError
from .numerics import functional as F
from .numerics.tensor import Tensor, no_grad

LN10 = math.log(10.0)
NEG_INF = -np.inf


@dataclass
class DecodeConfig:
    beam_size: int = 10
    ctc_weight: float = 0.3
    lm_weight: float = 0.3
    nbest: int = 10
    max_length_ratio: float = 1.0
    word_reward: float = 0.0

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigError(f"beam_size must be at least 1, got {self.beam_size}")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigError(f"ctc_weight must lie in [0, 1], got {self.ctc_weight}")
        if not 1 <= self.nbest <= self.beam_size:
            raise ConfigError(f"nbest must lie in [1, beam_size], got {self.nbest}")
        if self.max_length_ratio <= 0:
            raise ConfigError("max_length_ratio must be positive")


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple
    att_score: float
    ctc_score: float
    ctc_weight: float = 0.0
    lm_score: float = None
    lm_weight: float = 0.0
    word_reward: float = 0.0
    text: str = None
    am_rank: int = None

    @property
    def am_score(self):
        lam = self.ctc_weight
        ctc = self.ctc_score if lam else 0.0
        return lam * ctc + (1.0 - lam) * self.att_score

    @property
    def combined(self):
        score = self.am_score
        if self.lm_score is not None:
            score += self.lm_weight * LN10 * self.lm_score
        if self.word_reward and self.text is not None:
            score += self.word_reward * len(self.text.split())
        return score


def _rank_key(h):
    # higher score first; ties: shorter, then lexicographic
    return (-h.combined, len(h.tokens), h.tokens)


@dataclass
class NBestList:
    utt_id: str
    hyps: list = field(default_factory=list)

    def __len__(self):
        return len(self.hyps)

    def __getitem__(self, k):
        return self.hyps[k]

    @property
    def best(self):
        return self.hyps[0]

    def records(self):
        for rank, h in enumerate(self.hyps, 1):
            yield {
                "utt_id": self.utt_id, "rank": rank, "am_rank": h.am_rank,
                "att": h.att_score, "ctc": h.ctc_score, "lm": h.lm_score,
                "combined": h.combined, "tokens": list(h.tokens), "text": h.text,
            }


# -- CTC prefix scoring -----------------------------------------------------

class CtcPrefixScorer:
    """Incremental prefix probabilities over one utterance's CTC posteriors.

    The state of a prefix ``h`` is a pair of per-frame log probabilities that
    the first ``t + 1`` frames collapse to exactly ``h``, split by whether the
    last frame emits blank or the last label.
    """

    def __init__(self, log_probs, blank=0):
        self.lp = np.asarray(log_probs, dtype=np.float64)
        if self.lp.ndim != 2 or self.lp.shape[0] == 0:
            raise ContractError("CTC prefix scoring needs (T, V) log probabilities with T >= 1")
        self.blank = blank
        self.T, self.V = self.lp.shape

    def initial_state(self):
        r_n = np.full(self.T, NEG_INF)
        r_b = np.cumsum(self.lp[:, self.blank])
        return (), r_n, r_b

    def final_score(self, state):
        """Log probability that the whole output equals the prefix."""
        _, r_n, r_b = state
        return float(np.logaddexp(r_n[-1], r_b[-1]))

    def extend(self, state, tokens):
        """Prefix scores and successor states for each candidate token appended."""
        prefix, r_n, r_b = state
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.V):
            raise ContractError("candidate token outside the CTC vocabulary")
        last = prefix[-1] if prefix else None
        y = self.lp[:, tokens]  # (T, K)
        # phi[t]: mass of prefix paths at frame t that may be followed by a new emission of c
        phi = np.repeat(np.logaddexp(r_n, r_b)[:, None], len(tokens), axis=1)
        if last is not None:
            same = tokens == last
            phi[:, same] = r_b[:, None]
        k = len(tokens)
        new_n = np.full((self.T, k), NEG_INF)
        if not prefix:
            new_n[0] = y[0]
        psi = new_n[0].copy()
        blank_lp = self.lp[:, self.blank]
        for t in range(1, self.T):
            new_n[t] = np.logaddexp(new_n[t - 1], phi[t - 1]) + y[t]
            psi = np.logaddexp(psi, phi[t - 1] + y[t])
        new_b = np.full((self.T, k), NEG_INF)
        for t in range(1, self.T):
            new_b[t] = np.logaddexp(new_b[t - 1], new_n[t - 1]) + blank_lp[t]
        states = [(prefix + (int(c),), new_n[:, j], new_b[:, j]) for j, c in enumerate(tokens)]
        return psi, states


def ctc_prefix_score(log_probs, prefix, blank=0, full=False):
    """Log probability that the collapsed CTC output begins with ``prefix``.

    With ``full`` the score is for the output being exactly ``prefix``
    (the end-of-sequence convention), which equals the CTC path sum.
    """
    scorer = CtcPrefixScorer(log_probs, blank)
    state = scorer.initial_state()
    score = 0.0
    for c in prefix:
        psi, (state,) = scorer.extend(state, [c])
        score = float(psi[0])
    return scorer.final_score(state) if full else score


# -- search -----------------------------------------------------------------

def greedy_search(att_step, sos, eos, max_len, blank=0, exclude=()):
    """Argmax decoding; ``att_step(prefixes)`` returns next-token log probs per prefix."""
    banned = sorted({sos, blank, *exclude} - {eos})
    tokens, score = [], 0.0
    for _ in range(max_len + 1):
        lp = np.array(att_step([tokens])[0], dtype=np.float64)
        lp[banned] = NEG_INF
        if len(tokens) == max_len:
            c = eos
        else:
            c = int(np.argmax(lp))
        score += float(lp[c])
        if c == eos:
            break
        tokens.append(c)
    return tokens, score


def beam_search(att_step, cfg, sos, eos, max_len, ctc_log_probs=None, blank=0, exclude=(),
                utt_id=""):
    """Joint CTC/attention beam search.

    ``att_step(prefixes)`` maps a list of token-id prefixes (without sos) to
    an ``(n, V)`` array of next-token log probabilities. A hypothesis scores
    ``λ·ctc_prefix + (1 - λ)·att`` with ``λ = cfg.ctc_weight``. Ending a
    hypothesis with eos competes for a beam slot like any token; the winners
    leave the beam for the finished list, so a beam of one is greedy search.
    """
    lam = cfg.ctc_weight
    scorer = None
    if lam > 0:
        if ctc_log_probs is None:
            raise ContractError("ctc_weight > 0 needs CTC log probabilities")
        scorer = CtcPrefixScorer(ctc_log_probs, blank)
    banned = {sos, blank, *exclude} - {eos}

    root = scorer.initial_state() if scorer else ((),)
    live = [(Hypothesis((), 0.0, 0.0, lam), root)]
    finished = []
    for length in range(max_len + 1):
        if not live:
            break
        att = np.asarray(att_step([list(h.tokens) for h, _ in live]), dtype=np.float64)
        vocab = att.shape[1]
        cands = [c for c in range(vocab) if c not in banned and c != eos]
        pool = []
        for (h, state), lp in zip(live, att):
            end_ctc = scorer.final_score(state) if scorer else 0.0
            pool.append((replace(h, att_score=h.att_score + lp[eos], ctc_score=end_ctc), None))
            if length == max_len or not cands:
                continue
            if scorer:
                psi, states = scorer.extend(state, cands)
            else:
                psi, states = np.zeros(len(cands)), [(h.tokens + (c,),) for c in cands]
            for j, c in enumerate(cands):
                pool.append((Hypothesis(h.tokens + (c,), h.att_score + lp[c], float(psi[j]), lam),
                             states[j]))
        pool = [hs for hs in pool if np.isfinite(hs[0].am_score)]
        pool.sort(key=lambda hs: _rank_key(hs[0]))
        kept = pool[: cfg.beam_size]
        finished.extend(h for h, state in kept if state is None)
        live = [hs for hs in kept if hs[1] is not None]
        if lam == 0 and live and len(finished) >= cfg.nbest:
            # attention scores only decrease as prefixes grow, so once the
            # n-th best finished hypothesis beats every live prefix we are done
            kth = sorted((f.combined for f in finished), reverse=True)[cfg.nbest - 1]
            if kth >= live[0][0].combined:
                break
    finished = [f for f in finished if np.isfinite(f.combined)]
    finished.sort(key=_rank_key)
    top = [replace(h, am_rank=k) for k, h in enumerate(finished[: cfg.nbest], 1)]
    return NBestList(utt_id, top)


# -- rescoring --------------------------------------------------------------

def rescore_nbest(nbest, lm, lm_weight, tokenizer=None, word_reward=0.0):
    """Add ``lm_weight · ln10 · log10 P_lm(words)`` (plus an optional word reward) and re-sort.

    ``lm`` needs a ``sentence_score(words)`` method returning log10
    probability. ``tokenizer.decode`` turns token ids into words when a
    hypothesis has no text yet. The original acoustic rank is kept in
    ``am_rank``.
    """
    out = []
    for k, h in enumerate(nbest.hyps, 1):
        text = h.text if h.text is not None else tokenizer.decode(list(h.tokens))
        words = text.split()
        out.append(replace(h, text=text, lm_score=lm.sentence_score(words), lm_weight=lm_weight,
                           word_reward=word_reward, am_rank=h.am_rank or k))
    out.sort(key=lambda h: (-h.combined, h.am_rank))
    return NBestList(nbest.utt_id, out)


# -- model adapters ---------------------------------------------------------

def attention_scorer(model, enc, enc_len):
    """Wrap a model's decoder over one utterance's encoder output as an ``att_step``."""
    mem = enc.data if isinstance(enc, Tensor) else np.asarray(enc)
    mem = mem[:, :enc_len]

    def step(prefixes):
        n = len(prefixes)
        lens = np.array([len(p) + 1 for p in prefixes])
        ys = np.full((n, lens.max()), model.eos, dtype=np.int64)
        for i, p in enumerate(prefixes):
            ys[i, 0] = model.sos
            ys[i, 1 : lens[i]] = p
        memory = np.repeat(mem, n, axis=0)
        with no_grad():
            logits = model.decoder(memory, np.full(n, enc_len), ys, lens)
            lp = F.log_softmax(logits, axis=-1).data
        return lp[np.arange(n), lens - 1]

    return step


def _encode(model, feats, lengths):
    with no_grad():
        enc, enc_lens = model.encode(feats, lengths)
        ctc = model.ctc_log_probs(enc).data
    return enc.data, np.asarray(enc_lens), ctc


def ctc_greedy(log_probs, blank=0):
    best = np.argmax(log_probs, axis=-1)
    out, prev = [], None
    for c in best:
        c = int(c)
        if c != prev and c != blank:
            out.append(c)
        prev = c
    return out


def greedy_decode(model, feats, lengths, mode="attention", max_length_ratio=1.0):
    """Batched greedy decoding; returns one token-id list per utterance."""
    was_training = model.training
    model.eval()
    try:
        enc, enc_lens, ctc = _encode(model, feats, lengths)
        if mode == "ctc":
            return [ctc_greedy(ctc[i, : enc_lens[i]], model.blank) for i in range(len(enc_lens))]
        b = len(enc_lens)
        max_len = max(1, int(max_length_ratio * enc_lens.max()))
        ys = np.full((b, 1), model.sos, dtype=np.int64)
        done = np.zeros(b, bool)
        for _ in range(max_len):
            with no_grad():
                logits = model.decoder(enc, enc_lens, ys, np.full(b, ys.shape[1])).data
            logits[:, -1, sorted({model.sos, model.blank} - {model.eos})] = NEG_INF
            nxt = np.argmax(logits[:, -1], axis=-1)
            nxt = np.where(done, model.eos, nxt)
            ys = np.concatenate([ys, nxt[:, None]], axis=1)
            done |= nxt == model.eos
            if done.all():
                break
        out = []
        for i in range(b):
            row = list(ys[i, 1:])
            limit = max(1, int(max_length_ratio * enc_lens[i]))
            row = row[: row.index(model.eos)] if model.eos in row else row
            out.append([int(c) for c in row[:limit]])
        return out
    finally:
        model.train(was_training)


def decode_utterance(model, feats, cfg, utt_id="", tokenizer=None):
    """Beam-search one utterance, returning its n-best list with decoded text."""
    was_training = model.training
    model.eval()
    try:
        feats = np.asarray(feats)
        enc, enc_lens, ctc = _encode(model, feats[None], np.array([len(feats)]))
        t = int(enc_lens[0])
        if t == 0:
            raise ContractError("empty encoder output")
        max_len = max(1, int(cfg.max_length_ratio * t))
        nb = beam_search(
            attention_scorer(model, enc, t), cfg, model.sos, model.eos, max_len,
            ctc_log_probs=ctc[0, :t], blank=model.blank,
            exclude=_specials(tokenizer, model), utt_id=utt_id,
        )
    finally:
        model.train(was_training)
    if tokenizer is not None:
        nb.hyps = [replace(h, text=tokenizer.decode(list(h.tokens))) for h in nb.hyps]
    return nb


def _specials(tokenizer, model):
    if tokenizer is None:
        return ()
    return tuple({tokenizer.pad, tokenizer.unk, tokenizer.sos} - {model.eos})
