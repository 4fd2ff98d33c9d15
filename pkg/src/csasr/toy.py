"""Synthetic bilingual tone-burst corpus for end-to-end tests.

Each word of two disjoint toy languages is rendered as a fixed-frequency
tone burst. Language A plays the native role (Devanagari words) and
language B the non-native role (Latin words). Code-switched utterances mix
both languages and are spoken by a "different speaker": every tone is
transposed by ``cs_shift``, which gives fine-tuning an in-domain gap to
close.
"""

from pathlib import Path

import numpy as np

from .frontend import AudioBuffer, write_wav
from .manifest import Manifest, Utterance

LANG_A = ("घर", "पानी", "कल", "दिन", "नया", "काम")
LANG_B = ("open", "file", "save", "data", "run", "code")
VOCAB = LANG_A + LANG_B
BASE_FREQ = 300.0
FREQ_RATIO = 1.3
TOKEN_FREQS = {w: BASE_FREQ * FREQ_RATIO**k for k, w in enumerate(VOCAB)}

RATE = 16000
BURST_S = 0.10
GAP_S = 0.04
EDGE_S = 0.05
RAMP_S = 0.01
NOISE = 0.003
CS_SHIFT = 1.08


def render(words, rng, shift=1.0, rate=RATE):
    """Synthesize one utterance; returns ``(samples, [(start, stop) per word])``."""
    amp = rng.uniform(0.2, 0.5)
    edge, gap = int(EDGE_S * rate), int(GAP_S * rate)
    pieces, spans, pos = [np.zeros(edge)], [], edge
    ramp = int(RAMP_S * rate)
    for i, w in enumerate(words):
        n = int(round(rng.uniform(0.9, 1.1) * BURST_S * rate))
        t = np.arange(n) / rate
        env = np.ones(n)
        env[:ramp] = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[-ramp:] = env[:ramp][::-1]
        phase = rng.uniform(0, 2 * np.pi)
        pieces.append(amp * env * np.sin(2 * np.pi * TOKEN_FREQS[w] * shift * t + phase))
        spans.append((pos, pos + n))
        pos += n
        tail = gap if i < len(words) - 1 else edge
        pieces.append(np.zeros(tail))
        pos += tail
    x = np.concatenate(pieces)
    return x + NOISE * rng.standard_normal(len(x)), spans


def _sentence(rng, lang):
    n = int(rng.integers(2, 5))
    if lang == "native":
        return list(rng.choice(LANG_A, n))
    if lang == "nonnative":
        return list(rng.choice(LANG_B, n))
    while True:
        words = list(rng.choice(VOCAB, n))
        if any(w in LANG_A for w in words) and any(w in LANG_B for w in words):
            return words


def make_toy_dataset(out_dir, seed=0, size=32, dev_size=0, cs_shift=CS_SHIFT):
    """Write WAVs plus ``native``, ``nonnative`` and ``cs`` manifests under ``out_dir``.

    ``size`` utterances are split as evenly as possible over the three pools,
    with any remainder going to ``cs``. ``dev_size`` extra code-switched
    utterances form a ``cs_dev`` manifest. Returns ``{name: Manifest}``.
    """
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    third = size // 3
    plan = [("native", third), ("nonnative", third), ("cs", size - 2 * third), ("cs_dev", dev_size)]
    manifests = {}
    for name, count in plan:
        lang = "cs" if name == "cs_dev" else name
        records = []
        for i in range(count):
            words = _sentence(rng, lang)
            x, _ = render(words, rng, cs_shift if lang == "cs" else 1.0)
            uid = f"{name}-{seed}-{i:04d}"
            rel = f"wav/{uid}.wav"
            write_wav(out / rel, AudioBuffer(x, RATE))
            records.append(Utterance(uid, rel, len(x) / RATE, " ".join(words), lang))
        if count or name != "cs_dev":
            m = Manifest(records, out)
            m.write(out / f"{name}.jsonl")
            manifests[name] = m
    return manifests


# transliterations of the Latin toy words into Devanagari
LEXICON = {"open": "ओपन", "file": "फाइल", "save": "सेव", "data": "डेटा", "run": "रन", "code": "कोड"}

TOY_CONFIG = """\
# desk-scale experiment over the synthetic tone-burst corpus
name=toy
seed={seed}
data.native=native.jsonl
data.nonnative=nonnative.jsonl
data.cs=cs.jsonl
data.cs_dev=cs_dev.jsonl
data.lexicon=lexicon.tsv
prepare.speed_factors=1.0
specaug.enabled=false
text.bpe_vocab_size=200
lm.order=2
lm.unk_threshold=0
mix.config=ev
mix.cs_fraction=0.5
model.d_model=32
model.attention_heads=2
model.conv_kernel=7
model.encoder_layers=2
model.decoder_layers=1
model.ff_units=64
model.dropout=0.0
pretrain.epochs=1000
pretrain.max_steps={pretrain_steps}
pretrain.batch_size=8
pretrain.dropout=0.0
pretrain.factor=0.5
pretrain.warmup=100
pretrain.eval_every=10
finetune.epochs={finetune_epochs}
finetune.patience=0
finetune.eval_every=1
decode.beam_size=4
decode.nbest=4
decode.checkpoint=finetune
"""


def write_toy_config(out_dir, seed=0, pretrain_steps=500, finetune_epochs=20):
    """Write ``toy.conf`` and ``lexicon.tsv`` next to the toy manifests; returns the config path."""
    out = Path(out_dir)
    (out / "lexicon.tsv").write_text("".join(f"{e}\t{n}\n" for e, n in LEXICON.items()),
                                     encoding="utf-8")
    path = out / "toy.conf"
    path.write_text(TOY_CONFIG.format(seed=seed, pretrain_steps=pretrain_steps,
                                      finetune_epochs=finetune_epochs), encoding="utf-8")
    return path
