"""End-to-end acceptance checks; each prints one PASS or FAIL line.

The lines are collected in ``RESULTS`` and repeated in the terminal summary
by ``conftest.py`` so a full ``pytest -v`` run ends with the scoreboard.
"""

import functools
import itertools
import json
import math
import shutil
import time
from collections import defaultdict

import numpy as np

from csasr.conformer import ASRModel, ConformerConfig, ctc_forward_backward
from csasr.config import load_config
from csasr.decoder import DecodeConfig, beam_search, rescore_nbest
from csasr.frontend import CmvnStats, FeatureConfig, cmvn_apply, load_wav, log_mel
from csasr.lm import ArpaModel, count_ngrams, estimate
from csasr.numerics import gradcheck
from csasr.pipeline import _examples, _load_rows, run_pipeline
from csasr.scoring import TransliterationLexicon, t_wer, wer
from csasr.text import KEPT_SYMBOLS, BpeModel, bpe_train, normalize_transcript
from csasr.toy import make_toy_dataset, write_toy_config
from csasr.trainer import (
    Example,
    NoamSchedule,
    StageConfig,
    build_mix_plan,
    evaluate,
    noam_lr,
    run_stage,
    set_trainable,
)
from oracles import collapse
from test_conformer import block_gradient_errors
from test_decoder import EOS, SOS, TableLM, exhaustive, fixed_step, hashed_step, reference_greedy, two_hyps
from test_lm import WORKSHEET, WORKSHEET_SENTENCES, context_mass, real_contexts, zipf_corpus
from test_numerics import PRIMITIVE_CASES
from test_scoring import LATIN, NATIVE, _random_corpus
from test_trainer import BENGALI, HINDI, pools_for, tiny_cfg, tiny_data

RESULTS = {}


def criterion(number, title):
    """Record ``fn() -> (ok, detail)`` as one PASS/FAIL line and fail the test on FAIL."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.time()
            try:
                ok, detail = fn(*args, **kwargs)
            except Exception as exc:
                ok, detail = False, f"raised {type(exc).__name__}: {exc}"
                raise
            finally:
                line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d} ({title}): {detail} [{time.time() - t0:.1f}s]"
                RESULTS[number] = line
                print(line)
            assert ok, line

        return run

    return wrap


# -- 1 ---------------------------------------------------------------------------------

def path_sums(lp):
    """-log P(y) for every collapsed output y, by enumerating all paths once."""
    t, v = lp.shape
    acc = defaultdict(float)
    for path in itertools.product(range(v), repeat=t):
        acc[collapse(path)] += math.exp(sum(lp[i, k] for i, k in enumerate(path)))
    return {y: -math.log(p) for y, p in acc.items()}


@criterion(1, "CTC equals path enumeration")
def test_ctc_matches_enumeration_on_all_small_instances():
    rng = np.random.default_rng(0)
    worst, cases, t0 = 0.0, 0, time.time()
    for t in range(1, 7):
        for v in range(2, 5):
            z = rng.normal(size=(t, v))
            lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            oracle = path_sums(lp)
            targets = [y for n in range(4) for y in itertools.product(range(1, v), repeat=n)]
            losses, _ = ctc_forward_backward(np.repeat(lp[None], len(targets), 0),
                                             [list(y) for y in targets], np.full(len(targets), t), 0)
            for y, got in zip(targets, losses):
                want = oracle.get(y, math.inf)
                cases += 1
                if math.isinf(want) or math.isinf(got):
                    if not (math.isinf(want) and math.isinf(got)):
                        return False, f"T={t} V={v} y={y}: {got} vs {want}"
                else:
                    worst = max(worst, abs(got - want))
    elapsed = time.time() - t0
    return worst <= 1e-9 and elapsed < 60, f"{cases} instances, max |diff| {worst:.2e}"


# -- 2 ---------------------------------------------------------------------------------

@criterion(2, "gradient checks")
def test_primitives_and_block_pass_finite_differences():
    t0 = time.time()
    worst = {name: max(gradcheck(fn, inputs)) for name, fn, inputs in PRIMITIVE_CASES}
    rel, zero = block_gradient_errors()
    prim, blk = max(worst.values()), max(rel.values())
    elapsed = time.time() - t0
    ok = prim < 1e-4 and blk < 1e-4 and max(zero.values()) < 1e-8 and elapsed < 120
    return ok, (f"{len(worst)} primitives max rel {prim:.1e}; block (d 8, 2 heads, kernel 3, T 5) "
                f"max rel {blk:.1e} over {len(rel)} tensors")


# -- 3 ---------------------------------------------------------------------------------

@criterion(3, "joint loss identity")
def test_logged_loss_is_exact_weighted_sum_for_100_steps():
    data = tiny_data(20, seed=3)
    cfg = StageConfig(epochs=100, batch_size=2, dropout=0.1, alpha=0.3, max_steps=100,
                      schedule=NoamSchedule(1.0, 8, 25))
    res = run_stage(cfg, data, model=ASRModel(tiny_cfg(), seed=0))
    exact = sum(s["l_asr"] == 0.3 * s["l_ctc"] + 0.7 * s["l_ce"] for s in res.steps)
    return len(res.steps) == 100 and exact == 100, f"{exact}/{len(res.steps)} steps exact"


# -- 4 ---------------------------------------------------------------------------------

@criterion(4, "Noam schedule")
def test_noam_values_and_peak():
    s = NoamSchedule(5.0, 512, 20000)
    a, b = noam_lr(s, 20000), noam_lr(s, 100)
    lrs = np.array([noam_lr(s, k) for k in range(1, 40001)])
    peak = int(np.argmax(lrs)) + 1
    ok = (abs(a / 1.5625e-3 - 1) <= 1e-12 and abs(b / 7.8125e-6 - 1) <= 1e-12 and peak == 20000
          and np.all(np.diff(lrs[:20000]) > 0) and np.all(np.diff(lrs[19999:]) < 0))
    return ok, f"lr(20000)={a:.10g} lr(100)={b:.10g} peak at {peak}"


# -- 5 ---------------------------------------------------------------------------------

@criterion(5, "fine-tune defaults")
def test_finetune_stage_reports_factor_and_warmup(tmp_path):
    make_toy_dataset(tmp_path, seed=5, size=6, dev_size=2)
    conf = write_toy_config(tmp_path, seed=5, pretrain_steps=2, finetune_epochs=1)
    with open(conf, "a") as fh:
        fh.write("pretrain.factor=5\npretrain.warmup=20000\n")
    run_pipeline(load_config(conf).validate(), ["prepare", "bpe", "pretrain", "finetune"],
                 tmp_path / "exp")
    pre = json.loads((tmp_path / "exp" / "pretrain" / "summary.json").read_text())
    ft = json.loads((tmp_path / "exp" / "finetune" / "summary.json").read_text())
    ok = pre["factor"] == 5.0 and abs(ft["factor"] - 0.1) < 1e-15 and ft["warmup"] == 0
    return ok, f"pretrain factor {pre['factor']} -> finetune factor {ft['factor']}, warmup {ft['warmup']}"


# -- 6 ---------------------------------------------------------------------------------

@criterion(6, "mix plans")
def test_hindi_and_bengali_mix_plans():
    want = {
        ("hindi", "ev"): (95, 86, 50), ("hindi", "sv"): (95, 22.7, 50),
        ("bengali", "ev"): (211.6, 200.5, 20.5), ("bengali", "sv"): (211.6, 57.6, 20.5),
    }
    pools = {"hindi": pools_for(HINDI), "bengali": pools_for(BENGALI)}
    subsets = {"hindi": HINDI["subsets"], "bengali": BENGALI["subsets"]}
    parts = []
    ok = True
    for (lang, config), hours in want.items():
        p = pools[lang]
        plan = build_mix_plan(p, config, 0.5, seed=0, nonnative_subsets=subsets[lang])
        longest = max(r.duration for m in p.values() for r in m.records) / 3600.0
        for src, h in zip(("native", "nonnative", "cs"), hours):
            ok &= abs(plan.targets[src] - h) < 1e-9 and abs(plan.realized[src] - h) < longest
        parts.append(f"{config}({lang}) " + "/".join(f"{plan.realized[s]:.2f}"
                                                     for s in ("native", "nonnative", "cs")))
    return ok, "; ".join(parts)


# -- 7 ---------------------------------------------------------------------------------

def toy_examples(root, seed, size):
    ms = make_toy_dataset(root, seed=seed, size=size)
    recs = [(m, r) for m in ms.values() for r in m]
    fc = FeatureConfig()
    feats = {r.utt_id: log_mel(load_wav(m.audio_path(r), fc.sample_rate), fc).frames for m, r in recs}
    stats = CmvnStats.empty(fc.n_mels)
    for f in feats.values():
        stats = stats.merge(CmvnStats.from_features(f))
    bpe = bpe_train([r.text for _, r in recs], 200)
    return [Example(r.utt_id, cmvn_apply(feats[r.utt_id], stats), bpe.encode(r.text).ids, r.text)
            for _, r in recs], bpe


@criterion(7, "toy overfit")
def test_small_conformer_overfits_toy_set(tmp_path):
    t0 = time.time()
    examples, bpe = toy_examples(tmp_path, 7, 32)
    cfg = ConformerConfig(input_dim=80, d_model=32, attention_heads=2, conv_kernel=7,
                          encoder_layers=2, decoder_layers=1, ff_units=64, dropout=0.0,
                          vocab_size=len(bpe))
    model = ASRModel(cfg, seed=0, sos=bpe.sos, eos=bpe.eos, blank=bpe.blank)
    sc = StageConfig(epochs=1000, batch_size=8, dropout=0.0, schedule=NoamSchedule(0.5, 32, 100),
                     max_steps=500)
    res = run_stage(sc, examples, model=model)
    losses = np.array([s["l_asr"] for s in res.steps])
    blocks = losses.reshape(-1, 50).mean(axis=1)
    decreasing = bool(np.all(np.diff(blocks) < 0))
    w = evaluate(res.model, examples, 0.3, 64, bpe, "attention")["wer"]
    elapsed = time.time() - t0
    ok = len(losses) == 500 and w <= 5.0 and decreasing and elapsed < 600
    return ok, (f"train greedy WER {w:.2f}% after {len(losses)} steps; 50-step means "
                + " ".join(f"{b:.3f}" for b in blocks)
                + (" strictly decreasing" if decreasing else " NOT strictly decreasing"))


# -- 8 ---------------------------------------------------------------------------------

def transfer_run(root, seed):
    make_toy_dataset(root, seed=seed, size=96, dev_size=32)
    conf = write_toy_config(root, seed=seed, pretrain_steps=500, finetune_epochs=20)
    cfg = load_config(conf).validate()
    exp = root / "exp"
    run_pipeline(cfg, ["prepare", "bpe", "pretrain", "finetune"], exp)
    bpe = BpeModel.load(exp / "bpe" / "bpe.model")
    dev, _ = _examples(exp, "dev", [r["id"] for r in _load_rows(exp, "dev")], bpe, cfg)
    out = {}
    for stage in ("pretrain", "finetune"):
        model, *_ = ASRModel.load(exp / stage / "best.ckpt")
        out[stage] = evaluate(model, dev, 0.3, 64, bpe, "attention")["wer"]
    return out


@criterion(8, "toy transfer direction")
def test_finetuning_improves_toy_cs_dev_on_three_seeds(tmp_path):
    rows, wins = [], 0
    for seed in (1, 2, 3):
        r = transfer_run(tmp_path / f"seed{seed}", seed)
        wins += r["finetune"] < r["pretrain"]
        rows.append(f"seed {seed}: {r['pretrain']:.1f} -> {r['finetune']:.1f}")
        shutil.rmtree(tmp_path / f"seed{seed}", ignore_errors=True)
    return wins == 3, f"CS dev WER pretrain -> finetune; {'; '.join(rows)}; {wins}/3 improved"


# -- 9 ---------------------------------------------------------------------------------

@criterion(9, "freezing control")
def test_freezing_encoder():
    model = ASRModel(tiny_cfg(), seed=0)
    total = model.num_parameters()
    enc = sum(p.data.size for n, p in model.named_parameters() if n.startswith("encoder."))
    trainable = set_trainable(model, ["encoder"])
    before = {n: p.data.copy() for n, p in model.named_parameters() if n.startswith("encoder.")}
    res = run_stage(StageConfig(epochs=10, batch_size=3, dropout=0.0, frozen_prefixes=("encoder",),
                                schedule=NoamSchedule(1.0, 8, 4)), tiny_data(), model=model)
    params = dict(res.model.named_parameters())
    same = all(np.array_equal(params[n].data, v) for n, v in before.items())
    ok = trainable == total - enc and res.step == 20 and same
    return ok, f"trainable {trainable} = {total} - {enc}; encoder bit-identical after {res.step} steps: {same}"


# -- 10 --------------------------------------------------------------------------------

@criterion(10, "n-gram LM")
def test_language_model(tmp_path):
    m = estimate(count_ngrams(["a b", "a b"], 2), "mle")
    mle_ok = m.log10_prob("b", ("a",)) == 0.0 and m.log10_prob("a", ("<s>",)) == 0.0
    worst, models = 0.0, 0
    roundtrip = 0.0
    for corpus in (["a b", "a b"], zipf_corpus(40, 12), zipf_corpus()):
        for order in (1, 2, 3):
            for smoothing in ("mle", "kneser_ney"):
                mod = estimate(count_ngrams(corpus, order), smoothing)
                models += 1
                worst = max(worst, max(abs(context_mass(mod, h) - 1) for h in real_contexts(mod)))
                path = tmp_path / "m.arpa"
                mod.write(path)
                back = ArpaModel.read(path)
                for s in corpus[:20]:
                    roundtrip = max(roundtrip, abs(back.sentence_score(s.split())
                                                   - mod.sentence_score(s.split())))
    kn = 0.0
    for order in (2, 3):
        mod = estimate(count_ngrams(zipf_corpus(), order), "kneser_ney")
        for s, want in zip(WORKSHEET_SENTENCES, WORKSHEET[order]):
            kn = max(kn, abs(mod.sentence_score(s.split()) - want))
    ok = mle_ok and worst <= 1e-6 and roundtrip <= 5e-6 * 12 and kn <= 1e-6
    return ok, (f"MLE exact: {mle_ok}; {models} models normalize within {worst:.1e}; "
                f"ARPA round trip max diff {roundtrip:.1e}; KN worksheet max diff {kn:.1e}")


# -- 11 --------------------------------------------------------------------------------

@criterion(11, "rescoring and beam search")
def test_rescoring_and_search():
    keep = [h.text for h in rescore_nbest(two_hyps(), TableLM({"first": -9.0, "second": -0.1}), 0.0)]
    ln10 = math.log(10)
    worked = rescore_nbest(two_hyps(), TableLM({"first": -5 / ln10, "second": -2 / ln10}), 0.2)
    worked_ok = worked[0].text == "second" and abs(worked[0].combined + 1.6) < 1e-12 \
        and abs(worked[1].combined + 2.0) < 1e-12
    greedy_ok = True
    for seed in range(20):
        step = hashed_step(6, seed)
        seq, score = reference_greedy(step, 6, 5)
        nb = beam_search(step, DecodeConfig(beam_size=1, nbest=1, ctc_weight=0.0), SOS, EOS, 5)
        greedy_ok &= list(nb.best.tokens) == seq and abs(nb.best.combined - score) < 1e-12
    exhaustive_ok = True
    for seed, tokens in itertools.product(range(20), ([3, 4], [3, 4, 5])):
        lp = np.random.default_rng(seed).normal(size=3 + len(tokens))
        lp -= np.log(np.exp(lp).sum())
        want = exhaustive(lp, tokens, 2)
        beam = (len(tokens) + 1) ** 2
        nb = beam_search(fixed_step(lp), DecodeConfig(beam_size=beam, nbest=beam, ctc_weight=0.0),
                         SOS, EOS, 2)
        exhaustive_ok &= [h.tokens for h in nb] == [s for _, s in want]
    ok = keep == ["first", "second"] and worked_ok and greedy_ok and exhaustive_ok
    return ok, (f"beta=0 keeps order: {keep == ['first', 'second']}; worked example picks "
                f"{worked[0].text} ({worked[0].combined:.2f} vs {worked[1].combined:.2f}); "
                f"beam-1 = greedy: {greedy_ok}; beam (|V|+eos)^2 = enumeration: {exhaustive_ok}")


# -- 12 --------------------------------------------------------------------------------

@criterion(12, "WER and T-WER")
def test_metrics():
    examples = (wer(["a b c"], ["a b c"]), wer(["a b c"], ["a x c"]), wer(["a b c"], [""]))
    ex_ok = examples[0] == 0.0 and round(examples[1], 2) == 33.33 and examples[2] == 100.0
    rng = np.random.default_rng(0)
    bounded = 0
    for _ in range(1000):
        refs, hyps = _random_corpus(rng)
        lex = TransliterationLexicon({e: [n for n in NATIVE if rng.random() < 0.3] for e in LATIN})
        bounded += 0 <= t_wer(refs, hyps, lex) <= wer(refs, hyps)
    lex = TransliterationLexicon({"attributes": "अट्रिब्यूट्स"})
    refs, hyps = ["open attributes करें"], ["open अट्रिब्यूट्स करें"]
    w, t = wer(refs, hyps), t_wer(refs, hyps, lex)
    ok = ex_ok and bounded == 1000 and round(w, 2) == 33.33 and t == 0.0
    return ok, (f"examples {examples[0]:.2f}/{examples[1]:.2f}/{examples[2]:.2f}; "
                f"T-WER <= WER on {bounded}/1000 corpora; transliteration example WER {w:.2f} T-WER {t:.2f}")


# -- 13 --------------------------------------------------------------------------------

@criterion(13, "text pipeline")
def test_text_pipeline(tmp_path):
    glued = normalize_transcript("attributesअट्रिब्यूट")
    kept = all(sym in normalize_transcript(f"x {sym} y").split() for sym in KEPT_SYMBOLS)
    ms = make_toy_dataset(tmp_path, seed=7, size=32, dev_size=16)
    texts = [normalize_transcript(r.text) for m in ms.values() for r in m]
    bpe = bpe_train(texts, 200)
    same = sum(bpe.decode(bpe.encode(t)) == t for t in texts)
    ok = glued == "attributes अट्रिब्यूट" and kept and same == len(texts)
    return ok, f"glued word -> {glued!r}; kept symbols survive: {kept}; BPE round trip {same}/{len(texts)}"
