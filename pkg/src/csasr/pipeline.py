"""Experiment stages: prepare, bpe, lm, pretrain, finetune, decode, score.

Each stage owns ``<exp_dir>/<stage>/``. It writes a frozen ``config.txt``
and, on success, a ``DONE`` file holding the fingerprint of the config keys
it depends on. Re-running a finished stage with the same fingerprint does
nothing; a changed fingerprint is refused unless forced.
"""

import json
import logging
import os
import shutil
from contextlib import contextmanager
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import plotting
from .conformer.layers import subsampled_length
from .conformer.losses import ctc_min_frames
from .conformer.model import ASRModel
from .decoder import DecodeConfig, decode_utterance, rescore_nbest
from .errors import ConfigError, StageError
from .frontend import (CmvnStats, FeatureArchiveWriter, SpecAugmentPolicy, cmvn_apply, load_wav,
                       log_mel, read_feature_archive, speed_perturb)
from .lm import ArpaModel, count_ngrams, estimate
from .manifest import Manifest, Utterance, parse_manifest
from .scoring import TransliterationLexicon, score_corpus
from .text import BpeModel, bpe_train, normalize_transcript
from .trainer import (Example, NoamSchedule, StageConfig, build_mix_plan, finetune_config,
                      run_stage)

log = logging.getLogger(__name__)

STAGES = ("prepare", "bpe", "lm", "pretrain", "finetune", "decode", "score")
_PREP = ("seed", "data", "features", "prepare")
DEPENDS = {
    "prepare": _PREP,
    "bpe": _PREP + ("text",),
    "lm": _PREP + ("lm",),
    "pretrain": _PREP + ("text", "model", "pretrain", "mix", "specaug"),
    "finetune": _PREP + ("text", "model", "pretrain", "mix", "specaug", "finetune"),
    "decode": _PREP + ("text", "model", "pretrain", "mix", "specaug", "finetune", "decode", "lm"),
    "score": _PREP + ("text", "model", "pretrain", "mix", "specaug", "finetune", "decode", "lm"),
}


# -- run control ------------------------------------------------------------

@contextmanager
def experiment_lock(exp_dir):
    exp_dir = Path(exp_dir)
    exp_dir.mkdir(parents=True, exist_ok=True)
    lock = exp_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StageError(f"{exp_dir} is locked by another run (remove {lock} if stale)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _require(path, stage):
    if not Path(path).exists():
        raise StageError(f"stage {stage} needs {path}; run the stage that produces it first")
    return Path(path)


def run_pipeline(cfg, stages, exp_dir=None, force=False):
    """Run ``stages`` in pipeline order; returns ``{stage: "ran" | "skipped"}``."""
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ConfigError(f"unknown stages {unknown}; choose from {STAGES}")
    exp = Path(exp_dir) if exp_dir is not None else Path("exp") / cfg.name
    status = {}
    with experiment_lock(exp):
        for stage in STAGES:
            if stage not in stages:
                continue
            status[stage] = _run_one(cfg, stage, exp, force)
    return status


def _check_upstream(cfg, stage, exp):
    """Refuse to build on finished earlier stages that were made under a different config."""
    for up in STAGES[: STAGES.index(stage)]:
        done = exp / up / "DONE"
        if done.exists() and done.read_text().strip() != cfg.fingerprint(DEPENDS[up]):
            raise StageError(f"stage {stage}: upstream stage {up} in {exp / up} was produced "
                             f"under a different config; rerun {up} with --force first")


def _run_one(cfg, stage, exp, force):
    sdir = exp / stage
    fp = cfg.fingerprint(DEPENDS[stage])
    done = sdir / "DONE"
    if sdir.exists():
        previous = done.read_text().strip() if done.exists() else _frozen_fingerprint(sdir, stage)
        if previous is not None and previous != fp and not force:
            raise StageError(f"stage {stage}: config changed since {sdir} was written; use --force")
        if done.exists() and previous == fp and not force:
            log.info("stage %s already complete; skipping", stage)
            return "skipped"
        if force:
            shutil.rmtree(sdir)
    _check_upstream(cfg, stage, exp)
    sdir.mkdir(parents=True, exist_ok=True)
    (sdir / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    (sdir / "fingerprint").write_text(fp + "\n")
    log.info("running stage %s in %s", stage, sdir)
    STAGE_FUNCS[stage](cfg, exp, sdir)
    done.write_text(fp + "\n")
    return "ran"


def _frozen_fingerprint(sdir, stage):
    f = sdir / "fingerprint"
    return f.read_text().strip() if f.exists() else None


# -- prepare ----------------------------------------------------------------

def _manifests(cfg):
    pools = {k: parse_manifest(cfg.path(getattr(cfg.data, k))) for k in ("native", "nonnative", "cs")}
    dev = parse_manifest(cfg.path(cfg.data.cs_dev))
    Manifest([r for m in pools.values() for r in m] + list(dev))  # ids unique across all sets
    return pools, dev


def stage_prepare(cfg, exp, sdir):
    pools, dev = _manifests(cfg)
    fcfg = cfg.features
    stats = CmvnStats.empty(fcfg.n_mels)
    rows = []
    with FeatureArchiveWriter(sdir / "train.ark") as ark:
        for lang, m in pools.items():
            for rec in m:
                audio = load_wav(m.audio_path(rec), fcfg.sample_rate)
                for f in cfg.prepare.speed_factors:
                    uid = rec.utt_id if f == 1.0 else f"sp{f}-{rec.utt_id}"
                    frames = log_mel(speed_perturb(audio, f), fcfg).frames
                    ark.write(uid, frames)
                    stats = stats.merge(CmvnStats.from_features(frames))
                    rows.append({"id": uid, "base": rec.utt_id, "lang": lang, "factor": f,
                                 "duration": rec.duration, "frames": len(frames),
                                 "text": normalize_transcript(rec.text)})
    dev_rows = []
    with FeatureArchiveWriter(sdir / "dev.ark") as ark:
        for rec in dev:
            frames = log_mel(load_wav(dev.audio_path(rec), fcfg.sample_rate), fcfg).frames
            ark.write(rec.utt_id, frames)
            dev_rows.append({"id": rec.utt_id, "base": rec.utt_id, "lang": rec.lang, "factor": 1.0,
                             "duration": rec.duration, "frames": len(frames),
                             "text": normalize_transcript(rec.text)})
    stats.save(sdir / "cmvn.txt")
    _write_jsonl(sdir / "train.jsonl", rows)
    _write_jsonl(sdir / "dev.jsonl", dev_rows)
    summary = {"train_utterances": len(rows), "dev_utterances": len(dev_rows),
               "hours": {k: m.hours() for k, m in pools.items()}, "dev_hours": dev.hours()}
    _write_json(sdir / "summary.json", summary)


def _load_rows(exp, name):
    return _read_jsonl(_require(exp / "prepare" / f"{name}.jsonl", "prepare"))


def _training_texts(rows):
    seen, texts = set(), []
    for r in rows:
        if r["base"] not in seen:
            seen.add(r["base"])
            texts.append(r["text"])
    return texts


# -- bpe / lm ---------------------------------------------------------------

def stage_bpe(cfg, exp, sdir):
    texts = _training_texts(_load_rows(exp, "train"))
    model = bpe_train(texts, cfg.text.bpe_vocab_size)
    model.save(sdir / "bpe.model")
    roundtrip = sum(model.decode(model.encode(t)) == " ".join(t.split()) for t in texts)
    _write_json(sdir / "summary.json", {"vocab_size": len(model), "merges": len(model.merges),
                                        "roundtrip_exact": roundtrip, "lines": len(texts)})


def stage_lm(cfg, exp, sdir):
    corpus = _training_texts(_load_rows(exp, "train"))
    for extra in cfg.data.lm_text:
        lines = cfg.path(extra).read_text(encoding="utf-8").splitlines()
        corpus += [normalize_transcript(l) for l in lines if l.strip()]
    counts = count_ngrams(corpus, cfg.lm.order, cfg.lm.unk_threshold)
    model = estimate(counts, cfg.lm.smoothing)
    model.write(sdir / "lm.arpa")
    dev = [r["text"] for r in _load_rows(exp, "dev")]
    _write_json(sdir / "summary.json", {
        "order": cfg.lm.order, "smoothing": cfg.lm.smoothing, "lines": len(corpus),
        "ngrams": [len(p) for p in model.probs], "warnings": model.warnings,
        "dev_perplexity": model.perplexity(dev) if dev else None,
    })


# -- training ---------------------------------------------------------------

def _examples(exp, name, ids, bpe, cfg):
    rows = {r["id"]: r for r in _load_rows(exp, name)}
    feats = read_feature_archive(exp / "prepare" / f"{name}.ark")
    stats = CmvnStats.load(exp / "prepare" / "cmvn.txt")
    out, dropped = [], []
    for uid in ids:
        r = rows[uid]
        f = feats[uid]
        f = cmvn_apply(f, stats if cfg.prepare.cmvn == "global" else CmvnStats.from_features(f))
        tokens = bpe.encode(r["text"]).ids
        if len(f) < 4 or not tokens or subsampled_length(len(f)) < ctc_min_frames(tokens):
            dropped.append(uid)
            continue
        out.append(Example(uid, f, tokens, r["text"]))
    if dropped:
        log.warning("%s: dropped %d utterances too short for their transcripts", name, len(dropped))
    return out, dropped


def _stage_config(sec, stage, model_cfg, cfg, base=None):
    policy = None
    if cfg.specaug.enabled:
        policy = SpecAugmentPolicy(cfg.specaug.num_freq_masks, cfg.specaug.max_freq_width,
                                   cfg.specaug.num_time_masks, cfg.specaug.max_time_width,
                                   cfg.specaug.seed)
    if base is None:
        return StageConfig(
            stage=stage, epochs=sec.epochs, batch_size=sec.batch_size, dropout=sec.dropout,
            schedule=NoamSchedule(sec.factor, model_cfg.d_model, sec.warmup),
            frozen_prefixes=sec.frozen, alpha=sec.alpha, seed=cfg.seed, grad_clip=sec.grad_clip,
            patience=sec.patience or None, max_steps=sec.max_steps or None, spec_augment=policy,
            decode_mode=sec.decode_mode, eval_every=sec.eval_every,
        )
    over = {k: getattr(sec, k) for k in ("batch_size", "dropout", "alpha", "eval_every")
            if getattr(sec, k) is not None}
    ft = finetune_config(base, epochs=sec.epochs, patience=sec.patience or None,
                         frozen_prefixes=sec.frozen, max_steps=sec.max_steps or None, **over)
    sched = ft.schedule
    if sec.factor is not None:
        sched = replace(sched, factor=sec.factor)
    return replace(ft, schedule=replace(sched, warmup_steps=sec.warmup))


def _model_config(cfg, bpe):
    mc = cfg.model
    if mc.input_dim != cfg.features.n_mels:
        raise ConfigError(f"model.input_dim {mc.input_dim} != features.n_mels {cfg.features.n_mels}")
    return replace(mc, vocab_size=len(bpe), dropout=cfg.pretrain.dropout)


def _pools(rows):
    by_lang = {}
    seen = set()
    for r in rows:
        if r["base"] in seen:
            continue
        seen.add(r["base"])
        by_lang.setdefault(r["lang"], []).append(Utterance(r["base"], "", r["duration"], r["text"], r["lang"]))
    return {lang: Manifest(recs) for lang, recs in by_lang.items()}


def stage_pretrain(cfg, exp, sdir):
    bpe = BpeModel.load(_require(exp / "bpe" / "bpe.model", "bpe"))
    rows = _load_rows(exp, "train")
    pools = _pools(rows)
    plan = build_mix_plan(pools, cfg.mix.config, cfg.mix.cs_fraction, cfg.mix.seed,
                          cfg.mix.nonnative_subsets or None)
    _write_json(sdir / "mix_plan.json", plan.to_dict())
    plotting.plot_mix_plan(plan, sdir / "mix_plan.png")
    chosen = set(plan.ids())
    train, dropped = _examples(exp, "train", [r["id"] for r in rows if r["base"] in chosen], bpe, cfg)
    dev, _ = _examples(exp, "dev", [r["id"] for r in _load_rows(exp, "dev")], bpe, cfg)
    mcfg = _model_config(cfg, bpe)
    scfg = _stage_config(cfg.pretrain, "pretrain", mcfg, cfg)
    model = ASRModel(mcfg, seed=cfg.seed, sos=bpe.sos, eos=bpe.eos, blank=bpe.blank)
    res = run_stage(scfg, train, dev, model=model, out_dir=sdir, tokenizer=bpe)
    _finish_training(sdir, scfg, res, len(train), dropped, model)


def stage_finetune(cfg, exp, sdir):
    bpe = BpeModel.load(_require(exp / "bpe" / "bpe.model", "bpe"))
    init = _require(exp / "pretrain" / "best.ckpt", "pretrain")
    rows = _load_rows(exp, "train")
    train, dropped = _examples(exp, "train", [r["id"] for r in rows if r["lang"] == "cs"], bpe, cfg)
    dev, _ = _examples(exp, "dev", [r["id"] for r in _load_rows(exp, "dev")], bpe, cfg)
    mcfg = _model_config(cfg, bpe)
    base = _stage_config(cfg.pretrain, "pretrain", mcfg, cfg)
    scfg = _stage_config(cfg.finetune, "finetune", mcfg, cfg, base=base)
    res = run_stage(scfg, train, dev, init=init, out_dir=sdir, tokenizer=bpe)
    _finish_training(sdir, scfg, res, len(train), dropped, None, init=str(init))


def _finish_training(sdir, scfg, res, n_train, dropped, model, init=None):
    plotting.plot_losses(res.steps, sdir / "loss.png", title=scfg.stage)
    summary = {
        "stage": scfg.stage, "factor": scfg.schedule.factor, "warmup": scfg.schedule.warmup_steps,
        "d_model": scfg.schedule.d_model, "steps": res.step, "epochs": len(res.metrics),
        "train_utterances": n_train, "dropped": dropped, "stopped_early": res.stopped_early,
        "init": init, "final": res.metrics[-1] if res.metrics else None,
        "stage_config": scfg.to_dict(),
    }
    _write_json(sdir / "summary.json", summary)


# -- decode / score ---------------------------------------------------------

def stage_decode(cfg, exp, sdir):
    bpe = BpeModel.load(_require(exp / "bpe" / "bpe.model", "bpe"))
    ckpt = _require(exp / cfg.decode.checkpoint / "best.ckpt", cfg.decode.checkpoint)
    model, _, _, _ = ASRModel.load(ckpt)
    lm = ArpaModel.read(_require(exp / "lm" / "lm.arpa", "lm")) if cfg.decode.use_lm else None
    d = cfg.decode
    dcfg = DecodeConfig(d.beam_size, d.ctc_weight, d.lm_weight, d.nbest, d.max_length_ratio,
                        d.word_reward)
    rows = _load_rows(exp, "dev")
    feats = read_feature_archive(_require(exp / "prepare" / "dev.ark", "prepare"))
    stats = CmvnStats.load(exp / "prepare" / "cmvn.txt")
    hyps, hyps_am, records = [], [], []
    for r in rows:
        f = feats[r["id"]]
        f = cmvn_apply(f, stats if cfg.prepare.cmvn == "global" else CmvnStats.from_features(f))
        nb = decode_utterance(model, f, dcfg, r["id"], bpe)
        hyps_am.append((r["id"], nb.best.text if len(nb) else ""))
        if lm is not None and len(nb):
            nb = rescore_nbest(nb, lm, dcfg.lm_weight, bpe, dcfg.word_reward)
        hyps.append((r["id"], nb.best.text if len(nb) else ""))
        records += list(nb.records())
    _write_jsonl(sdir / "nbest.jsonl", records)
    (sdir / "hyp.txt").write_text("".join(f"{u}\t{t}\n" for u, t in hyps), encoding="utf-8")
    (sdir / "hyp_am.txt").write_text("".join(f"{u}\t{t}\n" for u, t in hyps_am), encoding="utf-8")
    _write_json(sdir / "summary.json", {"checkpoint": str(ckpt), "utterances": len(rows),
                                        "decode": asdict(dcfg), "lm": lm is not None})


def read_hyps(path):
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            uid, _, text = line.partition("\t")
            out[uid] = text
    return out


def stage_score(cfg, exp, sdir):
    hyps = read_hyps(_require(exp / "decode" / "hyp.txt", "decode"))
    am = read_hyps(exp / "decode" / "hyp_am.txt")
    refs = {r["id"]: r["text"] for r in _load_rows(exp, "dev")}
    lex = TransliterationLexicon.load(cfg.path(cfg.data.lexicon)) if cfg.data.lexicon else None
    report = score_corpus(refs, hyps, lex)
    am_report = score_corpus(refs, am, lex)
    (sdir / "report.txt").write_text(report.to_text(), encoding="utf-8")
    data = report.to_dict()
    data["am_only"] = {"wer": am_report.wer, "t_wer": am_report.t_wer}
    _write_json(sdir / "report.json", data)
    plotting.plot_score_report(report, sdir / "report.png")


STAGE_FUNCS = {
    "prepare": stage_prepare, "bpe": stage_bpe, "lm": stage_lm, "pretrain": stage_pretrain,
    "finetune": stage_finetune, "decode": stage_decode, "score": stage_score,
}


# -- small I/O helpers ------------------------------------------------------

def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, ensure_ascii=False, default=_jsonable) + "\n",
                          encoding="utf-8")


def _jsonable(o):
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o))


def _write_jsonl(path, rows):
    Path(path).write_text("".join(json.dumps(r, ensure_ascii=False, default=_jsonable) + "\n"
                                  for r in rows), encoding="utf-8")


def _read_jsonl(path):
    return [json.loads(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]
