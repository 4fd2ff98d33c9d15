"""Noam-scheduled training: data-mix planning, pre-training and fine-tuning."""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .conformer.model import ASRModel, pad_batch
from .decoder import greedy_decode
from .errors import ConfigError, ContractError, DataError, TrainingDiverged
from .frontend import SpecAugmentPolicy, spec_augment
from .numerics.tensor import no_grad
from .scoring import wer

log = logging.getLogger(__name__)


# -- learning-rate schedule -------------------------------------------------

@dataclass(frozen=True)
class NoamSchedule:
    factor: float = 5.0
    d_model: int = 512
    warmup_steps: int = 20000

    def __post_init__(self):
        if not self.factor > 0:
            raise ConfigError(f"Noam factor must be positive, got {self.factor}")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup must be non-negative, got {self.warmup_steps}")

    def __call__(self, step):
        return noam_lr(self, step)


def noam_lr(s, step):
    """``factor · d_model^-½ · min(step^-½, step · warmup^-3/2)``; no warmup means pure decay."""
    if step < 1:
        raise ContractError(f"Noam schedule is defined from step 1, got {step}")
    decay = step**-0.5
    if s.warmup_steps > 0:
        decay = min(decay, step * s.warmup_steps**-1.5)
    return s.factor * s.d_model**-0.5 * decay


# -- optimizer --------------------------------------------------------------

class Adam:
    """Adam over named parameters; parameters with ``requires_grad`` off are never touched."""

    def __init__(self, named_params, betas=(0.9, 0.98), eps=1e-9):
        self.params = dict(named_params)
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state_tensors(self):
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_tensors(self, tensors, t):
        for k in self.params:
            self.m[k] = np.array(tensors[f"adam.m.{k}"])
            self.v[k] = np.array(tensors[f"adam.v.{k}"])
        self.t = t


def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the norm."""
    grads = [p.grad for p in params if p.requires_grad and p.grad is not None]
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.requires_grad and p.grad is not None:
                p.grad = p.grad * scale
    return total


# -- freezing ---------------------------------------------------------------

def _under(name, prefix):
    return name == prefix or name.startswith(prefix + ".")


def set_trainable(model, frozen_prefixes=()):
    """Freeze exactly the parameter subtrees named by ``frozen_prefixes``; returns the trainable count."""
    groups = model.param_groups()
    for prefix in frozen_prefixes:
        if not any(_under(g.name, prefix) for g in groups):
            raise ConfigError(f"frozen prefix {prefix!r} matches no parameter group")
    for g in groups:
        g.trainable = not any(_under(g.name, p) for p in frozen_prefixes)
    return sum(g.count for g in groups if g.trainable)


# -- data-mix planning ------------------------------------------------------

MIX_RATIOS = {"ev": 45.0 / 55.0, "sv": 1.0 / 4.0}


@dataclass
class MixPlan:
    config: str
    targets: dict
    realized: dict
    selected: dict
    seed: int

    def ids(self):
        return [u for src in ("native", "nonnative", "cs") for u in self.selected.get(src, [])]

    def to_dict(self):
        return asdict(self)


def _take(pool, target_hours, rng):
    order = rng.permutation(len(pool))
    picked, total = [], 0.0
    target = target_hours * 3600.0
    for k in order:
        if total >= target - 1e-9:
            break
        rec = pool.records[k]
        picked.append(rec.utt_id)
        total += rec.duration
    return picked, total / 3600.0


def build_mix_plan(pools, config="ev", cs_fraction=0.5, seed=0, nonnative_subsets=None,
                   targets=None):
    """Choose pre-training hours per source.

    ``pools`` maps ``native``, ``nonnative`` and ``cs`` to manifests. Native
    data is used in full. The non-native target is ``native · 45/55`` (Ev) or
    ``native / 4`` (Sv), capped by availability; when ``nonnative_subsets``
    lists the hour sizes of a corpus's predefined subsets, the target snaps to
    the nearest available subset. The CS target is ``cs_fraction`` of the CS
    pool. Explicit ``targets`` override all of this. Utterances are drawn in
    a seeded shuffle order until each target is reached.
    """
    for src in ("native", "nonnative", "cs"):
        if src not in pools or len(pools[src]) == 0:
            raise DataError(f"mix planning needs a non-empty {src!r} pool")
    avail = {src: pools[src].hours() for src in ("native", "nonnative", "cs")}
    if targets is None:
        key = str(config).lower()
        if key not in MIX_RATIOS:
            raise ConfigError(f"unknown mix config {config!r}; expected Ev or Sv")
        nonnative = min(avail["nonnative"], avail["native"] * MIX_RATIOS[key])
        if nonnative_subsets:
            usable = [h for h in nonnative_subsets if h <= avail["nonnative"] + 1e-9]
            if usable:
                nonnative = min(usable, key=lambda h: (abs(h - nonnative), h))
        targets = {"native": avail["native"], "nonnative": nonnative,
                   "cs": cs_fraction * avail["cs"]}
    for src, h in targets.items():
        if h > avail[src] + 1e-9:
            raise ConfigError(f"{src} target {h:.3f} h exceeds the {avail[src]:.3f} h available")
    rng = np.random.default_rng(seed)
    selected, realized = {}, {}
    for src in ("native", "nonnative", "cs"):
        selected[src], realized[src] = _take(pools[src], targets[src], rng)
    return MixPlan(str(config), dict(targets), realized, selected, seed)


# -- stage configuration ----------------------------------------------------

@dataclass
class StageConfig:
    stage: str = "pretrain"
    epochs: int = 60
    batch_size: int = 64
    dropout: float = 0.1
    schedule: NoamSchedule = field(default_factory=NoamSchedule)
    frozen_prefixes: tuple = ()
    alpha: float = 0.3
    seed: int = 0
    grad_clip: float = 5.0
    patience: int = None
    max_steps: int = None
    spec_augment: SpecAugmentPolicy = None
    decode_mode: str = "attention"
    eval_every: int = 1

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"stage must be pretrain or finetune, got {self.stage!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"ctc weight must lie in [0, 1], got {self.alpha}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("epochs and batch_size must be positive")
        self.frozen_prefixes = tuple(self.frozen_prefixes)

    def to_dict(self):
        d = asdict(self)
        d["frozen_prefixes"] = list(self.frozen_prefixes)
        return d


FINETUNE_DIVISOR = 50


def finetune_config(pretrain, epochs=20, patience=3, **overrides):
    """Fine-tuning defaults derived from a pre-training config: factor/50 and no warmup."""
    sched = replace(pretrain.schedule, factor=pretrain.schedule.factor / FINETUNE_DIVISOR,
                    warmup_steps=0)
    base = replace(pretrain, stage="finetune", epochs=epochs, schedule=sched, patience=patience,
                   max_steps=None)
    return replace(base, **overrides)


# -- the training loop ------------------------------------------------------

@dataclass
class Example:
    utt_id: str
    feats: np.ndarray
    tokens: list
    text: str = ""


@dataclass
class StageResult:
    model: ASRModel
    metrics: list
    steps: list
    best_checkpoint: Path = None
    last_checkpoint: Path = None
    step: int = 0
    stopped_early: bool = False


def make_batches(lengths, batch_size, rng, bucket=8):
    """Shuffle, sort by length inside windows of ``bucket`` batches, then shuffle the batches."""
    order = rng.permutation(len(lengths))
    window = batch_size * bucket
    batches = []
    for s in range(0, len(order), window):
        chunk = sorted(order[s : s + window], key=lambda i: (lengths[i], i))
        batches += [chunk[k : k + batch_size] for k in range(0, len(chunk), batch_size)]
    return [batches[k] for k in rng.permutation(len(batches))]


def _set_dropout(model, rate, rng):
    for mod in model.modules():
        if hasattr(mod, "dropout"):
            mod.dropout = rate
        if hasattr(mod, "rng"):
            mod.rng = rng


def _batch_arrays(examples, idx, policy=None, rng=None):
    feats = [examples[i].feats for i in idx]
    if policy is not None:
        feats = [spec_augment(f, policy, rng) for f in feats]
    x, lens = pad_batch(feats)
    return x, lens, [list(examples[i].tokens) for i in idx]


def evaluate(model, examples, alpha, batch_size=64, tokenizer=None, mode="attention"):
    """Mean dev losses (utterance-weighted) and greedy-decode WER when a tokenizer is given."""
    if not examples:
        return {}
    was_training = model.training
    model.eval()
    tot = np.zeros(3)
    hyps = []
    try:
        for s in range(0, len(examples), batch_size):
            idx = list(range(s, min(s + batch_size, len(examples))))
            x, lens, tg = _batch_arrays(examples, idx)
            with no_grad():
                _, out = model.forward(x, lens, tg, alpha)
            tot += len(idx) * np.array([out.l_asr, out.l_ctc, out.l_ce])
            if tokenizer is not None:
                hyps += greedy_decode(model, x, lens, mode)
    finally:
        model.train(was_training)
    res = dict(zip(("l_asr", "l_ctc", "l_ce"), (tot / len(examples)).tolist()))
    if tokenizer is not None:
        res["wer"] = wer([e.text for e in examples], [tokenizer.decode(h) for h in hyps])
    return res


def run_stage(cfg, train, dev=None, model=None, init=None, out_dir=None, tokenizer=None,
              resume=True, step_log=True):
    """Train one stage and return a :class:`StageResult`.

    ``train`` and ``dev`` are lists of :class:`Example`. Fine-tuning needs
    ``init`` (a checkpoint path) or an already-built ``model``. With
    ``out_dir`` the stage writes ``metrics.jsonl`` (one object per epoch),
    ``steps.jsonl`` (one object per update), ``last.ckpt`` every epoch and
    ``best.ckpt`` at the lowest dev (or train) ``l_asr``. An existing
    ``last.ckpt`` is resumed, and the schedule continues from its step.
    """
    if not train:
        raise DataError("training set is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    last_path = out / "last.ckpt" if out else None
    best_path = out / "best.ckpt" if out else None

    start_epoch, step, best, bad_epochs = 0, 0, math.inf, 0
    opt_state = None
    metrics, steps = [], []
    if resume and last_path is not None and last_path.exists():
        model, step, extra, meta = ASRModel.load(last_path)
        start_epoch, best, bad_epochs = meta["epoch"], meta["best"], meta["bad_epochs"]
        opt_state = (extra, meta["adam_t"])
        metrics = _read_jsonl(out / "metrics.jsonl")[:start_epoch]
        steps = _read_jsonl(out / "steps.jsonl")[:step]
        log.info("resuming %s at epoch %d, step %d", cfg.stage, start_epoch, step)
    elif model is None:
        if init is None:
            if cfg.stage == "finetune":
                raise ConfigError("fine-tuning needs an initial checkpoint")
            raise ConfigError("run_stage needs a model or an init checkpoint")
        model, _, _, _ = ASRModel.load(init)
    if out is not None:
        _write_jsonl(out / "metrics.jsonl", metrics)
        _write_jsonl(out / "steps.jsonl", steps)

    set_trainable(model, cfg.frozen_prefixes)
    opt = Adam(model.named_parameters())
    if opt_state is not None:
        opt.load_state_tensors(*opt_state)
    model.train()
    lengths = [len(e.feats) for e in train]
    stopped = False
    done = cfg.max_steps is not None and step >= cfg.max_steps

    for epoch in range(start_epoch, cfg.epochs):
        if done or stopped:
            break
        t0 = time.time()
        batches = make_batches(lengths, cfg.batch_size, np.random.default_rng([cfg.seed, epoch]))
        sums, count = np.zeros(3), 0
        for b, idx in enumerate(batches):
            step += 1
            rng = np.random.default_rng([cfg.seed, epoch, b, 1])
            _set_dropout(model, cfg.dropout, rng)
            x, lens, tg = _batch_arrays(train, idx, cfg.spec_augment, rng)
            model.zero_grad()
            loss, parts = model.forward(x, lens, tg, cfg.alpha)
            batch_id = f"epoch{epoch}-batch{b}"
            if not np.isfinite(parts.l_asr):
                raise TrainingDiverged(step, batch_id)
            loss.backward()
            gnorm = clip_grad_norm(model.parameters(), cfg.grad_clip)
            lr = noam_lr(cfg.schedule, step)
            opt.step(lr)
            rec = {"step": step, "epoch": epoch, "batch": batch_id, "lr": lr,
                   "l_asr": parts.l_asr, "l_ctc": parts.l_ctc, "l_ce": parts.l_ce,
                   "alpha": parts.alpha, "grad_norm": gnorm}
            steps.append(rec)
            if out is not None and step_log:
                _append_jsonl(out / "steps.jsonl", rec)
            sums += len(idx) * np.array([parts.l_asr, parts.l_ctc, parts.l_ce])
            count += len(idx)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break

        m = {"epoch": epoch + 1, "step": step, "lr": lr}
        m.update(zip(("l_asr", "l_ctc", "l_ce"), (sums / max(count, 1)).tolist()))
        evaluate_now = (epoch + 1) % cfg.eval_every == 0 or done or epoch + 1 == cfg.epochs
        if dev and evaluate_now:
            ev = evaluate(model, dev, cfg.alpha, cfg.batch_size, tokenizer, cfg.decode_mode)
            m.update({f"dev_{k}": v for k, v in ev.items()})
        m["seconds"] = time.time() - t0
        metrics.append(m)
        crit = m.get("dev_l_asr", m["l_asr"]) if (dev and evaluate_now) else None
        if crit is not None:
            if crit < best - 1e-12:
                best, bad_epochs = crit, 0
                if best_path is not None:
                    _save(model, opt, best_path, step, epoch + 1, best, bad_epochs, cfg)
            else:
                bad_epochs += 1
                if cfg.patience is not None and bad_epochs >= cfg.patience:
                    stopped = True
        log.info("%s epoch %d: %s", cfg.stage, epoch + 1,
                 " ".join(f"{k}={v:.4g}" for k, v in m.items() if isinstance(v, float)))
        if out is not None:
            _append_jsonl(out / "metrics.jsonl", m)
            _save(model, opt, last_path, step, epoch + 1, best, bad_epochs, cfg)

    if best_path is not None and not best_path.exists() and last_path.exists():
        best_path.write_bytes(last_path.read_bytes())
    return StageResult(model, metrics, steps, best_path, last_path, step, stopped)


def _save(model, opt, path, step, epoch, best, bad_epochs, cfg):
    tmp = path.with_suffix(".tmp")
    model.save(tmp, step, extra=opt.state_tensors(),
               meta={"epoch": epoch, "best": best, "bad_epochs": bad_epochs, "adam_t": opt.t,
                     "stage": cfg.stage})
    tmp.replace(path)


def _read_jsonl(path):
    if not path.exists():
        return []
    return [json.loads(l) for l in path.read_text().splitlines() if l.strip()]


def _write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


def _append_jsonl(path, row):
    with open(path, "a") as fh:
        fh.write(json.dumps(row) + "\n")
