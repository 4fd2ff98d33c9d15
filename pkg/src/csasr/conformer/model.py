"""Joint CTC/attention acoustic model."""

import numpy as np

from ..numerics import functional as F
from ..numerics.checkpoint import load_checkpoint, save_checkpoint
from ..numerics.module import Module
from ..numerics.tensor import Tensor
from .config import ConformerConfig
from .layers import ConformerEncoder, Linear, TransformerDecoder
from .losses import LossOutput, ce_loss, ctc_loss, joint_loss


def pad_batch(seqs, value=0.0, dtype=np.float64):
    lens = np.array([len(s) for s in seqs], dtype=np.int64)
    shape = (len(seqs), int(lens.max()) if len(seqs) else 0) + np.asarray(seqs[0]).shape[1:]
    out = np.full(shape, value, dtype=dtype)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lens


def frame_targets(targets, sos, eos, pad):
    """Decoder inputs ``[sos] + y`` and outputs ``y + [eos]``, padded; returns (ys_in, ys_out, lens)."""
    ys_in, lens = pad_batch([[sos] + list(y) for y in targets], pad, np.int64)
    ys_out, _ = pad_batch([list(y) + [eos] for y in targets], pad, np.int64)
    return ys_in, ys_out, lens


class ASRModel(Module):
    """Conformer encoder, CTC projection, and transformer decoder over one shared vocabulary."""

    def __init__(self, cfg, rng=None, seed=0, sos=None, eos=None, blank=0):
        if rng is None:
            rng = np.random.default_rng(seed)
        dtype = np.dtype(cfg.dtype)
        self.cfg = cfg
        self.rng = rng
        self.encoder = ConformerEncoder(cfg, rng, dtype)
        self.ctc = Linear(cfg.d_model, cfg.vocab_size, rng, dtype=dtype)
        self.decoder = TransformerDecoder(cfg, rng, dtype)
        self.blank = blank
        self.sos = cfg.vocab_size - 2 if sos is None else sos
        self.eos = cfg.vocab_size - 1 if eos is None else eos

    def encode(self, feats, lengths=None):
        if not isinstance(feats, Tensor):
            feats = np.asarray(feats, dtype=self.cfg.dtype)
        if feats.ndim == 2:
            feats = feats[None]
        if lengths is None:
            lengths = np.full(feats.shape[0], feats.shape[1])
        return self.encoder(feats, np.asarray(lengths))

    def ctc_log_probs(self, enc):
        return F.log_softmax(self.ctc(enc), axis=-1)

    def decoder_forward(self, enc, enc_lens, ys_in, ys_lens=None):
        return self.decoder(enc, enc_lens, ys_in, ys_lens)

    def forward(self, feats, lengths, targets, alpha=None):
        """Return ``(l_asr tensor, LossOutput)`` for a padded feature batch."""
        alpha = self.cfg.ctc_weight if alpha is None else alpha
        enc, enc_lens = self.encode(feats, lengths)
        l_ctc = ctc_loss(self.ctc_log_probs(enc), targets, enc_lens, self.blank)
        ys_in, ys_out, ys_lens = frame_targets(targets, self.sos, self.eos, self.eos)
        logits = self.decoder(enc, enc_lens, ys_in, ys_lens)
        mask = np.arange(ys_out.shape[1])[None, :] < ys_lens[:, None]
        l_ce = ce_loss(logits, ys_out, mask, self.cfg.label_smoothing)
        l_asr = joint_loss(l_ctc, l_ce, alpha)
        out = LossOutput(float(l_asr.data), float(l_ctc.data), float(l_ce.data), alpha)
        return l_asr, out

    def save(self, path, step=0, extra=None, meta=None):
        tensors = dict(self.state_dict())
        tensors.update(extra or {})
        info = {"model": self.cfg.to_dict(), "sos": self.sos, "eos": self.eos, "blank": self.blank}
        info.update(meta or {})
        save_checkpoint(path, tensors, step, info)

    @classmethod
    def load(cls, path):
        """Return ``(model, step, extra_tensors, meta)``."""
        tensors, step, meta = load_checkpoint(path)
        cfg = ConformerConfig.from_dict(meta["model"])
        model = cls(cfg, seed=0, sos=meta["sos"], eos=meta["eos"], blank=meta["blank"])
        own = set(model.state_dict())
        model.load_state_dict({k: v for k, v in tensors.items() if k in own})
        extra = {k: v for k, v in tensors.items() if k not in own}
        return model, step, extra, meta
