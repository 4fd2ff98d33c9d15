"""Audio front end: WAV I/O, speed perturbation, log-Mel features, CMVN, SpecAugment."""

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .errors import ConfigError, DegenerateStatsError, EmptyInputError, FormatError, ShapeError

TARGET_RATE = 16000


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = TARGET_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ShapeError("AudioBuffer is mono: samples must be 1-d")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureMatrix:
    frames: np.ndarray
    frame_shift: float = 0.01

    @property
    def dim(self):
        return self.frames.shape[1]

    @property
    def num_frames(self):
        return self.frames.shape[0]


@dataclass
class FeatureConfig:
    sample_rate: int = TARGET_RATE
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 80
    fmin: float = 20.0
    fmax: float = 7600.0
    log_floor: float = 1e-10

    @property
    def window(self):
        return int(round(self.sample_rate * self.window_ms / 1000))

    @property
    def hop(self):
        return int(round(self.sample_rate * self.hop_ms / 1000))


# -- WAV -----------------------------------------------------------------

def _read_chunks(buf):
    if len(buf) < 12:
        raise FormatError("file too short for a RIFF header", len(buf))
    if buf[:4] != b"RIFF":
        raise FormatError("missing RIFF tag", 0)
    if buf[8:12] != b"WAVE":
        raise FormatError("missing WAVE tag", 8)
    pos = 12
    chunks = {}
    while pos + 8 <= len(buf):
        tag, size = struct.unpack("<4sI", buf[pos : pos + 8])
        body = pos + 8
        if body + size > len(buf):
            raise FormatError(f"chunk {tag!r} truncated", pos)
        chunks.setdefault(tag, (body, size))
        pos = body + size + (size & 1)
    return chunks


def load_wav(path, target_rate=TARGET_RATE):
    """Read 16-bit mono PCM; resample to ``target_rate`` when it differs."""
    buf = Path(path).read_bytes()
    chunks = _read_chunks(buf)
    if b"fmt " not in chunks:
        raise FormatError("no fmt chunk", 12)
    at, size = chunks[b"fmt "]
    if size < 16:
        raise FormatError("fmt chunk too short", at)
    fmt, channels, rate, _, _, bits = struct.unpack("<HHIIHH", buf[at : at + 16])
    if fmt != 1:
        raise FormatError(f"not PCM (format tag {fmt})", at)
    if channels != 1:
        raise FormatError(f"expected mono, found {channels} channels", at + 2)
    if bits != 16:
        raise FormatError(f"expected 16-bit samples, found {bits}", at + 14)
    if b"data" not in chunks:
        raise FormatError("no data chunk", len(buf))
    at, size = chunks[b"data"]
    if size % 2:
        raise FormatError("odd data length for 16-bit samples", at + size)
    pcm = np.frombuffer(buf[at : at + size], dtype="<i2")
    audio = AudioBuffer(pcm.astype(np.float64) / 32768.0, rate)
    if target_rate and rate != target_rate:
        audio = resample(audio, target_rate)
    return audio


def write_wav(path, audio):
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    data = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE"
    fmt = b"fmt " + struct.pack(
        "<IHHIIHH", 16, 1, 1, audio.sample_rate, audio.sample_rate * 2, 2, 16
    )
    Path(path).write_bytes(header + fmt + b"data" + struct.pack("<I", len(data)) + data)


def resample(audio, rate):
    g = np.gcd(int(rate), int(audio.sample_rate))
    up, down = rate // g, audio.sample_rate // g
    return AudioBuffer(resample_poly(audio.samples, up, down), rate)


# -- augmentation --------------------------------------------------------

def speed_perturb(audio, factor):
    """Play ``audio`` ``factor`` times faster via linear interpolation of the time axis."""
    if factor <= 0:
        raise ConfigError(f"speed factor must be positive, got {factor}")
    if factor == 1.0:
        return AudioBuffer(audio.samples.copy(), audio.sample_rate)
    n = len(audio)
    out_len = int(round(n / factor))
    pos = np.arange(out_len) * factor
    out = np.interp(pos, np.arange(n), audio.samples)
    return AudioBuffer(out, audio.sample_rate)


# -- log-Mel -------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(cfg):
    """Triangular filters of unit peak on the rfft bin grid; returns (centers_hz, weights)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    freqs = np.fft.rfftfreq(cfg.n_fft, 1.0 / cfg.sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(up, down))
    return edges[1:-1], weights


def num_frames(n_samples, cfg):
    return 1 + (n_samples - cfg.window) // cfg.hop


def log_mel(audio, cfg=None):
    cfg = cfg or FeatureConfig()
    x = audio.samples
    if len(x) < cfg.window:
        raise EmptyInputError(
            f"audio has {len(x)} samples, shorter than one {cfg.window}-sample window"
        )
    n = num_frames(len(x), cfg)
    idx = np.arange(cfg.window)[None, :] + cfg.hop * np.arange(n)[:, None]
    frames = x[idx] * np.hanning(cfg.window + 2)[1:-1]
    power = np.abs(np.fft.rfft(frames, n=cfg.n_fft)) ** 2
    _, fbank = mel_filterbank(cfg)
    mel = power @ fbank.T
    return FeatureMatrix(np.log(np.maximum(mel, cfg.log_floor)), cfg.hop / cfg.sample_rate)


# -- CMVN ----------------------------------------------------------------

@dataclass
class CmvnStats:
    count: int
    sum: np.ndarray
    sumsq: np.ndarray

    @classmethod
    def empty(cls, dim):
        return cls(0, np.zeros(dim), np.zeros(dim))

    @classmethod
    def from_features(cls, frames):
        frames = np.asarray(frames, dtype=np.float64)
        return cls(frames.shape[0], frames.sum(axis=0), (frames * frames).sum(axis=0))

    @property
    def dim(self):
        return len(self.sum)

    def merge(self, other):
        if other.dim != self.dim:
            raise ShapeError(f"cannot merge stats of dim {self.dim} and {other.dim}")
        return CmvnStats(self.count + other.count, self.sum + other.sum, self.sumsq + other.sumsq)

    def mean_std(self):
        if self.count <= 0:
            raise DegenerateStatsError(-1)
        mean = self.sum / self.count
        var = self.sumsq / self.count - mean * mean
        bad = np.flatnonzero(var <= 1e-12 * (1.0 + mean * mean))
        if len(bad):
            raise DegenerateStatsError(int(bad[0]))
        return mean, np.sqrt(var)

    def save(self, path):
        # repr round-trips doubles exactly
        lines = [f"{self.dim} {self.count}", " ".join(repr(float(v)) for v in self.sum),
                 " ".join(repr(float(v)) for v in self.sumsq)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text().splitlines()
        if len(lines) != 3:
            raise FormatError("CMVN stats need 3 lines", len(lines), unit="line")
        dim, count = (int(v) for v in lines[0].split())
        s = np.array([float(v) for v in lines[1].split()])
        ss = np.array([float(v) for v in lines[2].split()])
        if len(s) != dim or len(ss) != dim:
            raise FormatError("CMVN vector length does not match header", 2, unit="line")
        return cls(count, s, ss)


def cmvn_apply(feats, stats):
    frames = feats.frames if isinstance(feats, FeatureMatrix) else np.asarray(feats)
    if frames.shape[1] != stats.dim:
        raise ShapeError(f"features have dim {frames.shape[1]}, stats {stats.dim}")
    mean, std = stats.mean_std()
    out = (frames - mean) / std
    if isinstance(feats, FeatureMatrix):
        return FeatureMatrix(out, feats.frame_shift)
    return out


# -- SpecAugment ---------------------------------------------------------

@dataclass
class SpecAugmentPolicy:
    num_freq_masks: int = 2
    max_freq_width: int = 27
    num_time_masks: int = 2
    max_time_width: int = 40
    seed: int = 0

    def __post_init__(self):
        if min(self.num_freq_masks, self.max_freq_width, self.num_time_masks,
               self.max_time_width) < 0:
            raise ConfigError("SpecAugment widths and counts must be non-negative")


def spec_augment(feats, policy, rng=None):
    """Zero random frequency bands and time spans.

    Each mask width is drawn from ``1..max`` (capped by the matrix size);
    ``rng`` overrides the policy seed when given.
    """
    frames = feats.frames if isinstance(feats, FeatureMatrix) else np.asarray(feats)
    rng = rng if rng is not None else np.random.default_rng(policy.seed)
    out = frames.copy()
    t, d = out.shape
    for _ in range(policy.num_freq_masks):
        width = min(policy.max_freq_width, d)
        if width <= 0:
            break
        w = int(rng.integers(1, width + 1))
        start = int(rng.integers(0, d - w + 1))
        out[:, start : start + w] = 0.0
    for _ in range(policy.num_time_masks):
        width = min(policy.max_time_width, t)
        if width <= 0:
            break
        w = int(rng.integers(1, width + 1))
        start = int(rng.integers(0, t - w + 1))
        out[start : start + w, :] = 0.0
    if isinstance(feats, FeatureMatrix):
        return FeatureMatrix(out, feats.frame_shift)
    return out


# -- feature archive -----------------------------------------------------

_REC = b"FEAT"


class FeatureArchiveWriter:
    """Append-only ``.ark`` of records ``FEAT, u16 id len, id, u32 T, u32 D, <f8 values``.

    The sibling ``.idx`` file is JSON Lines: ``{"utt_id", "offset", "T", "D"}``.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "wb")
        self._index = []

    def write(self, utt_id, frames):
        frames = np.ascontiguousarray(frames, dtype="<f8")
        raw = utt_id.encode()
        offset = self._fh.tell()
        self._fh.write(_REC + struct.pack("<H", len(raw)) + raw)
        self._fh.write(struct.pack("<II", *frames.shape))
        self._fh.write(frames.tobytes())
        self._index.append({"utt_id": utt_id, "offset": offset, "T": frames.shape[0],
                            "D": frames.shape[1]})

    def close(self):
        self._fh.close()
        with open(self.path.with_suffix(".idx"), "w") as fh:
            for rec in self._index:
                fh.write(json.dumps(rec) + "\n")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_feature_archive(path):
    """Return ``{utt_id: frames}`` in index order."""
    path = Path(path)
    buf = path.read_bytes()
    out = {}
    for rec in (json.loads(l) for l in path.with_suffix(".idx").read_text().splitlines() if l):
        pos = rec["offset"]
        if buf[pos : pos + 4] != _REC:
            raise FormatError("bad record tag", pos)
        (n,) = struct.unpack("<H", buf[pos + 4 : pos + 6])
        utt = buf[pos + 6 : pos + 6 + n].decode()
        pos += 6 + n
        t, d = struct.unpack("<II", buf[pos : pos + 8])
        pos += 8
        end = pos + 8 * t * d
        if end > len(buf):
            raise FormatError(f"record {utt} truncated", pos)
        out[utt] = np.frombuffer(buf[pos:end], dtype="<f8").reshape(t, d).copy()
    return out
