"""Utterance manifests stored as JSON Lines."""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

from .errors import DataError, FormatError

log = logging.getLogger(__name__)

LANG_TAGS = ("native", "nonnative", "cs")
_FIELDS = ("utt_id", "audio", "duration", "text", "lang")


@dataclass(frozen=True)
class Utterance:
    utt_id: str
    audio: str
    duration: float
    text: str
    lang: str

    def to_json(self):
        return json.dumps(asdict(self), ensure_ascii=False)


class Manifest:
    """Ordered utterance records with unique ids."""

    def __init__(self, records, root=None):
        self.records = list(records)
        self.root = Path(root) if root is not None else None
        seen = {}
        for i, r in enumerate(self.records):
            if r.utt_id in seen:
                raise DataError(f"duplicate utt_id {r.utt_id!r} (records {seen[r.utt_id] + 1} and {i + 1})")
            seen[r.utt_id] = i
        self._by_id = seen

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, utt_id):
        return self.records[self._by_id[utt_id]]

    def __contains__(self, utt_id):
        return utt_id in self._by_id

    @property
    def ids(self):
        return [r.utt_id for r in self.records]

    def hours(self, lang=None):
        return sum(r.duration for r in self.records if lang is None or r.lang == lang) / 3600.0

    def hours_by_lang(self):
        return {tag: self.hours(tag) for tag in LANG_TAGS if any(r.lang == tag for r in self.records)}

    def filter(self, lang):
        return Manifest([r for r in self.records if r.lang == lang], self.root)

    def subset(self, ids):
        return Manifest([self[i] for i in ids], self.root)

    def audio_path(self, rec):
        p = Path(rec.audio)
        return p if p.is_absolute() or self.root is None else self.root / p

    def summary(self):
        parts = [f"{tag}={h:.4f}h" for tag, h in self.hours_by_lang().items()]
        return f"{len(self)} utterances; " + " ".join(parts)

    def write(self, path):
        Path(path).write_text("".join(r.to_json() + "\n" for r in self.records), encoding="utf-8")


def parse_manifest(path):
    """Read and validate a JSON Lines manifest.

    Line numbers in errors are 1-based. A duplicated ``utt_id`` names the
    lines of both occurrences.
    """
    path = Path(path)
    records, first_line = [], {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}: malformed JSON: {e.msg}", lineno, unit="line") from e
            if not isinstance(obj, dict):
                raise FormatError(f"{path}: expected a JSON object", lineno, unit="line")
            for key in _FIELDS:
                if key not in obj:
                    raise FormatError(f"{path}: missing field {key!r}", lineno, unit="line")
            try:
                duration = float(obj["duration"])
            except (TypeError, ValueError):
                raise FormatError(f"{path}: field 'duration' is not a number", lineno, unit="line")
            if not duration > 0:
                raise FormatError(f"{path}: field 'duration' must be positive", lineno, unit="line")
            if obj["lang"] not in LANG_TAGS:
                raise FormatError(f"{path}: field 'lang' must be one of {LANG_TAGS}", lineno, unit="line")
            uid = str(obj["utt_id"])
            if uid in first_line:
                raise DataError(
                    f"{path}: duplicate utt_id {uid!r} on lines {first_line[uid]} and {lineno}"
                )
            first_line[uid] = lineno
            records.append(Utterance(uid, str(obj["audio"]), duration, str(obj["text"]), obj["lang"]))
    manifest = Manifest(records, path.parent)
    log.info("%s: %s", path.name, manifest.summary())
    return manifest
