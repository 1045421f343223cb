"""Caption corpora: ingestion, validation, grouping, frame sampling, sentence splitting.

A corpus is a set of videos, each carrying a weak video-level label
(normal/abnormal) and an ordered sequence of frame-level captions.  The
interchange format is JSON-Lines, one caption per line:

    {"video_id": str, "frame_index": int, "label": "normal"|"abnormal", "text": str}

The label must agree across all lines of a video.  All operations here are
pure; a loaded corpus is immutable by convention and safe to share across
workers.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError

LABELS = ("normal", "abnormal")

_SENTENCE_RE = re.compile(r"(?<=[.!?])\s+")


@dataclass(frozen=True)
class Caption:
    """One frame-level caption."""

    video_id: str
    frame_index: int
    text: str

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValidationError(
                f"caption for video {self.video_id!r} has negative frame_index {self.frame_index}"
            )
        if not self.text.strip():
            raise ValidationError(
                f"caption for video {self.video_id!r} frame {self.frame_index} has empty text"
            )


@dataclass(frozen=True)
class VideoRecord:
    """All captions of one video plus its weak video-level label."""

    video_id: str
    label: str
    captions: tuple[Caption, ...]

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValidationError(f"video {self.video_id!r}: unknown label {self.label!r}")
        indices = [c.frame_index for c in self.captions]
        if sorted(indices) != indices:
            object.__setattr__(
                self, "captions", tuple(sorted(self.captions, key=lambda c: c.frame_index))
            )
            indices = sorted(indices)
        if len(set(indices)) != len(indices):
            raise ValidationError(f"video {self.video_id!r}: duplicate frame_index values")


@dataclass(frozen=True)
class CaptionCorpus:
    """An immutable collection of videos with unique ids."""

    videos: tuple[VideoRecord, ...]
    source_tag: str = ""

    def __post_init__(self):
        ids = [v.video_id for v in self.videos]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate video_id values in corpus: {dupes}")

    def __len__(self) -> int:
        return len(self.videos)

    def video(self, video_id: str) -> VideoRecord:
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise ValidationError(f"video id {video_id!r} not found in corpus")

    def all_caption_texts(self) -> list[str]:
        return [c.text for v in self.videos for c in v.captions]


def load_captions(path: str | Path, source_tag: str | None = None) -> CaptionCorpus:
    """Load a JSONL caption file into a validated corpus.

    Raises ValidationError naming the offending line for malformed JSON,
    missing/bad fields, duplicate (video_id, frame_index) pairs, label
    disagreement within a video, or an empty file.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"caption file does not exist: {path}")

    per_video: dict[str, list[Caption]] = {}
    labels: dict[str, str] = {}
    seen: set[tuple[str, int]] = set()
    n_lines = 0
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            n_lines += 1
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValidationError(f"{path}:{lineno}: malformed JSON ({e.msg})") from e
            if not isinstance(rec, dict):
                raise ValidationError(f"{path}:{lineno}: record is not an object")
            for key, typ in (("video_id", str), ("frame_index", int), ("label", str), ("text", str)):
                if key not in rec:
                    raise ValidationError(f"{path}:{lineno}: missing field {key!r}")
                if not isinstance(rec[key], typ) or isinstance(rec[key], bool):
                    raise ValidationError(f"{path}:{lineno}: field {key!r} must be {typ.__name__}")
            vid, fidx, label, text = rec["video_id"], rec["frame_index"], rec["label"], rec["text"]
            if label not in LABELS:
                raise ValidationError(f"{path}:{lineno}: label must be one of {LABELS}, got {label!r}")
            if (vid, fidx) in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate (video_id, frame_index) = ({vid!r}, {fidx})")
            seen.add((vid, fidx))
            if vid in labels and labels[vid] != label:
                raise ValidationError(f"{path}:{lineno}: label {label!r} disagrees with earlier "
                                      f"label {labels[vid]!r} for video {vid!r}")
            labels[vid] = label
            try:
                cap = Caption(video_id=vid, frame_index=fidx, text=text)
            except ValidationError as e:
                raise ValidationError(f"{path}:{lineno}: {e}") from e
            per_video.setdefault(vid, []).append(cap)

    if n_lines == 0:
        raise ValidationError(f"caption file is empty: {path}")

    videos = tuple(
        VideoRecord(
            video_id=vid,
            label=labels[vid],
            captions=tuple(sorted(caps, key=lambda c: c.frame_index)),
        )
        for vid, caps in per_video.items()
    )
    return CaptionCorpus(videos=videos, source_tag=source_tag if source_tag is not None else str(path))


def save_captions(corpus: CaptionCorpus, path: str | Path) -> None:
    """Write a corpus back to JSONL (one caption per line, videos in order)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for v in corpus.videos:
            for c in v.captions:
                fh.write(json.dumps(
                    {"video_id": c.video_id, "frame_index": c.frame_index,
                     "label": v.label, "text": c.text},
                    ensure_ascii=False) + "\n")


def group_by_class(corpus: CaptionCorpus) -> tuple[CaptionCorpus, CaptionCorpus]:
    """Partition a corpus into (normal, abnormal) sub-corpora, preserving order."""
    normal = tuple(v for v in corpus.videos if v.label == "normal")
    abnormal = tuple(v for v in corpus.videos if v.label == "abnormal")
    return (
        CaptionCorpus(videos=normal, source_tag=corpus.source_tag),
        CaptionCorpus(videos=abnormal, source_tag=corpus.source_tag),
    )


def sample_evenly(video: VideoRecord, k: int) -> tuple[Caption, ...]:
    """Select up to ``k`` evenly spaced captions from a video, by rank.

    With N available captions and N > k >= 2, positions are
    floor(i * (N - 1) / (k - 1)) for i = 0..k-1, so the first and last
    captions are always included.  With N <= k all captions are returned;
    k == 1 selects the first caption.  Deterministic and idempotent.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    caps = video.captions
    n = len(caps)
    if n == 0:
        raise ValidationError(f"video {video.video_id!r} has no captions")
    if n <= k:
        return tuple(caps)
    if k == 1:
        return (caps[0],)
    positions = [(i * (n - 1)) // (k - 1) for i in range(k)]
    return tuple(caps[p] for p in positions)


def sentence_split(text: str) -> list[str]:
    """Split text into sentences at '.', '!', '?' followed by whitespace or end.

    Abbreviation-blind by design: captions are machine-generated and uniform,
    so no special-casing of "Mr." and friends.  Never returns empty or
    whitespace-only sentences; joining the result with single spaces
    reproduces the input modulo whitespace.
    """
    stripped = text.strip()
    if not stripped:
        return []
    parts = _SENTENCE_RE.split(stripped)
    return [re.sub(r"\s+", " ", p).strip() for p in parts if p.strip()]
