from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tbvad.corpus import Caption, CaptionCorpus, VideoRecord


def make_video(video_id: str, label: str, texts: list[str], start: int = 0) -> VideoRecord:
    caps = tuple(
        Caption(video_id=video_id, frame_index=start + i, text=t) for i, t in enumerate(texts)
    )
    return VideoRecord(video_id=video_id, label=label, captions=caps)


@pytest.fixture
def small_corpus() -> CaptionCorpus:
    return CaptionCorpus(
        videos=(
            make_video("v1", "normal", ["A man walks along the sidewalk.", "He carries a backpack."]),
            make_video("v2", "abnormal", ["Two people are fighting near a car.", "One swings a bat."]),
        ),
        source_tag="unit",
    )
