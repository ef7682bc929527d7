"""Four-category emotion label schema."""

from __future__ import annotations

from enum import IntEnum


class EmotionLabel(IntEnum):
    NEUTRAL = 0
    EXCITED = 1
    ANGRY = 2
    SAD = 3

    @property
    def display(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: "str | int | EmotionLabel") -> "EmotionLabel":
        """Accept a label id, a canonical name or an already-parsed label."""
        if isinstance(value, EmotionLabel):
            return value
        if isinstance(value, (int,)) and not isinstance(value, bool):
            return cls(value)
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise ValueError(f"unknown emotion label {value!r}") from None


N_CLASSES = len(EmotionLabel)
LABEL_NAMES = tuple(label.display for label in EmotionLabel)

# "happy" is folded into "excited" at ingest so downstream code only sees four ids.
_RAW_TO_LABEL = {
    "neutral": EmotionLabel.NEUTRAL,
    "neu": EmotionLabel.NEUTRAL,
    "neutral state": EmotionLabel.NEUTRAL,
    "happy": EmotionLabel.EXCITED,
    "hap": EmotionLabel.EXCITED,
    "happiness": EmotionLabel.EXCITED,
    "excited": EmotionLabel.EXCITED,
    "exc": EmotionLabel.EXCITED,
    "angry": EmotionLabel.ANGRY,
    "ang": EmotionLabel.ANGRY,
    "anger": EmotionLabel.ANGRY,
    "sad": EmotionLabel.SAD,
    "sadness": EmotionLabel.SAD,
}


def map_raw_label(raw: str) -> EmotionLabel | None:
    """Map a corpus label string into the schema.

    Returns ``None`` for anything outside neutral/happy/excited/angry/sad;
    callers exclude such utterances instead of relabeling them.
    """
    return _RAW_TO_LABEL.get(raw.strip().lower())
