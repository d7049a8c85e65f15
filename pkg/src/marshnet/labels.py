"""The four modified-Marsh classes and their fixed index mapping."""
from __future__ import annotations

CLASSES: tuple[str, ...] = ("I", "IIIa", "IIIb", "IIIc")
N_CLASSES = len(CLASSES)


def index(label: str | int) -> int:
    """Map a class name (or an already-valid index) to 0..3."""
    if isinstance(label, int):
        if not 0 <= label < N_CLASSES:
            raise ValueError(f"class index out of range: {label}")
        return label
    try:
        return CLASSES.index(label)
    except ValueError:
        raise ValueError(f"unknown class label {label!r}; expected one of {', '.join(CLASSES)}") from None


def name(idx: int) -> str:
    return CLASSES[index(int(idx))]
