"""Electrode montage bookkeeping for the 64-channel recordings.

Every trial matrix is stored in a fixed row order given by the montage:
row ``i`` holds the signal of the electrode with 1-based index ``i + 1``.
"""

from __future__ import annotations


class IndexOutOfRangeError(LookupError):
    """Electrode index outside 1..64."""


class UnknownElectrodeError(LookupError):
    """Electrode label not part of the montage."""


# 1-based dataset index -> electrode label.  Index 63 maps to the literal
# label "nd" as recorded in the source montage; its meaning is unresolved
# but it is kept verbatim so files round-trip.
ELECTRODE_NAMES: tuple[str, ...] = (
    "FP1", "FP2", "F7", "F8", "AF1", "AF2", "FZ1", "F4",
    "F3", "FC6", "FC5", "FC2", "FC1", "T8", "T7", "CZ",
    "C3", "C4", "CP5", "CP6", "CP1", "CP2", "P3", "P4",
    "PZ", "P8", "P7", "PO2", "PO1", "O2", "O1", "X",
    "AF7", "AF8", "F5", "F6", "FT7", "FT8", "FPZ", "FC4",
    "FC3", "C6", "C5", "F2", "F1", "TP8", "TP7", "AFZ",
    "CP3", "CP4", "P5", "P6", "C1", "C2", "PO7", "PO8",
    "FCZ", "POZ", "OZ", "P2", "P1", "CPZ", "nd", "Y",
)

N_CHANNELS = 64

# Electrodes closest to the eyes; eye-movement artifacts load mostly here.
FRONTAL_ELECTRODES = frozenset(
    {"FP1", "FP2", "AF1", "AF2", "AF7", "AF8", "AFZ", "FPZ"}
)


class ElectrodeMap:
    """Bijection between 1-based channel indices and electrode labels."""

    def __init__(self, names: tuple[str, ...] = ELECTRODE_NAMES):
        if len(names) != N_CHANNELS:
            raise ValueError(f"montage needs {N_CHANNELS} labels, got {len(names)}")
        if len(set(names)) != len(names):
            raise ValueError("electrode labels must be unique")
        self._names = tuple(names)
        self._index_of = {name: i + 1 for i, name in enumerate(names)}

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    def name(self, index: int) -> str:
        """Label of the electrode with the given 1-based index."""
        if not 1 <= index <= N_CHANNELS:
            raise IndexOutOfRangeError(f"electrode index {index} outside 1..{N_CHANNELS}")
        return self._names[index - 1]

    def index(self, name: str) -> int:
        """1-based index of the named electrode."""
        try:
            return self._index_of[name]
        except KeyError:
            raise UnknownElectrodeError(f"unknown electrode {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._index_of

    def __len__(self) -> int:
        return N_CHANNELS

    def rows(self, names: frozenset[str] | set[str]) -> list[int]:
        """0-based matrix rows of the given electrode labels, ascending."""
        return sorted(self.index(n) - 1 for n in names)


DEFAULT_MAP = ElectrodeMap()


def electrode_name(index: int) -> str:
    """Montage label for a 1-based channel index (total on 1..64)."""
    return DEFAULT_MAP.name(index)


def electrode_index(name: str) -> int:
    """1-based channel index for a montage label."""
    return DEFAULT_MAP.index(name)
