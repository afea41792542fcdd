"""Dataset ingestion: trial text files, the long-format CSV, splits.

A trial is one 1-second recording: 64 channels x 256 samples at 256 Hz.
Trial text files are '#'-commented headers followed by whitespace-separated
``trial_no sensor_name sample_no value`` rows; gzip input is auto-detected.
The long CSV flattens whole corpora into
``sensor position,sensor value,sample num,channel,subject identifier`` rows.
"""

from __future__ import annotations

import csv
import enum
import gzip
import hashlib
import io
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .electrodes import DEFAULT_MAP, N_CHANNELS, ElectrodeMap, UnknownElectrodeError

SAMPLE_RATE = 256.0
N_SAMPLES = 256

LONG_CSV_HEADER = (
    "sensor position", "sensor value", "sample num", "channel", "subject identifier"
)
ROWS_PER_TRIAL = N_CHANNELS * N_SAMPLES


class IngestError(Exception):
    """Base class for dataset ingestion failures."""


class MalformedHeaderError(IngestError):
    pass


class MalformedRowError(IngestError):
    pass


class SampleCountMismatchError(IngestError):
    pass


class NonFiniteValueError(IngestError):
    pass


class SchemaMismatchError(IngestError):
    pass


class IncompleteTrialError(IngestError):
    pass


class LabelConflictError(IngestError):
    pass


class EmptyClassError(IngestError):
    pass


class Group(enum.Enum):
    ALCOHOLIC = "alcoholic"
    CONTROL = "control"


class Stimulus(enum.Enum):
    S1 = "S1"
    S2_MATCH = "S2_match"
    S2_NOMATCH = "S2_nomatch"
    UNKNOWN = "unknown"


@dataclass(frozen=True, eq=False)
class Trial:
    """One subject-stimulus recording: 64 channels x 256 samples in microvolts."""

    subject_id: str
    group: Group
    stimulus: Stimulus
    data: np.ndarray
    sample_rate: float = SAMPLE_RATE
    source: str = ""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.shape != (N_CHANNELS, N_SAMPLES):
            raise ValueError(f"trial matrix must be {N_CHANNELS}x{N_SAMPLES}, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteValueError(f"trial {self.subject_id}: non-finite sample values")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    def channel(self, name: str, emap: ElectrodeMap = DEFAULT_MAP) -> np.ndarray:
        return self.data[emap.index(name) - 1]

    def with_data(self, data: np.ndarray) -> "Trial":
        return Trial(self.subject_id, self.group, self.stimulus, data,
                     self.sample_rate, self.source)


class TrialSet:
    """Immutable collection of trials sharing one sample rate."""

    def __init__(self, trials: Sequence[Trial], provenance: Sequence[str] = ()):
        trials = tuple(trials)
        rates = {t.sample_rate for t in trials}
        if len(rates) > 1:
            raise ValueError(f"mixed sample rates in trial set: {sorted(rates)}")
        self.trials = trials
        self.provenance = tuple(provenance) if provenance else tuple(
            t.source for t in trials if t.source
        )
        self.class_counts = {
            g: sum(1 for t in trials if t.group is g) for g in Group
        }

    def __len__(self) -> int:
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    def __getitem__(self, i: int) -> Trial:
        return self.trials[i]

    def subset(self, indices: Iterable[int]) -> "TrialSet":
        return TrialSet([self.trials[i] for i in indices])

    def groups_present(self) -> set[Group]:
        return {g for g, n in self.class_counts.items() if n > 0}


# ---------------------------------------------------------------------------
# Trial text files
# ---------------------------------------------------------------------------

_GZIP_MAGIC = b"\x1f\x8b"
_SUBJECT_GROUP_RE = re.compile(r"^co\d([ac])\S*$")

_STIMULUS_PHRASE = {
    Stimulus.S1: "S1 obj",
    Stimulus.S2_MATCH: "S2 match",
    Stimulus.S2_NOMATCH: "S2 nomatch",
}


def _read_bytes(stream) -> bytes:
    if isinstance(stream, (bytes, bytearray)):
        raw = bytes(stream)
    elif isinstance(stream, (str, Path)):
        raw = Path(stream).read_bytes()
    else:
        raw = stream.read()
    if raw[:2] == _GZIP_MAGIC:
        raw = gzip.decompress(raw)
    return raw


def _classify_header(lines: list[str]) -> tuple[str, Group, Stimulus]:
    if not lines:
        raise MalformedHeaderError("no '#' header lines before data rows")
    subject_id = lines[0].split()[0] if lines[0].split() else ""
    if subject_id.endswith(".rd"):
        subject_id = subject_id[:-3]
    if not subject_id:
        raise MalformedHeaderError("first header line carries no subject id")

    group = None
    for line in lines:
        toks = line.split()
        if len(toks) == 2 and toks[0].lower() == "group":
            try:
                group = Group(toks[1].lower())
            except ValueError:
                raise MalformedHeaderError(f"unknown group {toks[1]!r}") from None
    if group is None:
        m = _SUBJECT_GROUP_RE.match(subject_id)
        if m:
            group = Group.ALCOHOLIC if m.group(1) == "a" else Group.CONTROL
    if group is None:
        raise MalformedHeaderError(
            f"cannot determine subject group for {subject_id!r} "
            "(no 'group' header line and id does not encode it)"
        )

    stimulus = Stimulus.UNKNOWN
    for line in lines:
        low = line.lower()
        if "s2 nomatch" in low:
            stimulus = Stimulus.S2_NOMATCH
        elif "s2 match" in low:
            stimulus = Stimulus.S2_MATCH
        elif re.search(r"\bs1\b", low):
            stimulus = Stimulus.S1
        else:
            continue
        break
    return subject_id, group, stimulus


def parse_trial_text(stream, emap: ElectrodeMap = DEFAULT_MAP, source: str = "") -> Trial:
    """Parse one trial file (optionally gzipped) into a Trial.

    Header lines start with '#'; the first carries the subject id.  The
    group comes from an explicit ``# group <name>`` line or from the
    ``co<n>a``/``co<n>c`` id convention.  Data rows are
    ``trial_no sensor_name sample_no value``.
    """
    text = _read_bytes(stream).decode("utf-8")
    header: list[str] = []
    data = np.full((N_CHANNELS, N_SAMPLES), np.nan)
    seen = np.zeros((N_CHANNELS, N_SAMPLES), dtype=bool)
    any_rows = False

    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            stripped = line.lstrip("#").strip()
            if not any_rows:
                header.append(stripped)
            continue
        toks = line.split()
        if len(toks) != 4:
            raise MalformedRowError(f"line {lineno}: expected 4 fields, got {len(toks)}")
        _, name, sample_s, value_s = toks
        try:
            row = emap.index(name) - 1
        except UnknownElectrodeError:
            raise UnknownElectrodeError(f"line {lineno}: unknown electrode {name!r}") from None
        try:
            sample = int(sample_s)
            value = float(value_s)
        except ValueError:
            raise MalformedRowError(f"line {lineno}: bad sample/value {sample_s!r} {value_s!r}") from None
        if not 0 <= sample < N_SAMPLES:
            raise SampleCountMismatchError(
                f"line {lineno}: sample index {sample} outside 0..{N_SAMPLES - 1}")
        if seen[row, sample]:
            raise SampleCountMismatchError(
                f"channel {name}: duplicate sample {sample}")
        if not np.isfinite(value):
            raise NonFiniteValueError(f"line {lineno}: non-finite value for {name}")
        data[row, sample] = value
        seen[row, sample] = True
        any_rows = True

    counts = seen.sum(axis=1)
    short = np.flatnonzero(counts != N_SAMPLES)
    if short.size:
        name = emap.name(int(short[0]) + 1)
        raise SampleCountMismatchError(
            f"channel {name}: {int(counts[short[0]])} samples, expected {N_SAMPLES}")

    subject_id, group, stimulus = _classify_header(header)
    return Trial(subject_id, group, stimulus, data, source=source)


def serialize_trial_text(trial: Trial, emap: ElectrodeMap = DEFAULT_MAP) -> bytes:
    """Render a Trial back to the trial text format (exact float round-trip)."""
    out = io.StringIO()
    out.write(f"# {trial.subject_id}.rd\n")
    out.write(f"# group {trial.group.value}\n")
    out.write(f"# {N_CHANNELS} chans, {N_SAMPLES} samples, {int(trial.sample_rate)} Hz\n")
    if trial.stimulus is not Stimulus.UNKNOWN:
        out.write(f"# {_STIMULUS_PHRASE[trial.stimulus]} , trial 0\n")
    for row in range(N_CHANNELS):
        name = emap.name(row + 1)
        out.write(f"# {name} chan {row}\n")
        for s in range(N_SAMPLES):
            out.write(f"0 {name} {s} {trial.data[row, s]!r}\n")
    return out.getvalue().encode("utf-8")


# ---------------------------------------------------------------------------
# Long-format CSV
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LongRecord:
    """One flattened sample row of the long-format CSV."""

    sensor_position: int
    sensor_value: float
    sample_num: int
    channel: int
    subject_identifier: int

    def __post_init__(self):
        if not 0 <= self.sample_num < N_SAMPLES:
            raise SchemaMismatchError(f"sample num {self.sample_num} outside 0..{N_SAMPLES - 1}")
        if not 0 <= self.channel < N_CHANNELS:
            raise SchemaMismatchError(f"channel {self.channel} outside 0..{N_CHANNELS - 1}")
        if not 0 <= self.sensor_position < N_CHANNELS:
            raise SchemaMismatchError(f"sensor position {self.sensor_position} outside 0..{N_CHANNELS - 1}")
        if self.subject_identifier not in (0, 1):
            raise SchemaMismatchError(f"subject identifier {self.subject_identifier} not in {{0,1}}")


def parse_long_csv(stream, source: str = "") -> TrialSet:
    """Regroup the flattened 5-column CSV into complete 64x256 trials.

    Rows are consumed in file order; every consecutive block of 16384 rows
    must cover each (channel, sample) cell exactly once and agree on the
    subject identifier.
    """
    raw = _read_bytes(stream)
    reader = csv.reader(io.StringIO(raw.decode("utf-8")))
    try:
        head = next(reader)
    except StopIteration:
        raise SchemaMismatchError("empty CSV") from None
    normalized = tuple(h.strip().lower() for h in head)
    if normalized != LONG_CSV_HEADER:
        raise SchemaMismatchError(
            f"header {normalized!r} does not match {LONG_CSV_HEADER!r}")

    trials: list[Trial] = []
    data = np.empty((N_CHANNELS, N_SAMPLES))
    seen = np.zeros((N_CHANNELS, N_SAMPLES), dtype=bool)
    label: int | None = None
    filled = 0

    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 5:
            raise SchemaMismatchError(f"line {lineno}: expected 5 columns, got {len(row)}")
        try:
            rec = LongRecord(int(row[0]), float(row[1]), int(row[2]),
                             int(row[3]), int(row[4]))
        except ValueError:
            raise SchemaMismatchError(f"line {lineno}: non-numeric field in {row!r}") from None
        if not np.isfinite(rec.sensor_value):
            raise NonFiniteValueError(f"line {lineno}: non-finite sensor value")
        if label is None:
            label = rec.subject_identifier
        elif rec.subject_identifier != label:
            raise LabelConflictError(
                f"line {lineno}: subject identifier flipped {label} -> {rec.subject_identifier} "
                "inside one trial")
        if seen[rec.channel, rec.sample_num]:
            raise IncompleteTrialError(
                f"line {lineno}: duplicate cell (channel {rec.channel}, sample {rec.sample_num}) "
                "before trial completed")
        data[rec.channel, rec.sample_num] = rec.sensor_value
        seen[rec.channel, rec.sample_num] = True
        filled += 1
        if filled == ROWS_PER_TRIAL:
            group = Group.ALCOHOLIC if label == 1 else Group.CONTROL
            trials.append(Trial(f"long{len(trials):05d}", group, Stimulus.UNKNOWN,
                                data, source=source))
            data = np.empty((N_CHANNELS, N_SAMPLES))
            seen[:] = False
            label = None
            filled = 0

    if filled:
        raise IncompleteTrialError(
            f"stream ended with {filled} rows of a trial (need {ROWS_PER_TRIAL})")
    return TrialSet(trials, provenance=[source] if source else [])


def serialize_long_csv(trials: Iterable[Trial]) -> bytes:
    """Flatten trials to the long CSV format (inverse of parse_long_csv)."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(LONG_CSV_HEADER)
    for t in trials:
        ident = 1 if t.group is Group.ALCOHOLIC else 0
        for ch in range(N_CHANNELS):
            for s in range(N_SAMPLES):
                w.writerow([ch, repr(t.data[ch, s]), s, ch, ident])
    return out.getvalue().encode("utf-8")


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GivenSplit:
    """Predefined membership lists, matched against trial source paths."""

    train: tuple[str, ...]
    test: tuple[str, ...]


@dataclass(frozen=True)
class RandomSplit:
    """Seeded random split, stratified by group; ``by_subject`` keeps all
    trials of one subject on the same side."""

    fraction: float = 0.5
    by_subject: bool = False

    def __post_init__(self):
        if not 0.0 < self.fraction < 1.0:
            raise ValueError(f"fraction must be in (0,1), got {self.fraction}")


def _stratified_take(units_per_group: dict[Group, list], fraction: float,
                     rng: np.random.Generator) -> set:
    """Pick round(fraction * total) units, per-group floors plus
    largest-remainder top-up, shuffled deterministically."""
    total = sum(len(u) for u in units_per_group.values())
    target = int(round(fraction * total))
    groups = sorted(units_per_group, key=lambda g: g.value)
    quota = {}
    for g in groups:
        quota[g] = int(np.floor(fraction * len(units_per_group[g])))
    leftover = target - sum(quota.values())
    remainders = sorted(
        groups,
        key=lambda g: (-(fraction * len(units_per_group[g]) - quota[g]), g.value),
    )
    for g in remainders:
        if leftover <= 0:
            break
        if quota[g] < len(units_per_group[g]):
            quota[g] += 1
            leftover -= 1
    chosen = set()
    for g in groups:
        units = list(units_per_group[g])
        order = rng.permutation(len(units))
        chosen.update(units[i] for i in order[: quota[g]])
    return chosen


def split_dataset(trial_set: TrialSet, policy, seed: int = 0) -> tuple[TrialSet, TrialSet]:
    """Partition a TrialSet into (train, test) per the split policy."""
    trials = trial_set.trials
    if isinstance(policy, GivenSplit):
        train_keys, test_keys = set(policy.train), set(policy.test)
        both = train_keys & test_keys
        if both:
            raise ValueError(f"paths listed on both sides: {sorted(both)[:3]}")
        train_idx, test_idx = [], []
        for i, t in enumerate(trials):
            key = t.source or t.subject_id
            if key in train_keys:
                train_idx.append(i)
            elif key in test_keys:
                test_idx.append(i)
            else:
                raise ValueError(f"trial {key!r} not listed in either split side")
        return trial_set.subset(train_idx), trial_set.subset(test_idx)

    if isinstance(policy, RandomSplit):
        present = trial_set.groups_present()
        missing = set(Group) - present
        if missing:
            raise EmptyClassError(
                f"group(s) absent from input: {sorted(g.value for g in missing)}")
        rng = np.random.default_rng(seed)
        if policy.by_subject:
            units_per_group: dict[Group, list] = {g: [] for g in Group}
            seen_subjects = set()
            for t in trials:
                if t.subject_id not in seen_subjects:
                    seen_subjects.add(t.subject_id)
                    units_per_group[t.group].append(t.subject_id)
            chosen_subjects = _stratified_take(units_per_group, policy.fraction, rng)
            train_idx = [i for i, t in enumerate(trials) if t.subject_id in chosen_subjects]
            test_idx = [i for i, t in enumerate(trials) if t.subject_id not in chosen_subjects]
        else:
            units_per_group = {g: [] for g in Group}
            for i, t in enumerate(trials):
                units_per_group[t.group].append(i)
            chosen = _stratified_take(units_per_group, policy.fraction, rng)
            train_idx = sorted(chosen)
            test_idx = [i for i in range(len(trials)) if i not in chosen]
        return trial_set.subset(train_idx), trial_set.subset(test_idx)

    raise TypeError(f"unsupported split policy {policy!r}")


# ---------------------------------------------------------------------------
# Canonical on-disk TrialSet
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def _trial_csv_bytes(trial: Trial) -> bytes:
    lines = [",".join(f"{v:.6f}" for v in row) for row in trial.data]
    return ("\n".join(lines) + "\n").encode("ascii")


def write_trialset(trial_set: TrialSet, out_dir) -> Path:
    """Write one CSV per trial (64x256, microvolts, 6 decimals) plus a JSON
    manifest with labels, provenance and checksums."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, trial in enumerate(trial_set):
        fname = f"trial_{i:05d}.csv"
        payload = _trial_csv_bytes(trial)
        (out_dir / fname).write_bytes(payload)
        entries.append({
            "file": fname,
            "subject_id": trial.subject_id,
            "group": trial.group.value,
            "stimulus": trial.stimulus.value,
            "source": trial.source,
            "sha256": hashlib.sha256(payload).hexdigest(),
        })
    manifest = {"sample_rate": SAMPLE_RATE, "trials": entries}
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return out_dir / MANIFEST_NAME


def read_trialset(in_dir) -> TrialSet:
    """Load a canonical on-disk TrialSet written by write_trialset."""
    in_dir = Path(in_dir)
    manifest = json.loads((in_dir / MANIFEST_NAME).read_text())
    trials = []
    for entry in manifest["trials"]:
        payload = (in_dir / entry["file"]).read_bytes()
        digest = hashlib.sha256(payload).hexdigest()
        if digest != entry["sha256"]:
            raise IngestError(f"{entry['file']}: checksum mismatch")
        data = np.array([
            [float(v) for v in line.split(",")]
            for line in payload.decode("ascii").strip().splitlines()
        ])
        trials.append(Trial(
            entry["subject_id"], Group(entry["group"]), Stimulus(entry["stimulus"]),
            data, source=entry.get("source", "")))
    return TrialSet(trials, provenance=[str(in_dir)])


def ingest_directory(in_dir, fmt: str, emap: ElectrodeMap = DEFAULT_MAP) -> TrialSet:
    """Parse every data file under a directory into one TrialSet.

    ``fmt`` is ``raw`` (per-trial text files, '.gz' welcome) or ``long-csv``.
    """
    in_dir = Path(in_dir)
    if fmt == "raw":
        if in_dir.is_file():
            paths = [in_dir]
        else:
            paths = sorted(p for p in in_dir.rglob("*") if p.is_file())
        trials = [parse_trial_text(p, emap, source=str(p)) for p in paths]
        return TrialSet(trials)
    if fmt == "long-csv":
        if in_dir.is_file():
            paths = [in_dir]
        else:
            paths = sorted(in_dir.glob("*.csv*"))
        sets = [parse_long_csv(p, source=str(p)) for p in paths]
        trials = [t for s in sets for t in s]
        return TrialSet(trials, provenance=[str(p) for p in paths])
    raise ValueError(f"unknown format {fmt!r} (want 'raw' or 'long-csv')")
