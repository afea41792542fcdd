"""Feature extraction: correlation matrices, tensors, group statistics.

Seven feature kinds feed the classifiers: the raw trial matrix, the four
rhythm-band components, the channel-correlation matrix, and the one-sided
spectrum magnitudes.  Tensors are (channels, height, width) float64 and are
standardized to zero mean / unit variance per tensor.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import svgplot
from .dsp import BAND_ORDER, MorletParams, band_decompose, dft
from .electrodes import DEFAULT_MAP, N_CHANNELS, ElectrodeMap
from .ingest import EmptyClassError, Group, Trial, TrialSet

FEATURE_KINDS = ("raw", "beta", "alpha", "theta", "delta", "correlation", "fft")
_KIND_CODES = {kind: i + 1 for i, kind in enumerate(FEATURE_KINDS)}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}

_TENSOR_MAGIC = b"FT1"
_HEADER = struct.Struct("<3sBIII")  # magic, kind code, 3 dims


class FeatureError(Exception):
    pass


class KTooLargeError(FeatureError):
    pass


@dataclass(frozen=True)
class DspConfig:
    """Signal-processing knobs the feature extractors depend on."""

    morlet: MorletParams = MorletParams()
    band_method: str = "fft_mask"

    def digest(self) -> str:
        payload = json.dumps({
            "omega0": self.morlet.omega0,
            "sigma": self.morlet.sigma,
            "band_method": self.band_method,
        }, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Correlation matrix
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    values: np.ndarray
    emap: ElectrodeMap = DEFAULT_MAP


def correlation_matrix(trial: Trial, emap: ElectrodeMap = DEFAULT_MAP) -> CorrelationMatrix:
    """Pearson correlations over time for every channel pair.

    Zero-variance channels get zero rows/columns with a unit diagonal, so
    degenerate trials still yield a well-formed matrix.
    """
    x = trial.data
    centered = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered ** 2).sum(axis=1))
    valid = norms > 0
    unit = np.zeros_like(centered)
    unit[valid] = centered[valid] / norms[valid, None]
    corr = unit @ unit.T
    corr = (corr + corr.T) / 2.0
    np.fill_diagonal(corr, 1.0)
    return CorrelationMatrix(corr, emap)


def top_correlated_pairs(corr: CorrelationMatrix, k: int) -> list[tuple[str, str, float]]:
    """The k strongest off-diagonal pairs by |value|, each unordered pair once.

    Ties are broken by ascending (row index, column index) so output order
    is deterministic.  Indices are reported as electrode names.
    """
    n = corr.values.shape[0]
    max_pairs = n * (n - 1) // 2
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > max_pairs:
        raise KTooLargeError(f"k={k} exceeds {max_pairs} distinct pairs")
    i_idx, j_idx = np.triu_indices(n, k=1)
    vals = corr.values[i_idx, j_idx]
    order = sorted(range(vals.size),
                   key=lambda t: (-abs(vals[t]), i_idx[t], j_idx[t]))
    out = []
    for t in order[:k]:
        out.append((corr.emap.name(int(i_idx[t]) + 1),
                    corr.emap.name(int(j_idx[t]) + 1),
                    float(vals[t])))
    return out


# ---------------------------------------------------------------------------
# Feature tensors
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FeatureTensor:
    kind: str
    data: np.ndarray  # (channels_dim, height, width)
    label: Group

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.data.ndim != 3:
            raise ValueError(f"tensor must be 3-D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("tensor must be finite")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


def standardize(data: np.ndarray) -> np.ndarray:
    """Z-score over all entries; all-constant input maps to all zeros."""
    mean = data.mean()
    std = data.std()
    if std == 0:
        return np.zeros_like(data)
    return (data - mean) / std


def feature_tensor(trial: Trial, kind: str,
                   dsp_config: DspConfig = DspConfig()) -> FeatureTensor:
    """Build the standardized numeric tensor of one kind from one trial."""
    if kind == "raw":
        plane = trial.data
    elif kind in BAND_ORDER:
        rows = [band_decompose(trial.data[c], trial.sample_rate,
                               dsp_config.band_method).bands[kind]
                for c in range(N_CHANNELS)]
        plane = np.vstack(rows)
    elif kind == "correlation":
        plane = correlation_matrix(trial).values
    elif kind == "fft":
        rows = [dft(trial.data[c], trial.sample_rate).one_sided_magnitude()
                for c in range(N_CHANNELS)]
        plane = np.vstack(rows)
    else:
        raise ValueError(f"unknown feature kind {kind!r}")
    return FeatureTensor(kind, standardize(plane)[None, :, :], trial.group)


def tensors_for_set(trials: TrialSet, kind: str,
                    dsp_config: DspConfig = DspConfig()) -> list[FeatureTensor]:
    return [feature_tensor(t, kind, dsp_config) for t in trials]


# ---------------------------------------------------------------------------
# Tensor persistence: 16-byte header + row-major float64, JSON sidecar
# ---------------------------------------------------------------------------

def tensor_to_bytes(kind_code: int, data: np.ndarray) -> bytes:
    data = np.ascontiguousarray(data, dtype=np.float64)
    if data.ndim != 3:
        raise ValueError("binary tensor format stores 3-D arrays")
    header = _HEADER.pack(_TENSOR_MAGIC, kind_code, *data.shape)
    return header + data.tobytes()


def tensor_from_bytes(payload: bytes) -> tuple[int, np.ndarray]:
    magic, code, d0, d1, d2 = _HEADER.unpack_from(payload)
    if magic != _TENSOR_MAGIC:
        raise FeatureError(f"bad tensor magic {magic!r}")
    count = d0 * d1 * d2
    data = np.frombuffer(payload, dtype="<f8", offset=_HEADER.size, count=count)
    return code, data.reshape(d0, d1, d2).copy()


def save_tensor(tensor: FeatureTensor, path, provenance: str = "",
                dsp_config: DspConfig = DspConfig()) -> None:
    path = Path(path)
    path.write_bytes(tensor_to_bytes(_KIND_CODES[tensor.kind], tensor.data))
    sidecar = {
        "kind": tensor.kind,
        "label": tensor.label.value,
        "provenance": provenance,
        "dsp_config": dsp_config.digest(),
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, sort_keys=True) + "\n")


def load_tensor(path) -> FeatureTensor:
    path = Path(path)
    code, data = tensor_from_bytes(path.read_bytes())
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    kind = _CODE_KINDS[code]
    if sidecar["kind"] != kind:
        raise FeatureError(f"sidecar kind {sidecar['kind']!r} != binary kind {kind!r}")
    return FeatureTensor(kind, data, Group(sidecar["label"]))


# ---------------------------------------------------------------------------
# Group statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroupVoltageStats:
    per_electrode_mean: dict[Group, np.ndarray]
    fraction_alcoholic_lower: float


def group_voltage_stats(trials: TrialSet) -> GroupVoltageStats:
    """Per-electrode mean voltage per group and the share of electrodes where
    the alcoholic group sits strictly below the control group."""
    sums = {g: np.zeros(N_CHANNELS) for g in Group}
    counts = {g: 0 for g in Group}
    for t in trials:
        sums[t.group] += t.data.mean(axis=1)
        counts[t.group] += 1
    missing = [g.value for g in Group if counts[g] == 0]
    if missing:
        raise EmptyClassError(f"group(s) missing from trial set: {missing}")
    means = {g: sums[g] / counts[g] for g in Group}
    lower = means[Group.ALCOHOLIC] < means[Group.CONTROL]
    return GroupVoltageStats(means, float(np.count_nonzero(lower)) / N_CHANNELS)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render_heatmap(tensor: FeatureTensor, path, channel: int = 0,
                   emap: ElectrodeMap = DEFAULT_MAP) -> None:
    """Deterministic SVG heatmap of one 2-D slice of the tensor.

    Correlation tensors use a fixed diverging scale over [-1, 1]; all other
    kinds use the slice's min-max range.
    """
    plane = tensor.data[channel]
    rows, cols = plane.shape
    row_labels = emap.names if rows == N_CHANNELS else None
    col_labels = emap.names if (cols == N_CHANNELS and tensor.kind == "correlation") else None
    if tensor.kind == "correlation":
        svg = svgplot.heatmap_svg(plane, row_labels, col_labels,
                                  title=f"{tensor.kind} ({tensor.label.value})",
                                  vmin=-1.0, vmax=1.0, diverging=True)
    else:
        svg = svgplot.heatmap_svg(plane, row_labels, None,
                                  title=f"{tensor.kind} ({tensor.label.value})",
                                  cell=4 if cols > 128 else 8)
    try:
        Path(path).write_text(svg)
    except OSError as exc:
        raise IOError(f"cannot write heatmap to {path}: {exc}") from exc
