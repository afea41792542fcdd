"""Signal mathematics: Morlet wavelets, CWT, DFT/FFT, band split, PCA.

The analyzing wavelet is the complex Morlet

    psi(t) = (sigma^2 * pi)^(-1/4) * exp(-t^2 / (2 sigma^2)) * exp(j w0 t)

and its shifted/scaled daughters psi_{tau,a}(t) = a^(-1/2) psi((t - tau)/a).
The wavelet transform is the inner product of the signal with the conjugate
daughter, discretized as a Riemann sum with step 1/fs.  The discrete Fourier
transform follows F(k) = sum_n x(n) exp(-2 pi j k n / N) with frequency step
fs / N; a radix-2 fast path handles power-of-two lengths and everything else
falls back to direct summation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .electrodes import DEFAULT_MAP, FRONTAL_ELECTRODES, N_CHANNELS, ElectrodeMap
from .ingest import Trial


class DspError(Exception):
    pass


class NonPositiveScaleError(DspError):
    pass


class EmptyGridError(DspError):
    pass


class EmptyInputError(DspError):
    pass


class UnsupportedRateError(DspError):
    pass


class LengthNotPowerOfTwoError(DspError):
    pass


class DegenerateInputError(DspError):
    pass


class InvalidKError(DspError):
    pass


# ---------------------------------------------------------------------------
# Morlet wavelet and CWT
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MorletParams:
    """Center angular frequency (rad/s) and Gaussian envelope width (s)."""

    omega0: float = 6.0
    sigma: float = 1.0

    def __post_init__(self):
        if not self.omega0 > 0:
            raise ValueError(f"omega0 must be > 0, got {self.omega0}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")


@dataclass(frozen=True)
class WaveletAtom:
    """Time shift tau (s) and dimensionless scale a > 0."""

    tau: float
    a: float

    def __post_init__(self):
        if not self.a > 0:
            raise NonPositiveScaleError(f"scale must be > 0, got {self.a}")


def morlet(t, p: MorletParams = MorletParams()):
    """Mother wavelet value(s) at time(s) t."""
    t = np.asarray(t, dtype=np.float64)
    norm = (p.sigma ** 2 * np.pi) ** -0.25
    return norm * np.exp(-(t ** 2) / (2.0 * p.sigma ** 2)) * np.exp(1j * p.omega0 * t)


def daughter_samples(p: MorletParams, atom: WaveletAtom, grid) -> np.ndarray:
    """Shifted and scaled wavelet a^(-1/2) psi((t - tau)/a) on a uniform grid."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise EmptyGridError("empty time grid")
    if grid.size > 1:
        steps = np.diff(grid)
        if np.any(steps <= 0):
            raise ValueError("time grid must be strictly increasing")
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
            raise ValueError("time grid must have a uniform step")
    return morlet((grid - atom.tau) / atom.a, p) / math.sqrt(atom.a)


def pseudo_frequency(a: float, p: MorletParams = MorletParams()) -> float:
    """Carrier frequency (Hz) of the daughter wavelet at scale a."""
    return p.omega0 / (2.0 * np.pi * a)


def scales_for_frequencies(freqs_hz, p: MorletParams = MorletParams()) -> np.ndarray:
    freqs_hz = np.asarray(freqs_hz, dtype=np.float64)
    return p.omega0 / (2.0 * np.pi * freqs_hz)


def default_scale_grid(p: MorletParams = MorletParams(), count: int = 32,
                       fmin_hz: float = 1.0, fmax_hz: float = 64.0) -> np.ndarray:
    """Log-spaced scales covering carrier frequencies fmin..fmax Hz, ascending."""
    freqs = np.logspace(np.log10(fmin_hz), np.log10(fmax_hz), count)
    return np.sort(scales_for_frequencies(freqs, p))


@dataclass(frozen=True)
class CwtResult:
    coefficients: np.ndarray  # complex, (scales, shifts)
    scale_grid: np.ndarray
    shift_grid: np.ndarray

    def __post_init__(self):
        if self.coefficients.shape != (len(self.scale_grid), len(self.shift_grid)):
            raise ValueError("coefficient matrix does not match grids")
        if not np.all(np.isfinite(self.coefficients.view(np.float64))):
            raise ValueError("non-finite wavelet coefficients")

    def peak_cell(self) -> tuple[int, int]:
        """(scale index, shift index) of the largest coefficient magnitude."""
        flat = int(np.argmax(np.abs(self.coefficients)))
        return np.unravel_index(flat, self.coefficients.shape)  # type: ignore[return-value]


def cwt(x, fs: float, p: MorletParams = MorletParams(),
        scales=None, shifts=None) -> CwtResult:
    """Wavelet coefficients W(tau, a) = sum_n x(n/fs) psi*_{tau,a}(n/fs) / fs."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise EmptyInputError("empty signal")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal must be finite")
    t = np.arange(x.size) / fs
    if scales is None:
        scales = default_scale_grid(p)
    if shifts is None:
        shifts = t
    scales = np.asarray(scales, dtype=np.float64)
    shifts = np.asarray(shifts, dtype=np.float64)
    if scales.size == 0 or shifts.size == 0:
        raise EmptyGridError("scale and shift grids must be nonempty")
    if np.any(scales <= 0):
        raise NonPositiveScaleError("all scales must be > 0")

    coeff = np.empty((scales.size, shifts.size), dtype=np.complex128)
    for i, a in enumerate(scales):
        # (shifts, samples) matrix of conjugated daughter values
        u = (t[None, :] - shifts[:, None]) / a
        psi = morlet(u, p) / math.sqrt(a)
        coeff[i] = (np.conj(psi) @ x) / fs
    return CwtResult(coeff, scales, shifts)


# ---------------------------------------------------------------------------
# DFT / FFT
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Spectrum:
    """Complex DFT bins plus the frequency bookkeeping delta_f = fs / n."""

    bins: np.ndarray
    fs: float
    n: int = 0
    delta_f: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "n", len(self.bins))
        object.__setattr__(self, "delta_f", self.fs / self.n)

    def frequencies(self) -> np.ndarray:
        """Two-sided bin frequencies folded to 0..fs/2."""
        k = np.arange(self.n)
        return np.minimum(k, self.n - k) * self.delta_f

    def one_sided_magnitude(self) -> np.ndarray:
        """|F(k)| for k = 0..n//2 (real-input spectra are conjugate symmetric)."""
        return np.abs(self.bins[: self.n // 2 + 1])


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def _fft_radix2(x: np.ndarray) -> np.ndarray:
    """Iterative decimation-in-time radix-2 transform, length a power of two."""
    n = x.size
    out = x[_bit_reverse_indices(n)].astype(np.complex128)
    m = 2
    while m <= n:
        half = m // 2
        w = np.exp(-2j * np.pi * np.arange(half) / m)
        blocks = out.reshape(n // m, m)
        even = blocks[:, :half].copy()
        odd = blocks[:, half:] * w
        blocks[:, :half] = even + odd
        blocks[:, half:] = even - odd
        m <<= 1
    return out


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


def _dft_sum(x: np.ndarray) -> np.ndarray:
    n = x.size
    k = np.arange(n)
    kernel = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return kernel @ x


def dft(x, fs: float) -> Spectrum:
    """F(k) = sum_n x(n) e^(-2 pi j k n / N); radix-2 fast path for 2^m lengths."""
    x = np.asarray(x)
    if x.size == 0:
        raise EmptyInputError("empty input")
    x = x.astype(np.complex128)
    bins = _fft_radix2(x) if _is_power_of_two(x.size) else _dft_sum(x)
    return Spectrum(bins, fs)


def dft_direct(x, fs: float) -> Spectrum:
    """Direct O(N^2) summation of the transform; oracle for the fast path."""
    x = np.asarray(x)
    if x.size == 0:
        raise EmptyInputError("empty input")
    return Spectrum(_dft_sum(x.astype(np.complex128)), fs)


def idft(spectrum: Spectrum) -> np.ndarray:
    """Inverse transform via the conjugation identity, x = conj(F(conj(X)))/N."""
    bins = np.conj(spectrum.bins)
    if _is_power_of_two(bins.size):
        y = _fft_radix2(bins)
    else:
        y = _dft_sum(bins)
    return np.conj(y) / bins.size


# ---------------------------------------------------------------------------
# Frequency-band decomposition
# ---------------------------------------------------------------------------

BAND_EDGES_HZ: dict[str, tuple[float, float]] = {
    "delta": (0.0, 4.0),
    "theta": (4.0, 8.0),
    "alpha": (8.0, 12.0),
    "beta": (12.0, 20.0),
}
BAND_ORDER = ("delta", "theta", "alpha", "beta")


@dataclass(frozen=True)
class BandDecomposition:
    bands: dict[str, np.ndarray]
    residual: np.ndarray
    method: str

    def reconstruction(self) -> np.ndarray:
        total = self.residual.copy()
        for b in self.bands.values():
            total = total + b
        return total


# Daubechies 8-tap scaling filter (4 vanishing moments), sum = sqrt(2).
_DB4_SCALING = np.array([
    0.23037781330885523, 0.7148465705525415, 0.6308807679295904,
    -0.02798376941698385, -0.18703481171888114, 0.030841381835986965,
    0.03288301166698295, -0.010597401784997278,
])


def _atrous_smooth(x: np.ndarray, level: int) -> np.ndarray:
    """Circular convolution with the unit-sum scaling filter upsampled 2^level."""
    h = _DB4_SCALING / math.sqrt(2.0)
    step = 1 << level
    center = (len(h) - 1) // 2
    y = np.zeros_like(x)
    for k, hk in enumerate(h):
        y += hk * np.roll(x, (center - k) * step)
    return y


def band_decompose(x, fs: float, method: str = "fft_mask") -> BandDecomposition:
    """Split a signal into the delta/theta/alpha/beta rhythm components.

    fft_mask zeroes the transform bins outside each band (with the conjugate
    mirror) and inverts; the bin partition makes bands + residual reproduce
    the input to rounding error.  swt_dyadic runs a 6-level stationary
    wavelet cascade and maps detail levels to the nearest dyadic bands
    (delta <- A6+D6, theta <- D5, alpha <- D4, beta <- D3, residual D1+D2);
    it needs fs = 256 and a power-of-two length.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise EmptyInputError("empty input")

    if method == "fft_mask":
        spec = dft(x, fs)
        freqs = spec.frequencies()
        bands = {}
        for name in BAND_ORDER:
            lo, hi = BAND_EDGES_HZ[name]
            mask = (freqs >= lo) & (freqs < hi)
            bands[name] = np.real(idft(Spectrum(np.where(mask, spec.bins, 0.0), fs)))
        residual = x - sum(bands.values())
        return BandDecomposition(bands, residual, method)

    if method == "swt_dyadic":
        if fs != 256.0:
            raise UnsupportedRateError(f"swt_dyadic requires fs = 256 Hz, got {fs}")
        if not _is_power_of_two(x.size):
            raise LengthNotPowerOfTwoError(f"length {x.size} is not a power of two")
        approx = x
        details = []
        for level in range(6):
            smoothed = _atrous_smooth(approx, level)
            details.append(approx - smoothed)
            approx = smoothed
        bands = {
            "delta": approx + details[5],
            "theta": details[4],
            "alpha": details[3],
            "beta": details[2],
        }
        residual = details[0] + details[1]
        return BandDecomposition(bands, residual, method)

    raise ValueError(f"unknown band method {method!r}")


# ---------------------------------------------------------------------------
# PCA fit and artifact suppression
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PcaModel:
    """Mean vector, orthonormal component rows, descending variances."""

    mean: np.ndarray
    components: np.ndarray  # rows are principal directions
    explained_variance: np.ndarray

    def __post_init__(self):
        d = self.mean.size
        if self.components.shape != (d, d):
            raise ValueError("components must be square and match mean length")
        if np.any(np.diff(self.explained_variance) > 0):
            raise ValueError("explained variance must be non-increasing")


def pca_fit(observations) -> PcaModel:
    """Eigendecomposition of the mean-centered covariance, variances descending."""
    X = np.asarray(observations, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DegenerateInputError("need a 2-D array with at least 2 observations")
    if not np.all(np.isfinite(X)):
        raise ValueError("observations must be finite")
    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / (X.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    return PcaModel(
        mean=mean,
        components=evecs.T[order],
        explained_variance=np.maximum(evals[order], 0.0),
    )


@dataclass(frozen=True)
class DropTopK:
    """Remove the k highest-variance components."""

    k: int

    def __post_init__(self):
        if not 0 <= self.k <= N_CHANNELS:
            raise InvalidKError(f"k must be in 0..{N_CHANNELS}, got {self.k}")


@dataclass(frozen=True)
class FrontalLoading:
    """Remove components whose squared loading on the frontal electrodes
    reaches the threshold (components are unit vectors, so this is the
    fraction of their energy sitting over the eyes)."""

    threshold: float = 0.5
    electrodes: frozenset[str] = FRONTAL_ELECTRODES

    def __post_init__(self):
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError(f"threshold must be in (0,1], got {self.threshold}")


def _selected_components(model: PcaModel, policy,
                         emap: ElectrodeMap) -> np.ndarray:
    if isinstance(policy, DropTopK):
        return model.components[: policy.k]
    if isinstance(policy, FrontalLoading):
        rows = emap.rows(policy.electrodes)
        loading = (model.components[:, rows] ** 2).sum(axis=1)
        return model.components[loading >= policy.threshold]
    raise TypeError(f"unsupported removal policy {policy!r}")


def remove_artifacts(trial: Trial, model: PcaModel, policy,
                     emap: ElectrodeMap = DEFAULT_MAP) -> Trial:
    """Project the selected components out of every time sample.

    Each 64-channel sample is one observation; the projection happens in the
    mean-centered space and the mean is restored afterwards.
    """
    V = _selected_components(model, policy, emap)
    if V.shape[0] == 0:
        return trial
    centered = trial.data - model.mean[:, None]
    cleaned = centered - V.T @ (V @ centered)
    return trial.with_data(cleaned + model.mean[:, None])


def fit_trial_pca(trial: Trial) -> PcaModel:
    """Per-trial PCA with time samples as observations (256 x 64)."""
    return pca_fit(trial.data.T)
