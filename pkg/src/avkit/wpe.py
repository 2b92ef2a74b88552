"""Single-channel weighted prediction error (WPE) dereverberation.

Late reverberation in each frequency bin is modelled as a delayed linear
prediction from past STFT frames. The prediction filter is estimated by
variance-weighted least squares, alternating with re-estimation of the
per-frame source variance from the current output.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError
from .frontend import (
    AudioBuffer,
    FrontendConfig,
    StftMatrix,
    next_pow2,
    stft,
    window_function,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WpeConfig:
    taps: int = 10
    delay: int = 3
    iterations: int = 3
    regularization: float = 1e-6
    variance_floor: float = 1e-10

    def __post_init__(self):
        if self.taps < 1 or self.delay < 1 or self.iterations < 1:
            raise ConfigError("WPE taps, delay and iterations must all be >= 1")
        if self.regularization <= 0 or self.variance_floor <= 0:
            raise ConfigError("WPE regularization and variance floor must be > 0")


def delayed_taps(spec: np.ndarray, taps: int, delay: int) -> np.ndarray:
    """Stack delayed frames: ``out[f, t, k] = spec[t - delay - k, f]`` (zero before t=0).

    ``spec`` is T x F; the result is F x T x K.
    """
    num_frames, num_bins = spec.shape
    out = np.zeros((num_bins, num_frames, taps), dtype=spec.dtype)
    for k in range(taps):
        lag = delay + k
        if lag >= num_frames:
            break
        out[:, lag:, k] = spec[: num_frames - lag].T
    return out


def _solve_bins(R: np.ndarray, r: np.ndarray, taps: int, delta: float) -> np.ndarray:
    trace = np.einsum("fkk->f", R).real
    G = np.zeros_like(r)
    active = trace > 0  # an all-zero history leaves nothing to predict
    if not np.any(active):
        return G
    A = R[active] + (delta * trace[active] / taps)[:, None, None] * np.eye(taps)
    try:
        np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        bins = np.flatnonzero(active)
        for i, b in enumerate(bins):
            try:
                np.linalg.cholesky(A[i])
            except np.linalg.LinAlgError:
                raise NumericalError(
                    f"WPE normal equations singular in frequency bin {b}"
                ) from None
        raise
    G[active] = np.linalg.solve(A, r[active][..., None])[..., 0]
    return G


def wpe_dereverberate(
    Y: StftMatrix | np.ndarray, config: WpeConfig | None = None
) -> StftMatrix | np.ndarray:
    """Dereverberate a T x F spectrogram.

    Accepts either a ``StftMatrix`` (returned with the same framing metadata)
    or a bare complex array.
    """
    config = config or WpeConfig()
    data = Y.data if isinstance(Y, StftMatrix) else np.asarray(Y)
    data = data.astype(np.complex128, copy=False)
    if data.ndim != 2 or data.shape[0] < 1:
        raise ConfigError(f"WPE needs a T x F spectrogram with T >= 1, got {data.shape}")
    if not np.all(np.isfinite(data)):
        raise NumericalError("WPE input contains NaN or Inf")

    history = delayed_taps(data, config.taps, config.delay)  # F x T x K
    observed = data.T  # F x T
    # the variance floor is relative to the input power so that scaling the
    # input scales the output exactly
    mean_power = float(np.mean(data.real**2 + data.imag**2))
    floor = config.variance_floor * (mean_power if mean_power > 0 else 1.0)
    X = observed
    for _ in range(config.iterations):
        power = X.real**2 + X.imag**2
        weights = 1.0 / np.maximum(power, floor)
        weighted = history * weights[..., None]
        R = np.einsum("ftk,ftl->fkl", weighted, history.conj())
        r = np.einsum("ftk,ft->fk", weighted, observed.conj())
        G = _solve_bins(R, r, config.taps, config.regularization)
        X = observed - np.einsum("fk,ftk->ft", G.conj(), history)
    result = np.ascontiguousarray(X.T)
    if isinstance(Y, StftMatrix):
        return StftMatrix(
            data=result,
            fft_size=Y.fft_size,
            frame_shift=Y.frame_shift,
            frame_length=Y.frame_length,
            window=Y.window,
            num_samples=Y.num_samples,
        )
    return result


def _overlap_weights(window: np.ndarray, shift: int, num_frames: int) -> np.ndarray:
    length = window.shape[0]
    total = np.zeros((num_frames - 1) * shift + length)
    for t in range(num_frames):
        total[t * shift : t * shift + length] += window**2
    return total


def check_nola(window_name: str, length: int, shift: int) -> None:
    """Raise ConfigError unless the squared window overlap-adds to a nonzero sum."""
    window = window_function(window_name, length)
    periods = -(-length // shift) + 1
    steady = _overlap_weights(window, shift, 2 * periods + 1)
    core = steady[periods * shift : periods * shift + shift]
    if np.min(core) <= 1e-10 * np.max(core):
        raise ConfigError(
            f"window {window_name!r} with length {length} and shift {shift} "
            "does not satisfy the overlap-add condition"
        )


def istft(spec: StftMatrix, num_samples: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of ``stft`` (least-squares synthesis)."""
    length, shift = spec.frame_length, spec.frame_shift
    window = window_function(spec.window, length)
    num_frames = spec.num_frames
    if num_samples is None:
        num_samples = spec.num_samples
    if num_frames == 0:
        return np.zeros(num_samples)
    frames = np.fft.irfft(spec.data, n=spec.fft_size, axis=1)[:, :length]
    out = np.zeros((num_frames - 1) * shift + length)
    for t in range(num_frames):
        out[t * shift : t * shift + length] += frames[t] * window
    norm = _overlap_weights(window, shift, num_frames)
    out = np.divide(out, norm, out=np.zeros_like(out), where=norm > 1e-10)
    if out.shape[0] < num_samples:
        out = np.pad(out, (0, num_samples - out.shape[0]))
    return out[:num_samples]


def enhance_waveform(
    audio: AudioBuffer,
    frontend: FrontendConfig | None = None,
    config: WpeConfig | None = None,
    fft_size: int | None = None,
) -> AudioBuffer:
    """STFT -> WPE -> inverse STFT; output length equals input length.

    The front-end framing is reused; the FFT defaults to 512 points at 8 kHz
    and 1024 at 16 kHz. The trailing partial frame is zero-padded.
    """
    frontend = frontend or FrontendConfig()
    config = config or WpeConfig()
    length, shift = frontend.frame_samples(audio.sample_rate)
    check_nola(frontend.window, length, shift)
    if fft_size is None:
        fft_size = max(next_pow2(length), 512 * max(1, audio.sample_rate // 8000))
    n = len(audio)
    if n == 0:
        return audio
    num_frames = 1 + max(0, -(-(n - length) // shift))
    padded_len = (num_frames - 1) * shift + length
    padded = AudioBuffer(np.pad(audio.samples, (0, padded_len - n)), audio.sample_rate)
    spec = stft(padded, frontend, fft_size)
    enhanced = wpe_dereverberate(spec, config)
    return AudioBuffer(istft(enhanced, padded_len)[:n], audio.sample_rate)
