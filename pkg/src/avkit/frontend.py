"""Audio front-end: resampling, STFT, MFCC, sliding CMN and energy VAD.

All operations are pure functions over numpy arrays. Conventions follow the
usual Kaldi-style narrowband/wideband recipes: 25 ms Hamming frames with a
10 ms shift, pre-emphasis 0.97, 23 mel bins and 23 cepstra, no dithering.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.signal import upfirdn

from .errors import ConfigError, ContractError, DataError

SUPPORTED_RATES = (8000, 16000)
LOG_FLOOR = 1e-10

# rate-dependent mel range when FrontendConfig leaves it unset
_MEL_RANGE = {8000: (20.0, 3700.0), 16000: (20.0, 7700.0)}


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ContractError(f"audio must be mono 1-D, got shape {samples.shape}")
        if int(self.sample_rate) <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ContractError("audio contains NaN or Inf samples")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class FrontendConfig:
    frame_length: float = 0.025
    frame_shift: float = 0.010
    preemphasis: float = 0.97
    num_mel_bins: int = 23
    num_ceps: int = 23
    mel_low: float | None = None
    mel_high: float | None = None
    cmn_window: float = 3.0
    window: str = "hamming"
    vad_mean_scale: float = 0.5
    vad_offset: float = 5.0
    vad_context: int = 2
    vad_proportion: float = 0.6

    def frame_samples(self, sample_rate: int) -> tuple[int, int]:
        """Return ``(frame_length, frame_shift)`` in samples."""
        length = int(round(self.frame_length * sample_rate))
        shift = int(round(self.frame_shift * sample_rate))
        if not 0 < shift <= length:
            raise ConfigError(
                f"need 0 < frame_shift <= frame_length, got {shift} and {length} samples"
            )
        return length, shift

    def mel_range(self, sample_rate: int) -> tuple[float, float]:
        low_default, high_default = _MEL_RANGE.get(
            sample_rate, (20.0, sample_rate / 2.0 - 300.0)
        )
        low = low_default if self.mel_low is None else float(self.mel_low)
        high = high_default if self.mel_high is None else float(self.mel_high)
        if not 0 <= low < high <= sample_rate / 2:
            raise ConfigError(
                f"mel range [{low}, {high}] invalid for sample rate {sample_rate}"
            )
        return low, high

    def validate(self, sample_rate: int) -> None:
        if self.num_ceps > self.num_mel_bins:
            raise ConfigError("num_ceps must not exceed num_mel_bins")
        if self.cmn_window <= 0:
            raise ConfigError("cmn_window must be positive")
        self.frame_samples(sample_rate)
        self.mel_range(sample_rate)
        window_function(self.window, 4)


@dataclass
class FeatureMatrix:
    frames: np.ndarray
    frame_shift: float = 0.010
    frame_length: float = 0.025

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim == 1 and frames.size == 0:
            frames = frames.reshape(0, 0)
        if frames.ndim != 2:
            raise ContractError(f"features must be T x D, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ContractError("features contain NaN or Inf")
        self.frames = frames

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def __len__(self):
        return self.num_frames


@dataclass
class StftMatrix:
    """Complex T x F spectrogram plus the framing that produced it."""

    data: np.ndarray
    fft_size: int
    frame_shift: int
    frame_length: int
    window: str = "hamming"
    num_samples: int = field(default=0)

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def num_bins(self) -> int:
        return self.data.shape[1]


def window_function(name: str, length: int) -> np.ndarray:
    if name == "hamming":
        return np.hamming(length)
    if name == "hann":
        # periodic Hann; COLA at 50% overlap
        return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(length) / length)
    if name in ("rectangular", "boxcar"):
        return np.ones(length)
    raise ConfigError(f"unknown window {name!r}")


def hz_to_mel(freq):
    return 2595.0 * np.log10(1.0 + np.asarray(freq, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


# --------------------------------------------------------------------------
# resampling


def _sinc_filter(up: int, down: int, taps_per_phase: int, beta: float) -> np.ndarray:
    """Kaiser-windowed sinc lowpass at rate ``up * fs_in`` with gain ``up``."""
    phases = max(up, down)
    num_taps = taps_per_phase * phases + 1  # odd -> integer group delay
    cutoff = 1.0 / phases  # relative to the upsampled Nyquist
    n = np.arange(num_taps) - (num_taps - 1) / 2
    h = cutoff * np.sinc(cutoff * n) * np.kaiser(num_taps, beta)
    return up * h / h.sum()


def resample(
    audio: AudioBuffer,
    target_rate: int,
    taps_per_phase: int = 32,
    beta: float = 8.6,
) -> AudioBuffer:
    """Polyphase windowed-sinc rate conversion to 8 or 16 kHz.

    The output holds ``ceil(len * target / source)`` samples, time-aligned with
    the input (the filter's group delay is removed).
    """
    if target_rate not in SUPPORTED_RATES:
        raise ConfigError(f"target rate {target_rate} not in {SUPPORTED_RATES}")
    source_rate = audio.sample_rate
    if source_rate == target_rate:
        return audio
    ratio = Fraction(target_rate, source_rate)
    up, down = ratio.numerator, ratio.denominator
    if max(up, down) > 1000:
        raise ConfigError(
            f"unsupported rate pair {source_rate} -> {target_rate} (factor {up}/{down})"
        )
    n_in = len(audio)
    n_out = -(-n_in * up // down)
    if n_in == 0:
        return AudioBuffer(np.zeros(0), target_rate)
    h = _sinc_filter(up, down, taps_per_phase, beta)
    delay = (len(h) - 1) // 2
    upsampled = upfirdn(h, audio.samples, up=up, down=1)
    picked = upsampled[delay::down][:n_out]
    if picked.shape[0] < n_out:
        picked = np.pad(picked, (0, n_out - picked.shape[0]))
    return AudioBuffer(picked, target_rate)


# --------------------------------------------------------------------------
# framing and STFT


def frame_signal(samples: np.ndarray, length: int, shift: int) -> np.ndarray:
    """Split into frames ``[t*shift, t*shift + length)``; a partial tail is dropped."""
    n = samples.shape[0]
    if n < length:
        return np.zeros((0, length), dtype=samples.dtype)
    num_frames = 1 + (n - length) // shift
    idx = np.arange(length)[None, :] + shift * np.arange(num_frames)[:, None]
    return samples[idx]


def stft(
    audio: AudioBuffer, config: FrontendConfig, fft_size: int | None = None
) -> StftMatrix:
    length, shift = config.frame_samples(audio.sample_rate)
    if fft_size is None:
        fft_size = next_pow2(length)
    if fft_size < length or fft_size & (fft_size - 1):
        raise ConfigError(
            f"fft_size must be a power of two >= {length} samples, got {fft_size}"
        )
    frames = frame_signal(audio.samples, length, shift)
    frames = frames * window_function(config.window, length)
    data = np.fft.rfft(frames, n=fft_size, axis=1)
    return StftMatrix(
        data=data,
        fft_size=fft_size,
        frame_shift=shift,
        frame_length=length,
        window=config.window,
        num_samples=len(audio),
    )


# --------------------------------------------------------------------------
# MFCC


def mel_filterbank(
    num_bins: int, fft_size: int, sample_rate: int, low: float, high: float
) -> np.ndarray:
    """Triangular filters, equally spaced on the mel scale; shape (num_bins, F)."""
    mel_low, mel_high = hz_to_mel(low), hz_to_mel(high)
    edges = mel_low + np.arange(num_bins + 2) * (mel_high - mel_low) / (num_bins + 1)
    bin_mel = hz_to_mel(np.arange(fft_size // 2 + 1) * sample_rate / fft_size)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_mel - left) / (center - left)
    falling = (right - bin_mel) / (right - center)
    weights = np.where(
        (bin_mel > left) & (bin_mel < center),
        rising,
        np.where((bin_mel >= center) & (bin_mel < right), falling, 0.0),
    )
    return weights


def preemphasize(samples: np.ndarray, coeff: float) -> np.ndarray:
    out = samples.copy()
    out[1:] -= coeff * samples[:-1]
    return out


def mfcc(audio: AudioBuffer, config: FrontendConfig | None = None) -> FeatureMatrix:
    """Static MFCCs (no deltas); coefficient 0 is the DCT-II 0th term."""
    config = config or FrontendConfig()
    rate = audio.sample_rate
    if rate not in SUPPORTED_RATES:
        raise ConfigError(f"mfcc expects 8 or 16 kHz audio, got {rate}")
    config.validate(rate)
    emphasized = AudioBuffer(preemphasize(audio.samples, config.preemphasis), rate)
    spec = stft(emphasized, config)
    low, high = config.mel_range(rate)
    fbank = mel_filterbank(config.num_mel_bins, spec.fft_size, rate, low, high)
    power = spec.data.real**2 + spec.data.imag**2
    log_mel = np.log(np.maximum(power @ fbank.T, LOG_FLOOR))
    if log_mel.shape[0] == 0:
        ceps = np.zeros((0, config.num_ceps))
    else:
        ceps = dct(log_mel, type=2, norm="ortho", axis=1)[:, : config.num_ceps]
    return FeatureMatrix(ceps, frame_shift=config.frame_shift, frame_length=config.frame_length)


def sliding_cmn(features: FeatureMatrix, window: float = 3.0) -> FeatureMatrix:
    """Subtract a centered moving mean; windows are truncated at the edges.

    ``window`` is in seconds and converted with the features' frame shift
    (3 s at 10 ms -> 300 frames, i.e. frames ``[t-150, t+150)``).
    """
    if window <= 0:
        raise ConfigError("CMN window must be positive")
    x = features.frames
    num_frames = x.shape[0]
    if num_frames == 0:
        return FeatureMatrix(x.copy(), features.frame_shift, features.frame_length)
    width = max(1, int(round(window / features.frame_shift)))
    t = np.arange(num_frames)
    start = np.clip(t - width // 2, 0, num_frames)
    stop = np.clip(t - width // 2 + width, 0, num_frames)
    csum = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
    means = (csum[stop] - csum[start]) / (stop - start)[:, None]
    return FeatureMatrix(x - means, features.frame_shift, features.frame_length)


def energy_vad(
    features: FeatureMatrix,
    mean_scale: float = 0.5,
    offset: float = 5.0,
    context: int = 2,
    proportion: float = 0.6,
) -> np.ndarray:
    """Boolean speech mask from coefficient 0.

    A frame is speech when at least ``proportion`` of the frames within
    ``+-context`` (truncated at the edges) exceed
    ``mean_scale * mean(c0) + offset``.
    """
    num_frames = features.num_frames
    if num_frames == 0:
        return np.zeros(0, dtype=bool)
    c0 = features.frames[:, 0]
    loud = c0 > mean_scale * c0.mean() + offset
    t = np.arange(num_frames)
    start = np.clip(t - context, 0, num_frames)
    stop = np.clip(t + context + 1, 0, num_frames)
    csum = np.concatenate([[0], np.cumsum(loud, dtype=np.int64)])
    votes = csum[stop] - csum[start]
    return votes >= proportion * (stop - start)


def apply_vad(features: FeatureMatrix, mask) -> FeatureMatrix:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (features.num_frames,):
        raise ContractError(
            f"VAD mask has {mask.shape[0] if mask.ndim else 0} entries "
            f"for {features.num_frames} frames"
        )
    return FeatureMatrix(
        features.frames[mask], features.frame_shift, features.frame_length
    )


def extract_features(
    audio: AudioBuffer,
    config: FrontendConfig | None = None,
    rate: int | None = None,
    vad: bool = True,
) -> FeatureMatrix:
    """resample -> MFCC -> sliding CMN -> (energy VAD on raw c0, then frame removal)."""
    config = config or FrontendConfig()
    if rate is not None:
        audio = resample(audio, rate)
    raw = mfcc(audio, config)
    normalized = sliding_cmn(raw, config.cmn_window)
    if not vad:
        return normalized
    mask = energy_vad(
        raw,
        config.vad_mean_scale,
        config.vad_offset,
        config.vad_context,
        config.vad_proportion,
    )
    return apply_vad(normalized, mask)


# --------------------------------------------------------------------------
# WAV I/O (16-bit PCM mono)


def read_wav(path) -> AudioBuffer:
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1:
                raise DataError(f"{path}: expected mono, got {fh.getnchannels()} channels")
            if fh.getsampwidth() != 2:
                raise DataError(f"{path}: expected 16-bit PCM")
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioBuffer(samples, rate)


def write_wav(path, audio: AudioBuffer) -> None:
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(audio.sample_rate)
        fh.writeframes(pcm.tobytes())

