import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avkit.errors import ConfigError, ContractError
from avkit.frontend import (
    AudioBuffer,
    FeatureMatrix,
    FrontendConfig,
    apply_vad,
    energy_vad,
    extract_features,
    hz_to_mel,
    mel_to_hz,
    mfcc,
    read_wav,
    resample,
    sliding_cmn,
    stft,
    write_wav,
)

from reference_mfcc import reference_mfcc


def tone(freq, rate, seconds, amp=0.5, phase=0.0):
    t = np.arange(int(round(rate * seconds))) / rate
    return amp * np.sin(2 * np.pi * freq * t + phase)


# --------------------------------------------------------------------------
# resample


def test_resample_identity_returns_same_buffer():
    audio = AudioBuffer(tone(300, 16000, 0.1), 16000)
    assert resample(audio, 16000) is audio


def test_resample_silence():
    out = resample(AudioBuffer(np.zeros(16000), 16000), 8000)
    assert out.sample_rate == 8000
    assert len(out) == 8000
    assert np.all(out.samples == 0)


def test_resample_440hz_peak():
    out = resample(AudioBuffer(tone(440, 16000, 1.0), 16000), 8000)
    spectrum = np.abs(np.fft.rfft(out.samples))
    peak_hz = np.argmax(spectrum) * out.sample_rate / len(out)
    assert abs(peak_hz - 440) <= 1.0


def test_resample_duration_within_one_sample():
    for n in (1, 7, 999, 16001):
        out = resample(AudioBuffer(np.ones(n), 16000), 8000)
        assert abs(out.duration - n / 16000) <= 1 / 8000


def test_resample_unsupported_rate():
    with pytest.raises(ConfigError):
        resample(AudioBuffer(np.zeros(10), 16000), 22050)


def test_resample_round_trip_band_limited():
    rng = np.random.default_rng(3)
    rate, n = 16000, 32000
    t = np.arange(n) / rate
    x = np.zeros(n)
    for f in rng.uniform(100, 3400, size=20):
        x += rng.uniform(0.1, 0.5) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    # taper the ends so the edges carry no out-of-band energy
    ramp = 1600
    taper = np.ones(n)
    taper[:ramp] = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
    taper[-ramp:] = taper[:ramp][::-1]
    x *= taper
    back = resample(resample(AudioBuffer(x, rate), 8000), 16000)
    assert len(back) == n
    rel = np.sqrt(np.mean((back.samples - x) ** 2) / np.mean(x**2))
    assert rel < 1e-3


# --------------------------------------------------------------------------
# stft


def test_stft_zero_signal():
    spec = stft(AudioBuffer(np.zeros(1600), 16000), FrontendConfig(), 512)
    assert spec.data.shape == (8, 257)
    assert np.all(spec.data == 0)


def test_stft_impulse_flat_at_window_start():
    x = np.zeros(1600)
    x[0] = 1.0
    spec = stft(AudioBuffer(x, 16000), FrontendConfig(), 512)
    # np.hamming(400)[0] = 0.54 - 0.46 = 0.08
    np.testing.assert_allclose(np.abs(spec.data[0]), 0.08, atol=1e-12)


def test_stft_1khz_peak_bin():
    spec = stft(AudioBuffer(tone(1000, 16000, 0.5), 16000), FrontendConfig(), 512)
    assert np.all(np.argmax(np.abs(spec.data), axis=1) == 32)


def test_stft_framing_and_short_input():
    spec = stft(AudioBuffer(np.ones(399), 16000), FrontendConfig())
    assert spec.data.shape[0] == 0
    spec = stft(AudioBuffer(np.ones(400 + 3 * 160), 16000), FrontendConfig())
    assert spec.data.shape == (4, 257)


def test_stft_rejects_bad_fft_size():
    with pytest.raises(ConfigError):
        stft(AudioBuffer(np.zeros(1000), 16000), FrontendConfig(), 256)
    with pytest.raises(ConfigError):
        stft(AudioBuffer(np.zeros(1000), 16000), FrontendConfig(), 600)


# --------------------------------------------------------------------------
# mfcc


def test_mel_of_1000hz():
    assert abs(float(hz_to_mel(1000.0)) - 1000.0) < 0.05
    np.testing.assert_allclose(mel_to_hz(hz_to_mel([20.0, 3700.0, 7700.0])), [20, 3700, 7700])


@pytest.mark.parametrize(
    "rate,freq,low,high",
    [(16000, 1000.0, 20.0, 7700.0), (8000, 440.0, 20.0, 3700.0), (16000, 2750.0, 20.0, 7700.0)],
)
def test_mfcc_matches_reference(rate, freq, low, high):
    x = tone(freq, rate, 0.12) + 0.05 * tone(3 * freq / 2, rate, 0.12)
    ours = mfcc(AudioBuffer(x, rate)).frames
    ref = reference_mfcc(x, rate, low, high)
    assert ours.shape == ref.shape == (10, 23)
    assert np.max(np.abs(ours - ref)) < 1e-6


def test_mfcc_zero_signal_constant_rows():
    feats = mfcc(AudioBuffer(np.zeros(8000), 8000)).frames
    assert feats.shape[1] == 23
    assert np.all(feats == feats[0])


def test_mfcc_empty_audio():
    feats = mfcc(AudioBuffer(np.zeros(0), 16000))
    assert feats.frames.shape == (0, 23)


def test_mfcc_rejects_other_rates():
    with pytest.raises(ConfigError):
        mfcc(AudioBuffer(np.zeros(4410), 44100))


def test_mfcc_config_invariants():
    with pytest.raises(ConfigError):
        mfcc(AudioBuffer(np.zeros(800), 8000), FrontendConfig(num_ceps=24))
    with pytest.raises(ConfigError):
        mfcc(AudioBuffer(np.zeros(800), 8000), FrontendConfig(mel_high=5000.0))
    with pytest.raises(ConfigError):
        mfcc(AudioBuffer(np.zeros(800), 8000), FrontendConfig(frame_shift=0.03))


@settings(max_examples=15, deadline=None)
@given(k=st.integers(1, 20), seed=st.integers(0, 2**31 - 1))
def test_mfcc_shift_equivariance(k, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(4000)
    shift = 80  # 10 ms at 8 kHz
    base = mfcc(AudioBuffer(x, 8000)).frames
    delayed = mfcc(AudioBuffer(np.concatenate([np.zeros(k * shift), x]), 8000)).frames
    np.testing.assert_allclose(delayed[k : k + base.shape[0]], base, atol=1e-9, rtol=0)


# --------------------------------------------------------------------------
# CMN


def test_cmn_constant_matrix():
    out = sliding_cmn(FeatureMatrix(np.full((500, 23), 3.7)))
    assert np.max(np.abs(out.frames)) < 1e-12


def test_cmn_single_frame():
    out = sliding_cmn(FeatureMatrix(np.array([[1.0, -2.0, 5.0]])))
    assert np.all(out.frames == 0)


def test_cmn_two_frames():
    out = sliding_cmn(FeatureMatrix(np.array([[1.0, 10.0], [3.0, 20.0]])))
    np.testing.assert_allclose(out.frames, [[-1.0, -5.0], [1.0, 5.0]])


def test_cmn_rejects_bad_window():
    with pytest.raises(ConfigError):
        sliding_cmn(FeatureMatrix(np.zeros((3, 2))), 0.0)


@settings(max_examples=20, deadline=None)
@given(num_frames=st.integers(301, 700), seed=st.integers(0, 2**31 - 1))
def test_cmn_interior_window_zero_mean(num_frames, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((num_frames, 5)) * 10 + rng.standard_normal(5) * 50
    out = sliding_cmn(FeatureMatrix(x)).frames
    offset = x - out
    for t in range(150, num_frames - 150):
        window = x[t - 150 : t + 150]
        # the frame's own window, re-centred with the subtracted offset, has zero mean
        assert np.max(np.abs(np.mean(window - offset[t], axis=0))) < 1e-9


def test_cmn_edge_windows_truncate():
    x = np.arange(400, dtype=float)[:, None]
    out = sliding_cmn(FeatureMatrix(x)).frames
    # frame 0 sees frames [0, 150); the last frame sees [249, 400)
    assert out[0, 0] == pytest.approx(0 - np.mean(np.arange(150)))
    assert out[-1, 0] == pytest.approx(399 - np.mean(np.arange(249, 400)))


# --------------------------------------------------------------------------
# VAD


def test_vad_digital_silence_all_false():
    feats = FeatureMatrix(np.full((50, 23), -3.0))
    assert not energy_vad(feats).any()


def test_vad_context_zero_is_pointwise():
    c0 = np.tile([20.0, -20.0], 25)
    feats = FeatureMatrix(np.column_stack([c0, np.zeros((50, 2))]))
    mask = energy_vad(feats, 0.5, 5.0, context=0, proportion=1.0)
    np.testing.assert_array_equal(mask, c0 > 0.5 * c0.mean() + 5.0)


def test_vad_tone_between_silences():
    rate = 16000
    x = np.concatenate([np.zeros(rate), tone(500, rate, 1.0), np.zeros(rate)])
    mask = energy_vad(mfcc(AudioBuffer(x, rate)))
    # frames touching the tone run from 98 (ends at 16080) to 199 (starts at 31840);
    # frames fully inside are 100..197
    assert mask[100:198].all()
    assert not mask[:96].any()
    assert not mask[202:].any()


def test_vad_deterministic():
    rng = np.random.default_rng(0)
    feats = FeatureMatrix(rng.standard_normal((200, 23)) * 10)
    np.testing.assert_array_equal(energy_vad(feats), energy_vad(feats))


def test_apply_vad():
    feats = FeatureMatrix(np.arange(6.0).reshape(3, 2))
    np.testing.assert_array_equal(apply_vad(feats, [True, True, True]).frames, feats.frames)
    assert apply_vad(feats, [False] * 3).frames.shape == (0, 2)
    np.testing.assert_array_equal(apply_vad(feats, [True, False, True]).frames, [[0, 1], [4, 5]])
    with pytest.raises(ContractError):
        apply_vad(feats, [True, False])


def test_extract_features_order():
    rate = 16000
    x = np.concatenate([np.zeros(rate), tone(500, rate, 1.0), np.zeros(rate)])
    audio = AudioBuffer(x, rate)
    raw = mfcc(audio)
    expected = apply_vad(sliding_cmn(raw), energy_vad(raw)).frames
    np.testing.assert_array_equal(extract_features(audio).frames, expected)
    assert extract_features(audio, vad=False).frames.shape == raw.frames.shape
    assert extract_features(audio, rate=8000, vad=False).frames.shape[0] == raw.frames.shape[0]


def test_audio_buffer_validation():
    with pytest.raises(ContractError):
        AudioBuffer(np.array([0.0, np.nan]), 8000)
    with pytest.raises(ContractError):
        AudioBuffer(np.zeros((2, 2)), 8000)
    with pytest.raises(ContractError):
        AudioBuffer(np.zeros(2), 0)


def test_wav_round_trip(tmp_path):
    x = np.round(tone(440, 8000, 0.2) * 32768) / 32768
    write_wav(tmp_path / "a.wav", AudioBuffer(x, 8000))
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 8000
    np.testing.assert_array_equal(back.samples, x)
