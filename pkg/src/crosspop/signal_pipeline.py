"""Spectro-temporal preprocessing of aligned recordings.

Each present channel is turned into one or more fixed-size log-power
spectrogram frames:

1. resample to the common 64 Hz rate (FFT method, alias-free);
2. standardize the full channel to zero mean / unit population variance;
3. cut overlapping analysis windows of 16384 samples with hop 8192,
   zero-padding short signals and adding a terminal window so the last
   sample is always covered;
4. short-time Fourier transform with a periodic Hann analysis window,
   centered framing (reflect padding of half an FFT on each side), squared
   magnitudes;
5. drop the first frequency and time bins (boundary effects), max-normalize,
   move to log scale and min-max rescale so every non-degenerate frame spans
   exactly [0, 1].

All operations are pure functions; identical inputs give identical bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.signal

from .montage import AlignedRecording, Montage


class UpsamplingRequested(ValueError):
    """Target rate above the source rate is unsupported."""


class ZeroVariance(ValueError):
    """A constant signal cannot be standardized."""


class BadWindowLength(ValueError):
    """STFT input does not match the configured analysis window length."""


@dataclass(frozen=True)
class PipelineConfig:
    """Fixed preprocessing parameters.

    The defaults produce 128 x 256 frames: 256 FFT bins at 64 Hz give
    0.25 Hz rows, a 16384-sample window with STFT hop 64 gives 257 centered
    STFT columns, and trimming the first row and column leaves 128 x 256.
    ``log_floor`` is the relative clamp applied before the logarithm so that
    exact zeros stay finite.
    """

    target_rate_hz: float = 64.0
    window_len: int = 16384
    hop: int = 8192
    n_fft: int = 256
    stft_hop: int = 64
    log_floor: float = 1e-12

    def __post_init__(self) -> None:
        if self.hop * 2 != self.window_len:
            raise ValueError("hop must be half the window length")
        if self.n_fft % 2 != 0:
            raise ValueError("n_fft must be even")
        if self.window_len % self.stft_hop != 0:
            raise ValueError("window length must be a multiple of the STFT hop")
        if not 0 < self.log_floor < 1:
            raise ValueError("log_floor must be in (0, 1)")

    @property
    def raw_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def raw_frames(self) -> int:
        return self.window_len // self.stft_hop + 1

    @property
    def frame_shape(self) -> tuple[int, int]:
        return (self.raw_bins - 1, self.raw_frames - 1)


DEFAULT_PIPELINE = PipelineConfig()


@dataclass
class SpectrogramFrame:
    """One normalized log-power window for one channel of one patient.

    ``absent_flag`` marks frames that carry no information (absent channels
    and degenerate all-zero windows); their values are identically zero.
    Non-degenerate frames have min exactly 0 and max exactly 1.
    """

    values: np.ndarray
    channel_index: int
    patient_id: str
    population_id: str
    window_index: int
    absent_flag: bool


def resample(signal: np.ndarray, from_hz: float, to_hz: float = 64.0) -> np.ndarray:
    """Resample to ``to_hz`` with the FFT method; output length is rounded.

    Only downsampling (or rate identity) is supported; the FFT method is
    zero-phase and removes all content above the new Nyquist.
    """
    if not to_hz > 0:
        raise ValueError("to_hz must be positive")
    if from_hz < to_hz:
        raise UpsamplingRequested(f"cannot resample {from_hz} Hz up to {to_hz} Hz")
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1 or len(x) < 2:
        raise ValueError("signal must be one-dimensional with at least 2 samples")
    n_out = int(round(len(x) * to_hz / from_hz))
    if from_hz == to_hz:
        return x.copy()
    return scipy.signal.resample(x, n_out)


def standardize(signal: np.ndarray) -> np.ndarray:
    """Shift and scale to zero mean and unit population standard deviation."""
    x = np.asarray(signal, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("need at least 2 samples to standardize")
    mu = x.mean()
    sigma = x.std()
    if sigma == 0.0:
        raise ZeroVariance("signal is constant")
    return (x - mu) / sigma


def window_count(n_samples: int, cfg: PipelineConfig = DEFAULT_PIPELINE) -> int:
    """Number of analysis windows produced for a signal of ``n_samples``."""
    if n_samples <= 0:
        raise ValueError("signal must be nonempty")
    if n_samples < cfg.window_len:
        return 1
    count = (n_samples - cfg.window_len) // cfg.hop + 1
    if (n_samples - cfg.window_len) % cfg.hop != 0:
        count += 1
    return count


def make_windows(
    signal: np.ndarray,
    window_len: int = DEFAULT_PIPELINE.window_len,
    hop: int = DEFAULT_PIPELINE.hop,
) -> list[np.ndarray]:
    """Cut overlapping windows; zero-pad short signals; cover the last sample.

    Signals shorter than one window yield a single zero-padded window.
    Longer signals yield windows at every hop offset that fits, plus one
    terminal window ending at the last sample when the final offset is not
    hop-aligned, so no sample is ever dropped.
    """
    x = np.asarray(signal, dtype=np.float64)
    n = len(x)
    if n == 0:
        raise ValueError("signal must be nonempty")
    if n < window_len:
        padded = np.zeros(window_len, dtype=np.float64)
        padded[:n] = x
        return [padded]
    windows = [x[off : off + window_len].copy() for off in range(0, n - window_len + 1, hop)]
    if (n - window_len) % hop != 0:
        windows.append(x[n - window_len : n].copy())
    return windows


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann analysis window."""
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def stft_power(window: np.ndarray, cfg: PipelineConfig = DEFAULT_PIPELINE) -> np.ndarray:
    """Squared-magnitude STFT of one analysis window.

    Centered framing: the window is reflect-padded by half an FFT on each
    side, so frame count is ``window_len / stft_hop + 1`` and each column is
    the Hann-weighted spectrum of a frame centered on a hop multiple.
    Returns a (frequency bins, frames) matrix of nonnegative power values.
    """
    x = np.asarray(window, dtype=np.float64)
    if x.ndim != 1 or len(x) != cfg.window_len:
        raise BadWindowLength(f"expected a window of {cfg.window_len} samples, got {x.shape}")
    half = cfg.n_fft // 2
    padded = np.pad(x, half, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.n_fft)[:: cfg.stft_hop]
    spectra = np.fft.rfft(frames * hann_window(cfg.n_fft), axis=1)
    return np.abs(spectra).T ** 2


def log_scale(power: np.ndarray, log_floor: float = DEFAULT_PIPELINE.log_floor) -> tuple[np.ndarray, bool]:
    """Max-normalize, move to log scale and min-max rescale to [0, 1].

    Values below ``log_floor`` of the maximum are clamped before the log so
    exact zeros stay finite; after the affine rescale the result is invariant
    to the logarithm base (natural log used).  Degenerate inputs (all zero,
    or zero dynamic range) return an all-zero matrix and True.
    """
    p = np.asarray(power, dtype=np.float64)
    peak = p.max() if p.size else 0.0
    if not peak > 0.0:
        return np.zeros_like(p), True
    scaled = np.maximum(p / peak, log_floor)
    log_image = np.log(scaled)
    lo = log_image.min()
    span = log_image.max() - lo
    if span == 0.0:
        return np.zeros_like(p), True
    return (log_image - lo) / span, False


def log_normalize(
    power: np.ndarray, cfg: PipelineConfig = DEFAULT_PIPELINE
) -> tuple[np.ndarray, bool]:
    """Trim the boundary row/column of a raw power matrix, then log-scale it.

    Trimming happens before normalization so the emitted frame itself spans
    exactly [0, 1]; the composition is the same min-max map of the log image
    either way whenever the extreme bins survive trimming.
    """
    p = np.asarray(power, dtype=np.float64)
    if p.shape != (cfg.raw_bins, cfg.raw_frames):
        raise ValueError(f"expected power of shape {(cfg.raw_bins, cfg.raw_frames)}, got {p.shape}")
    values, degenerate = log_scale(p[1:, 1:], cfg.log_floor)
    return values, degenerate


def resample_recording(recording, to_hz: float = 64.0):
    """Resample every channel of a raw recording to a common rate."""
    from .montage import RawRecording

    channels = {
        label: resample(vec, recording.sample_rate_hz, to_hz)
        for label, vec in recording.channels.items()
    }
    return RawRecording(
        population_id=recording.population_id,
        patient_id=recording.patient_id,
        label=recording.label,
        sample_rate_hz=to_hz,
        channels=channels,
    )


def preprocess(
    recording: AlignedRecording, cfg: PipelineConfig = DEFAULT_PIPELINE
) -> list[SpectrogramFrame]:
    """Turn an aligned recording into frames, one per (channel, window).

    Absent channels produce absent-flag frames for every window index so the
    physical absence of a sensor stays represented.  A constant present
    channel is an error (it cannot be standardized); the channel index is
    named in the message.
    """
    n_channels, n_samples = recording.matrix.shape
    n_windows = window_count(n_samples, cfg)
    rows, cols = cfg.frame_shape
    frames: list[SpectrogramFrame] = []
    for c in range(n_channels):
        if not recording.presence[c]:
            for w in range(n_windows):
                frames.append(
                    SpectrogramFrame(
                        values=np.zeros((rows, cols), dtype=np.float32),
                        channel_index=c,
                        patient_id=recording.patient_id,
                        population_id=recording.population_id,
                        window_index=w,
                        absent_flag=True,
                    )
                )
            continue
        try:
            z = standardize(recording.matrix[c])
        except ZeroVariance:
            raise ZeroVariance(
                f"channel index {c} of patient {recording.patient_id} is constant"
            ) from None
        for w, window in enumerate(make_windows(z, cfg.window_len, cfg.hop)):
            values, degenerate = log_normalize(stft_power(window, cfg), cfg)
            frames.append(
                SpectrogramFrame(
                    values=values.astype(np.float32),
                    channel_index=c,
                    patient_id=recording.patient_id,
                    population_id=recording.population_id,
                    window_index=w,
                    absent_flag=degenerate,
                )
            )
    return frames


_FRAME_MAGIC = b"SPFR"
_FRAME_HEADER = struct.Struct("<4sHBBiiII")


def frame_to_bytes(frame: SpectrogramFrame) -> bytes:
    """Serialize a frame: fixed header, then row-major little-endian float32."""
    values = np.ascontiguousarray(frame.values, dtype="<f4")
    header = _FRAME_HEADER.pack(
        _FRAME_MAGIC,
        1,
        1 if frame.absent_flag else 0,
        0,
        frame.channel_index,
        frame.window_index,
        values.shape[0],
        values.shape[1],
    )
    return header + values.tobytes()


def frame_from_bytes(
    buf: bytes, patient_id: str = "", population_id: str = ""
) -> SpectrogramFrame:
    """Inverse of :func:`frame_to_bytes` (ids are not part of the container)."""
    magic, version, absent, _pad, channel_index, window_index, rows, cols = _FRAME_HEADER.unpack_from(buf)
    if magic != _FRAME_MAGIC:
        raise ValueError("not a frame container (bad magic)")
    if version != 1:
        raise ValueError(f"unsupported frame container version {version}")
    values = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=_FRAME_HEADER.size)
    return SpectrogramFrame(
        values=values.reshape(rows, cols).copy(),
        channel_index=channel_index,
        patient_id=patient_id,
        population_id=population_id,
        window_index=window_index,
        absent_flag=bool(absent),
    )
