"""Raw FMCW IQ frames to 4-D spectral cubes and their 3-channel encoding.

Axis conventions used throughout the package:

* raw frame ``iq``: ``(chirp, tx, rx, sample)``
* spectral cube ``bins``: ``(doppler, elevation, azimuth, range)``

Doppler, elevation and azimuth axes are FFT-shifted so physical zero sits at
bin ``N // 2``; the range axis is left unshifted so bin ``k`` is ``k`` range
resolutions away. A bin ``n`` of an ``N``-point shifted angle FFT has spatial
frequency ``psi_n = 2 pi (n - N/2) / N``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

from radario.errors import ConfigError, FormatError, ShapeMismatchError

RIQ_MAGIC = b"RIQ1"
RIQ_VERSION = 1
_RIQ_HEADER = struct.Struct("<4sIIIIId")


def awr1843_layout() -> np.ndarray:
    """Virtual-array placement of the 3TX/4RX AWR1843 board as (row, col) per (tx, rx).

    TX0 and TX2 sit in the azimuth plane and form an 8-element row; TX1 is
    raised by one element spacing and shifted two columns right.
    """
    layout = np.zeros((3, 4, 2), dtype=int)
    for rx in range(4):
        layout[0, rx] = (0, rx)
        layout[1, rx] = (1, rx + 2)
        layout[2, rx] = (0, rx + 4)
    return layout


def linear_layout(num_tx: int, num_rx: int) -> np.ndarray:
    layout = np.zeros((num_tx, num_rx, 2), dtype=int)
    for tx in range(num_tx):
        for rx in range(num_rx):
            layout[tx, rx] = (0, tx * num_rx + rx)
    return layout


@dataclass(frozen=True)
class ChirpConfig:
    """Frame geometry and the physical meaning of each FFT bin.

    ``max_range`` and ``max_doppler`` are derived from the resolutions so the
    two can never disagree.
    """

    num_chirps: int = 64
    num_tx: int = 3
    num_rx: int = 4
    num_samples: int = 128
    range_resolution: float = 11.2 / 128
    doppler_resolution: float = 1.2 / 32
    carrier_wavelength: float = 3e8 / 77e9
    antenna_spacing: float = 0.5
    frame_rate: float = 20.0
    layout: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        for name in ("num_chirps", "num_tx", "num_rx", "num_samples"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("range_resolution", "doppler_resolution", "antenna_spacing", "frame_rate"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.layout is None:
            if (self.num_tx, self.num_rx) == (3, 4):
                layout = awr1843_layout()
            else:
                layout = linear_layout(self.num_tx, self.num_rx)
        else:
            layout = np.asarray(self.layout, dtype=int)
        if layout.shape != (self.num_tx, self.num_rx, 2) or layout.min() < 0:
            raise ConfigError(f"layout must be a non-negative (tx, rx, 2) array, got {layout.shape}")
        object.__setattr__(self, "layout", layout)

    @classmethod
    def indoor(cls, num_chirps: int = 64, num_samples: int = 128, **kw) -> "ChirpConfig":
        """Indoor-style config: 1.2 m/s maximum Doppler, 11.2 m maximum range."""
        return cls(
            num_chirps=num_chirps,
            num_samples=num_samples,
            range_resolution=11.2 / num_samples,
            doppler_resolution=1.2 / (num_chirps / 2),
            **kw,
        )

    @property
    def max_range(self) -> float:
        return self.range_resolution * self.num_samples

    @property
    def max_doppler(self) -> float:
        return self.doppler_resolution * self.num_chirps / 2

    @property
    def array_shape(self) -> tuple[int, int]:
        """(rows, cols) of the virtual array."""
        return int(self.layout[..., 0].max()) + 1, int(self.layout[..., 1].max()) + 1

    @property
    def frame_shape(self) -> tuple[int, int, int, int]:
        return (self.num_chirps, self.num_tx, self.num_rx, self.num_samples)


@dataclass(frozen=True)
class AngularPadding:
    elevation: int = 32
    azimuth: int = 64


@dataclass
class RawFrame:
    timestamp: float
    iq: np.ndarray

    def __post_init__(self):
        self.iq = np.asarray(self.iq, dtype=complex)
        if self.iq.ndim != 4:
            raise ShapeMismatchError(f"iq must be 4-D (chirp, tx, rx, sample), got {self.iq.shape}")
        if not np.all(np.isfinite(self.iq)):
            raise ValueError("iq contains non-finite samples")


def shifted_bin_frequencies(n: int) -> np.ndarray:
    """Spatial frequency psi of each bin of an n-point shifted FFT, in [-pi, pi)."""
    return 2.0 * np.pi * (np.arange(n) - n // 2) / n


@dataclass
class SpectralCube:
    """4-D spectrum indexed (doppler, elevation, azimuth, range).

    A lazy cube keeps only the range-Doppler transformed virtual array; angle
    images are then computed per cell on request and ``bins`` is filled in by
    :meth:`materialize`.
    """

    bins: np.ndarray | None
    doppler: np.ndarray  # m/s per Doppler bin
    psi_elevation: np.ndarray
    psi_azimuth: np.ndarray
    range: np.ndarray  # m per range bin
    antenna_spacing: float = 0.5
    timestamp: float = 0.0
    virtual: np.ndarray | None = field(default=None, repr=False)

    @property
    def elevation(self) -> np.ndarray:
        """Physical elevation (rad) per bin; NaN where the bin is not a visible angle."""
        return _visible_arcsin(self.psi_elevation, self.antenna_spacing)

    @property
    def azimuth(self) -> np.ndarray:
        return _visible_arcsin(self.psi_azimuth, self.antenna_spacing)

    @property
    def padding(self) -> AngularPadding:
        return AngularPadding(len(self.psi_elevation), len(self.psi_azimuth))

    def range_doppler_power(self) -> np.ndarray:
        """Noncoherent power over all angle bins, shaped (range, doppler).

        By Parseval this is the zero-padded FFT size times the sum of |x|^2
        over the virtual antennas, which is how lazy cubes evaluate it.
        """
        if self.bins is not None:
            return np.sum(np.abs(self.bins) ** 2, axis=(1, 2)).T
        pad = self.padding
        power = np.sum(self.virtual.real**2 + self.virtual.imag**2, axis=(1, 2))
        return (pad.elevation * pad.azimuth) * power.T

    def angle_image(self, d_bin: int, r_bin: int) -> np.ndarray:
        """Shifted (elevation, azimuth) spectrum of one range-Doppler cell."""
        if self.bins is not None:
            return self.bins[d_bin, :, :, r_bin]
        return angle_fft(self.virtual[d_bin, :, :, r_bin], self.padding)

    def materialize(self) -> "SpectralCube":
        if self.bins is None:
            self.bins = angle_fft(self.virtual, self.padding, axes=(1, 2))
        return self


def _visible_arcsin(psi, d_lambda):
    s = psi / (2.0 * np.pi * d_lambda)
    out = np.full(s.shape, np.nan)
    ok = np.abs(s) <= 1.0
    out[ok] = np.arcsin(s[ok])
    return out


@dataclass
class FeatureCube:
    values: np.ndarray  # (..., 3): log10 magnitude, sin phase, cos phase


def dc_remove(frame: RawFrame) -> RawFrame:
    """Subtract the slow-time mean for every (tx, rx, sample), removing static returns."""
    iq = frame.iq - frame.iq.mean(axis=0, keepdims=True)
    return RawFrame(frame.timestamp, iq)


def _check_frame(frame: RawFrame, cfg: ChirpConfig) -> None:
    if frame.iq.shape != cfg.frame_shape:
        raise ShapeMismatchError(f"frame shape {frame.iq.shape} does not match config {cfg.frame_shape}")


def process_frame(
    frame: RawFrame,
    cfg: ChirpConfig,
    pad: AngularPadding = AngularPadding(),
    window: tuple[str, ...] = (),
    lazy: bool = False,
) -> SpectralCube:
    """Range, Doppler, elevation and azimuth FFTs of one frame.

    ``window`` may name any of ``"range"``, ``"doppler"``, ``"angle"`` to apply
    a Hann taper on that axis before its FFT. With ``lazy`` the angle FFTs are
    deferred (see :class:`SpectralCube`).
    """
    _check_frame(frame, cfg)
    rows, cols = cfg.array_shape
    if pad.elevation < rows or pad.azimuth < cols:
        raise ConfigError(f"angular padding {pad} smaller than virtual array {rows}x{cols}")
    unknown = set(window) - {"range", "doppler", "angle"}
    if unknown:
        raise ConfigError(f"unknown window axes {sorted(unknown)}")

    x = frame.iq
    if "range" in window:
        x = x * np.hanning(cfg.num_samples)
    if "doppler" in window:
        x = x * np.hanning(cfg.num_chirps)[:, None, None, None]
    x = np.fft.fft(x, axis=3)
    x = np.fft.fftshift(np.fft.fft(x, axis=0), axes=0)

    virtual = np.zeros((cfg.num_chirps, rows, cols, cfg.num_samples), dtype=complex)
    r_idx = cfg.layout[..., 0].ravel()
    c_idx = cfg.layout[..., 1].ravel()
    virtual[:, r_idx, c_idx, :] = x.reshape(cfg.num_chirps, -1, cfg.num_samples)
    if "angle" in window:
        taper = np.outer(np.hanning(rows) if rows > 2 else np.ones(rows),
                         np.hanning(cols) if cols > 2 else np.ones(cols))
        virtual *= taper[None, :, :, None]

    cube = SpectralCube(
        bins=None,
        doppler=(np.arange(cfg.num_chirps) - cfg.num_chirps // 2) * cfg.doppler_resolution,
        psi_elevation=shifted_bin_frequencies(pad.elevation),
        psi_azimuth=shifted_bin_frequencies(pad.azimuth),
        range=np.arange(cfg.num_samples) * cfg.range_resolution,
        antenna_spacing=cfg.antenna_spacing,
        timestamp=frame.timestamp,
        virtual=virtual,
    )
    return cube if lazy else cube.materialize()


def angle_fft(virtual: np.ndarray, pad: AngularPadding, axes: tuple[int, int] = (0, 1)) -> np.ndarray:
    """Zero-padded, shifted elevation/azimuth FFT of a virtual-array image."""
    x = np.fft.fft(virtual, n=pad.elevation, axis=axes[0])
    x = np.fft.fft(x, n=pad.azimuth, axis=axes[1])
    return np.fft.fftshift(x, axes=axes)


def encode(cube: SpectralCube | np.ndarray, mag_floor: float = 1e-12) -> FeatureCube:
    """(log10 |z|, sin arg z, cos arg z) per bin; zero bins get phase 0."""
    z = cube.materialize().bins if isinstance(cube, SpectralCube) else np.asarray(cube)
    if not mag_floor > 0:
        raise ConfigError("mag_floor must be positive")
    r = np.abs(z)
    theta = np.angle(z)
    return FeatureCube(np.stack([np.log10(np.maximum(r, mag_floor)), np.sin(theta), np.cos(theta)], axis=-1))


# --- RIQ1 raw frame files -------------------------------------------------


def write_header(fh: BinaryIO, cfg: ChirpConfig) -> None:
    fh.write(_RIQ_HEADER.pack(RIQ_MAGIC, RIQ_VERSION, cfg.num_chirps, cfg.num_tx,
                              cfg.num_rx, cfg.num_samples, cfg.frame_rate))


def write_frames(path: str | Path, cfg: ChirpConfig, frames) -> None:
    with open(path, "wb") as fh:
        write_header(fh, cfg)
        for frame in frames:
            append_frame(fh, cfg, frame)


def append_frame(fh: BinaryIO, cfg: ChirpConfig, frame: RawFrame) -> None:
    _check_frame(frame, cfg)
    fh.write(struct.pack("<d", frame.timestamp))
    buf = np.empty(frame.iq.shape + (2,), dtype="<f4")
    buf[..., 0] = frame.iq.real
    buf[..., 1] = frame.iq.imag
    fh.write(buf.tobytes())


def read_header(fh: BinaryIO) -> tuple[tuple[int, int, int, int], float]:
    raw = fh.read(_RIQ_HEADER.size)
    if len(raw) != _RIQ_HEADER.size:
        raise FormatError("truncated RIQ1 header")
    magic, version, nc, ntx, nrx, nr, rate = _RIQ_HEADER.unpack(raw)
    if magic != RIQ_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {RIQ_MAGIC!r}")
    if version != RIQ_VERSION:
        raise FormatError(f"unsupported RIQ version {version}")
    return (nc, ntx, nrx, nr), rate


def iter_frames(path: str | Path, cfg: ChirpConfig | None = None) -> Iterator[RawFrame]:
    """Yield frames from an RIQ1 file; if ``cfg`` is given its shape must match the header."""
    with open(path, "rb") as fh:
        shape, _ = read_header(fh)
        if cfg is not None and shape != cfg.frame_shape:
            raise ShapeMismatchError(f"file frame shape {shape} != config {cfg.frame_shape}")
        n = int(np.prod(shape))
        size = 8 + n * 8
        while True:
            chunk = fh.read(size)
            if not chunk:
                return
            if len(chunk) != size:
                raise FormatError("truncated frame record")
            (t,) = struct.unpack_from("<d", chunk)
            vals = np.frombuffer(chunk, dtype="<f4", offset=8).reshape(shape + (2,))
            yield RawFrame(t, vals[..., 0].astype(float) + 1j * vals[..., 1].astype(float))
