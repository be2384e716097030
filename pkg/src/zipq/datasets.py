"""Dataset ingestion, synthetic generators, and the ZIPQ binary container.

The container persists stochastically quantized samples: per-feature
scales, bit-packed base level indices, and per-value selector counts that
reconstruct every stored quantization copy.  Labels stay full precision.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .packing import pack_fields, packed_nbytes, unpack_fields
from .quantize import QuantScheme, QuantizedVector, column_scales, encode_copies
from .rng import new_rng

_MAGIC = b"ZIPQ"
_VERSION = 1
_HEADER = struct.Struct("<4sBQIBBBB")  # magic, version, n_samples, n_features,
#                                        bits, n_copies, scaling, reserved
_SCALING_CODE = {"column": 0, "row": 1}
_SCALING_NAME = {0: "column", 1: "row"}


class DataFormatError(ValueError):
    """A text dataset file could not be parsed."""


class ContainerError(ValueError):
    """A quantized container is malformed or corrupt."""


@dataclass
class Dataset:
    """Dense samples and labels, with an optional held-out split."""

    X: np.ndarray
    y: np.ndarray
    X_test: np.ndarray | None = None
    y_test: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        if self.X.shape[0] != self.y.size:
            raise ValueError("sample/label count mismatch")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains non-finite values")
        if self.X_test is not None:
            self.X_test = np.atleast_2d(np.asarray(self.X_test, dtype=np.float64))
            self.y_test = np.asarray(self.y_test, dtype=np.float64).ravel()
            if self.X_test.shape[1] != self.X.shape[1]:
                raise ValueError("train/test feature count mismatch")
            if self.X_test.shape[0] != self.y_test.size:
                raise ValueError("test sample/label count mismatch")

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]


# ---------------------------------------------------------------------------
# text loaders


def load_libsvm(path, n_features: int | None = None) -> Dataset:
    """Parse sparse `label idx:val ...` lines (1-based indices) into dense rows."""
    labels: list[float] = []
    rows: list[dict[int, float]] = []
    max_idx = 0
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                labels.append(float(parts[0]))
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {ln}: bad label {parts[0]!r}") from exc
            feats: dict[int, float] = {}
            for tok in parts[1:]:
                try:
                    idx_s, val_s = tok.split(":", 1)
                    idx, val = int(idx_s), float(val_s)
                except ValueError as exc:
                    raise DataFormatError(f"{path}: line {ln}: bad feature {tok!r}") from exc
                if idx < 1:
                    raise DataFormatError(f"{path}: line {ln}: index {idx} is not 1-based")
                feats[idx - 1] = val
                max_idx = max(max_idx, idx)
            rows.append(feats)
    if not rows:
        raise DataFormatError(f"{path}: empty dataset")
    n = n_features if n_features is not None else max_idx
    X = np.zeros((len(rows), n))
    for r, feats in enumerate(rows):
        for i, v in feats.items():
            if i >= n:
                raise DataFormatError(f"{path}: feature index {i + 1} exceeds n_features={n}")
            X[r, i] = v
    return Dataset(X, np.asarray(labels))


def load_csv(path, label_col: int = 0) -> Dataset:
    """Parse a numeric CSV; one column holds the label.  A non-numeric first
    line is treated as a header and skipped."""
    rows: list[list[float]] = []
    width = None
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            toks = line.split(",")
            try:
                vals = [float(t) for t in toks]
            except ValueError as exc:
                if ln == 1:
                    continue  # header row
                raise DataFormatError(f"{path}: line {ln}: non-numeric field") from exc
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise DataFormatError(
                    f"{path}: line {ln}: expected {width} fields, got {len(vals)}"
                )
            rows.append(vals)
    if not rows:
        raise DataFormatError(f"{path}: empty dataset")
    M = np.asarray(rows)
    if not -M.shape[1] <= label_col < M.shape[1]:
        raise DataFormatError(f"{path}: label column {label_col} out of range")
    y = M[:, label_col]
    X = np.delete(M, label_col, axis=1)
    return Dataset(X, y)


# ---------------------------------------------------------------------------
# synthetic data


def synth(
    kind: str,
    n_features: int,
    n_train: int,
    n_test: int,
    seed: int = 0,
    noise: float = 0.0,
    x_star_scale: float = 1.0,
) -> Dataset:
    """Planted-model data: rows uniform in the cube, normalized to unit norm.

    Regression targets are a'x* plus Gaussian noise; classification takes
    the sign (so noiseless problems are separable).  Deterministic per seed.
    """
    if kind not in ("regression", "classification"):
        raise ValueError(f"unknown kind: {kind!r}")
    if n_train <= 0 or n_test < 0:
        raise ValueError("need n_train > 0 and n_test >= 0")
    rng = new_rng(seed)
    x_star = rng.standard_normal(n_features) * x_star_scale
    total = n_train + n_test
    A = rng.uniform(-1.0, 1.0, size=(total, n_features))
    norms = np.linalg.norm(A, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    A /= norms
    b = A @ x_star + noise * rng.standard_normal(total)
    if kind == "classification":
        b = np.where(b >= 0, 1.0, -1.0)
    if n_test:
        return Dataset(A[:n_train], b[:n_train], A[n_train:], b[n_train:])
    return Dataset(A[:n_train], b[:n_train])


def synth_bimodal(
    n_features: int,
    n_train: int,
    n_test: int,
    seed: int = 0,
    noise: float = 0.0,
    centers: tuple[float, float] = (0.08, 0.92),
    widths: tuple[float, float] = (0.004, 0.005),
    weight: float = 0.75,
) -> Dataset:
    """Regression data whose features pile up in two tight lumps in [0, 1].

    Each lump is a Gaussian truncated at 2.5 sigma, so the wide middle is
    genuinely empty.  Uniform level grids waste most levels there, which
    is the regime where optimized level placement pays off.
    """
    rng = new_rng(seed)
    total = n_train + n_test
    pick = rng.random((total, n_features)) < weight
    raw = rng.normal(0.0, 1.0, size=(total, n_features))
    raw = np.clip(raw, -2.5, 2.5)
    vals = np.where(
        pick,
        centers[0] + widths[0] * raw,
        centers[1] + widths[1] * raw,
    )
    A = np.clip(vals, 0.0, 1.0)
    x_star = rng.standard_normal(n_features)
    b = A @ x_star + noise * rng.standard_normal(total)
    if n_test:
        return Dataset(A[:n_train], b[:n_train], A[n_train:], b[n_train:])
    return Dataset(A[:n_train], b[:n_train])


# ---------------------------------------------------------------------------
# ZIPQ container


def _row_nbytes(n_features: int, bits: int, selector_bits: int) -> int:
    return packed_nbytes(n_features * (bits + selector_bits))


def write_quantized(dataset: Dataset, scheme: QuantScheme, n_copies: int, seed, path, scales=None) -> int:
    """Quantize the training matrix and persist it; returns bytes written.

    Per-feature scales are taken from the data unless given.  The payload
    stores, per value, a base level index plus a log2(n_copies)-bit count
    reconstructing all stored copies.  A CRC32 trailer covers the file.
    """
    X = dataset.X
    if scales is None:
        scales = column_scales(X)
    scales = np.asarray(scales, dtype=np.float64)
    rec = encode_copies(X, scheme, scales, n_copies, new_rng(seed))
    selbits = rec.selector_bits
    out = bytearray()
    out += _HEADER.pack(
        _MAGIC,
        _VERSION,
        dataset.n_samples,
        dataset.n_features,
        scheme.bits,
        n_copies,
        _SCALING_CODE[scheme.scaling],
        0,
    )
    out += scales.astype("<f8").tobytes()
    for r in range(dataset.n_samples):
        row = pack_fields([(rec.base[r], scheme.bits), (rec.base_count[r], selbits)])
        assert len(row) == _row_nbytes(dataset.n_features, scheme.bits, selbits)
        out += row
    out += dataset.y.astype("<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    with open(path, "wb") as fh:
        fh.write(out)
    return len(out)


@dataclass
class ZipqFile:
    """Read-side view of a quantized container.

    Exposes per-sample access to any stored copy without decoding the
    whole payload.  Dequantization needs the level grid the writer used;
    pass it at read time (the container stores only the bit width).
    """

    n_samples: int
    n_features: int
    bits: int
    n_copies: int
    scaling: str
    scales: np.ndarray
    labels: np.ndarray
    _rows: bytes
    scheme: QuantScheme | None = None

    @property
    def selector_bits(self) -> int:
        return self.n_copies.bit_length() - 1

    def _row(self, k: int):
        if not 0 <= k < self.n_samples:
            raise IndexError(f"sample {k} out of range")
        nb = _row_nbytes(self.n_features, self.bits, self.selector_bits)
        buf = self._rows[k * nb : (k + 1) * nb]
        base, cnt = unpack_fields(
            buf, [(self.bits, self.n_features), (self.selector_bits, self.n_features)]
        )
        return base, cnt

    def base_indices(self, k: int) -> np.ndarray:
        return self._row(k)[0]

    def selector_counts(self, k: int) -> np.ndarray:
        return self._row(k)[1]

    def copy_indices(self, k: int, copy: int) -> np.ndarray:
        """Level indices of stored copy ``copy`` for sample ``k``."""
        if not 0 <= copy < self.n_copies:
            raise IndexError(f"copy {copy} out of range for {self.n_copies} copies")
        base, cnt = self._row(k)
        at_base = np.where(cnt == 0, self.n_copies, cnt)
        idx = base + (copy >= at_base)
        if self.scheme is not None and idx.size and idx.max() >= self.scheme.n_levels:
            raise ContainerError("level index out of range for the grid")
        return idx

    def dequantize_copy(self, k: int, copy: int) -> np.ndarray:
        if self.scheme is None:
            raise ValueError("no level grid attached; pass scheme= to read_quantized")
        return self.scales * self.scheme.levels[self.copy_indices(k, copy)]

    def quantized_vector(self, k: int, copy: int) -> QuantizedVector:
        if self.scheme is None:
            raise ValueError("no level grid attached; pass scheme= to read_quantized")
        from .quantize import _take_draw_ids

        idx = self.copy_indices(k, copy).astype(np.uint16)
        return QuantizedVector(self.scheme, self.scales, idx, _take_draw_ids(1))

    def copy_matrix(self, copy: int) -> np.ndarray:
        """Dequantized full matrix for one stored copy."""
        return np.vstack([self.dequantize_copy(k, copy) for k in range(self.n_samples)])


def read_quantized(path, scheme: QuantScheme | None = None) -> ZipqFile:
    """Validate and open a container written by :func:`write_quantized`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size + 4:
        raise ContainerError("file too short to be a quantized container")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ContainerError("checksum mismatch: file is corrupt")
    magic, version, n_samples, n_features, bits, n_copies, scaling, reserved = _HEADER.unpack(
        body[: _HEADER.size]
    )
    if magic != _MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise ContainerError(f"unsupported version {version}")
    if reserved != 0:
        raise ContainerError("reserved header byte is set")
    if scaling not in _SCALING_NAME:
        raise ContainerError(f"unknown scaling code {scaling}")
    if not 1 <= bits <= 16:
        raise ContainerError(f"implausible bit width {bits}")
    if n_copies < 1 or n_copies & (n_copies - 1):
        raise ContainerError(f"n_copies {n_copies} is not a power of two")
    selbits = n_copies.bit_length() - 1
    expected = (
        _HEADER.size
        + 8 * n_features
        + n_samples * _row_nbytes(n_features, bits, selbits)
        + 8 * n_samples
    )
    if len(body) != expected:
        raise ContainerError(f"size mismatch: header implies {expected} bytes, found {len(body)}")
    pos = _HEADER.size
    scales = np.frombuffer(body, dtype="<f8", count=n_features, offset=pos).copy()
    if not np.all(np.isfinite(scales)) or np.any(scales <= 0):
        raise ContainerError("scales must be positive and finite")
    pos += 8 * n_features
    rows_nb = n_samples * _row_nbytes(n_features, bits, selbits)
    rows = body[pos : pos + rows_nb]
    pos += rows_nb
    labels = np.frombuffer(body, dtype="<f8", count=n_samples, offset=pos).copy()
    if not np.all(np.isfinite(labels)):
        raise ContainerError("labels must be finite")
    if scheme is not None and scheme.bits != bits:
        raise ContainerError(f"grid needs {scheme.bits}-bit indices, container stores {bits}")
    return ZipqFile(
        n_samples, n_features, bits, n_copies, _SCALING_NAME[scaling], scales, labels, rows, scheme
    )


def compression_ratio(n_features: int, bits: int, n_copies: int) -> float:
    """Stored payload bits per value vs. 32-bit floats (header excluded)."""
    selbits = n_copies.bit_length() - 1
    return 32.0 / (bits + selbits)
