"""Binary and text formats: ``.svxf`` features, prediction lines, checkpoints.

All binary integers and floats are little-endian regardless of host.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

FEATURE_MAGIC = b"SVXF"
CHECKPOINT_MAGIC = b"SVXC"
VERSION = 1


class FormatError(ValueError):
    pass


def encode_features(z: np.ndarray) -> bytes:
    z = np.asarray(z)
    if z.ndim != 2:
        raise ValueError("feature sequences are (T, d) matrices")
    t, d = z.shape
    return FEATURE_MAGIC + struct.pack("<III", VERSION, t, d) + z.astype("<f4").tobytes(order="C")


def decode_features(buf: bytes) -> np.ndarray:
    if len(buf) < 16:
        raise FormatError(f"truncated header at offset 0: expected 16 bytes, got {len(buf)}")
    if buf[:4] != FEATURE_MAGIC:
        raise FormatError(f"bad magic at offset 0: {buf[:4]!r}")
    version, t, d = struct.unpack_from("<III", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    expected = 16 + 4 * t * d
    if len(buf) != expected:
        raise FormatError(f"length mismatch at offset 16: expected {expected} bytes, got {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", offset=16).reshape(t, d).astype(np.float32)


def write_features(path: str | Path, z: np.ndarray) -> None:
    Path(path).write_bytes(encode_features(z))


def read_features(path: str | Path) -> np.ndarray:
    return decode_features(Path(path).read_bytes())


@dataclass(frozen=True)
class PredictionRecord:
    video_id: str
    t_st: float
    t_ed: float
    fg_score: float
    error_prob: float
    cls: str

    def to_line(self) -> str:
        return (
            f"video_id:{self.video_id} t_st:{self.t_st!r} t_ed:{self.t_ed!r} "
            f"fg_score:{self.fg_score!r} error_prob:{self.error_prob!r} class:{self.cls}"
        )

    @classmethod
    def from_line(cls, line: str, lineno: int = 0) -> "PredictionRecord":
        fields = {}
        for token in line.split():
            if ":" not in token:
                raise FormatError(f"line {lineno}: malformed field {token!r}")
            k, v = token.split(":", 1)
            fields[k] = v
        try:
            return cls(
                fields["video_id"],
                float(fields["t_st"]),
                float(fields["t_ed"]),
                float(fields["fg_score"]),
                float(fields["error_prob"]),
                fields["class"],
            )
        except KeyError as err:
            raise FormatError(f"line {lineno}: missing field {err.args[0]}") from err


def write_predictions(path: str | Path, records: list[PredictionRecord]) -> None:
    text = "".join(r.to_line() + "\n" for r in records)
    Path(path).write_bytes(text.encode("utf-8"))


def read_predictions(path: str | Path) -> list[PredictionRecord]:
    text = Path(path).read_bytes().decode("utf-8")
    return [PredictionRecord.from_line(line, i + 1) for i, line in enumerate(text.splitlines()) if line.strip()]


_DTYPES = {torch.float64: (0, "<f8"), torch.float32: (1, "<f4"), torch.int64: (2, "<i8"), torch.uint8: (3, "u1")}
_CODES = {code: (dt, np_dt) for dt, (code, np_dt) in _DTYPES.items()}


def encode_checkpoint(tensors: dict[str, torch.Tensor], config_hash: str, config_text: str = "") -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack("<I", VERSION)]
    for blob in (config_hash.encode("ascii"), config_text.encode("utf-8")):
        out.append(struct.pack("<I", len(blob)))
        out.append(blob)
    out.append(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise ValueError(f"unsupported tensor dtype {t.dtype} for {name}")
        code, np_dt = _DTYPES[t.dtype]
        raw = t.numpy().astype(np_dt).tobytes(order="C")
        name_b = name.encode("utf-8")
        out.append(struct.pack("<I", len(name_b)))
        out.append(name_b)
        out.append(struct.pack("<BI", code, t.dim()))
        out.append(struct.pack(f"<{t.dim()}I", *t.shape))
        out.append(struct.pack("<Q", len(raw)))
        out.append(raw)
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated {what} at offset {self.pos}: expected {n} bytes, got {len(self.buf) - self.pos}"
            )
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf: bytes) -> tuple[dict[str, torch.Tensor], str, str]:
    """Return (named tensors, config hash, config text)."""
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic at offset 0: {magic!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    (n,) = r.unpack("<I", "hash length")
    chash = r.take(n, "config hash").decode("ascii")
    (n,) = r.unpack("<I", "config length")
    ctext = r.take(n, "config text").decode("utf-8")
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<I", "name length")
        name = r.take(n, "tensor name").decode("utf-8")
        code, ndim = r.unpack("<BI", "tensor header")
        if code not in _CODES:
            raise FormatError(f"unknown dtype code {code} at offset {r.pos - 5}")
        shape = r.unpack(f"<{ndim}I", "tensor shape") if ndim else ()
        (nbytes,) = r.unpack("<Q", "tensor size")
        dt, np_dt = _CODES[code]
        expected = int(np.prod(shape, dtype=np.int64)) * np.dtype(np_dt).itemsize
        if nbytes != expected:
            raise FormatError(f"tensor {name}: expected {expected} bytes, header says {nbytes}")
        raw = r.take(nbytes, f"tensor {name}")
        arr = np.frombuffer(raw, dtype=np_dt).reshape(shape).copy()
        tensors[name] = torch.from_numpy(arr.astype(np.dtype(np_dt).newbyteorder("="))).to(dt)
    if r.pos != len(buf):
        raise FormatError(f"trailing bytes at offset {r.pos}")
    return tensors, chash, ctext


def write_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], config_hash: str, config_text: str = "") -> None:
    Path(path).write_bytes(encode_checkpoint(tensors, config_hash, config_text))


def read_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], str, str]:
    return decode_checkpoint(Path(path).read_bytes())
