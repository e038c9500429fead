"""Binary container shared by dataset and checkpoint files.

Layout: 4-byte magic, u32 little-endian header length, UTF-8 JSON header,
raw little-endian float64 payload, u32 little-endian CRC32 of the payload.
Corruption, truncation and version drift raise distinct errors.
"""
from __future__ import annotations

import json
import struct
import zlib

import numpy as np


class FileFormatError(ValueError):
    pass


class VersionMismatchError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


class ChecksumError(FileFormatError):
    pass


def write_container(path, magic: bytes, header: dict, payload: np.ndarray):
    if len(magic) != 4:
        raise FileFormatError(f"magic must be 4 bytes, got {magic!r}")
    flat = np.ascontiguousarray(payload, dtype="<f8").reshape(-1)
    raw = flat.tobytes()
    header = dict(header, payload_doubles=flat.size)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(raw)
        f.write(struct.pack("<I", zlib.crc32(raw) & 0xFFFFFFFF))


def read_container(path, magic: bytes, version: int) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8 or data[:4] != magic:
        raise FileFormatError(f"{path}: bad magic, expected {magic!r}")
    (header_len,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + header_len:
        raise TruncatedFileError(f"{path}: truncated header")
    try:
        header = json.loads(data[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FileFormatError(f"{path}: unreadable header ({e})") from e
    if header.get("version") != version:
        raise VersionMismatchError(
            f"{path}: version {header.get('version')}, expected {version}")
    n = int(header["payload_doubles"])
    start = 8 + header_len
    end = start + 8 * n
    if len(data) < end + 4:
        raise TruncatedFileError(f"{path}: truncated payload")
    raw = data[start:end]
    (stored_crc,) = struct.unpack("<I", data[end:end + 4])
    if zlib.crc32(raw) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    return header, np.frombuffer(raw, dtype="<f8").astype(np.float64)
