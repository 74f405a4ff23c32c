"""Bounds-checked little-endian reader/writer used by the AMAT and TRMZ formats."""

import struct

import numpy as np

from .errors import FormatError

MAX_DIM = 1 << 28


class Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, size, what):
        if size < 0 or self.pos + size > len(self.data):
            raise FormatError(f"truncated file while reading {what}", offset=self.pos)
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def u8(self, what):
        return self.take(1, what)[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def dim(self, what):
        start = self.pos
        value = self.u32(what)
        if value > MAX_DIM:
            raise FormatError(f"{what} = {value} exceeds the supported maximum", offset=start)
        return value

    def text(self, what):
        start = self.pos
        size = self.u32(f"{what} length")
        raw = self.take(size, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{what} is not valid UTF-8", offset=start) from exc

    def f32(self, count, what):
        if count * 4 > len(self.data) - self.pos:
            raise FormatError(f"truncated file while reading {what}", offset=self.pos)
        raw = self.take(count * 4, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float64)

    def expect_end(self):
        if self.pos != len(self.data):
            raise FormatError("unexpected trailing bytes", offset=self.pos)


def pack_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def pack_f32(values) -> bytes:
    return np.ascontiguousarray(values, dtype="<f4").tobytes()
