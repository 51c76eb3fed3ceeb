"""Bit-packed storage for quantized integer codes.

Formats (trailing pad bits are zero):
  2-bit: four codes per byte, lowest bits first
  3-bit: eight codes per three bytes, little-endian bit order
  4-bit: two codes per byte, low nibble first
  8-bit: one code per byte

Serialized layout: one JSON header line (name, shape, bits, group_size,
n_groups) terminated by a newline, followed by raw little-endian sections
[codes][scales f32][zps u16]; all section lengths are derivable from the
header.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, PackError
from .quant import QuantConfig, n_groups as group_count


def packed_nbytes(n: int, bits: int) -> int:
    """Byte length of n packed codes."""
    if bits == 2:
        return -(-n // 4)
    if bits == 3:
        return -(-n // 8) * 3
    if bits == 4:
        return -(-n // 2)
    if bits == 8:
        return n
    raise PackError(f"unsupported bit width: {bits}")


def pack_bits(codes: np.ndarray, bits: int) -> bytes:
    """Pack a flat sequence of integer codes into bytes."""
    q = np.asarray(codes).reshape(-1).astype(np.int64)
    qmax = (1 << bits) - 1
    if q.size and (q.min() < 0 or q.max() > qmax):
        bad = q[(q < 0) | (q > qmax)][0]
        raise PackError(f"code {bad} out of range [0, {qmax}] for {bits}-bit packing")
    n = q.size
    if bits == 8:
        return q.astype(np.uint8).tobytes()
    if bits == 4:
        m = -(-n // 2) * 2
        buf = np.zeros(m, dtype=np.uint8)
        buf[:n] = q
        pairs = buf.reshape(-1, 2)
        return (pairs[:, 0] | (pairs[:, 1] << 4)).astype(np.uint8).tobytes()
    if bits == 2:
        m = -(-n // 4) * 4
        buf = np.zeros(m, dtype=np.uint8)
        buf[:n] = q
        quads = buf.reshape(-1, 4)
        out = quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4) | (quads[:, 3] << 6)
        return out.astype(np.uint8).tobytes()
    if bits == 3:
        m = -(-n // 8) * 8
        buf = np.zeros(m, dtype=np.uint32)
        buf[:n] = q
        octs = buf.reshape(-1, 8)
        words = np.zeros(octs.shape[0], dtype="<u4")
        for j in range(8):
            words |= octs[:, j].astype("<u4") << np.uint32(3 * j)
        return words.view(np.uint8).reshape(-1, 4)[:, :3].tobytes()
    raise PackError(f"unsupported bit width: {bits}")


def unpack_bits(buf: bytes, bits: int, n: int) -> np.ndarray:
    """Inverse of pack_bits; returns n int32 codes."""
    raw = np.frombuffer(buf, dtype=np.uint8)
    expected = packed_nbytes(n, bits)
    if raw.size != expected:
        raise FormatError(f"packed buffer is {raw.size} bytes, expected {expected}")
    if bits == 8:
        return raw[:n].astype(np.int32)
    if bits == 4:
        lo = raw & 0x0F
        hi = raw >> 4
        out = np.empty(raw.size * 2, dtype=np.int32)
        out[0::2] = lo
        out[1::2] = hi
        return out[:n]
    if bits == 2:
        out = np.empty(raw.size * 4, dtype=np.int32)
        for j in range(4):
            out[j::4] = (raw >> (2 * j)) & 0x3
        return out[:n]
    if bits == 3:
        triples = raw.reshape(-1, 3)
        words = np.zeros((triples.shape[0], 4), dtype=np.uint8)
        words[:, :3] = triples
        vals = words.view("<u4").reshape(-1)
        out = np.empty(triples.shape[0] * 8, dtype=np.int32)
        for j in range(8):
            out[j::8] = (vals >> np.uint32(3 * j)) & 0x7
        return out[:n]
    raise PackError(f"unsupported bit width: {bits}")


@dataclass
class PackedTensor:
    """Bit-packed codes plus the per-group scale/zero-point sidecar."""

    codes: bytes
    scales: np.ndarray  # f32, [n_groups]
    zps: np.ndarray     # u16, [n_groups]
    shape: tuple[int, int]
    config: QuantConfig
    name: str = ""

    @property
    def n_groups(self) -> int:
        return int(self.scales.size)

    def to_bytes(self) -> bytes:
        header = {
            "name": self.name,
            "shape": list(self.shape),
            "bits": self.config.bits,
            "group_size": self.config.group_size,
            "n_groups": self.n_groups,
        }
        head = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
        return (head + self.codes
                + self.scales.astype("<f4").tobytes()
                + self.zps.astype("<u2").tobytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PackedTensor":
        nl = blob.find(b"\n")
        if nl < 0:
            raise FormatError("packed tensor blob has no header line")
        try:
            header = json.loads(blob[:nl].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"packed tensor header is not valid JSON: {exc}") from exc
        try:
            shape = tuple(int(d) for d in header["shape"])
            bits = int(header["bits"])
            group_size = int(header["group_size"])
            groups = int(header["n_groups"])
            name = str(header.get("name", ""))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"packed tensor header missing fields: {exc}") from exc
        cfg = QuantConfig(bits, group_size)
        if len(shape) != 2:
            raise FormatError(f"packed tensor {name!r} must be 2-D, got shape {shape}")
        if groups != group_count(shape, cfg):
            raise FormatError(
                f"packed tensor {name!r}: header says {groups} groups, "
                f"geometry implies {group_count(shape, cfg)}"
            )
        n = shape[0] * shape[1]
        codes_len = packed_nbytes(n, bits)
        body = blob[nl + 1:]
        want = codes_len + 4 * groups + 2 * groups
        if len(body) != want:
            raise FormatError(
                f"packed tensor {name!r}: body is {len(body)} bytes, expected {want}"
            )
        codes = body[:codes_len]
        scales = np.frombuffer(body[codes_len:codes_len + 4 * groups], dtype="<f4").copy()
        zps = np.frombuffer(body[codes_len + 4 * groups:], dtype="<u2").copy()
        return cls(codes=codes, scales=scales, zps=zps, shape=shape, config=cfg, name=name)


def pack(codes: np.ndarray, cfg: QuantConfig, scales=None, zps=None, name: str = "") -> PackedTensor:
    """Pack a 2-D array of integer codes into a PackedTensor.

    scales/zps default to zeros of the right group count when the caller
    only cares about the codes (e.g. round-trip tests).
    """
    q = np.asarray(codes)
    if q.ndim != 2:
        raise PackError(f"pack expects 2-D codes, got shape {q.shape}")
    groups = group_count(q.shape, cfg)
    if scales is None:
        scales = np.zeros(groups, dtype=np.float32)
    if zps is None:
        zps = np.zeros(groups, dtype=np.uint16)
    scales = np.asarray(scales, dtype=np.float32).reshape(-1)
    zps = np.asarray(zps).reshape(-1)
    if scales.size != groups or zps.size != groups:
        raise PackError(
            f"sidecar sizes {scales.size}/{zps.size} do not match {groups} groups"
        )
    if zps.size and (zps.min() < 0 or zps.max() > cfg.qmax):
        raise PackError(f"zero point out of range [0, {cfg.qmax}]")
    return PackedTensor(
        codes=pack_bits(q, cfg.bits),
        scales=scales,
        zps=zps.astype(np.uint16),
        shape=(int(q.shape[0]), int(q.shape[1])),
        config=cfg,
        name=name,
    )


def unpack(p: PackedTensor) -> np.ndarray:
    """Recover the 2-D int32 code array from a PackedTensor."""
    n = p.shape[0] * p.shape[1]
    return unpack_bits(p.codes, p.config.bits, n).reshape(p.shape)
