"""Binary artifact formats.

Checkpoint ("JAMF") and sequence ("JSEQ") files share conventions:
little-endian integers, length-prefixed UTF-8 names, float32
little-endian payloads, and a trailing CRC32 over every preceding
byte.  Tensor tables are written in sorted-name order, so
save -> load -> save is byte-identical.
"""

import io
import struct
import zlib

import numpy as np

CKPT_MAGIC = b"JAMF"
SEQ_MAGIC = b"JSEQ"
VERSION = 1


class FormatError(Exception):
    """File does not conform to the format (magic, structure, or CRC)."""


def _w_u8(buf, v):
    buf.write(struct.pack("<B", v))


def _w_u16(buf, v):
    buf.write(struct.pack("<H", v))


def _w_u32(buf, v):
    buf.write(struct.pack("<I", v))


def _w_name(buf, name):
    b = name.encode("utf-8")
    if len(b) > 0xFFFF:
        raise FormatError(f"name too long: {name[:40]}...")
    _w_u16(buf, len(b))
    buf.write(b)


def _w_tensor(buf, name, arr):
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim > 255:
        raise FormatError(f"tensor '{name}' rank {arr.ndim} exceeds format limit")
    _w_name(buf, name)
    _w_u8(buf, arr.ndim)
    for d in arr.shape:
        _w_u32(buf, d)
    buf.write(arr.tobytes(order="C"))


class _Reader:
    def __init__(self, data, what):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated at byte {self.pos}")
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def u8(self):
        return struct.unpack("<B", self.take(1))[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def name(self):
        return self.take(self.u16()).decode("utf-8")

    def tensor(self):
        name = self.name()
        rank = self.u8()
        shape = tuple(self.u32() for _ in range(rank))
        count = 1
        for d in shape:
            count *= d
        arr = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape)
        return name, arr.astype(np.float32)


def _read_body(path, magic):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8 or data[:4] != magic:
        raise FormatError(f"{path}: not a {magic.decode()} file")
    body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) != crc:
        raise FormatError(f"{path}: CRC mismatch")
    r = _Reader(body, str(path))
    r.take(4)  # magic
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    return r


def _finish(path, buf):
    body = buf.getvalue()
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body)))


def write_checkpoint(path, config_text, tensors, optimizer=None):
    """optimizer, if given, is (step, m_dict, v_dict) of Adam moments."""
    names = sorted(tensors)
    if len(set(names)) != len(names):
        raise FormatError("duplicate tensor names")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    _w_u32(buf, VERSION)
    cb = config_text.encode("utf-8")
    _w_u32(buf, len(cb))
    buf.write(cb)
    _w_u32(buf, len(names))
    for name in names:
        _w_tensor(buf, name, tensors[name])
    if optimizer is None:
        _w_u8(buf, 0)
    else:
        step, m, v = optimizer
        _w_u8(buf, 1)
        _w_u32(buf, step)
        moments = {f"m/{k}": m[k] for k in m}
        moments.update({f"v/{k}": v[k] for k in v})
        _w_u32(buf, len(moments))
        for name in sorted(moments):
            _w_tensor(buf, name, moments[name])
    _finish(path, buf)


def read_checkpoint(path):
    """Returns (config_text, tensors, optimizer) mirroring write_checkpoint."""
    r = _read_body(path, CKPT_MAGIC)
    config_text = r.take(r.u32()).decode("utf-8")
    tensors = {}
    for _ in range(r.u32()):
        name, arr = r.tensor()
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor '{name}'")
        tensors[name] = arr
    optimizer = None
    if r.u8():
        step = r.u32()
        m, v = {}, {}
        for _ in range(r.u32()):
            name, arr = r.tensor()
            if name.startswith("m/"):
                m[name[2:]] = arr
            elif name.startswith("v/"):
                v[name[2:]] = arr
            else:
                raise FormatError(f"{path}: stray optimizer tensor '{name}'")
        optimizer = (step, m, v)
    if r.pos != len(r.data):
        raise FormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return config_text, tensors, optimizer


def write_sequences(path, streams):
    """streams: name -> (frames, channels) float array; insertion order
    is not preserved — streams are written sorted by name."""
    buf = io.BytesIO()
    buf.write(SEQ_MAGIC)
    _w_u32(buf, VERSION)
    _w_u32(buf, len(streams))
    for name in sorted(streams):
        arr = np.asarray(streams[name], dtype="<f4")
        if arr.ndim != 2:
            raise FormatError(f"stream '{name}' must be 2-d, got shape {arr.shape}")
        _w_name(buf, name)
        _w_u32(buf, arr.shape[0])
        _w_u32(buf, arr.shape[1])
        buf.write(arr.tobytes(order="C"))
    _finish(path, buf)


def read_sequences(path):
    r = _read_body(path, SEQ_MAGIC)
    out = {}
    for _ in range(r.u32()):
        name = r.name()
        frames = r.u32()
        channels = r.u32()
        arr = np.frombuffer(r.take(4 * frames * channels), dtype="<f4")
        if name in out:
            raise FormatError(f"{path}: duplicate stream '{name}'")
        out[name] = arr.reshape(frames, channels).astype(np.float32)
    if r.pos != len(r.data):
        raise FormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return out
