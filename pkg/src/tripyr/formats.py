"""Plain file formats: key/value text, binary PPM/PGM, headed raw float arrays."""
from __future__ import annotations

import os

import numpy as np


def parse_kv(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def format_kv(items) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items)


def fmt_float(x: float) -> str:
    # repr round-trips float64 exactly
    return repr(float(x))


def fmt_floats(xs) -> str:
    return ",".join(fmt_float(x) for x in np.asarray(xs, dtype=np.float64).ravel())


def parse_floats(s: str) -> np.ndarray:
    s = s.strip()
    if not s:
        return np.zeros(0)
    return np.array([float(x) for x in s.split(",")], dtype=np.float64)


def parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def to_bytes8(img) -> np.ndarray:
    """Clamp to [0, 1] and scale to 8 bit with round-half-up."""
    a = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(a * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, rgb) -> None:
    a = to_bytes8(rgb)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"PPM needs (H, W, 3), got {a.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii"))
        fh.write(a.tobytes())


def write_pgm(path, gray) -> None:
    a = to_bytes8(gray)
    if a.ndim != 2:
        raise ValueError(f"PGM needs (H, W), got {a.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii"))
        fh.write(a.tobytes())


def _read_netpbm(path, magic: bytes):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} header, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images are supported")
    return w, h, np.frombuffer(data[pos + 1:], dtype=np.uint8)


def read_ppm(path) -> np.ndarray:
    """``(H, W, 3)`` float64 in [0, 1]."""
    w, h, raw = _read_netpbm(path, b"P6")
    return raw[:w * h * 3].reshape(h, w, 3) / 255.0


def read_pgm(path) -> np.ndarray:
    w, h, raw = _read_netpbm(path, b"P5")
    return raw[:w * h].reshape(h, w) / 255.0


def write_raw(path, array) -> None:
    """``(C, H, W)`` or ``(H, W)`` float array as a text header line + little-endian float32."""
    a = np.asarray(array, dtype="<f4")
    if a.ndim == 2:
        a = a[None]
    c, h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"f32le dims={h},{w} channels={c}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(a).tobytes())


def read_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        meta = dict(p.split("=", 1) for p in header[1:])
        h, w = (int(x) for x in meta["dims"].split(","))
        c = int(meta["channels"])
        return np.frombuffer(fh.read(), dtype="<f4").reshape(c, h, w)


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return str(path)
