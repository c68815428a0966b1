"""File formats: PNG (8-bit gray/RGB read, 8/16-bit gray write), PFM, calib.

Conventions:
  * images: 8-bit grayscale PNG, intensity = raw / 255
  * depth maps: 16-bit grayscale PNG, meters = raw / 256, raw 0 = invalid
    (lossless round trips below 256 m)
  * dense float maps: standard PFM, little-endian, bottom-up rows
  * calibration: text file with lines `f_px = <float>` / `baseline_m = <float>`

The PNG codec is deliberately minimal but reads all five scanline filters,
so externally produced files load too. Written files always use filter 0
and a fixed zlib level, keeping outputs byte-reproducible.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
DEPTH_SCALE = 256.0
DEPTH_MAX_M = 65535 / DEPTH_SCALE


class FileFormatError(ValueError):
    pass


def _chunk(tag, payload):
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload)))


def write_png_gray(path, arr, bitdepth):
    """Write a 2-D uint array as a grayscale PNG (bitdepth 8 or 16)."""
    if bitdepth not in (8, 16):
        raise FileFormatError(f"unsupported bit depth {bitdepth}")
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise FileFormatError("grayscale PNG needs a 2-D array")
    h, w = arr.shape
    data = arr.astype(">u1" if bitdepth == 8 else ">u2")
    raw = b"".join(b"\x00" + row.tobytes() for row in data)
    ihdr = struct.pack(">IIBBBBB", w, h, bitdepth, 0, 0, 0, 0)
    with open(path, "wb") as fp:
        fp.write(PNG_SIGNATURE)
        fp.write(_chunk(b"IHDR", ihdr))
        fp.write(_chunk(b"IDAT", zlib.compress(raw, 6)))
        fp.write(_chunk(b"IEND", b""))


def _paeth(a, b, c):
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    if pb <= pc:
        return b
    return c


def _unfilter(raw, h, w, channels, bytedepth):
    bpp = channels * bytedepth
    stride = w * bpp
    out = np.empty((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    pos = 0
    for y in range(h):
        ft = raw[pos]
        cur = np.frombuffer(raw, dtype=np.uint8, count=stride,
                            offset=pos + 1).copy()
        pos += 1 + stride
        if ft == 0:
            pass
        elif ft == 2:  # Up
            cur += prev
        elif ft == 1:  # Sub
            for i in range(bpp, stride):
                cur[i] = (int(cur[i]) + int(cur[i - bpp])) & 0xFF
        elif ft == 3:  # Average
            for i in range(stride):
                left = cur[i - bpp] if i >= bpp else 0
                cur[i] = (cur[i] + ((int(left) + int(prev[i])) >> 1)) & 0xFF
        elif ft == 4:  # Paeth
            for i in range(stride):
                left = int(cur[i - bpp]) if i >= bpp else 0
                ul = int(prev[i - bpp]) if i >= bpp else 0
                cur[i] = (cur[i] + _paeth(left, int(prev[i]), ul)) & 0xFF
        else:
            raise FileFormatError(f"unknown PNG filter type {ft}")
        out[y] = cur
        prev = out[y]
    return out


def read_png(path):
    """Read a PNG; returns (array h x w [x 3], bitdepth). Gray or RGB only."""
    try:
        with open(path, "rb") as fp:
            blob = fp.read()
    except OSError as exc:
        raise FileFormatError(f"cannot read {path}: {exc}") from exc
    if blob[:8] != PNG_SIGNATURE:
        raise FileFormatError(f"{path}: not a PNG file")
    pos = 8
    ihdr = None
    idat = b""
    while pos < len(blob):
        (length,) = struct.unpack(">I", blob[pos:pos + 4])
        tag = blob[pos + 4:pos + 8]
        payload = blob[pos + 8:pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", payload)
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
    if ihdr is None:
        raise FileFormatError(f"{path}: missing IHDR")
    w, h, bitdepth, colortype, _comp, _filt, interlace = ihdr
    if interlace:
        raise FileFormatError(f"{path}: interlaced PNG not supported")
    if bitdepth not in (8, 16) or colortype not in (0, 2):
        raise FileFormatError(
            f"{path}: unsupported PNG (bitdepth={bitdepth}, colortype={colortype})")
    channels = 1 if colortype == 0 else 3
    raw = zlib.decompress(idat)
    rows = _unfilter(raw, h, w, channels, bitdepth // 8)
    dtype = ">u1" if bitdepth == 8 else ">u2"
    arr = rows.reshape(h, -1).view(dtype).astype(np.uint16 if bitdepth == 16
                                                 else np.uint8)
    arr = arr.reshape(h, w, channels)
    if channels == 1:
        arr = arr[:, :, 0]
    return arr, bitdepth


def write_image(path, intensity):
    """Store a [0,1] intensity plane as 8-bit grayscale."""
    raw = np.clip(np.round(np.asarray(intensity) * 255.0), 0, 255)
    write_png_gray(path, raw.astype(np.uint16), 8)


def read_image(path):
    """Load 8-bit grayscale or RGB as a [0,1] luma plane."""
    arr, bitdepth = read_png(path)
    scale = 255.0 if bitdepth == 8 else 65535.0
    if arr.ndim == 3:
        luma = 0.299 * arr[:, :, 0] + 0.587 * arr[:, :, 1] + 0.114 * arr[:, :, 2]
    else:
        luma = arr.astype(np.float64)
    return luma / scale


def write_depth(path, depth_m, valid=None):
    """Store metric depth as 16-bit PNG (raw = round(256 * depth), 0 invalid)."""
    depth_m = np.asarray(depth_m, dtype=np.float64)
    raw = np.clip(np.round(depth_m * DEPTH_SCALE), 1, 65535).astype(np.uint16)
    if valid is not None:
        raw = np.where(np.asarray(valid, bool), raw, 0).astype(np.uint16)
    write_png_gray(path, raw, 16)


def read_depth(path):
    """Load a 16-bit depth PNG; returns (depth_m, valid_mask)."""
    arr, bitdepth = read_png(path)
    if bitdepth != 16 or arr.ndim != 2:
        raise FileFormatError(f"{path}: depth maps must be 16-bit grayscale")
    valid = arr > 0
    return arr.astype(np.float64) / DEPTH_SCALE, valid


# -- PFM ---------------------------------------------------------------------

def write_pfm(path, plane):
    """Single-channel little-endian PFM, rows bottom-up per the standard."""
    plane = np.asarray(plane, dtype=np.float32)
    if plane.ndim != 2:
        raise FileFormatError("PFM writer expects a 2-D array")
    h, w = plane.shape
    with open(path, "wb") as fp:
        fp.write(b"Pf\n")
        fp.write(f"{w} {h}\n".encode())
        fp.write(b"-1.0\n")
        fp.write(plane[::-1].astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as fp:
        header = fp.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise FileFormatError(f"{path}: not a PFM file")
        channels = 1 if header == b"Pf" else 3
        dims = fp.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fp.readline())
        endian = "<" if scale < 0 else ">"
        count = w * h * channels
        data = np.frombuffer(fp.read(4 * count), dtype=f"{endian}f4", count=count)
    plane = data.reshape(h, w, channels) if channels == 3 else data.reshape(h, w)
    return np.ascontiguousarray(plane[::-1]).astype(np.float64)


# -- calibration -------------------------------------------------------------

def write_calib(path, f_px, baseline_m):
    with open(path, "w") as fp:
        fp.write(f"f_px = {f_px!r}\n")
        fp.write(f"baseline_m = {baseline_m!r}\n")


def read_calib(path):
    """Parse `f_px = ...` / `baseline_m = ...`; returns (f_px, baseline_m)."""
    values = {}
    try:
        with open(path) as fp:
            for line in fp:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, _, val = line.partition("=")
                values[key.strip()] = float(val)
    except OSError as exc:
        raise FileFormatError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise FileFormatError(f"{path}: bad calibration line ({exc})") from exc
    for key in ("f_px", "baseline_m"):
        if key not in values:
            raise FileFormatError(f"{path}: missing calibration key {key}")
        if not values[key] > 0:
            raise FileFormatError(f"{path}: {key} must be positive")
    return values["f_px"], values["baseline_m"]
