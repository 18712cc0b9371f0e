"""On-disk formats: binary tensors, PNG images, label maps, key=value manifests, checkpoints.

Binary tensor layout (all little-endian)::

    offset 0   4 bytes   magic b"WSID"
    offset 4   u32       version (1)
    offset 8   u32       ndim
    offset 12  u32[ndim] dims
    ...        f32[prod(dims)] row-major payload
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"WSID"
VERSION = 1


class TensorFormatError(ValueError):
    pass


def encode_tensor(arr) -> bytes:
    a = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("encode_tensor: refusing to store non-finite values")
    head = MAGIC + struct.pack("<II", VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise TensorFormatError(f"bad magic at offset 0: expected {MAGIC!r}, found {bytes(buf[:4])!r}")
    if len(buf) < 12:
        raise TensorFormatError(f"truncated header at offset {len(buf)}: need 12 bytes")
    version, ndim = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version} at offset 4 (expected {VERSION})")
    end = 12 + 4 * ndim
    if len(buf) < end:
        raise TensorFormatError(f"truncated dims at offset {len(buf)}: need {end} bytes for ndim={ndim}")
    dims = struct.unpack_from(f"<{ndim}I", buf, 12)
    n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(buf) != end + 4 * n:
        raise TensorFormatError(f"payload size mismatch at offset {end}: expected {4 * n} bytes for dims "
                                f"{list(dims)}, found {len(buf) - end}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=end).astype(np.float64).reshape(dims)


def write_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    try:
        return decode_tensor(Path(path).read_bytes())
    except TensorFormatError as e:
        raise TensorFormatError(f"{path}: {e}") from None


# -- images -----------------------------------------------------------------------
def save_rgb(path, image: np.ndarray) -> None:
    """[3,H,W] or [H,W,3] float image in [0,1] -> 8-bit RGB PNG."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 3 and a.shape[-1] != 3:
        a = np.moveaxis(a, 0, -1)
    Image.fromarray(np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8), "RGB").save(path)


def load_rgb(path) -> np.ndarray:
    """PNG -> [3,H,W] float in [0,1]."""
    with Image.open(path) as im:
        a = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.moveaxis(a, -1, 0).copy()


def save_gray(path, plane: np.ndarray) -> None:
    a = np.clip(np.round(np.asarray(plane, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(a, "L").save(path)


def save_labels(path, labels: np.ndarray) -> None:
    """Instance label map -> 16-bit grayscale PNG (0 background, k instance k)."""
    lab = np.asarray(labels)
    if lab.ndim != 2:
        raise ValueError(f"label map must be 2-D, got {lab.shape}")
    if lab.min(initial=0) < 0 or lab.max(initial=0) > 65535:
        raise ValueError("labels must lie in [0, 65535]")
    Image.fromarray(lab.astype(np.uint16)).save(path)


def load_labels(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.int64).copy()


def overlay(image: np.ndarray, labels: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Tint each instance with a fixed palette color; returns [H,W,3] in [0,1]."""
    a = np.asarray(image, dtype=np.float64)
    if a.shape[0] == 3:
        a = np.moveaxis(a, 0, -1)
    out = a.copy()
    rng = np.random.default_rng(12345)
    palette = rng.uniform(0.2, 1.0, (int(labels.max(initial=0)) + 1, 3))
    for k in range(1, int(labels.max(initial=0)) + 1):
        m = labels == k
        out[m] = (1 - alpha) * out[m] + alpha * palette[k]
    return out


# -- manifests ---------------------------------------------------------------------
def write_manifest(path, entries: dict) -> None:
    lines = []
    for k, v in entries.items():
        if "=" in str(k) or "\n" in str(k) + str(v):
            raise ValueError(f"manifest key/value may not contain '=' or newlines: {k!r}")
        lines.append(f"{k}={v}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# -- checkpoints -------------------------------------------------------------------
def save_checkpoint(path, params: dict[str, np.ndarray], config: dict) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    for name in sorted(params):
        write_tensor(d / f"{name}.wsid", params[name])
    write_manifest(d / "config.txt", config)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    d = Path(path)
    if not (d / "config.txt").is_file():
        raise FileNotFoundError(f"{d}: not a checkpoint directory (config.txt missing)")
    params = {f[:-5]: read_tensor(d / f) for f in sorted(os.listdir(d)) if f.endswith(".wsid")}
    return params, read_manifest(d / "config.txt")
