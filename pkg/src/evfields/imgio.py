"""PPM (P6, 8-bit, gamma 2.2 for display) and PFM (32-bit float, linear) I/O."""

from __future__ import annotations

import numpy as np

GAMMA = 2.2


def save_ppm(path, image: np.ndarray) -> None:
    """Write linear [0,1] HxWx3 as gamma-encoded 8-bit P6."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM expects an HxWx3 image")
    enc = np.clip(img, 0.0, 1.0) ** (1.0 / GAMMA)
    data = np.round(enc * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(data.tobytes())


def load_ppm(path) -> np.ndarray:
    """Read P6 back to linear [0,1] float64."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise ValueError(f"{path}: not a P6 PPM")
        line = f.readline()
        while line.startswith(b"#"):
            line = f.readline()
        w, h = (int(v) for v in line.split())
        maxval = int(f.readline())
        if maxval != 255:
            raise ValueError(f"{path}: only 8-bit PPM supported")
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    img = data.reshape(h, w, 3).astype(np.float64) / 255.0
    return img ** GAMMA


def save_pfm(path, image: np.ndarray) -> None:
    """Write HxW (Pf) or HxWx3 (PF) float32, little-endian, bottom-up rows."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        header = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError("PFM expects HxW or HxWx3")
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{img.shape[1]} {img.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(img[::-1]).tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        count = w * h * (3 if magic == b"PF" else 1)
        data = np.frombuffer(f.read(count * 4), dtype="<f4" if scale < 0 else ">f4")
        if data.size != count:
            raise ValueError(f"{path}: truncated PFM payload")
    shape = (h, w, 3) if magic == b"PF" else (h, w)
    return data.reshape(shape)[::-1].astype(np.float64)
