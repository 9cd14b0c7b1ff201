"""Disk formats: multi-channel PFM range images and binary PLY clouds.

A range image is stored as a grayscale PFM whose height is H*C (channel
planes stacked top to bottom) plus a JSON sidecar ``<name>.pfm.json``
naming the channels and the true H, W. PLY files are binary little-endian
with float32 x, y, z, intensity properties.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .lidar import CHANNELS, RangeImage


def write_pfm(path, planes: np.ndarray) -> None:
    """Write stacked (C, H, W) float planes as a grayscale PFM."""
    planes = np.asarray(planes, dtype=np.float32)
    if planes.ndim == 2:
        planes = planes[None]
    c, h, w = planes.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {c * h}\n".encode())
        f.write(b"-1.0\n")  # negative scale: little-endian
        # PFM rows run bottom-to-top
        f.write(np.ascontiguousarray(planes.reshape(c * h, w)[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        dims = f.readline().decode()
        m = re.match(r"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise ValueError(f"{path}: malformed PFM dimensions {dims!r}")
        w, h = int(m.group(1)), int(m.group(2))
        scale = float(f.readline().decode().strip())
        count = w * h * (3 if header == b"PF" else 1)
        data = np.frombuffer(f.read(count * 4), dtype="<f4" if scale < 0 else ">f4")
    if data.size != count:
        raise ValueError(f"{path}: truncated PFM payload")
    if header == b"PF":
        return data.reshape(h, w, 3)[::-1].copy()
    return data.reshape(h, w)[::-1].copy()


def save_range_image(path, img: RangeImage) -> None:
    path = Path(path)
    write_pfm(path, img.stack().astype(np.float32))
    sidecar = {"channels": list(CHANNELS), "height": img.shape[0], "width": img.shape[1]}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1))


def load_range_image(path) -> RangeImage:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    if sidecar["channels"] != list(CHANNELS):
        raise ValueError(f"{path}: unexpected channel set {sidecar['channels']}")
    h, w = int(sidecar["height"]), int(sidecar["width"])
    flat = read_pfm(path)
    planes = flat.reshape(len(CHANNELS), h, w).astype(np.float64)
    return RangeImage.from_stack(planes)


def write_ply(path, points, intensities=None) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if intensities is None:
        intensities = np.zeros(len(points))
    intensities = np.asarray(intensities, dtype=np.float64).reshape(-1)
    if len(intensities) != len(points):
        raise ValueError("point/intensity count mismatch")
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(points)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property float intensity\n"
        "end_header\n"
    )
    body = np.empty((len(points), 4), dtype="<f4")
    body[:, :3] = points
    body[:, 3] = intensities
    with open(path, "wb") as f:
        f.write(header.encode())
        f.write(body.tobytes())


def read_ply(path):
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        count = None
        props = []
        fmt = None
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: unterminated PLY header")
            line = line.strip()
            if line.startswith(b"format"):
                fmt = line.split()[1]
            elif line.startswith(b"element vertex"):
                count = int(line.split()[-1])
            elif line.startswith(b"property"):
                props.append(line.split()[-1].decode())
            elif line == b"end_header":
                break
        if fmt != b"binary_little_endian":
            raise ValueError(f"{path}: unsupported PLY format {fmt!r}")
        if count is None:
            raise ValueError(f"{path}: missing vertex element")
        data = np.frombuffer(f.read(count * 4 * len(props)), dtype="<f4")
    if data.size != count * len(props):
        raise ValueError(f"{path}: truncated PLY payload")
    table = data.reshape(count, len(props)).astype(np.float64)
    cols = {name: table[:, i] for i, name in enumerate(props)}
    points = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    inten = cols.get("intensity", np.zeros(count))
    return points, inten
