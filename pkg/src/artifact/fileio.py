"""Artifact emission: binary weight containers, P6 PPM images, CSV, JSON.

Every writer here is byte-deterministic for identical inputs: floats go
through repr (shortest round-trip form), JSON keys are sorted, CSV uses
CRLF line endings, and the weight container stores raw little-endian
float64 sections behind a sorted JSON header.
"""

import csv
import io
import json
import struct

import numpy as np

CONTAINER_MAGIC = b"ADJC"
CONTAINER_VERSION = 1


def write_container(path, sections, meta=None):
    """Write named float64 arrays to a flat binary container.

    Layout: magic, u32 version, u64 header length, UTF-8 JSON header
    (sorted keys; per-section name/shape/offset and caller metadata),
    then the concatenated little-endian float64 payloads.
    """
    names = sorted(sections)
    header = {"meta": meta or {}, "sections": []}
    offset = 0
    payloads = []
    for name in names:
        arr = np.ascontiguousarray(np.asarray(sections[name], dtype=np.float64))
        header["sections"].append(
            {"name": name, "shape": list(arr.shape), "offset": offset}
        )
        raw = arr.astype("<f8").tobytes()
        payloads.append(raw)
        offset += len(raw)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<IQ", CONTAINER_VERSION, len(head)))
        fh.write(head)
        for raw in payloads:
            fh.write(raw)


def read_container(path):
    """Returns (sections dict name -> float64 array, meta dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CONTAINER_MAGIC:
            raise ValueError(f"{path}: not a weight container (magic {magic!r})")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != CONTAINER_VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        header = json.loads(fh.read(hlen).decode())
        body = fh.read()
    sections = {}
    for sec in header["sections"]:
        shape = tuple(sec["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = sec["offset"]
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=start)
        sections[sec["name"]] = arr.reshape(shape).astype(np.float64)
    return sections, header.get("meta", {})


def write_ppm(path, image):
    """Write a (3, H, W) float image as binary P6 PPM after symmetric scaling.

    The map is v -> round(255 * (v + a) / (2a)) with a = max|v| (a = 1 for an
    all-zero image), so zero always lands on mid-gray. Returns the scale a so
    raw values stay recoverable; callers log it in a sidecar.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError("image must be shaped (3, H, W)")
    a = float(np.abs(img).max())
    if a == 0.0:
        a = 1.0
    scaled = np.clip(np.rint(255.0 * (img + a) / (2.0 * a)), 0, 255).astype(np.uint8)
    h, w = img.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(scaled.transpose(1, 2, 0).tobytes())
    return a


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a P6 PPM")
    w, h = (int(t) for t in parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3)
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).copy()


def format_float(x):
    # repr round-trips float64 exactly and is stable across runs
    return repr(float(x))


def write_csv(path, header, rows):
    """RFC-4180 CSV: CRLF terminators, floats via repr."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [format_float(v) if isinstance(v, (float, np.floating)) else v for v in row]
            )


def dump_json(obj, path=None):
    """Deterministic JSON: sorted keys, no trailing whitespace drift."""
    def convert(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        raise TypeError(f"not serializable: {type(o)}")

    text = json.dumps(obj, sort_keys=True, indent=2, default=convert) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(
            [format_float(v) if isinstance(v, (float, np.floating)) else v for v in row]
        )
    return buf.getvalue()
