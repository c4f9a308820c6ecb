"""Weight-map and contour export as binary portable graymaps (P5)."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import EvicoError
from .metrics import boundary
from .netmodel import predict


def to_gray(w):
    """Linear map of [0, 1] onto 0..255, rounded to nearest."""
    return np.rint(np.clip(np.asarray(w, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, gray):
    path = Path(path)
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    try:
        path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes())
    except OSError as exc:
        raise EvicoError(f"cannot write {path}: {exc.strerror}") from exc
    return path


def read_pgm(path):
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise EvicoError(f"{path}: not a binary graymap")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise EvicoError(f"{path}: only 8-bit graymaps are supported")
    pixels = data[len(data) - w * h:]
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()


def export_uncertainty_maps(params, samples, out_dir, activation="softplus"):
    """Per sample: confidence map, evidential pseudo-label contour, ground-truth contour.

    Contours are foreground boundaries drawn at 255 on a black background.
    Returns the list of written paths.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise EvicoError(f"cannot create {out}: {exc.strerror}") from exc
    written = []
    for s in samples:
        labels, w = predict(params, s.image[None], mode="evidential", activation=activation)
        written.append(write_pgm(out / f"sample_{s.id:05d}_weight.pgm", to_gray(w[0])))
        pseudo = boundary(labels[0] > 0).astype(np.uint8) * 255
        written.append(write_pgm(out / f"sample_{s.id:05d}_pseudo.pgm", pseudo))
        if s.mask is not None:
            gt = boundary(s.mask > 0).astype(np.uint8) * 255
            written.append(write_pgm(out / f"sample_{s.id:05d}_gt.pgm", gt))
    return written
