"""Video clips: float32 arrays of shape (frames, height, width, channels)
with values in [0, 1], saved as a raw little-endian payload next to a JSON
sidecar describing the geometry and frame rate."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .fileio import atomic_write_bytes, canonical_json

SIDECAR_KEYS = ("frames", "height", "width", "channels", "fps")


@dataclass
class Clip:
    """One video clip. `meta` carries free-form provenance (seed, condition, ...)."""

    data: np.ndarray
    fps: float = 8.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 4:
            raise ContractError(f"clip data must be (frames, height, width, channels), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ContractError("clip data contains non-finite values")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ContractError(f"clip values must lie in [0, 1], got [{arr.min()}, {arr.max()}]")
        if not (isinstance(self.fps, (int, float)) and self.fps > 0):
            raise ContractError(f"fps must be a positive number, got {self.fps!r}")
        self.data = arr
        self.fps = float(self.fps)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple:
        return self.data.shape


def save_clip(clip: Clip, path) -> None:
    """Write `<path>` (raw float32 LE frames) and `<path>.json` (geometry sidecar)."""
    path = Path(path)
    f, h, w, c = clip.data.shape
    sidecar = {"frames": f, "height": h, "width": w, "channels": c,
               "fps": clip.fps, "meta": dict(clip.meta)}
    atomic_write_bytes(path, clip.data.astype("<f4").tobytes(order="C"))
    atomic_write_bytes(str(path) + ".json", canonical_json(sidecar) + b"\n")


def load_clip(path) -> Clip:
    """Inverse of save_clip; raises FormatError on any mismatch or damage."""
    path = Path(path)
    side_path = Path(str(path) + ".json")
    if not side_path.exists():
        raise FormatError(f"missing sidecar {side_path.name}")
    try:
        sidecar = json.loads(side_path.read_text("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"sidecar is not valid JSON: {exc}") from None
    if not isinstance(sidecar, dict):
        raise FormatError("sidecar must be a JSON object")
    for key in SIDECAR_KEYS:
        if key not in sidecar:
            raise FormatError(f"sidecar is missing key '{key}'")
    dims = [sidecar[k] for k in ("frames", "height", "width", "channels")]
    if not all(isinstance(d, int) and d > 0 for d in dims):
        raise FormatError(f"sidecar geometry must be positive integers, got {dims}")
    fps = sidecar["fps"]
    if not (isinstance(fps, (int, float)) and fps > 0):
        raise FormatError(f"sidecar fps must be positive, got {fps!r}")

    blob = path.read_bytes()
    expected = int(np.prod(dims, dtype=np.int64)) * 4
    if len(blob) != expected:
        raise FormatError(f"payload holds {len(blob)} bytes, sidecar promises {expected}",
                          offset=min(len(blob), expected))
    arr = np.frombuffer(blob, dtype="<f4").reshape(dims).astype(np.float32, copy=True)
    if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
        raise FormatError("payload values fall outside [0, 1]", offset=0)
    meta = sidecar.get("meta", {})
    return Clip(arr, fps=float(fps), meta=meta if isinstance(meta, dict) else {})
