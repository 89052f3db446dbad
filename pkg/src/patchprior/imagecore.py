"""Images, patch extraction and its adjoint, empirical patch measures, file I/O.

Images are 2D ``float64`` numpy arrays of shape ``(height, width)`` with
nominal range [0, 1].  Patch vectors are flattened column-major, so entry
``c * p + r`` of a vector holds the pixel at row ``r``, column ``c`` of the
patch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError, InvalidArgumentError


def as_image(data, copy: bool = False) -> np.ndarray:
    """Validate and convert ``data`` to a 2D float64 image array."""
    img = np.array(data, dtype=np.float64, copy=copy)
    if img.ndim != 2 or img.size == 0:
        raise InvalidArgumentError(f"image must be a non-empty 2D array, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise InvalidArgumentError("image contains non-finite values")
    return img


@dataclass(frozen=True)
class PatchConfig:
    """Patch geometry and optional stochastic subsetting.

    ``subset`` is the number of randomly chosen patch positions used per
    evaluation (``None`` uses every position).
    """

    size: int = 6
    stride: int = 1
    subset: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.size < 1:
            raise InvalidArgumentError(f"patch size must be >= 1, got {self.size}")
        if self.stride < 1:
            raise InvalidArgumentError(f"stride must be >= 1, got {self.stride}")
        if self.subset is not None and self.subset < 1:
            raise InvalidArgumentError(f"subset must be >= 1, got {self.subset}")

    @property
    def dim(self) -> int:
        return self.size * self.size

    def check_shape(self, shape) -> None:
        h, w = shape
        if self.size > min(h, w):
            raise InvalidArgumentError(
                f"patch size {self.size} larger than image of shape {tuple(shape)}"
            )

    def grid(self, shape):
        """Row and column origins of all admissible patch positions."""
        self.check_shape(shape)
        h, w = shape
        rows = np.arange(0, h - self.size + 1, self.stride)
        cols = np.arange(0, w - self.size + 1, self.stride)
        return rows, cols

    def count(self, shape) -> int:
        rows, cols = self.grid(shape)
        return len(rows) * len(cols)

    def to_dict(self) -> dict:
        return {"size": self.size, "stride": self.stride, "subset": self.subset, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "PatchConfig":
        return cls(
            size=int(d.get("size", 6)),
            stride=int(d.get("stride", 1)),
            subset=None if d.get("subset") is None else int(d["subset"]),
            seed=int(d.get("seed", 0)),
        )


@dataclass(frozen=True)
class PatchSet:
    """Patch vectors of shape ``(N, p*p)`` and their ``(row, col)`` origins."""

    vectors: np.ndarray
    origins: np.ndarray
    size: int

    def __len__(self):
        return self.vectors.shape[0]


@dataclass(frozen=True)
class DiscreteMeasure:
    """Weighted point cloud ``sum_i w_i delta_{x_i}``."""

    points: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise InvalidArgumentError("measure needs at least one point")
        if self.weights is None:
            w = np.full(pts.shape[0], 1.0 / pts.shape[0])
        else:
            w = np.asarray(self.weights, dtype=np.float64).ravel()
        if w.shape[0] != pts.shape[0]:
            raise InvalidArgumentError(
                f"{w.shape[0]} weights for {pts.shape[0]} points"
            )
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise InvalidArgumentError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise InvalidArgumentError(f"weights sum to {w.sum()!r}, expected 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def normalized(cls, points, weights) -> "DiscreteMeasure":
        w = np.asarray(weights, dtype=np.float64)
        return cls(points, w / w.sum())

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def subsample(self, m: int, rng: np.random.Generator) -> "DiscreteMeasure":
        """Uniform subsample of ``m`` points (without replacement), reweighted uniformly."""
        if m >= self.size:
            return self
        idx = np.sort(rng.choice(self.size, size=m, replace=False))
        return DiscreteMeasure(self.points[idx])


def extract_patches(image, cfg: PatchConfig, rng: Optional[np.random.Generator] = None) -> PatchSet:
    """Extract all ``p x p`` patches on the stride grid.

    If ``cfg.subset`` is set, a uniform random subset of positions is drawn
    from ``rng`` (or from ``cfg.seed`` when no generator is given).
    """
    img = as_image(image)
    rows, cols = cfg.grid(img.shape)
    p = cfg.size
    windows = np.lib.stride_tricks.sliding_window_view(img, (p, p))
    windows = windows[rows][:, cols]  # (nr, nc, p, p)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    origins = np.stack([rr.ravel(), cc.ravel()], axis=1)
    # column-major flattening: transpose the in-patch axes before reshaping
    vectors = np.ascontiguousarray(windows.transpose(0, 1, 3, 2)).reshape(-1, p * p)
    if cfg.subset is not None and cfg.subset < len(origins):
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        idx = np.sort(rng.choice(len(origins), size=cfg.subset, replace=False))
        vectors, origins = vectors[idx], origins[idx]
    return PatchSet(vectors=vectors, origins=origins, size=p)


def _footprint_indices(origins: np.ndarray, p: int, width: int) -> np.ndarray:
    """Flat pixel index for each (patch, column-major in-patch entry)."""
    dr = np.tile(np.arange(p), p)  # row offset of entry c*p + r is r
    dc = np.repeat(np.arange(p), p)
    r = origins[:, 0:1] + dr[None, :]
    c = origins[:, 1:2] + dc[None, :]
    return r * width + c


def scatter_patch_gradients(patch_grads, image_shape, cfg: PatchConfig, origins=None) -> np.ndarray:
    """Adjoint of :func:`extract_patches`: sum patch vectors back onto the image grid.

    ``patch_grads`` is a :class:`PatchSet` or an ``(N, p*p)`` array; for a bare
    array ``origins`` defaults to the full stride grid.
    """
    if isinstance(patch_grads, PatchSet):
        origins = patch_grads.origins if origins is None else origins
        g = patch_grads.vectors
    else:
        g = np.asarray(patch_grads, dtype=np.float64)
    h, w = image_shape
    p = cfg.size
    if origins is None:
        rows, cols = cfg.grid((h, w))
        rr, cc = np.meshgrid(rows, cols, indexing="ij")
        origins = np.stack([rr.ravel(), cc.ravel()], axis=1)
    origins = np.asarray(origins)
    if g.ndim != 2 or g.shape != (len(origins), p * p):
        raise InvalidArgumentError(
            f"patch gradients of shape {g.shape} do not match {len(origins)} patches of dim {p * p}"
        )
    if len(origins) and (origins.max(axis=0) + p > np.array([h, w])).any():
        raise InvalidArgumentError("patch origins fall outside the image")
    flat = _footprint_indices(origins, p, w)
    out = np.bincount(flat.ravel(), weights=g.ravel(), minlength=h * w)
    return out.reshape(h, w)


def patch_measure(images: Sequence, cfg: PatchConfig) -> DiscreteMeasure:
    """Uniform empirical measure over every patch of every image."""
    if len(images) == 0:
        raise InvalidArgumentError("patch_measure needs at least one image")
    full = PatchConfig(size=cfg.size, stride=cfg.stride)
    pts = np.concatenate([extract_patches(im, full).vectors for im in images], axis=0)
    return DiscreteMeasure(pts)


# --------------------------------------------------------------------------
# File I/O
# --------------------------------------------------------------------------


def _pgm_tokens(buf: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos, n = [], 0, len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise FormatError("truncated PGM header")
        if buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = _pgm_tokens(buf, 4)
    magic = tokens[0]
    if magic not in (b"P2", b"P5"):
        raise FormatError(f"unsupported PGM magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("malformed PGM header") from exc
    if w <= 0 or h <= 0:
        raise FormatError(f"invalid PGM size {w}x{h}")
    if not 0 < maxval < 65536:
        raise FormatError(f"PGM maxval {maxval} out of range")
    if magic == b"P5":
        pos += 1  # single whitespace after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        nbytes = w * h * dtype.itemsize
        if len(buf) - pos < nbytes:
            raise FormatError("truncated PGM raster")
        data = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos)
    else:
        try:
            data = np.array(buf[pos:].split(), dtype=np.int64)
        except ValueError as exc:
            raise FormatError("non-integer sample in P2 raster") from exc
        if data.size < w * h:
            raise FormatError("truncated PGM raster")
        data = data[: w * h]
    if data.max(initial=0) > maxval:
        raise FormatError("PGM sample exceeds maxval")
    return data.reshape(h, w).astype(np.float64) / maxval


def write_pgm(image, path, bits: int = 8, binary: bool = True) -> None:
    img = as_image(image)
    if bits not in (8, 16):
        raise InvalidArgumentError("PGM export supports 8 or 16 bits")
    maxval = 255 if bits == 8 else 65535
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval).astype(np.int64)
    h, w = img.shape
    if binary:
        dtype = np.dtype("u1") if bits == 8 else np.dtype(">u2")
        header = f"P5\n{w} {h}\n{maxval}\n".encode()
        Path(path).write_bytes(header + q.astype(dtype).tobytes())
    else:
        lines = [f"P2\n{w} {h}\n{maxval}"] + [" ".join(map(str, row)) for row in q]
        Path(path).write_text("\n".join(lines) + "\n")


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def write_raw(data, path, kind: str = "image", extra: Optional[dict] = None) -> None:
    """Write little-endian float32 row-major data with a JSON sidecar."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidArgumentError("float raw export expects 2D data")
    meta = {"width": int(arr.shape[1]), "height": int(arr.shape[0]), "kind": kind}
    if extra:
        meta.update(extra)
    Path(path).write_bytes(arr.astype("<f4").tobytes())
    _sidecar(path).write_text(json.dumps(meta, indent=1, sort_keys=True))


def read_raw(path, with_meta: bool = False):
    try:
        meta = json.loads(_sidecar(path).read_text())
        w, h = int(meta["width"]), int(meta["height"])
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"missing or malformed sidecar for {path}") from exc
    buf = Path(path).read_bytes()
    if len(buf) != 4 * w * h:
        raise FormatError(f"raw file has {len(buf)} bytes, expected {4 * w * h}")
    arr = np.frombuffer(buf, dtype="<f4").reshape(h, w).astype(np.float64)
    return (arr, meta) if with_meta else arr


def load_image(path) -> np.ndarray:
    """Load a PGM (P2/P5) or float-raw image; PGM values are scaled to [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    if _sidecar(path).exists():
        return read_raw(path)
    head = path.read_bytes()[:2]
    if head in (b"P2", b"P5"):
        return read_pgm(path)
    raise FormatError(f"cannot determine image format of {path}")


def save_image(image, path, bits: int = 8) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        write_pgm(image, path, bits=bits)
    else:
        write_raw(image, path, kind="image")


# --------------------------------------------------------------------------
# Checkpoints: JSON manifest + raw array blocks
# --------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(directory, kind: str, meta: dict, arrays: dict) -> None:
    """Write ``manifest.json`` plus one little-endian float64 block per array."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blocks = {}
    for name in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f8"))
        fname = f"{name}.raw"
        (d / fname).write_bytes(arr.tobytes())
        blocks[name] = {"file": fname, "shape": list(arr.shape), "dtype": "<f8"}
    manifest = {"version": CHECKPOINT_VERSION, "kind": kind, "meta": meta, "blocks": blocks}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(directory, kind: Optional[str] = None):
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read checkpoint manifest in {d}") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {manifest.get('version')!r}")
    if kind is not None and manifest.get("kind") != kind:
        raise FormatError(f"checkpoint holds {manifest.get('kind')!r}, expected {kind!r}")
    arrays = {}
    for name, spec in manifest["blocks"].items():
        buf = (d / spec["file"]).read_bytes()
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        if len(buf) != 8 * n:
            raise FormatError(f"block {name} truncated")
        arrays[name] = np.frombuffer(buf, dtype=spec["dtype"]).reshape(shape).astype(np.float64)
    return manifest["kind"], manifest["meta"], arrays
