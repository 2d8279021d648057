"""Volumes, masks, the on-disk container, and synthetic brain phantoms.

Axis convention everywhere: ``(channel, depth, height, width)`` for volumes
and ``(depth, height, width)`` for masks.

Container layout (little endian)::

    bytes 0..3    magic  b"LVOL"
    bytes 4..5    format version (uint16)
    byte  6       kind (0 = volume, 1 = mask)
    byte  7       reserved
    bytes 8..11   metadata length in bytes (uint32)
    bytes 12..15  payload length in bytes (uint32)
    metadata      UTF-8 JSON: shape, dtype, intensity_range, modality_tag,
                  normalization, num_classes, sha256 of the payload
    payload       raw float32 (volumes) or uint8 (masks)
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .seeding import derive_seed

MAGIC = b"LVOL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHBBII")
KIND_VOLUME = 0
KIND_MASK = 1
MIN_SPATIAL = 8


class VolumeIOError(Exception):
    """Base class for container errors; ``code`` identifies the failure."""

    code = "E_IO"


class HeaderError(VolumeIOError):
    code = "E_HEADER"


class TruncatedPayloadError(VolumeIOError):
    code = "E_TRUNCATED"


class ShapeMismatchError(VolumeIOError):
    code = "E_SHAPE"


class PhantomError(RuntimeError):
    pass


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class Volume3D:
    """Scalar field of shape ``(channels, depth, height, width)``."""

    data: np.ndarray
    intensity_range: tuple[float, float] = (-1.0, 1.0)
    modality_tag: str = "other"
    normalization: dict | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4:
            raise ValueError(f"volume must be 4-D (C, D, H, W), got shape {data.shape}")
        if data.shape[0] < 1 or min(data.shape[1:]) < MIN_SPATIAL:
            raise ValueError(
                f"volume needs >= 1 channel and spatial dims >= {MIN_SPATIAL}, got {data.shape}"
            )
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "intensity_range", tuple(float(x) for x in self.intensity_range))

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])


@dataclass(frozen=True)
class SegMask3D:
    """Integer label grid of shape ``(depth, height, width)``; 0 is background."""

    labels: np.ndarray
    num_classes: int | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError(f"mask must be 3-D (D, H, W), got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > 255):
            raise ValueError("mask labels must lie in [0, 255]")
        labels = labels.astype(np.uint8)
        top = int(labels.max()) if labels.size else 0
        n = top + 1 if self.num_classes is None else int(self.num_classes)
        if n < top + 1:
            raise ValueError(f"label {top} outside num_classes={n}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "num_classes", n)

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)


@dataclass(frozen=True)
class PhantomSpec:
    grid_shape: tuple[int, int, int] = (32, 32, 32)
    head_axes: tuple[float, float, float] = (13.0, 14.0, 12.0)
    tumor_count_range: tuple[int, int] = (1, 2)
    tumor_radius_range: tuple[float, float] = (3.5, 5.5)
    smooth_noise_scale: float = 0.08
    modality_tag: str = "flair-like"
    intensity_range: tuple[float, float] = (0.0, 1.0)

    def validate(self) -> None:
        if len(self.grid_shape) != 3 or min(self.grid_shape) < MIN_SPATIAL:
            raise ValueError(f"grid_shape must be 3 dims >= {MIN_SPATIAL}")
        lo_n, hi_n = self.tumor_count_range
        lo_r, hi_r = self.tumor_radius_range
        if not (0 <= lo_n <= hi_n):
            raise ValueError("tumor_count_range must satisfy 0 <= min <= max")
        if not (0 < lo_r <= hi_r):
            raise ValueError("tumor_radius_range must satisfy 0 < min <= max")
        for axis, (a, n) in enumerate(zip(self.head_axes, self.grid_shape)):
            if not 0 < a < n / 2:
                raise ValueError(f"head axis {axis} ({a}) does not fit grid dim {n}")
        if hi_n > 0 and hi_r >= min(self.head_axes) * 0.9:
            raise ValueError("largest tumor radius does not fit inside the head ellipsoid")
        if self.smooth_noise_scale < 0:
            raise ValueError("smooth_noise_scale must be >= 0")
        if self.intensity_range[1] <= self.intensity_range[0]:
            raise ValueError("intensity_range must satisfy lo < hi")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        kw = {f.name: d[f.name] for f in dataclasses.fields(cls) if f.name in d}
        for key in ("grid_shape", "head_axes", "tumor_count_range", "tumor_radius_range", "intensity_range"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


# -- normalization -----------------------------------------------------------

def normalize(v: Volume3D, method: str = "minmax_sym") -> Volume3D:
    """Map a volume affinely onto [-1, 1] using its own min and max.

    Constant volumes map to zeros. The parameters needed by
    :func:`denormalize` are stored on the returned volume.
    """
    if method != "minmax_sym":
        raise ValueError(f"unknown normalization method {method!r}")
    x = np.asarray(v.data, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot normalize a volume with non-finite values")
    lo, hi = float(x.min()), float(x.max())
    if hi > lo:
        out = 2.0 * (x - lo) / (hi - lo) - 1.0
    else:
        out = np.zeros_like(x)
    return Volume3D(
        out.astype(np.float32),
        intensity_range=(-1.0, 1.0),
        modality_tag=v.modality_tag,
        normalization={"method": method, "lo": lo, "hi": hi},
    )


def denormalize(v: Volume3D) -> Volume3D:
    norm = v.normalization
    if not norm or norm.get("method") != "minmax_sym":
        raise ValueError("volume carries no minmax_sym normalization record")
    lo, hi = norm["lo"], norm["hi"]
    x = np.asarray(v.data, dtype=np.float64)
    out = (x + 1.0) * 0.5 * (hi - lo) + lo
    return Volume3D(out.astype(np.float32), intensity_range=(lo, hi), modality_tag=v.modality_tag)


# -- phantoms ----------------------------------------------------------------

def smooth_value_noise(shape: Sequence[int], rng: np.random.Generator, cell: int = 8) -> np.ndarray:
    """Trilinearly interpolated random lattice with values in [-1, 1]."""
    coarse = tuple(max(2, int(np.ceil(n / cell)) + 1) for n in shape)
    lattice = rng.uniform(-1.0, 1.0, size=coarse)
    coords = np.meshgrid(
        *[np.linspace(0, c - 1, n) for c, n in zip(coarse, shape)], indexing="ij"
    )
    return ndimage.map_coordinates(lattice, coords, order=1, mode="nearest")


def _grid(shape):
    return np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")


def generate_phantom(spec: PhantomSpec, seed: int) -> tuple[Volume3D, SegMask3D]:
    """Deterministic synthetic head with spherical tumors.

    The head is an ellipsoid of smooth-textured tissue on a background of
    ``intensity_range[0]``. Tumor ``k`` is labelled ``k`` in the mask and is
    brighter than tissue for ``"flair-like"`` and darker for ``"t1-like"``.
    """
    spec.validate()
    rng = np.random.default_rng(int(seed))
    shape = tuple(int(n) for n in spec.grid_shape)
    lo, hi = spec.intensity_range
    span = hi - lo
    zz, yy, xx = _grid(shape)

    center = np.array([(n - 1) / 2.0 for n in shape]) + rng.uniform(-1.0, 1.0, size=3)
    axes = np.asarray(spec.head_axes, dtype=np.float64) * rng.uniform(0.95, 1.05, size=3)
    rho = ((zz - center[0]) / axes[0]) ** 2 + ((yy - center[1]) / axes[1]) ** 2 + ((xx - center[2]) / axes[2]) ** 2
    head = rho <= 1.0

    texture = smooth_value_noise(shape, rng)
    tissue = 0.45 + spec.smooth_noise_scale * texture
    if spec.modality_tag == "t1-like":
        tumor_level = 0.12
    else:
        tumor_level = 0.9

    labels = np.zeros(shape, dtype=np.uint8)
    n_tumors = int(rng.integers(spec.tumor_count_range[0], spec.tumor_count_range[1] + 1))
    # interior of the head, shrunk so a sphere placed there stays inside
    for k in range(1, n_tumors + 1):
        for _ in range(200):
            r = rng.uniform(*spec.tumor_radius_range)
            c = center + rng.uniform(-1.0, 1.0, size=3) * np.maximum(axes - r - 1.0, 0.0)
            ball = (zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2 <= r * r
            if not ball.any() or not np.all(head[ball]):
                continue
            grown = ndimage.binary_dilation(ball, iterations=1)
            if np.any(labels[grown] > 0):
                continue
            labels[ball] = k
            break
        else:
            raise PhantomError(f"could not place tumor {k} after 200 tries (seed={seed})")

    body = np.where(head, tissue, 0.0)
    tumor = labels > 0
    body = np.where(tumor, tumor_level + 0.5 * spec.smooth_noise_scale * texture, body)
    data = lo + span * np.clip(body, 0.0, 1.0)
    data = np.where(head, data, lo)
    vol = Volume3D(data[None].astype(np.float32), intensity_range=(lo, hi), modality_tag=spec.modality_tag)
    return vol, SegMask3D(labels, num_classes=n_tumors + 1)


def head_mask(v: Volume3D, tol: float = 1e-6) -> np.ndarray:
    """Voxels above the background level ``intensity_range[0]``."""
    return v.data[0] > v.intensity_range[0] + tol


# -- container I/O -----------------------------------------------------------

def _atomic_write(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_volume(obj: Volume3D | SegMask3D, path) -> None:
    path = Path(path)
    if isinstance(obj, SegMask3D):
        kind = KIND_MASK
        payload = np.ascontiguousarray(obj.labels, dtype="<u1").tobytes()
        meta = {"kind": "mask", "shape": list(obj.labels.shape), "dtype": "uint8", "num_classes": obj.num_classes}
    elif isinstance(obj, Volume3D):
        kind = KIND_VOLUME
        payload = np.ascontiguousarray(obj.data, dtype="<f4").tobytes()
        meta = {
            "kind": "volume",
            "shape": list(obj.data.shape),
            "dtype": "float32",
            "intensity_range": list(obj.intensity_range),
            "modality_tag": obj.modality_tag,
            "normalization": obj.normalization,
        }
    else:
        raise TypeError(f"cannot save object of type {type(obj).__name__}")
    meta["sha256"] = hashlib.sha256(payload).hexdigest()
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, kind, 0, len(meta_bytes), len(payload))
    _atomic_write(path, header + meta_bytes + payload)


def load_volume(path, expected_shape: Sequence[int] | None = None) -> Volume3D | SegMask3D:
    """Read a container written by :func:`save_volume`.

    ``expected_shape`` is compared against the spatial shape, so the same
    value works for a volume and its mask.
    """
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise HeaderError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, kind, _, meta_len, payload_len = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise HeaderError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION or kind not in (KIND_VOLUME, KIND_MASK):
        raise HeaderError(f"{path}: unsupported version {version} / kind {kind}")
    start = _HEADER.size
    if len(blob) < start + meta_len:
        raise TruncatedPayloadError(f"{path}: metadata block truncated")
    try:
        meta = json.loads(blob[start:start + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"{path}: unreadable metadata ({exc})") from None
    payload = blob[start + meta_len:]
    if len(payload) != payload_len:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, header says {payload_len}")
    shape = tuple(meta["shape"])
    dtype = np.dtype("<u1") if kind == KIND_MASK else np.dtype("<f4")
    if int(np.prod(shape)) * dtype.itemsize != payload_len:
        raise ShapeMismatchError(f"{path}: shape {shape} does not match payload length {payload_len}")
    if hashlib.sha256(payload).hexdigest() != meta.get("sha256"):
        raise TruncatedPayloadError(f"{path}: payload checksum mismatch")
    spatial = shape if kind == KIND_MASK else shape[1:]
    if expected_shape is not None and tuple(expected_shape) != tuple(spatial):
        raise ShapeMismatchError(f"{path}: spatial shape {spatial} != expected {tuple(expected_shape)}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if kind == KIND_MASK:
        return SegMask3D(arr, num_classes=meta.get("num_classes"))
    return Volume3D(
        arr,
        intensity_range=tuple(meta["intensity_range"]),
        modality_tag=meta.get("modality_tag", "other"),
        normalization=meta.get("normalization"),
    )


def import_nifti(path, modality_tag: str = "other") -> Volume3D:
    """Read a .nii/.nii.gz file into a volume; NIfTI (x, y, z) becomes (D=z, H=y, W=x)."""
    import nibabel as nib

    img = nib.load(str(path))
    data = np.asarray(img.get_fdata(dtype=np.float32))
    if data.ndim == 4:
        data = np.transpose(data, (3, 2, 1, 0))
    elif data.ndim == 3:
        data = np.transpose(data, (2, 1, 0))[None]
    else:
        raise ValueError(f"{path}: expected a 3-D or 4-D NIfTI image, got {data.ndim}-D")
    lo, hi = float(data.min()), float(data.max())
    return Volume3D(np.ascontiguousarray(data), intensity_range=(lo, hi), modality_tag=modality_tag)


# -- datasets ----------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    volume_path: str
    mask_path: str
    seed: int
    modality_tag: str


@dataclass
class DatasetManifest:
    """List of (volume, mask) file pairs. Paths are relative to ``root``."""

    entries: list[ManifestEntry]
    normalization: dict = field(default_factory=lambda: {"method": "minmax_sym"})
    grid_shape: tuple[int, int, int] | None = None
    root: Path | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    def validate(self) -> None:
        paths = [e.volume_path for e in self.entries] + [e.mask_path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise DatasetError("manifest paths are not unique")
        seeds = [e.seed for e in self.entries]
        if len(set(seeds)) != len(seeds):
            raise DatasetError("manifest seeds are not distinct")

    def load_pair(self, i: int) -> tuple[Volume3D, SegMask3D]:
        e = self.entries[i]
        v = load_volume(self.resolve(e.volume_path), expected_shape=self.grid_shape)
        m = load_volume(self.resolve(e.mask_path), expected_shape=self.grid_shape)
        if not isinstance(v, Volume3D) or not isinstance(m, SegMask3D):
            raise DatasetError(f"entry {i}: expected a volume and a mask")
        if v.spatial_shape != m.spatial_shape:
            raise ShapeMismatchError(f"entry {i}: volume {v.spatial_shape} vs mask {m.spatial_shape}")
        return v, m

    def __iter__(self) -> Iterator[tuple[Volume3D, SegMask3D]]:
        for i in range(len(self.entries)):
            yield self.load_pair(i)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stack every pair into ``(N, C, D, H, W)`` float32 and ``(N, D, H, W)`` uint8."""
        pairs = list(self)
        return (
            np.stack([v.data for v, _ in pairs]),
            np.stack([m.labels for _, m in pairs]),
        )

    def to_dict(self) -> dict:
        return {
            "entries": [dataclasses.asdict(e) for e in self.entries],
            "normalization": self.normalization,
            "grid_shape": list(self.grid_shape) if self.grid_shape else None,
            "meta": self.meta,
        }

    def save(self, path) -> None:
        path = Path(path)
        blob = json.dumps(self.to_dict(), indent=2, sort_keys=True).encode("utf-8")
        _atomic_write(path, blob)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        man = cls(
            entries=[ManifestEntry(**e) for e in d["entries"]],
            normalization=d.get("normalization", {}),
            grid_shape=tuple(d["grid_shape"]) if d.get("grid_shape") else None,
            root=path.parent,
            meta=d.get("meta", {}),
        )
        man.validate()
        return man


def build_dataset(spec: PhantomSpec, n: int, seed: int, out_dir, overwrite: bool = False) -> DatasetManifest:
    """Write ``n`` normalized phantom pairs plus ``manifest.json`` into ``out_dir``.

    Entry ``i`` uses ``derive_seed(seed, i, "phantom")``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    spec.validate()
    out = Path(out_dir)
    entries = []
    for i in range(n):
        s = derive_seed(seed, i, "phantom")
        vname, mname = f"phantom_{i:04d}_vol.lvol", f"phantom_{i:04d}_mask.lvol"
        for name in (vname, mname):
            if (out / name).exists() and not overwrite:
                raise DatasetError(f"output path collision: {out / name} already exists")
        vol, mask = generate_phantom(spec, s)
        save_volume(normalize(vol), out / vname)
        save_volume(mask, out / mname)
        entries.append(ManifestEntry(vname, mname, s, spec.modality_tag))
    man = DatasetManifest(
        entries=entries,
        normalization={"method": "minmax_sym"},
        grid_shape=tuple(spec.grid_shape),
        root=out,
        meta={"master_seed": int(seed), "phantom_spec": spec.to_dict()},
    )
    man.validate()
    man.save(out / "manifest.json")
    return man
