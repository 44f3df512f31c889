"""Volume file I/O, dataset manifests, and the synthetic phantom generator.

Two on-disk volume containers are supported:

* NIfTI-1, single-file subset: the standard 348-byte header with magic
  "n+1", datatypes int16 or float32 only, extensions ignored, no gzip.
* VRAW, a minimal raw container: 20-byte header (magic "VRAW", then
  little-endian u32 D, H, W and a u32 dtype tag 1=f32 / 2=f64), followed by
  the C-order payload.

Volumes are (D, H, W) arrays; loading normalizes each volume to zero mean
and unit variance (constant volumes normalize to all zeros).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError


class VolumeFormatError(ValueError):
    """Base class for volume container problems."""


class BadMagicError(VolumeFormatError):
    pass


class UnsupportedDatatypeError(VolumeFormatError):
    pass


class TruncatedFileError(VolumeFormatError):
    pass


# NIfTI-1 header layout (348 bytes); offsets per the standard single-file header.
_NIFTI_HEADER = np.dtype([
    ("sizeof_hdr", "<i4"),     # 0
    ("data_type", "S10"),      # 4
    ("db_name", "S18"),        # 14
    ("extents", "<i4"),        # 32
    ("session_error", "<i2"),  # 36
    ("regular", "S1"),         # 38
    ("dim_info", "u1"),        # 39
    ("dim", "<i2", (8,)),      # 40
    ("intent_p1", "<f4"),      # 56
    ("intent_p2", "<f4"),      # 60
    ("intent_p3", "<f4"),      # 64
    ("intent_code", "<i2"),    # 68
    ("datatype", "<i2"),       # 70
    ("bitpix", "<i2"),         # 72
    ("slice_start", "<i2"),    # 74
    ("pixdim", "<f4", (8,)),   # 76
    ("vox_offset", "<f4"),     # 108
    ("scl_slope", "<f4"),      # 112
    ("scl_inter", "<f4"),      # 116
    ("slice_end", "<i2"),      # 120
    ("slice_code", "u1"),      # 122
    ("xyzt_units", "u1"),      # 123
    ("cal_max", "<f4"),        # 124
    ("cal_min", "<f4"),        # 128
    ("slice_duration", "<f4"), # 132
    ("toffset", "<f4"),        # 136
    ("glmax", "<i4"),          # 140
    ("glmin", "<i4"),          # 144
    ("descrip", "S80"),        # 148
    ("aux_file", "S24"),       # 228
    ("qform_code", "<i2"),     # 252
    ("sform_code", "<i2"),     # 254
    ("quatern_b", "<f4"),      # 256
    ("quatern_c", "<f4"),      # 260
    ("quatern_d", "<f4"),      # 264
    ("qoffset_x", "<f4"),      # 268
    ("qoffset_y", "<f4"),      # 272
    ("qoffset_z", "<f4"),      # 276
    ("srow_x", "<f4", (4,)),   # 280
    ("srow_y", "<f4", (4,)),   # 296
    ("srow_z", "<f4", (4,)),   # 312
    ("intent_name", "S16"),    # 328
    ("magic", "S4"),           # 344
])
assert _NIFTI_HEADER.itemsize == 348

_NIFTI_DTYPES = {4: np.dtype("<i2"), 16: np.dtype("<f4")}
_VRAW_MAGIC = b"VRAW"
_VRAW_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def _read_nifti(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 348:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, shorter than the "
                                 f"348-byte header")
    hdr = np.frombuffer(raw[:348], dtype=_NIFTI_HEADER)[0]
    swapped = False
    if hdr["sizeof_hdr"] != 348:
        hdr = hdr.byteswap()
        swapped = True
        if hdr["sizeof_hdr"] != 348:
            raise BadMagicError(f"{path}: sizeof_hdr is not 348 in either byte order")
    magic = bytes(hdr["magic"]).rstrip(b"\x00")
    if magic != b"n+1":
        raise BadMagicError(f"{path}: magic {magic!r}, expected single-file 'n+1'")
    code = int(hdr["datatype"])
    if code not in _NIFTI_DTYPES:
        raise UnsupportedDatatypeError(f"{path}: datatype code {code}, supported: "
                                       f"{sorted(_NIFTI_DTYPES)} (int16, float32)")
    dt = _NIFTI_DTYPES[code]
    if swapped:
        dt = dt.newbyteorder()
    ndim = int(hdr["dim"][0])
    if not 3 <= ndim <= 7 or any(int(d) > 1 for d in hdr["dim"][4:ndim + 1]):
        raise VolumeFormatError(f"{path}: only 3-D volumes are supported, "
                                f"dim={hdr['dim'].tolist()}")
    nx, ny, nz = (int(hdr["dim"][i]) for i in (1, 2, 3))
    if min(nx, ny, nz) < 1:
        raise VolumeFormatError(f"{path}: nonpositive dims {(nx, ny, nz)}")
    offset = int(hdr["vox_offset"])
    need = offset + nx * ny * nz * dt.itemsize
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: need {need} bytes for payload, have "
                                 f"{len(raw)}")
    flat = np.frombuffer(raw[offset:need], dtype=dt)
    # file order is x fastest; map to (D, H, W) = (z, y, x) with W fastest
    return flat.reshape(nz, ny, nx).astype(np.float32)


def write_nifti(path: str, volume: np.ndarray):
    """Write a (D, H, W) volume as single-file NIfTI-1 float32."""
    volume = np.asarray(volume, dtype=np.float32)
    if volume.ndim != 3:
        raise ShapeError(f"expected (D, H, W) volume, got {volume.shape}")
    d, h, w = volume.shape
    hdr = np.zeros((), dtype=_NIFTI_HEADER)
    hdr["sizeof_hdr"] = 348
    hdr["dim"] = [3, w, h, d, 1, 1, 1, 1]
    hdr["datatype"] = 16
    hdr["bitpix"] = 32
    hdr["pixdim"] = [1, 1, 1, 1, 0, 0, 0, 0]
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2  # millimetres
    hdr["magic"] = b"n+1"
    with open(path, "wb") as f:
        f.write(hdr.tobytes())
        f.write(b"\x00\x00\x00\x00")  # no extensions
        f.write(np.ascontiguousarray(volume, dtype="<f4").tobytes())


def _read_vraw(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 20:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, shorter than the "
                                 f"20-byte header")
    if raw[:4] != _VRAW_MAGIC:
        raise BadMagicError(f"{path}: magic {raw[:4]!r}, expected {_VRAW_MAGIC!r}")
    d, h, w, tag = struct.unpack("<4I", raw[4:20])
    if tag not in _VRAW_TAGS:
        raise UnsupportedDatatypeError(f"{path}: dtype tag {tag}, supported: "
                                       f"{sorted(_VRAW_TAGS)}")
    dt = _VRAW_TAGS[tag]
    need = 20 + d * h * w * dt.itemsize
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: need {need} bytes, have {len(raw)}")
    return np.frombuffer(raw[20:need], dtype=dt).reshape(d, h, w).astype(dt.base)


def write_vraw(path: str, volume: np.ndarray):
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ShapeError(f"expected (D, H, W) volume, got {volume.shape}")
    if volume.dtype == np.float64:
        tag, dt = 2, "<f8"
    else:
        tag, dt = 1, "<f4"
    d, h, w = volume.shape
    with open(path, "wb") as f:
        f.write(_VRAW_MAGIC)
        f.write(struct.pack("<4I", d, h, w, tag))
        f.write(np.ascontiguousarray(volume, dtype=dt).tobytes())


def load_array(path: str) -> np.ndarray:
    """Read a volume payload (no normalization); container by extension or magic."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"volume not found: {path}")
    lower = str(path).lower()
    if lower.endswith(".nii"):
        return _read_nifti(path)
    if lower.endswith(".vraw"):
        return _read_vraw(path)
    with open(path, "rb") as f:
        head = f.read(4)
    if head == _VRAW_MAGIC:
        return _read_vraw(path)
    return _read_nifti(path)


def write_volume(path: str, volume: np.ndarray):
    """Write a volume, container chosen by extension (.nii or .vraw)."""
    if str(path).lower().endswith(".nii"):
        write_nifti(path, volume)
    else:
        write_vraw(path, volume)


def normalize_volume(volume: np.ndarray) -> np.ndarray:
    """Per-volume z-score; a (near-)constant volume becomes all zeros."""
    volume = np.asarray(volume, dtype=np.float32)
    mean = volume.mean(dtype=np.float64)
    std = volume.std(dtype=np.float64)
    if std < 1e-12:
        return np.zeros_like(volume)
    return ((volume - mean) / std).astype(np.float32)


@dataclass
class VolumeRecord:
    subject_id: str
    label: int
    volume: np.ndarray  # (1, D, H, W), normalized
    source_path: str


def read_volume(path: str, label: int = -1, normalize: bool = True) -> VolumeRecord:
    arr = load_array(path)
    if not np.all(np.isfinite(arr)):
        raise VolumeFormatError(f"{path}: non-finite intensities")
    if normalize:
        arr = normalize_volume(arr)
    subject = os.path.splitext(os.path.basename(path))[0]
    return VolumeRecord(subject, label, arr[None, ...], str(path))


# -- manifests ---------------------------------------------------------------

SPLITS = ("train", "val", "test")
TASKS = ("ad_nc", "pmci_smci")


@dataclass
class ManifestEntry:
    path: str
    label: int
    split: str = "train"


@dataclass
class DatasetManifest:
    task: str = "ad_nc"
    entries: list[ManifestEntry] = field(default_factory=list)
    seed: int = 0
    base_dir: str = ""  # directory entries are relative to; set on load

    def resolve(self, entry_path: str) -> str:
        if os.path.isabs(entry_path) or not self.base_dir:
            return entry_path
        return os.path.join(self.base_dir, entry_path)

    def paths_labels(self, split: str | None = None):
        rows = [e for e in self.entries if split is None or e.split == split]
        return ([self.resolve(e.path) for e in rows],
                np.array([e.label for e in rows], dtype=np.int64))


def save_manifest(manifest: DatasetManifest, path: str):
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# task={manifest.task} seed={manifest.seed}\n")
        for e in manifest.entries:
            f.write(f"{e.path}\t{e.label}\t{e.split}\n")


def load_manifest(path: str) -> DatasetManifest:
    if not os.path.exists(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    manifest = DatasetManifest(base_dir=os.path.dirname(os.path.abspath(path)))
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                for token in line[1:].split():
                    if token.startswith("task="):
                        manifest.task = token[5:]
                    elif token.startswith("seed="):
                        manifest.seed = int(token[5:])
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'path<TAB>label<TAB>"
                                 f"split', got {line!r}")
            p, label, split = parts
            if split not in SPLITS:
                raise ValueError(f"{path}:{lineno}: unknown split {split!r}")
            manifest.entries.append(ManifestEntry(p, int(label), split))
    return manifest


def load_split(manifest: DatasetManifest, split: str):
    """Load all volumes of a split into (X (n,1,D,H,W), y) arrays."""
    paths, labels = manifest.paths_labels(split)
    if not paths:
        raise ValueError(f"no samples in split {split!r}")
    return np.stack([read_volume(p).volume for p in paths]), labels


def split_manifest(manifest: DatasetManifest, fractions=(0.8, 0.1, 0.1),
                   seed: int = 0) -> DatasetManifest:
    """Assign train/val/test splits, stratified by label, seeded.

    Per-class counts follow the largest-remainder rule so 10 samples under
    (0.8, 0.1, 0.1) land exactly 8/1/1. A class too small to give every
    nonzero-fraction split at least one sample is an error.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be 3 nonnegative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    rng = np.random.Generator(np.random.PCG64(seed))
    out = DatasetManifest(task=manifest.task, seed=seed,
                          entries=[ManifestEntry(e.path, e.label, e.split)
                                   for e in manifest.entries])
    by_label: dict[int, list[int]] = {}
    for i, e in enumerate(out.entries):
        by_label.setdefault(e.label, []).append(i)
    for label, idxs in sorted(by_label.items()):
        idxs = [idxs[j] for j in rng.permutation(len(idxs))]
        n = len(idxs)
        counts = [int(np.floor(f * n)) for f in fractions]
        remainders = [f * n - c for f, c in zip(fractions, counts)]
        for _ in range(n - sum(counts)):
            k = int(np.argmax(remainders))
            counts[k] += 1
            remainders[k] = -1.0
        for f, c in zip(fractions, counts):
            if f > 0 and c == 0:
                raise ValueError(f"class {label} too small ({n}) to stratify "
                                 f"over fractions {fractions}")
        pos = 0
        for split, c in zip(SPLITS, counts):
            for i in idxs[pos:pos + c]:
                out.entries[i].split = split
            pos += c
    return out


# -- synthetic phantoms -------------------------------------------------------

@dataclass
class PhantomSpec:
    """Synthetic volumes: a bright brain-like ellipsoid plus noise, where
    class 1 carries darkened ellipsoidal blobs (variant 'blobs'), or where
    the class is encoded in whether two distant blobs share intensity
    polarity (variant 'long_range', which local features cannot decide)."""
    grid: int = 32
    noise_std: float = 0.05
    blob_count: int = 3
    radius_range: tuple[int, int] = (3, 5)
    intensity_delta: float = -0.8
    seed: int = 0
    variant: str = "blobs"

    def __post_init__(self):
        if self.radius_range[1] * 2 >= self.grid:
            raise ValueError(f"blob radius {self.radius_range[1]} too large for "
                             f"grid {self.grid}")
        if self.variant not in ("blobs", "long_range"):
            raise ValueError(f"unknown phantom variant {self.variant!r}")


def _ellipsoid_mask(grid: int, center, radii) -> np.ndarray:
    zz, yy, xx = np.mgrid[0:grid, 0:grid, 0:grid].astype(np.float64)
    return (((zz - center[0]) / radii[0]) ** 2
            + ((yy - center[1]) / radii[1]) ** 2
            + ((xx - center[2]) / radii[2]) ** 2) <= 1.0


def _base_brain(grid: int) -> np.ndarray:
    c = (grid - 1) / 2.0
    r = grid * 0.42
    mask = _ellipsoid_mask(grid, (c, c, c), (r, r * 0.9, r))
    return mask.astype(np.float32)


def _random_blob(rng, grid: int, radius_range) -> np.ndarray:
    r = [int(rng.integers(radius_range[0], radius_range[1] + 1)) for _ in range(3)]
    lo = [max(ri, int(grid * 0.2)) for ri in r]
    hi = [min(grid - 1 - ri, int(grid * 0.8)) for ri in r]
    center = [int(rng.integers(l, h + 1)) for l, h in zip(lo, hi)]
    return _ellipsoid_mask(grid, center, r)


def generate_phantoms(spec: PhantomSpec, n_per_class: int):
    """Deterministic phantom dataset: (volumes (n,1,g,g,g) float32 raw
    intensities, labels (n,), masks (n,g,g,g) bool). Class order alternates
    0,1,0,1,... so splits stay balanced under any prefix. Masks mark the
    class-discriminative blob voxels; class-0 masks are empty for the
    'blobs' variant."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    g = spec.grid
    base = _base_brain(g)
    n = 2 * n_per_class
    volumes = np.empty((n, 1, g, g, g), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    masks = np.zeros((n, g, g, g), dtype=bool)
    for i in range(n):
        label = i % 2
        vol = base.copy()
        if spec.noise_std > 0:
            vol += rng.normal(0.0, spec.noise_std, size=vol.shape).astype(np.float32)
        if spec.variant == "blobs":
            if label == 1:
                mask = np.zeros((g, g, g), dtype=bool)
                for _ in range(spec.blob_count):
                    mask |= _random_blob(rng, g, spec.radius_range)
                vol[mask] += np.float32(spec.intensity_delta)
                masks[i] = mask
        else:  # long_range: two distant blobs; class 1 iff same polarity
            m1 = _random_blob(rng, g, spec.radius_range)
            m2 = _random_blob(rng, g, spec.radius_range)
            s1 = 1.0 if rng.random() < 0.5 else -1.0
            s2 = s1 if label == 1 else -s1
            vol[m1] += np.float32(s1 * abs(spec.intensity_delta))
            vol[m2] += np.float32(s2 * abs(spec.intensity_delta))
            masks[i] = m1 | m2
        volumes[i, 0] = vol
        labels[i] = label
    return volumes, labels, masks


def mask_bbox(mask: np.ndarray):
    """Inclusive (lo, hi) corner coordinates of a boolean mask, or None."""
    idx = np.argwhere(mask)
    if idx.size == 0:
        return None
    return idx.min(axis=0), idx.max(axis=0)


def write_phantom_dataset(spec: PhantomSpec, n_per_class: int, out_dir: str,
                          fractions=(0.8, 0.0, 0.2)) -> str:
    """Write phantom volumes, ground-truth masks, and a split manifest.

    Returns the manifest path. Volumes are stored raw (un-normalized);
    normalization happens at load time like any other volume.
    """
    os.makedirs(out_dir, exist_ok=True)
    vol_dir = os.path.join(out_dir, "volumes")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(vol_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    volumes, labels, masks = generate_phantoms(spec, n_per_class)
    manifest = DatasetManifest(task="ad_nc", seed=spec.seed,
                               base_dir=os.path.abspath(out_dir))
    for i in range(len(volumes)):
        name = f"phantom_{i:04d}"
        write_vraw(os.path.join(vol_dir, f"{name}.vraw"), volumes[i, 0])
        write_vraw(os.path.join(mask_dir, f"{name}.mask.vraw"),
                   masks[i].astype(np.float32))
        # manifest rows stay relative to the manifest's own directory
        manifest.entries.append(ManifestEntry(f"volumes/{name}.vraw", int(labels[i])))
    manifest = split_manifest(manifest, fractions, seed=spec.seed)
    manifest_path = os.path.join(out_dir, "manifest.tsv")
    save_manifest(manifest, manifest_path)
    return manifest_path


def mask_path_for(volume_path: str) -> str:
    """Path of the ground-truth mask written next to a phantom volume."""
    base = os.path.basename(volume_path).replace(".vraw", ".mask.vraw")
    return os.path.join(os.path.dirname(os.path.dirname(volume_path)), "masks", base)
