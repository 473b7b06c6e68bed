"""Synthetic labeled 3D registration pairs and the MSV1 volume file format.

A scene is a set of textured ellipsoids on a background. The moving image is
the rendered scene; the fixed image is the moving image warped by a smooth sum
of Gaussian-bump displacements, so the true field is known for every pair.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .fields import njd_percent, warp_labels, warp_volume
from .objectives import hard_dice
from .tensor import DTYPE


class SpecError(ValueError):
    pass


@dataclass
class SceneSpec:
    grid: int = 16
    num_classes: int = 3
    # per-class base intensity, background first
    intensities: list[float] = field(default_factory=lambda: [0.1, 0.85, 0.55, 0.2])
    semi_axis_range: tuple[float, float] = (2.5, 4.5)
    texture_amplitude: float = 0.08
    noise_std: float = 0.03
    # Gaussian blur (voxels) applied to the rendered intensities
    smoothing: float = 0.0
    bumps: int = 4
    amplitude: float = 2.5
    bump_width: float = 3.5
    margin: int = 2
    seed: int = 0

    def __post_init__(self):
        self.semi_axis_range = tuple(self.semi_axis_range)
        self.validate()

    def validate(self) -> None:
        if self.grid < 4:
            raise SpecError(f"grid must be >= 4, got {self.grid}")
        if self.num_classes < 1:
            raise SpecError("need at least one foreground class")
        if len(self.intensities) != self.num_classes + 1:
            raise SpecError(f"{len(self.intensities)} intensities for {self.num_classes} classes "
                            "plus background")
        lo, hi = self.semi_axis_range
        if not 0 < lo <= hi:
            raise SpecError(f"bad semi-axis range {self.semi_axis_range}")
        if 2 * (hi + self.margin) > self.grid:
            raise SpecError(f"ellipsoids with semi-axis {hi} and margin {self.margin} "
                            f"do not fit a {self.grid}^3 grid")
        if self.margin < 2:
            raise SpecError("shapes need a margin of at least 2 voxels")
        if self.amplitude < 0 or self.bump_width <= 0:
            raise SpecError("amplitude must be >= 0 and bump width > 0")
        if self.amplitude > self.bump_width:
            raise SpecError(f"amplitude {self.amplitude} exceeds bump width {self.bump_width}; "
                            "fields could fold")
        if self.noise_std < 0 or self.texture_amplitude < 0 or self.smoothing < 0:
            raise SpecError("noise, texture and smoothing must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["semi_axis_range"] = list(self.semi_axis_range)
        return d


def render_scene(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Intensity volume normalized to [0, 1] and its label map."""
    n = spec.grid
    grid = np.indices((n, n, n), dtype=DTYPE)
    labels = np.zeros((n, n, n), dtype=np.uint16)
    lo, hi = spec.semi_axis_range
    for k in range(1, spec.num_classes + 1):
        axes = rng.uniform(lo, hi, size=3)
        center = np.array([rng.uniform(spec.margin + a, n - 1 - spec.margin - a) for a in axes])
        r2 = sum(((grid[i] - center[i]) / axes[i]) ** 2 for i in range(3))
        labels[r2 <= 1.0] = k
    base = np.asarray(spec.intensities, dtype=DTYPE)[labels]
    # low-frequency multiplicative texture
    freq = rng.uniform(0.5, 1.5, size=3) * 2 * np.pi / n
    phase = rng.uniform(0, 2 * np.pi, size=3)
    texture = np.prod([np.cos(freq[i] * grid[i] + phase[i]) for i in range(3)], axis=0)
    img = base * (1.0 + spec.texture_amplitude * texture)
    if spec.smoothing > 0:
        img = gaussian_filter(img, spec.smoothing, mode="nearest")
    img = img + spec.noise_std * rng.standard_normal(img.shape)
    lo_v, hi_v = img.min(), img.max()
    img = (img - lo_v) / (hi_v - lo_v) if hi_v > lo_v else np.zeros_like(img)
    return img, labels


def bump_field(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Sum of Gaussian-bump displacements, shrunk until fold-free."""
    n = spec.grid
    grid = np.indices((n, n, n), dtype=DTYPE)
    u = np.zeros((3, n, n, n), dtype=DTYPE)
    for _ in range(spec.bumps):
        center = rng.uniform(0, n - 1, size=3)
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        mag = spec.amplitude * rng.uniform(0.5, 1.0)
        r2 = sum((grid[i] - center[i]) ** 2 for i in range(3))
        g = np.exp(-r2 / (2 * spec.bump_width ** 2))
        u += (mag * direction).reshape(3, 1, 1, 1) * g
    peak = np.abs(u).max()
    if peak > spec.amplitude > 0:
        u *= spec.amplitude / peak
    while njd_percent(u) > 0:
        u *= 0.8
    return u


@dataclass
class Pair:
    moving: np.ndarray
    fixed: np.ndarray
    moving_labels: np.ndarray
    fixed_labels: np.ndarray
    true_field: np.ndarray | None
    pair_id: str = ""


def generate_pair(spec: SceneSpec) -> Pair:
    """One seed-deterministic pair: moving scene, fixed = moving warped by a known field."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    img, labels = render_scene(spec, rng)
    u = bump_field(spec, rng)
    fixed = warp_volume(img, u, "trilinear")
    fixed_labels = warp_labels(labels, u)
    return Pair(img, fixed, labels, fixed_labels, u)


# ----------------------------------------------------------------------------
# MSV1 binary format:
#   "MSV1" | kind u8 | rank u8 | rank x u32 extents | row-major payload, little-endian
# kind 0 = intensity f64, 1 = labels u16, 2 = displacement field f64 with the
# spatial extents in the header and a (3, D, H, W) component-major payload.

MSV_MAGIC = b"MSV1"
KIND_INTENSITY, KIND_LABELS, KIND_FIELD = 0, 1, 2
_KIND_DTYPE = {KIND_INTENSITY: "<f8", KIND_LABELS: "<u2", KIND_FIELD: "<f8"}
_KIND_NAME = {KIND_INTENSITY: "intensity", KIND_LABELS: "labels", KIND_FIELD: "field"}
MAX_ELEMENTS = 1 << 31


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} at offset {offset}")


def encode_volume(array: np.ndarray, kind: int) -> bytes:
    array = np.asarray(array)
    if kind == KIND_FIELD:
        if array.ndim != 4 or array.shape[0] != 3:
            raise ValueError(f"field must be (3, D, H, W), got {array.shape}")
        extents = array.shape[1:]
    elif kind in (KIND_INTENSITY, KIND_LABELS):
        extents = array.shape
    else:
        raise ValueError(f"unknown kind {kind}")
    if kind == KIND_LABELS and array.size and (array.min() < 0 or array.max() > 0xFFFF):
        raise ValueError("labels must fit in u16")
    head = MSV_MAGIC + struct.pack("<BB", kind, len(extents)) + struct.pack(f"<{len(extents)}I", *extents)
    payload = np.ascontiguousarray(array.astype(_KIND_DTYPE[kind])).tobytes()
    return head + payload


def decode_volume(data: bytes, expect_kind: int | None = None) -> np.ndarray:
    if len(data) < 4 or data[:4] != MSV_MAGIC:
        raise FormatError("bad magic", 0)
    if len(data) < 6:
        raise FormatError("truncated header", len(data))
    kind, rank = struct.unpack_from("<BB", data, 4)
    if kind not in _KIND_DTYPE:
        raise FormatError(f"unknown kind {kind}", 4)
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"kind mismatch: file holds {_KIND_NAME[kind]}, "
                          f"expected {_KIND_NAME.get(expect_kind, expect_kind)}", 4)
    off = 6
    if len(data) < off + 4 * rank:
        raise FormatError("truncated extents", len(data))
    extents = struct.unpack_from(f"<{rank}I", data, off)
    count = 1
    for i, e in enumerate(extents):
        count *= e
        if e == 0 or count > MAX_ELEMENTS:
            raise FormatError("extent overflow", off + 4 * i)
    off += 4 * rank
    shape = ((3,) + tuple(extents)) if kind == KIND_FIELD else tuple(extents)
    dtype = np.dtype(_KIND_DTYPE[kind])
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(data) - off < nbytes:
        raise FormatError(f"truncated payload (need {nbytes} bytes, have {len(data) - off})", off)
    if len(data) - off > nbytes:
        raise FormatError("trailing bytes after payload", off + nbytes)
    arr = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=off).reshape(shape)
    return arr.astype(np.uint16 if kind == KIND_LABELS else DTYPE)


def write_volume(path, array: np.ndarray, kind: int) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_volume(array, kind))
    tmp.replace(path)


def read_volume(path, kind: int | None = None) -> np.ndarray:
    return decode_volume(Path(path).read_bytes(), kind)


# ----------------------------------------------------------------------------
# datasets

ROLES = {
    "moving": KIND_INTENSITY,
    "fixed": KIND_INTENSITY,
    "moving_labels": KIND_LABELS,
    "fixed_labels": KIND_LABELS,
    "true_field": KIND_FIELD,
}
SPLITS = ("unlabeled", "labeled", "val", "test")


def pair_seed(base_seed: int, split: str, index: int) -> int:
    """Stable per-pair seed derived from the dataset seed."""
    h = hashlib.sha256(f"{base_seed}:{split}:{index}".encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def write_dataset(out_dir, spec: SceneSpec, counts: dict[str, int]) -> dict:
    """Generate every split into ``out_dir`` and write ``manifest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for split in SPLITS:
        for i in range(counts.get(split, 0)):
            pid = f"{split}-{i:03d}"
            ps = SceneSpec(**{**spec.to_dict(), "seed": pair_seed(spec.seed, split, i)})
            pair = generate_pair(ps)
            files = {}
            for role, kind in ROLES.items():
                name = f"{pid}_{role}.msv"
                write_volume(out_dir / name, getattr(pair, role), kind)
                files[role] = name
            entries.append({
                "id": pid,
                "split": split,
                "files": files,
                "summary": {
                    "dice_identity": hard_dice(pair.fixed_labels, pair.moving_labels, spec.num_classes),
                    "dice_true_field": hard_dice(pair.fixed_labels,
                                                 warp_labels(pair.moving_labels, pair.true_field),
                                                 spec.num_classes),
                    "njd_true_field": njd_percent(pair.true_field),
                },
            })
    manifest = {"format": "MSV1", "spec": spec.to_dict(), "counts": dict(counts), "pairs": entries}
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    tmp.replace(out_dir / "manifest.json")
    return manifest


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    manifest = json.loads(path.read_text())
    for key in ("spec", "pairs"):
        if key not in manifest:
            raise FormatError(f"manifest missing {key!r}", 0)
    return manifest


def load_split(data_dir, split: str, manifest: dict | None = None) -> list[Pair]:
    data_dir = Path(data_dir)
    manifest = manifest or load_manifest(data_dir)
    pairs = []
    for entry in manifest["pairs"]:
        if entry["split"] != split:
            continue
        arrays = {role: read_volume(data_dir / entry["files"][role], kind) for role, kind in ROLES.items()}
        pairs.append(Pair(pair_id=entry["id"], **arrays))
    return pairs
