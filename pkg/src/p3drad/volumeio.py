"""Volumetric data model, the ``.vol`` container and condition-tensor assembly.

A ``.vol`` file is laid out as::

    b"P3DVOL01" | uint32 big-endian header length | UTF-8 JSON header | payload

The header carries ``dims`` (D, H, W), ``spacing`` in mm, ``dtype`` (always
``"float32le"``) and ``kind`` (``image``, ``mask`` or ``field``). The payload is
raw little-endian float32 in [d][h][w] order. Masks are stored as 0.0/1.0.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

MAGIC = b"P3DVOL01"
PAYLOAD_DTYPE = np.dtype("<f4")
KINDS = ("image", "mask", "field")

# Fixed public channel order of the network input.
CHANNELS = ("csf1", "csf2", "m1", "m2", "im1", "im2", "z1", "z2")

# Names of the seven per-subject volumes, as used in manifests.
SAMPLE_VOLUMES = (
    "img_t1",
    "img_t2",
    "lesion_mask_t1",
    "lesion_mask_t2",
    "csf_t1",
    "csf_t2",
    "brain_mask",
)

MANIFEST_VERSION = 1


class VolumeFormatError(ValueError):
    """Raised for malformed ``.vol`` files or invalid volume contents."""


class ShapeMismatchError(ValueError):
    """Raised when volumes that must share dims do not."""


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Dense scalar field over a D x H x W grid.

    ``data`` is stored as a read-only float32 array. ``kind`` decides which
    invariants are enforced: masks must be binary, images must lie in [0, 1],
    fields (diffusion states, noise) only need to be finite.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "image"

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise VolumeFormatError(f"volume data must be 3-D and non-empty, got shape {arr.shape}")
        if self.kind not in KINDS:
            raise VolumeFormatError(f"unknown volume kind {self.kind!r}")
        if not np.isfinite(arr).all():
            raise VolumeFormatError("volume contains non-finite values")
        if self.kind == "mask" and not np.isin(arr, (0.0, 1.0)).all():
            raise VolumeFormatError("mask volume must contain only 0 and 1")
        if self.kind == "image" and (arr.min() < 0.0 or arr.max() > 1.0):
            raise VolumeFormatError("image volume must be normalized to [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def with_data(self, data, kind: str | None = None) -> "Volume3D":
        return Volume3D(data, self.spacing, kind or self.kind)

    def crop_axial(self, start: int, stop: int) -> "Volume3D":
        return Volume3D(self.data[start:stop], self.spacing, self.kind)

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.spacing == other.spacing
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


def mask_volume(data, spacing=(1.0, 1.0, 1.0)) -> Volume3D:
    return Volume3D(np.asarray(data, dtype=np.float32), spacing, "mask")


@dataclass(frozen=True, eq=False)
class LongitudinalSample:
    """Two co-registered timepoints with masks, CSF priors and healthy truth."""

    img_t1: Volume3D
    img_t2: Volume3D
    lesion_mask_t1: Volume3D
    lesion_mask_t2: Volume3D
    csf_t1: Volume3D
    csf_t2: Volume3D
    brain_mask: Volume3D
    subject_id: str = "subject"
    seed: int = 0

    def __post_init__(self):
        dims = {getattr(self, name).dims for name in SAMPLE_VOLUMES}
        if len(dims) != 1:
            raise ShapeMismatchError(f"sample volumes have differing dims: {sorted(dims)}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.img_t1.dims

    def volumes(self) -> dict[str, Volume3D]:
        return {name: getattr(self, name) for name in SAMPLE_VOLUMES}

    def replace(self, **changes) -> "LongitudinalSample":
        fields_ = {**self.volumes(), "subject_id": self.subject_id, "seed": self.seed}
        fields_.update(changes)
        return LongitudinalSample(**fields_)

    def crop_axial(self, start: int, stop: int) -> "LongitudinalSample":
        return self.replace(**{k: v.crop_axial(start, stop) for k, v in self.volumes().items()})

    def validate(self) -> None:
        """Check the anatomical invariants; raise ``ValueError`` on violation."""
        for name in SAMPLE_VOLUMES[2:]:
            if getattr(self, name).kind != "mask":
                raise ValueError(f"{name} must be a mask volume")
        brain = self.brain_mask.data > 0
        csf = (self.csf_t1.data > 0) | (self.csf_t2.data > 0)
        for name in ("lesion_mask_t1", "lesion_mask_t2"):
            lesion = getattr(self, name).data > 0
            if (lesion & ~brain).any():
                raise ValueError(f"{name} extends outside the brain mask")
            if (lesion & csf).any():
                raise ValueError(f"{name} overlaps a CSF mask")

    def __eq__(self, other):
        if not isinstance(other, LongitudinalSample):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.seed == other.seed
            and all(getattr(self, n) == getattr(other, n) for n in SAMPLE_VOLUMES)
        )

    __hash__ = None


@dataclass(frozen=True)
class ConditionTensor:
    """The 8-channel network input in the order given by ``CHANNELS``."""

    channels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.channels.shape[1:])

    def channel(self, name: str) -> np.ndarray:
        return self.channels[CHANNELS.index(name)]

    def validate(self) -> None:
        """Intrinsic consistency check of the channel wiring.

        Catches channel permutations that mix kinds: prior and mask channels
        must be binary, masked images must vanish on their masks and lie in
        [0, 1]. Use ``check_condition`` for an exact check against a sample.
        """
        if self.channels.ndim != 4 or self.channels.shape[0] != len(CHANNELS):
            raise ValueError(f"expected (8, D, H, W) channels, got {self.channels.shape}")
        for name in ("csf1", "csf2", "m1", "m2"):
            if not np.isin(self.channel(name), (0.0, 1.0)).all():
                raise ValueError(f"channel {name} is not binary")
        for k in (1, 2):
            im, m = self.channel(f"im{k}"), self.channel(f"m{k}")
            if im.min() < 0.0 or im.max() > 1.0:
                raise ValueError(f"channel im{k} is outside [0, 1]")
            if np.any(im[m > 0] != 0.0):
                raise ValueError(f"channel im{k} is not zero-filled on m{k}")


class RegionIndex(NamedTuple):
    indices: np.ndarray
    bbox: tuple[tuple[int, int], tuple[int, int], tuple[int, int]] | None
    count: int


def _check_same_dims(*volumes: Volume3D) -> tuple[int, int, int]:
    dims = {v.dims for v in volumes}
    if len(dims) != 1:
        raise ShapeMismatchError(f"volumes have differing dims: {sorted(dims)}")
    return dims.pop()


def masked_image(img: Volume3D, mask: Volume3D) -> np.ndarray:
    """Return ``img * (1 - mask)`` with masked voxels set to exactly zero."""
    _check_same_dims(img, mask)
    return np.where(mask.data > 0, np.float32(0.0), img.data)


def condition_channels(sample: LongitudinalSample) -> np.ndarray:
    """The six conditioning channels (everything but the diffusion states), float32."""
    return np.stack(
        [
            sample.csf_t1.data,
            sample.csf_t2.data,
            sample.lesion_mask_t1.data,
            sample.lesion_mask_t2.data,
            masked_image(sample.img_t1, sample.lesion_mask_t1),
            masked_image(sample.img_t2, sample.lesion_mask_t2),
        ]
    ).astype(np.float32)


def assemble_condition(sample: LongitudinalSample, x_t1: Volume3D, x_t2: Volume3D) -> ConditionTensor:
    """Stack the conditioning channels with the current diffusion states."""
    _check_same_dims(sample.img_t1, x_t1, x_t2)
    states = np.stack([x_t1.data, x_t2.data]).astype(np.float32)
    return ConditionTensor(np.concatenate([condition_channels(sample), states]), sample.img_t1.spacing)


def check_condition(cond: ConditionTensor, sample: LongitudinalSample) -> None:
    """Raise ``ValueError`` unless the conditioning channels of ``cond`` match ``sample``."""
    cond.validate()
    expected = assemble_condition(
        sample,
        Volume3D(cond.channel("z1"), kind="field"),
        Volume3D(cond.channel("z2"), kind="field"),
    )
    for i, name in enumerate(CHANNELS[:6]):
        if not np.array_equal(cond.channels[i], expected.channels[i]):
            raise ValueError(f"channel {name} does not match the sample")


def masked_region_indices(mask: Volume3D) -> RegionIndex:
    """Sorted linear indices of mask voxels, their inclusive bounding box and count."""
    data = mask.data
    if not np.isin(data, (0.0, 1.0)).all():
        raise VolumeFormatError("masked_region_indices needs a binary mask")
    flat = np.flatnonzero(data.ravel() > 0)
    if flat.size == 0:
        return RegionIndex(flat, None, 0)
    coords = np.unravel_index(flat, data.shape)
    bbox = tuple((int(c.min()), int(c.max())) for c in coords)
    return RegionIndex(flat, bbox, int(flat.size))


def save_volume(v: Volume3D, path) -> None:
    header = {
        "dims": list(v.dims),
        "dtype": "float32le",
        "kind": v.kind,
        "spacing": list(v.spacing),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(v.data, dtype=PAYLOAD_DTYPE).tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack(">I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def load_volume(path) -> Volume3D:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic")
    offset = len(MAGIC)
    if len(raw) < offset + 4:
        raise VolumeFormatError(f"{path}: truncated header length")
    (header_len,) = struct.unpack(">I", raw[offset : offset + 4])
    offset += 4
    try:
        header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
        dims = tuple(int(n) for n in header["dims"])
        spacing = tuple(float(s) for s in header["spacing"])
        kind = header["kind"]
        dtype = header["dtype"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"{path}: malformed header ({exc})") from exc
    if dtype != "float32le":
        raise VolumeFormatError(f"{path}: unsupported dtype {dtype!r}")
    if len(dims) != 3 or min(dims) < 1 or len(spacing) != 3:
        raise VolumeFormatError(f"{path}: invalid dims {dims} or spacing {spacing}")
    payload = raw[offset + header_len :]
    expected = int(np.prod(dims)) * PAYLOAD_DTYPE.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload has {len(payload)} bytes, header dims {dims} need {expected}"
        )
    data = np.frombuffer(payload, dtype=PAYLOAD_DTYPE).reshape(dims)
    return Volume3D(data, spacing, kind)


def save_sample(sample: LongitudinalSample, directory) -> dict[str, str]:
    """Write the seven volumes of ``sample`` into ``directory``; return file names."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = {}
    for name, vol in sample.volumes().items():
        save_volume(vol, directory / f"{name}.vol")
        names[name] = f"{name}.vol"
    return names


def write_manifest(path, entries: list[dict], meta: dict | None = None) -> Path:
    """Write a dataset manifest. Entries hold ``subject_id``, ``seed`` and ``volumes``."""
    doc = {"version": MANIFEST_VERSION, "meta": meta or {}, "subjects": entries}
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


@dataclass
class Manifest:
    path: Path
    subjects: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def root(self) -> Path:
        return self.path.parent

    def __len__(self):
        return len(self.subjects)

    def load_sample(self, index: int) -> LongitudinalSample:
        entry = self.subjects[index]
        vols = {name: load_volume(self.root / rel) for name, rel in entry["volumes"].items()}
        missing = set(SAMPLE_VOLUMES) - set(vols)
        if missing:
            raise VolumeFormatError(f"manifest entry {entry['subject_id']} lacks {sorted(missing)}")
        return LongitudinalSample(**vols, subject_id=entry["subject_id"], seed=int(entry["seed"]))

    def samples(self) -> list[LongitudinalSample]:
        return [self.load_sample(i) for i in range(len(self))]


def read_manifest(path) -> Manifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("version") != MANIFEST_VERSION:
        raise VolumeFormatError(f"{path}: unsupported manifest version {doc.get('version')}")
    return Manifest(path, list(doc["subjects"]), dict(doc.get("meta", {})))
