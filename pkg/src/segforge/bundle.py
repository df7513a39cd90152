"""On-disk case format: images, instance masks, and box prompts.

A case bundle is a directory holding ``manifest.json``, raw little-endian
``image.bin``/``mask.bin`` blobs (C row-major), and an optional
``prompts.json``. Masks are instance-labeled: 0 is background and labels
form a contiguous set {1..K}.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError, IntegrityError, ValidationError

MODALITIES = (
    "CT",
    "MRI",
    "PET",
    "US",
    "XRay",
    "OCT",
    "Endoscopy",
    "Fundus",
    "Microscopy",
)

# image dtypes allowed in manifests; masks are always u16
_DTYPES = {"u8": "<u1", "u16": "<u2", "f32": "<f4"}
_MASK_DTYPE = "<u2"


@dataclass
class BoxPrompt:
    """Axis-aligned box prompt with half-open upper bounds.

    2D boxes are (x_min, y_min, x_max, y_max); 3D boxes add z as
    (x_min, y_min, z_min, x_max, y_max, z_max). x indexes the last
    array axis (W), y the H axis, z the D axis.
    """

    target_label: int
    box: tuple[int, ...]

    def __post_init__(self):
        self.box = tuple(int(v) for v in self.box)
        if len(self.box) not in (4, 6):
            raise ValidationError(f"box must have 4 or 6 coordinates, got {len(self.box)}")
        if self.target_label < 1:
            raise ValidationError(f"target_label must be positive, got {self.target_label}")
        lo, hi = self.lower(), self.upper()
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValidationError(f"box min must be < max per axis: {self.box}")

    @property
    def is_3d(self) -> bool:
        return len(self.box) == 6

    def lower(self) -> tuple[int, ...]:
        n = len(self.box) // 2
        return self.box[:n]

    def upper(self) -> tuple[int, ...]:
        n = len(self.box) // 2
        return self.box[n:]

    def box_2d(self) -> tuple[int, int, int, int]:
        """The (x, y) extent, dropping z for 3D boxes."""
        if self.is_3d:
            x0, y0, _, x1, y1, _ = self.box
            return (x0, y0, x1, y1)
        return self.box  # type: ignore[return-value]

    def z_range(self) -> tuple[int, int]:
        if not self.is_3d:
            raise ValidationError("2D box has no z range")
        return (self.box[2], self.box[5])

    def check_within(self, spatial_shape: tuple[int, ...]) -> None:
        """Raise if the box exceeds the image extent (x,y[,z] vs W,H[,D])."""
        if self.is_3d:
            extents = (spatial_shape[2], spatial_shape[1], spatial_shape[0])
        else:
            extents = (spatial_shape[1], spatial_shape[0])
        if len(spatial_shape) != (3 if self.is_3d else 2):
            raise ValidationError(
                f"{len(self.box) // 2}D box does not match {len(spatial_shape)}D image"
            )
        for lo, hi, ext in zip(self.lower(), self.upper(), extents):
            if lo < 0 or hi > ext:
                raise ValidationError(f"box {self.box} outside image extent {spatial_shape}")


@dataclass
class InstanceMask:
    """Instance labeling of a mask: labels 1..count, 0 background."""

    labels: np.ndarray
    count: int


@dataclass
class CaseBundle:
    """One test case: image, spacing, instance reference mask, prompts."""

    id: str
    modality: str
    image: np.ndarray
    spacing: tuple[float, ...]
    reference: np.ndarray
    prompts: list[BoxPrompt] = field(default_factory=list)
    window: str | None = None  # CT window preset name, if any

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        """Image shape without a trailing RGB channel axis."""
        if self.image.ndim == 3 and self.image.shape[-1] == 3:
            return self.image.shape[:2]
        return self.image.shape

    @property
    def is_3d(self) -> bool:
        return self.image.ndim == 3 and self.image.shape[-1] != 3

    @property
    def num_instances(self) -> int:
        return int(self.reference.max(initial=0))

    def validate(self) -> None:
        if self.modality not in MODALITIES:
            raise ValidationError(f"unknown modality {self.modality!r}")
        if self.reference.shape != self.spatial_shape:
            raise ValidationError(
                f"mask shape {self.reference.shape} != image spatial shape {self.spatial_shape}"
            )
        if len(self.spacing) != len(self.spatial_shape):
            raise ValidationError("spacing length must match spatial dimensionality")
        if any(s <= 0 for s in self.spacing):
            raise ValidationError(f"spacing must be strictly positive: {self.spacing}")
        labels = np.unique(self.reference)
        if labels.size and labels[0] < 0:
            raise ValidationError("mask labels must be non-negative")
        fg = labels[labels > 0]
        k = int(fg[-1]) if fg.size else 0
        if fg.size != k:
            raise ValidationError(f"mask labels must be contiguous 1..K, got {fg.tolist()}")
        for p in self.prompts:
            p.check_within(self.spatial_shape)
            if p.target_label > k:
                raise ValidationError(f"prompt targets label {p.target_label} > K={k}")


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _dtype_name(arr: np.ndarray) -> str:
    for name, code in _DTYPES.items():
        if arr.dtype == np.dtype(code):
            return name
    raise ValidationError(f"image dtype {arr.dtype} not one of {list(_DTYPES)}")


def _axis_order(image: np.ndarray) -> str:
    if image.ndim == 2:
        return "HW"
    if image.ndim == 3 and image.shape[-1] == 3:
        return "HWC"
    if image.ndim == 3:
        return "DHW"
    raise ValidationError(f"unsupported image rank {image.ndim}")


def save_case(case: CaseBundle, path: str | Path) -> None:
    """Write a validated bundle; load_case(save_case(c)) round-trips bit-exactly."""
    case.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    image = np.ascontiguousarray(case.image)
    mask = np.ascontiguousarray(case.reference.astype(_MASK_DTYPE))
    image_bytes = image.astype(image.dtype.newbyteorder("<")).tobytes()
    mask_bytes = mask.tobytes()
    manifest = {
        "id": case.id,
        "modality": case.modality,
        "dtype": _dtype_name(image),
        "shape": list(image.shape),
        "axis_order": _axis_order(image),
        "spacing": [float(s) for s in case.spacing],
        "checksums": {"image.bin": _sha256(image_bytes), "mask.bin": _sha256(mask_bytes)},
    }
    if case.window is not None:
        manifest["window"] = case.window
    (root / "image.bin").write_bytes(image_bytes)
    (root / "mask.bin").write_bytes(mask_bytes)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    prompts_path = root / "prompts.json"
    if case.prompts:
        payload = [{"label": p.target_label, "box": list(p.box)} for p in case.prompts]
        prompts_path.write_text(json.dumps(payload, indent=2))
    elif prompts_path.exists():
        prompts_path.unlink()


def load_case(path: str | Path, auto_prompts: bool = False) -> CaseBundle:
    """Read and validate a bundle directory.

    With ``auto_prompts``, a bundle without prompts.json gets one tight
    (jitter-0) box per reference instance.
    """
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"missing manifest.json in {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt manifest in {root}: {e}") from e
    for key in ("id", "modality", "dtype", "shape", "axis_order", "spacing", "checksums"):
        if key not in manifest:
            raise FormatError(f"manifest missing key {key!r}")
    if manifest["dtype"] not in _DTYPES:
        raise FormatError(f"manifest dtype {manifest['dtype']!r} not one of {list(_DTYPES)}")

    shape = tuple(int(v) for v in manifest["shape"])
    image_bytes = (root / "image.bin").read_bytes()
    mask_bytes = (root / "mask.bin").read_bytes()
    for name, data in (("image.bin", image_bytes), ("mask.bin", mask_bytes)):
        want = manifest["checksums"].get(name)
        got = _sha256(data)
        if want != got:
            raise IntegrityError(f"{name} checksum mismatch: manifest {want}, blob {got}")

    image_dtype = np.dtype(_DTYPES[manifest["dtype"]])
    n_expected = int(np.prod(shape))
    if len(image_bytes) != n_expected * image_dtype.itemsize:
        raise ValidationError(
            f"image.bin holds {len(image_bytes) // image_dtype.itemsize} values, "
            f"manifest shape {shape} needs {n_expected}"
        )
    image = np.frombuffer(image_bytes, dtype=image_dtype).reshape(shape)

    spatial = shape[:2] if manifest["axis_order"] == "HWC" else shape
    n_mask = int(np.prod(spatial))
    if len(mask_bytes) != n_mask * np.dtype(_MASK_DTYPE).itemsize:
        raise ValidationError(
            f"mask.bin holds {len(mask_bytes) // 2} values, expected {n_mask}"
        )
    mask = np.frombuffer(mask_bytes, dtype=_MASK_DTYPE).reshape(spatial)

    prompts: list[BoxPrompt] = []
    prompts_path = root / "prompts.json"
    if prompts_path.exists():
        try:
            payload = json.loads(prompts_path.read_text())
        except json.JSONDecodeError as e:
            raise FormatError(f"corrupt prompts.json in {root}: {e}") from e
        prompts = [BoxPrompt(int(p["label"]), tuple(p["box"])) for p in payload]

    case = CaseBundle(
        id=str(manifest["id"]),
        modality=str(manifest["modality"]),
        image=image,
        spacing=tuple(float(s) for s in manifest["spacing"]),
        reference=mask.astype(np.int32),
        prompts=prompts,
        window=manifest.get("window"),
    )
    case.validate()
    if auto_prompts and not case.prompts:
        inst = InstanceMask(case.reference, case.num_instances)
        case.prompts = boxes_from_instances(inst, jitter=0, seed=0)
    return case


def semantic_to_instances(mask: np.ndarray, connectivity: str = "faces") -> InstanceMask:
    """Split every foreground class into connected components.

    Output labels are 1..K assigned by the scan-order position of each
    component's first voxel; idempotent on its own output.
    """
    if connectivity not in ("faces", "faces+edges"):
        raise ValidationError(f"unknown connectivity {connectivity!r}")
    mask = np.asarray(mask)
    if mask.size and mask.min() < 0:
        raise ValidationError("mask values must be non-negative")
    structure = ndimage.generate_binary_structure(
        mask.ndim, 1 if connectivity == "faces" else 2
    )
    out = np.zeros(mask.shape, dtype=np.int32)
    components: list[tuple[int, np.ndarray]] = []  # (first voxel flat index, bool mask)
    for value in np.unique(mask):
        if value == 0:
            continue
        labeled, n = ndimage.label(mask == value, structure=structure)
        for comp in range(1, n + 1):
            where = labeled == comp
            first = int(np.flatnonzero(where.ravel())[0])
            components.append((first, where))
    components.sort(key=lambda item: item[0])
    for new_label, (_, where) in enumerate(components, start=1):
        out[where] = new_label
    return InstanceMask(labels=out, count=len(components))


def boxes_from_instances(
    inst: InstanceMask, jitter: int = 0, seed: int = 0
) -> list[BoxPrompt]:
    """One box per instance: the tight bounds, optionally jittered.

    Each bound is shifted by a uniform integer in [-jitter, +jitter] and
    clamped so the box stays inside the extent and keeps min < max.
    """
    if jitter < 0:
        raise ValidationError("jitter must be non-negative")
    labels = inst.labels
    rng = np.random.default_rng(seed)
    slices = ndimage.find_objects(labels)
    boxes: list[BoxPrompt] = []
    for k in range(1, inst.count + 1):
        sl = slices[k - 1]
        if sl is None:
            raise ValidationError(f"instance label {k} has no voxels")
        # array axes are (D,)H,W; box axes are x,y(,z) i.e. reversed
        lows = [s.start for s in reversed(sl)]
        highs = [s.stop for s in reversed(sl)]
        extents = list(reversed(labels.shape))
        if jitter:
            for i in range(len(lows)):
                lows[i] = int(np.clip(lows[i] + rng.integers(-jitter, jitter + 1), 0, extents[i] - 1))
                highs[i] = int(np.clip(highs[i] + rng.integers(-jitter, jitter + 1), lows[i] + 1, extents[i]))
        if len(lows) == 2:
            box = (lows[0], lows[1], highs[0], highs[1])
        else:
            # reversed(sl) yields x,y,z lows for a (D,H,W) array
            box = (lows[0], lows[1], lows[2], highs[0], highs[1], highs[2])
        boxes.append(BoxPrompt(target_label=k, box=box))
    return boxes
