"""Case-level inference: preprocessing, cached encoding, per-prompt
decoding, and runtime recording.

The embedding cache is keyed by (case id, slice index) and validated by
a checksum of the preprocessed model input, so stale entries can never
leak across cases. Encoding happens outside the cache lock; a racing
duplicate computation is harmless because insertion is last-writer-wins
and results are deterministic.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bundle import BoxPrompt, CaseBundle
from .errors import FormatError, IntegrityError, ValidationError
from .model import ImageEmbedding, PromptNet, array_checksum, postprocess
from .preprocess import PadInfo, intensity_normalize, normalize_minmax, resize_longest_pad

DEFAULT_CACHE_CAPACITY = 512


@dataclass
class PredictionRecord:
    """Per-case inference output: one binary mask per prompted target."""

    case_id: str
    masks: dict[int, np.ndarray] = field(default_factory=dict)
    runtime_seconds: float = 0.0
    encoder_invocations: int = 0


class EmbeddingCache:
    """LRU store of encoder outputs keyed by (case id, slice index).

    Entries carry the checksum of the preprocessed input slice and are
    recomputed on mismatch. hits + misses counts every lookup;
    encoder_invocations always equals misses.
    """

    def __init__(self, capacity: int = DEFAULT_CACHE_CAPACITY):
        if capacity < 0:
            raise ValidationError("cache capacity must be >= 0")
        self.capacity = capacity
        self._entries: OrderedDict[tuple[str, int], ImageEmbedding] = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.encoder_invocations = 0

    def __len__(self) -> int:
        return len(self._entries)

    def lookup(self, key: tuple[str, int], checksum: str) -> ImageEmbedding | None:
        with self._lock:
            entry = self._entries.get(key)
            if entry is not None and entry.input_checksum == checksum:
                self._entries.move_to_end(key)
                self.hits += 1
                return entry
            self.misses += 1
            self.encoder_invocations += 1
            return None

    def store(self, key: tuple[str, int], emb: ImageEmbedding) -> None:
        if self.capacity == 0:
            return
        with self._lock:
            self._entries[key] = emb
            self._entries.move_to_end(key)
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)


def cache_get_or_compute(
    cache: EmbeddingCache,
    net: PromptNet,
    model_input: np.ndarray,
    case_id: str,
    z: int,
) -> tuple[ImageEmbedding, bool]:
    """Return the slice embedding and whether it was served from cache.

    The cache key is (case id, z); entries are validated against the
    checksum of the prepared model input, the same value the embedding
    itself records.
    """
    prepared = net.prepare_input(model_input)
    checksum = array_checksum(prepared)
    key = (case_id, int(z))
    cached = cache.lookup(key, checksum)
    if cached is not None:
        return cached, True
    emb = net.encode_image(prepared, source=key)
    cache.store(key, emb)
    return emb, False


def prepare_display(case: CaseBundle) -> np.ndarray:
    """Intensity-normalized uint8 view of the whole case (the paper policy)."""
    return intensity_normalize(case.image, case.modality, window=case.window)


def prepare_slice(display: np.ndarray, z: int | None) -> tuple[np.ndarray, PadInfo]:
    """Resize/pad/scale one display slice into model-input space."""
    slice_u8 = display if z is None else display[z]
    resized, pad = resize_longest_pad(slice_u8)
    return normalize_minmax(resized), pad


def segment_slice(
    net: PromptNet,
    display: np.ndarray,
    case_id: str,
    z: int | None,
    box2d: tuple[int, int, int, int],
    cache: EmbeddingCache,
) -> tuple[np.ndarray, bool]:
    """One (slice, box) inference; returns (mask at original size, cache_hit)."""
    model_input, pad = prepare_slice(display, z)
    emb, hit = cache_get_or_compute(cache, net, model_input, case_id, 0 if z is None else z)
    tokens = net.encode_box(box2d, pad)
    logits = net.decode_mask(emb, tokens)
    return postprocess(logits, pad), hit


def segment_2d(net: PromptNet, case: CaseBundle, cache: EmbeddingCache) -> PredictionRecord:
    """Segment every prompt of a 2D case; the image is encoded once."""
    if case.is_3d:
        raise ValidationError(f"case {case.id} is 3D; use segment_3d")
    if not case.prompts:
        raise ValidationError(f"case {case.id} has no prompts")
    start = time.perf_counter()
    before = cache.encoder_invocations
    display = prepare_display(case)
    record = PredictionRecord(case_id=case.id)
    for prompt in case.prompts:
        prompt.check_within(case.spatial_shape)
        mask, _ = segment_slice(net, display, case.id, None, prompt.box_2d(), cache)
        record.masks[prompt.target_label] = mask
    record.encoder_invocations = cache.encoder_invocations - before
    record.runtime_seconds = time.perf_counter() - start
    return record


def segment_3d(
    net: PromptNet, case: CaseBundle, box3d: BoxPrompt, cache: EmbeddingCache
) -> PredictionRecord:
    """Segment one 3D box prompt slice by slice through the shared cache.

    The (x, y) projection of the box is applied on every slice in its
    half-open z range; slices outside the range stay background.
    """
    if not case.is_3d:
        raise ValidationError(f"case {case.id} is not 3D")
    if not box3d.is_3d:
        raise ValidationError("segment_3d needs a 3D box prompt")
    box3d.check_within(case.spatial_shape)
    z0, z1 = box3d.z_range()
    if z1 <= z0:
        raise ValidationError(f"empty z range [{z0}, {z1})")
    start = time.perf_counter()
    before = cache.encoder_invocations
    display = prepare_display(case)
    volume = np.zeros(case.spatial_shape, dtype=bool)
    box2d = box3d.box_2d()
    for z in range(z0, z1):
        volume[z], _ = segment_slice(net, display, case.id, z, box2d, cache)
    record = PredictionRecord(case_id=case.id, masks={box3d.target_label: volume})
    record.encoder_invocations = cache.encoder_invocations - before
    record.runtime_seconds = time.perf_counter() - start
    return record


def run_case(
    net: PromptNet,
    case: CaseBundle,
    cache: EmbeddingCache | None = None,
    clock=time.perf_counter,
) -> PredictionRecord:
    """Full pipeline for one case, timed with a monotonic clock.

    Weight loading is excluded by construction (the net is an argument);
    preprocessing, encoding, decoding, and postprocessing are included.
    """
    if cache is None:
        cache = EmbeddingCache()
    start = clock()
    before = cache.encoder_invocations
    if case.is_3d:
        record = PredictionRecord(case_id=case.id)
        if not case.prompts:
            raise ValidationError(f"case {case.id} has no prompts")
        for prompt in case.prompts:
            part = segment_3d(net, case, prompt, cache)
            record.masks.update(part.masks)
    else:
        record = segment_2d(net, case, cache)
    record.encoder_invocations = cache.encoder_invocations - before
    record.runtime_seconds = clock() - start
    return record


# ----------------------------------------------------------------------
# prediction persistence (mask blobs + record.json)


def save_prediction(record: PredictionRecord, path: str | Path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    masks_meta = {}
    for label, mask in sorted(record.masks.items()):
        data = np.ascontiguousarray(mask.astype("<u1")).tobytes()
        name = f"mask_{label}.bin"
        (root / name).write_bytes(data)
        masks_meta[str(label)] = {
            "file": name,
            "shape": list(mask.shape),
            "sha256": hashlib.sha256(data).hexdigest(),
        }
    payload = {
        "case_id": record.case_id,
        "runtime_seconds": record.runtime_seconds,
        "encoder_invocations": record.encoder_invocations,
        "masks": masks_meta,
    }
    (root / "record.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_prediction(path: str | Path) -> PredictionRecord:
    root = Path(path)
    record_path = root / "record.json"
    if not record_path.exists():
        raise FormatError(f"missing record.json in {root}")
    payload = json.loads(record_path.read_text())
    record = PredictionRecord(
        case_id=payload["case_id"],
        runtime_seconds=float(payload["runtime_seconds"]),
        encoder_invocations=int(payload["encoder_invocations"]),
    )
    for label, meta in payload["masks"].items():
        data = (root / meta["file"]).read_bytes()
        if hashlib.sha256(data).hexdigest() != meta["sha256"]:
            raise IntegrityError(f"mask blob {meta['file']} checksum mismatch")
        shape = tuple(meta["shape"])
        record.masks[int(label)] = np.frombuffer(data, dtype="<u1").reshape(shape).astype(bool)
    return record
