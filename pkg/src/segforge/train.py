"""Two-stage training (embedding distillation, then end-to-end
fine-tuning) and synthetic toy-data generation.

Both stages use AdamW at the published settings (lr 5e-5, weight decay
0.01, batch size 8) with flip augmentation. Distillation matches the
student encoder's embedding grid to a frozen teacher under MSE and stops
on a loss plateau; fine-tuning trains the whole model under Dice + BCE
and stops when the epoch-mean loss falls below a threshold.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bundle import BoxPrompt, CaseBundle, InstanceMask, boxes_from_instances, semantic_to_instances
from .errors import ValidationError
from .infer import EmbeddingCache, segment_2d
from .metrics import dsc
from .model import PromptNet
from .nn.losses import bce_loss, dice_loss, mse_loss
from .nn.optim import AdamW
from .preprocess import bilinear_resize, normalize_minmax, random_flip, resize_longest_pad


@dataclass
class TrainConfig:
    stage: str = "finetune"  # "distill" | "finetune"
    lr: float = 5e-5
    weight_decay: float = 0.01
    batch_size: int = 8
    max_epochs: int = 1000
    patience: int = 20  # distill plateau: epochs without >= min_delta improvement
    min_delta: float = 1e-6
    finetune_stop_loss: float = 0.005
    flip_p: float = 0.5
    jitter: int = 5
    seed: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        if self.stage not in ("distill", "finetune"):
            raise ValidationError(f"unknown stage {self.stage!r}")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValidationError("lr must be > 0")


@dataclass
class ToySample:
    image: np.ndarray  # uint8 (S, S)
    mask: np.ndarray  # int32 instance labels
    boxes: list[BoxPrompt]


@dataclass
class ToyDataset:
    samples: list[ToySample] = field(default_factory=list)
    size: int = 256
    seed: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    def as_cases(self, prefix: str = "toy", modality: str = "US") -> list[CaseBundle]:
        return [
            CaseBundle(
                id=f"{prefix}_{i:04d}",
                modality=modality,
                image=s.image,
                spacing=(1.0, 1.0),
                reference=s.mask,
                prompts=list(s.boxes),
            )
            for i, s in enumerate(self.samples)
        ]


def _paint_shapes(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Render 1-3 disjoint anti-aliased shapes; returns (float image, exact mask)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    background = rng.uniform(40.0, 90.0)
    image = np.full((size, size), background)
    mask = np.zeros((size, size), dtype=np.int32)
    placed: list[tuple[float, float, float]] = []  # (cy, cx, radius)
    n_shapes = int(rng.integers(1, 4))
    label = 0
    for _ in range(n_shapes):
        for _attempt in range(50):
            a = rng.uniform(0.05, 0.18) * size
            b = rng.uniform(0.05, 0.18) * size
            r = max(a, b)
            cx = rng.uniform(r + 2, size - r - 2)
            cy = rng.uniform(r + 2, size - r - 2)
            if all(np.hypot(cy - py, cx - px) > r + pr + 4 for py, px, pr in placed):
                break
        else:
            continue
        placed.append((cy, cx, r))
        label += 1
        contrast = rng.uniform(60.0, 140.0) * (1 if rng.random() < 0.5 else -1)
        if rng.random() < 0.5:
            rho = np.sqrt(((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2)
            coverage = np.clip(0.5 - (rho - 1.0) * min(a, b), 0.0, 1.0)
            inside = rho <= 1.0
        else:
            x0, x1 = cx - a, cx + a
            y0, y1 = cy - b, cy + b
            coverage = (
                np.clip(np.minimum(xx - x0 + 0.5, x1 - xx + 0.5), 0, 1)
                * np.clip(np.minimum(yy - y0 + 0.5, y1 - yy + 0.5), 0, 1)
            )
            inside = (xx >= np.ceil(x0)) & (xx < np.floor(x1)) & (yy >= np.ceil(y0)) & (yy < np.floor(y1))
        image += contrast * coverage
        mask[inside] = label
    return image, mask


def make_toy_dataset(
    n: int, seed: int = 0, size: int = 256, noise: float = 4.0
) -> ToyDataset:
    """Deterministic synthetic 2D dataset; sample i depends only on (seed, i)."""
    if n < 1:
        raise ValidationError("need n >= 1")
    samples = []
    for i in range(n):
        rng = np.random.default_rng((seed, i))
        while True:
            image, mask = _paint_shapes(rng, size)
            if mask.any():
                break
        image += rng.normal(0.0, noise, image.shape)
        image_u8 = np.clip(np.rint(image), 0, 255).astype(np.uint8)
        inst = semantic_to_instances(mask)
        boxes = boxes_from_instances(inst, jitter=0)
        samples.append(ToySample(image=image_u8, mask=inst.labels, boxes=boxes))
    return ToyDataset(samples=samples, size=size, seed=seed)


def make_toy_volume(n_slices: int, seed: int = 0, size: int = 256) -> CaseBundle:
    """A synthetic 3D case: one ellipsoid-ish blob spanning all slices."""
    rng = np.random.default_rng(seed)
    volume = np.zeros((n_slices, size, size), dtype=np.uint8)
    mask = np.zeros((n_slices, size, size), dtype=np.int32)
    cy, cx = size * 0.5, size * 0.5
    base_r = size * 0.15
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for z in range(n_slices):
        zfrac = abs(z - (n_slices - 1) / 2.0) / max(1.0, n_slices / 2.0)
        r = base_r * np.sqrt(max(0.05, 1.0 - zfrac**2))
        rho = np.hypot(yy - cy, xx - cx) / r
        slice_img = 60.0 + 120.0 * np.clip(0.5 - (rho - 1.0) * r, 0.0, 1.0)
        slice_img += rng.normal(0.0, 4.0, slice_img.shape)
        volume[z] = np.clip(np.rint(slice_img), 0, 255).astype(np.uint8)
        mask[z][rho <= 1.0] = 1
    boxes = boxes_from_instances(InstanceMask(mask, 1), jitter=0)
    return CaseBundle(
        id=f"toyvol_{seed}",
        modality="MRI",
        image=volume,
        spacing=(2.5, 1.0, 1.0),
        reference=mask,
        prompts=boxes,
    )


def _to_model_batch(images_u8: list[np.ndarray], size: int) -> np.ndarray:
    """uint8 slices -> (N, size, size, 3) float32 in [0, 1], resizing as needed."""
    prepared = []
    for img in images_u8:
        if img.shape[:2] != (size, size):
            img, _ = resize_longest_pad(img, size)
        prepared.append(normalize_minmax(img))
    batch = np.stack(prepared)
    return np.repeat(batch[..., None], 3, axis=-1)


def write_loss_csv(history: list[tuple[int, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in history:
            writer.writerow([step, repr(loss)])


# integer tags namespace the derived rng streams (seed material must be ints)
_TAG_EPOCH, _TAG_FLIP, _TAG_AUG = 1, 2, 3


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng((seed, _TAG_EPOCH, epoch)).permutation(n)


def distill(
    teacher: PromptNet,
    student: PromptNet,
    data: ToyDataset,
    cfg: TrainConfig,
) -> tuple[PromptNet, list[tuple[int, float]]]:
    """Match the student's embedding grid to the frozen teacher under MSE.

    Only student encoder parameters update; stops at max_epochs, max_steps,
    or a plateau of the epoch-mean loss (no improvement >= min_delta for
    cfg.patience epochs).
    """
    if teacher.config.grid != student.config.grid or (
        teacher.config.embed_dim != student.config.embed_dim
    ):
        raise ValidationError(
            "teacher and student must share the embedding grid and dimension"
        )
    if len(data) == 0:
        raise ValidationError("empty dataset")
    opt = AdamW(student.encoder_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    history: list[tuple[int, float]] = []
    best = np.inf
    stall = 0
    step = 0
    for epoch in range(cfg.max_epochs):
        order = _epoch_order(len(data), cfg.seed, epoch)
        epoch_losses = []
        for lo in range(0, len(order), cfg.batch_size):
            idxs = order[lo : lo + cfg.batch_size]
            images = []
            for idx in idxs:
                sample = data.samples[idx]
                rng = np.random.default_rng((cfg.seed, _TAG_FLIP, epoch, int(idx)))
                img, _, _ = random_flip(sample.image, sample.mask, None, cfg.flip_p, rng)
                images.append(img)
            x = _to_model_batch(images, student.config.input_size)
            target = teacher.encode_batch(x)
            grids = student.encode_batch(x)
            loss, grad = mse_loss(grids, target)
            step += 1
            history.append((step, loss))
            epoch_losses.append(loss)
            if loss == 0.0:
                # exact match: the gradient is zero and the loss cannot
                # decrease, so stop before weight decay disturbs the student
                return student, history
            student.zero_grad()
            student.encode_backward(grad)
            opt.step({f"encoder.{n}": g for n, g in student.encoder.named_grads()})
            if cfg.max_steps is not None and step >= cfg.max_steps:
                return student, history
        epoch_mean = float(np.mean(epoch_losses))
        if best - epoch_mean >= cfg.min_delta:
            best = epoch_mean
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break
    return student, history


def _jitter_box(box: BoxPrompt, jitter: int, extent: tuple[int, int], rng) -> BoxPrompt:
    if jitter <= 0:
        return box
    h, w = extent
    x0, y0, x1, y1 = box.box_2d()
    x0 = int(np.clip(x0 + rng.integers(-jitter, jitter + 1), 0, w - 1))
    x1 = int(np.clip(x1 + rng.integers(-jitter, jitter + 1), x0 + 1, w))
    y0 = int(np.clip(y0 + rng.integers(-jitter, jitter + 1), 0, h - 1))
    y1 = int(np.clip(y1 + rng.integers(-jitter, jitter + 1), y0 + 1, h))
    return BoxPrompt(box.target_label, (x0, y0, x1, y1))


def finetune(
    net: PromptNet,
    data: ToyDataset,
    cfg: TrainConfig,
) -> tuple[PromptNet, list[tuple[int, float]]]:
    """Train the whole model (encoder, prompt embeddings, decoder) with
    per-prompt supervision under unweighted Dice + BCE."""
    if len(data) == 0:
        raise ValidationError("empty dataset")
    pairs = [
        (i, box) for i, sample in enumerate(data.samples) for box in sample.boxes
    ]
    if not pairs:
        raise ValidationError("dataset has no prompts")
    opt = AdamW(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    size = net.config.input_size
    history: list[tuple[int, float]] = []
    step = 0
    for epoch in range(cfg.max_epochs):
        order = _epoch_order(len(pairs), cfg.seed, epoch)
        epoch_losses = []
        for lo in range(0, len(order), cfg.batch_size):
            idxs = order[lo : lo + cfg.batch_size]
            images, tokens, targets = [], [], []
            for idx in idxs:
                sample_idx, box = pairs[idx]
                sample = data.samples[sample_idx]
                rng = np.random.default_rng((cfg.seed, _TAG_AUG, epoch, int(idx)))
                binary = (sample.mask == box.target_label).astype(np.float32)
                img, target, fbox = random_flip(sample.image, binary, box, cfg.flip_p, rng)
                fbox = _jitter_box(fbox, cfg.jitter, img.shape[:2], rng)
                resized, pad = resize_longest_pad(img)
                if img.shape[:2] == (size, size):
                    images.append(img)
                else:
                    images.append(np.rint(resized).astype(np.uint8))
                    target = (
                        np.pad(
                            bilinear_resize(target, pad.resized_h, pad.resized_w),
                            ((0, pad.pad_bottom), (0, pad.pad_right)),
                        )
                        > 0.5
                    ).astype(np.float32)
                tokens.append(net.encode_box(fbox, pad))
                targets.append(target)
            x = _to_model_batch(images, size)
            grids = net.encode_batch(x)
            logits = net.decode_batch(grids, np.stack(tokens))
            target_arr = np.stack(targets)
            loss_d, grad_d = dice_loss(logits, target_arr)
            loss_b, grad_b = bce_loss(logits, target_arr)
            loss = loss_d + loss_b
            net.zero_grad()
            g_grids, g_tokens = net.decode_backward(grad_d + grad_b)
            net.bank.acc("corner", g_tokens.sum(axis=0))
            net.encode_backward(g_grids)
            opt.step(net.gradients())
            step += 1
            history.append((step, loss))
            epoch_losses.append(loss)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                return net, history
        if float(np.mean(epoch_losses)) < cfg.finetune_stop_loss:
            break
    return net, history


def toy_dsc(net: PromptNet, data: ToyDataset) -> float:
    """Mean per-target DSC of tight-box prompting over a toy dataset."""
    scores = []
    for case in data.as_cases():
        record = segment_2d(net, case, EmbeddingCache(capacity=1))
        for label, pred in record.masks.items():
            scores.append(dsc(case.reference == label, pred))
    return float(np.mean(scores))
