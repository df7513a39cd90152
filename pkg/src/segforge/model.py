"""The promptable segmentation network: image encoder, box prompt
encoder, and mask decoder, plus weight serialization.

The encoder is a hybrid conv/transformer stack that maps a 256x256
input to a 64x64 embedding grid (the full-scale shape contract).
Box prompts become two Fourier-embedded corner tokens; the decoder runs
two-way cross-attention between tokens and image features, upsamples
back to input resolution, and scores pixels against a mask token.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .bundle import BoxPrompt
from .errors import CompatibilityError, FormatError, IntegrityError, ValidationError
from .nn.layers import (
    GELU,
    MLP,
    Attention,
    Conv2d,
    Layer,
    LayerNorm,
    Linear,
    ReLU,
    SelfAttention,
    Sequential,
    TransformerBlock,
    TransposeConv2d,
)
from .preprocess import PadInfo

WEIGHT_FORMAT = "promptnet-v1"


@dataclass(frozen=True)
class NetConfig:
    """Desk-scale architecture knobs; defaults give ~0.5M parameters."""

    input_size: int = 256
    in_channels: int = 3
    embed_dim: int = 64
    encoder_blocks: int = 2
    decoder_blocks: int = 2
    query_tokens: int = 4
    heads: int = 4

    @property
    def grid(self) -> int:
        return self.input_size // 4

    @property
    def token_grid(self) -> int:
        return self.input_size // 16

    def __post_init__(self):
        if self.input_size % 16:
            raise ValidationError("input_size must be divisible by 16")
        if self.embed_dim % 8 or self.embed_dim % self.heads:
            raise ValidationError("embed_dim must divide by 8 and by heads")


@dataclass
class ImageEmbedding:
    """Encoder output for one preprocessed slice."""

    grid: np.ndarray  # (G, G, C)
    source: tuple[str, int] | None
    input_checksum: str


def array_checksum(arr: np.ndarray) -> str:
    arr = np.ascontiguousarray(arr)
    h = hashlib.sha256(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


class FlattenGrid(Layer):
    """(N, H, W, C) -> (N, H*W, C)."""

    def forward(self, x):
        self._cache = x.shape
        n, h, w, c = x.shape
        return x.reshape(n, h * w, c)

    def backward(self, grad):
        return grad.reshape(self._take_cache())


class UnflattenGrid(Layer):
    """(N, H*W, C) -> (N, H, W, C)."""

    def __init__(self, h, w, dtype=np.float32):
        super().__init__(dtype)
        self.h, self.w = h, w

    def forward(self, x):
        self._cache = x.shape
        n, _, c = x.shape
        return x.reshape(n, self.h, self.w, c)

    def backward(self, grad):
        return grad.reshape(self._take_cache())


class AddPositional(Layer):
    """Adds a learned per-token embedding to a (N, T, C) sequence."""

    def __init__(self, tokens, dim, rng, std=0.02, dtype=np.float32):
        super().__init__(dtype)
        self._add_param("pos", rng.normal(0.0, std, (tokens, dim)))

    def forward(self, x):
        self._cache = True
        return x + self._params["pos"]

    def backward(self, grad):
        self._take_cache()
        self._accumulate("pos", grad.sum(axis=0))
        return grad


class TwoWayBlock(Layer):
    """Decoder block: tokens self-attend, query the image, and write back.

    forward/backward carry the (tokens, image) pair. The image stream is
    normalized once per block and shared by both cross directions.
    """

    def __init__(self, dim, heads, rng, dtype=np.float32):
        super().__init__(dtype)
        self.ln_self = LayerNorm(dim, dtype=dtype)
        self.self_attn = SelfAttention(dim, heads, rng=rng, dtype=dtype)
        self.ln_img = LayerNorm(dim, dtype=dtype)
        self.ln_t2i = LayerNorm(dim, dtype=dtype)
        self.cross_t2i = Attention(dim, heads, rng=rng, dtype=dtype)
        self.ln_mlp = LayerNorm(dim, dtype=dtype)
        self.mlp = MLP(dim, dim * 2, rng, dtype=dtype)
        self.ln_i2t = LayerNorm(dim, dtype=dtype)
        self.cross_i2t = Attention(dim, heads, rng=rng, dtype=dtype)

    def _children(self):
        return {
            "ln_self": self.ln_self,
            "self_attn": self.self_attn,
            "ln_img": self.ln_img,
            "ln_t2i": self.ln_t2i,
            "cross_t2i": self.cross_t2i,
            "ln_mlp": self.ln_mlp,
            "mlp": self.mlp,
            "ln_i2t": self.ln_i2t,
            "cross_i2t": self.cross_i2t,
        }

    def named_params(self, prefix=""):
        for name, child in self._children().items():
            yield from child.named_params(f"{prefix}{name}.")

    def named_grads(self, prefix=""):
        for name, child in self._children().items():
            yield from child.named_grads(f"{prefix}{name}.")

    def zero_grad(self):
        for child in self._children().values():
            child.zero_grad()

    def forward(self, tok, img):
        tok = tok + self.self_attn.forward(self.ln_self.forward(tok))
        img_n = self.ln_img.forward(img)
        tok = tok + self.cross_t2i.forward(self.ln_t2i.forward(tok), img_n)
        tok = tok + self.mlp.forward(self.ln_mlp.forward(tok))
        img = img + self.cross_i2t.forward(img_n, self.ln_i2t.forward(tok))
        return tok, img

    def backward(self, g_tok, g_img):
        g_imgn, g_kv = self.cross_i2t.backward(g_img)
        g_tok = g_tok + self.ln_i2t.backward(g_kv)

        g_tok = g_tok + self.ln_mlp.backward(self.mlp.backward(g_tok))

        g_q, g_kv_imgn = self.cross_t2i.backward(g_tok)
        g_imgn += g_kv_imgn
        g_tok = g_tok + self.ln_t2i.backward(g_q)
        g_img = g_img + self.ln_img.backward(g_imgn)

        g_tok = g_tok + self.ln_self.backward(self.self_attn.backward(g_tok))
        return g_tok, g_img


class EncoderNet(Layer):
    """Hybrid conv/transformer encoder with a high-resolution skip.

    The 4x-reduced stem features (the embedding grid's native
    resolution) bypass the 16x16 transformer bottleneck through a 1x1
    projection, so the output grid keeps genuine 64-grid detail on top
    of the globally-mixed features.
    """

    def __init__(self, stem: Sequential, body: Sequential, skip: Layer):
        super().__init__(stem.layers[0].dtype)
        self.stem = stem
        self.body = body
        self.skip = skip

    def forward(self, x):
        h = self.stem.forward(x)
        return self.body.forward(h) + self.skip.forward(h)

    def backward(self, grad):
        g_h = self.body.backward(grad) + self.skip.backward(grad)
        return self.stem.backward(g_h)

    def named_params(self, prefix=""):
        yield from self.stem.named_params(prefix + "stem.")
        yield from self.body.named_params(prefix + "body.")
        yield from self.skip.named_params(prefix + "skip.")

    def named_grads(self, prefix=""):
        yield from self.stem.named_grads(prefix + "stem.")
        yield from self.body.named_grads(prefix + "body.")
        yield from self.skip.named_grads(prefix + "skip.")

    def zero_grad(self):
        for child in (self.stem, self.body, self.skip):
            child.zero_grad()


class ParamBank(Layer):
    """Bare parameter holder with explicit gradient accumulation."""

    def add(self, name, value):
        return self._add_param(name, value)

    def get(self, name):
        return self._params[name]

    def acc(self, name, grad):
        self._accumulate(name, grad)


class PromptNet:
    """Promptable segmentation model; pure numpy, CPU only."""

    def __init__(self, config: NetConfig = NetConfig(), seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c = config.embed_dim
        tg = config.token_grid
        dt = self.dtype

        # patchify stem: 4x4 stride-4 embed straight to the embedding grid's
        # native resolution (G x G)
        stem = Sequential(
            Conv2d(config.in_channels, c // 2, 4, stride=4, rng=rng, dtype=dt, input_grad=False),
            LayerNorm(c // 2, dtype=dt),
            ReLU(dtype=dt),
        )
        body_layers: list[Layer] = [
            Conv2d(c // 2, c, 3, stride=2, pad=1, rng=rng, dtype=dt),
            LayerNorm(c, dtype=dt),
            ReLU(dtype=dt),
            Conv2d(c, c, 3, stride=2, pad=1, rng=rng, dtype=dt),
            LayerNorm(c, dtype=dt),
            ReLU(dtype=dt),
            FlattenGrid(dtype=dt),
            AddPositional(tg * tg, c, rng, dtype=dt),
        ]
        for _ in range(config.encoder_blocks):
            body_layers.append(TransformerBlock(c, config.heads, rng, dtype=dt))
        body_layers += [
            LayerNorm(c, dtype=dt),
            UnflattenGrid(tg, tg, dtype=dt),
            TransposeConv2d(c, c, 2, rng=rng, dtype=dt),
            ReLU(dtype=dt),
            # small-init output layers: at the published learning rate the
            # embedding head can then re-aim quickly during distillation
            TransposeConv2d(c, c, 2, rng=rng, std=0.02, dtype=dt),
        ]
        self.encoder = EncoderNet(
            stem=stem,
            body=Sequential(*body_layers),
            skip=Conv2d(c // 2, c, 1, rng=rng, std=0.02, dtype=dt),
        )

        self.bank = ParamBank(dtype=dt)
        self.fourier = np.ascontiguousarray(rng.normal(0.0, 1.0, (c // 2, 2)), dtype=dt)
        self.bank.add("corner", rng.normal(0.0, 0.02, (2, c)))
        self.bank.add("query", rng.normal(0.0, 0.02, (config.query_tokens, c)))
        self.bank.add("head_bias", np.zeros(1))

        self.decoder_blocks = [
            TwoWayBlock(c, config.heads, rng, dtype=dt) for _ in range(config.decoder_blocks)
        ]
        g = config.grid
        self.upsampler = Sequential(
            LayerNorm(c, dtype=dt),
            UnflattenGrid(g, g, dtype=dt),
            TransposeConv2d(c, c // 2, 2, rng=rng, dtype=dt),
            ReLU(dtype=dt),
            TransposeConv2d(c // 2, c // 8, 2, rng=rng, dtype=dt),
        )
        self.mask_head = Sequential(
            LayerNorm(c, dtype=dt),
            Linear(c, c, rng=rng, dtype=dt),
            GELU(dtype=dt),
            Linear(c, c // 8, rng=rng, dtype=dt),
        )
        self._decode_cache = None
        self._lock = threading.RLock()
        self._refresh_derived()

    def _refresh_derived(self) -> None:
        """Recompute constants derived from the Fourier matrix.

        The decoder adds the position of every embedding-grid cell, encoded
        with the same Fourier basis as box corners, to the image tokens so
        cross-attention can localize the prompt.
        """
        g = self.config.grid
        centers = (np.stack(np.meshgrid(np.arange(g), np.arange(g), indexing="ij"), axis=-1)
                   .reshape(-1, 2)[:, ::-1].astype(self.dtype) + self.dtype.type(0.5)) / self.dtype.type(g)
        angles = (2.0 * np.pi * centers) @ self.fourier.T
        self._img_pos = np.concatenate([np.sin(angles), np.cos(angles)], axis=1).astype(self.dtype)

    # ------------------------------------------------------------------
    # parameter plumbing

    def _groups(self) -> dict[str, Layer]:
        groups: dict[str, Layer] = {"encoder": self.encoder}
        for i, block in enumerate(self.decoder_blocks):
            groups[f"decoder.{i}"] = block
        groups["upsampler"] = self.upsampler
        groups["mask_head"] = self.mask_head
        groups["bank"] = self.bank
        return groups

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        for gname, group in self._groups().items():
            yield from group.named_params(f"{gname}.")

    def named_grads(self) -> Iterator[tuple[str, np.ndarray]]:
        for gname, group in self._groups().items():
            yield from group.named_grads(f"{gname}.")

    def parameters(self) -> dict[str, np.ndarray]:
        return dict(self.named_params())

    def gradients(self) -> dict[str, np.ndarray]:
        return dict(self.named_grads())

    def encoder_parameters(self) -> dict[str, np.ndarray]:
        return {f"encoder.{n}": p for n, p in self.encoder.named_params()}

    def zero_grad(self) -> None:
        for group in self._groups().values():
            group.zero_grad()

    def named_tensors(self) -> dict[str, np.ndarray]:
        """All serialized state: learned parameters plus the Fourier matrix."""
        tensors = dict(self.named_params())
        tensors["fourier"] = self.fourier
        return tensors

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_params())

    # ------------------------------------------------------------------
    # encoder

    def prepare_input(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=self.dtype)
        s = self.config.input_size
        if image.ndim == 2:
            image = np.repeat(image[:, :, None], self.config.in_channels, axis=2)
        if image.shape != (s, s, self.config.in_channels):
            raise ValidationError(
                f"encoder expects ({s},{s}[,{self.config.in_channels}]) input, got {image.shape}"
            )
        return image

    def encode_image(
        self, image: np.ndarray, source: tuple[str, int] | None = None
    ) -> ImageEmbedding:
        """Embed one preprocessed slice into the (G, G, C) grid."""
        image = self.prepare_input(image)
        with self._lock:
            grid = self.encode_batch(image[None])[0]
        return ImageEmbedding(grid=grid, source=source, input_checksum=array_checksum(image))

    def encode_batch(self, images: np.ndarray) -> np.ndarray:
        """Encoder forward on (N, S, S, in_ch); returns (N, G, G, C)."""
        return self.encoder.forward(np.ascontiguousarray(images, dtype=self.dtype))

    def encode_backward(self, grad_grids: np.ndarray) -> None:
        self.encoder.backward(grad_grids)

    # ------------------------------------------------------------------
    # prompt encoder

    def encode_box(self, box: BoxPrompt | tuple, pad: PadInfo) -> np.ndarray:
        """Map a 2D box through the resize geometry into two corner tokens."""
        coords = box.box_2d() if isinstance(box, BoxPrompt) else tuple(box)
        x0, y0, x1, y1 = coords
        if not (0 <= x0 < x1 <= pad.original_w and 0 <= y0 < y1 <= pad.original_h):
            raise ValidationError(
                f"box {coords} outside image {pad.original_h}x{pad.original_w}"
            )
        size = self.dtype.type(self.config.input_size)
        scale = self.dtype.type(pad.scale)
        corners = np.array(
            [[x0 * scale / size, y0 * scale / size], [x1 * scale / size, y1 * scale / size]],
            dtype=self.dtype,
        )
        angles = (2.0 * np.pi * corners) @ self.fourier.T  # (2, C/2)
        tokens = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
        return (tokens + self.bank.get("corner")).astype(self.dtype)

    # ------------------------------------------------------------------
    # decoder

    def decode_mask(self, emb: ImageEmbedding, tokens: np.ndarray) -> np.ndarray:
        """Logits at input resolution for one embedding and one prompt."""
        g, c = self.config.grid, self.config.embed_dim
        if emb.grid.shape != (g, g, c):
            raise ValidationError(f"embedding grid {emb.grid.shape} != ({g},{g},{c})")
        if tokens.shape != (2, c):
            raise ValidationError(f"prompt tokens must be (2,{c}), got {tokens.shape}")
        with self._lock:
            logits = self.decode_batch(emb.grid[None], tokens[None])
        return logits[0]

    def decode_batch(self, grids: np.ndarray, prompt_tokens: np.ndarray) -> np.ndarray:
        """Decoder forward on (N,G,G,C) grids and (N,2,C) prompts -> (N,S,S)."""
        n = grids.shape[0]
        g = self.config.grid
        query = self.bank.get("query")
        tok = np.concatenate(
            [np.broadcast_to(query, (n,) + query.shape), prompt_tokens.astype(self.dtype)],
            axis=1,
        )
        img = np.ascontiguousarray(grids, dtype=self.dtype).reshape(n, g * g, -1)
        img = img + self._img_pos
        for block in self.decoder_blocks:
            tok, img = block.forward(tok, img)
        feats = self.upsampler.forward(img)  # (N, S, S, C/8)
        vec = self.mask_head.forward(tok[:, 0])  # (N, C/8)
        logits = np.einsum("nhwc,nc->nhw", feats, vec) + self.dtype.type(
            self.bank.get("head_bias")[0]
        )
        self._decode_cache = (feats, vec, tok.shape)
        return logits

    def decode_backward(self, grad_logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Backprop decode_batch; returns (grad_grids, grad_prompt_tokens)."""
        if self._decode_cache is None:
            raise RuntimeError("decode_backward without a live decode_batch tape")
        feats, vec, tok_shape = self._decode_cache
        self._decode_cache = None
        grad_logits = np.ascontiguousarray(grad_logits, dtype=self.dtype)
        self.bank.acc("head_bias", grad_logits.sum(keepdims=True).reshape(1))
        g_feats = grad_logits[..., None] * vec[:, None, None, :]
        g_vec = np.einsum("nhw,nhwc->nc", grad_logits, feats)

        g_tok = np.zeros(tok_shape, dtype=self.dtype)
        g_tok[:, 0] = self.mask_head.backward(g_vec)
        g_img = self.upsampler.backward(g_feats)
        for block in reversed(self.decoder_blocks):
            g_tok, g_img = block.backward(g_tok, g_img)
        m = self.config.query_tokens
        self.bank.acc("query", g_tok[:, :m].sum(axis=0))
        g = self.config.grid
        return g_img.reshape(-1, g, g, self.config.embed_dim), g_tok[:, m:]


def postprocess(logits: np.ndarray, pad: PadInfo, threshold: float = 0.5) -> np.ndarray:
    """Crop padding, resize logits to the original extent, threshold.

    Thresholding at 0.5 on the sigmoid is applied as logits > 0.
    """
    from .preprocess import bilinear_resize

    size = pad.target
    if logits.shape != (size, size):
        raise ValidationError(f"logits shape {logits.shape} != ({size},{size})")
    if threshold != 0.5:
        raise ValidationError("only the pinned 0.5 threshold is supported")
    cropped = logits[: pad.resized_h, : pad.resized_w]
    full = bilinear_resize(cropped, pad.original_h, pad.original_w)
    return full > 0


# ----------------------------------------------------------------------
# weight files


def save_weights(net: PromptNet, path: str | Path) -> None:
    """Write manifest.json + tensors.bin with per-tensor checksums."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    tensors = net.named_tensors()
    manifest_tensors = {}
    blob = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        data = arr.tobytes()
        manifest_tensors[name] = {
            "shape": list(arr.shape),
            "offset": len(blob),
            "sha256": hashlib.sha256(data).hexdigest(),
        }
        blob.extend(data)
    manifest = {
        "format": WEIGHT_FORMAT,
        "config": asdict(net.config),
        "tensors": manifest_tensors,
    }
    (root / "tensors.bin").write_bytes(bytes(blob))
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_weights(path: str | Path, config: NetConfig | None = None) -> PromptNet:
    """Reconstruct a PromptNet, verifying checksums and config compatibility."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"missing manifest.json in {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt weight manifest: {e}") from e
    if manifest.get("format") != WEIGHT_FORMAT:
        raise FormatError(f"unsupported weight format {manifest.get('format')!r}")
    stored = NetConfig(**manifest["config"])
    if config is not None and config != stored:
        raise CompatibilityError(f"requested config {config} != stored {stored}")
    net = PromptNet(stored, seed=0)
    blob = (root / "tensors.bin").read_bytes()
    tensors = net.named_tensors()
    if set(tensors) != set(manifest["tensors"]):
        raise CompatibilityError("tensor name set does not match architecture")
    for name, meta in manifest["tensors"].items():
        shape = tuple(meta["shape"])
        target = tensors[name]
        if target.shape != shape:
            raise CompatibilityError(
                f"tensor {name!r} shape {shape} incompatible with {target.shape}"
            )
        nbytes = int(np.prod(shape)) * 4
        data = blob[meta["offset"] : meta["offset"] + nbytes]
        if hashlib.sha256(data).hexdigest() != meta["sha256"]:
            raise IntegrityError(f"checksum mismatch for tensor {name!r}")
        np.copyto(target, np.frombuffer(data, dtype="<f4").reshape(shape))
    net._refresh_derived()
    return net
