"""Encoder-quantizer-decoder model and the token map it produces.

The CNN encoder downsamples by a fixed factor of 8 (three stride-2 stages)
into a d_l-channel feature map; the decoder mirrors it with transposed
convolutions and injects the quantized whole-image embeddings through a
cross-attention layer placed after the bottleneck self-attention. Channel
widths follow the reference topology scaled down by a width divisor, and
the single nonlinearity everywhere is SiLU.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codebooks import EmbeddingTable, ExpandedVocabulary, Vocabulary
from .globalfeat import GlobalFeatureProvider
from .quantize import Projector, gather_quantized, project, quantize_global, quantize_local

__all__ = ["ModelConfig", "TokenMap", "TokenMapError", "TokenizerModel",
           "LossCapture", "save_token_map", "load_token_map", "vq_loss_terms", "vq_loss"]

DOWNSAMPLE_FACTOR = 8
TOKEN_MAP_MAGIC = b"V2LT"


class TokenMapError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Desk-scale shape knobs. base_channels is the reference topology width;
    the effective widths divide it by width_divisor."""

    image_size: int = 32
    base_channels: tuple[int, ...] = (128, 256, 256, 512)
    width_divisor: int = 8
    d_local: int = 16
    global_dim: int = 16
    k_global: int = 5
    activation: str = "silu"

    def __post_init__(self):
        if self.image_size % DOWNSAMPLE_FACTOR:
            raise ValueError(f"image_size {self.image_size} not divisible by {DOWNSAMPLE_FACTOR}")
        if len(self.base_channels) != 4:
            raise ValueError("base_channels must list four stage widths")
        if self.activation != "silu":
            raise ValueError("the network is built around a single smooth activation (silu)")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(max(1, c // self.width_divisor) for c in self.base_channels)

    @property
    def grid(self) -> int:
        return self.image_size // DOWNSAMPLE_FACTOR

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "base_channels": list(self.base_channels),
            "width_divisor": self.width_divisor,
            "d_local": self.d_local,
            "global_dim": self.global_dim,
            "k_global": self.k_global,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["base_channels"] = tuple(d["base_channels"])
        return cls(**d)


@dataclass
class TokenMap:
    """K_g whole-image token ids plus the h x w grid of patch token ids."""

    global_ids: np.ndarray
    local_ids: np.ndarray

    def __post_init__(self):
        self.global_ids = np.asarray(self.global_ids, dtype=np.int64)
        self.local_ids = np.asarray(self.local_ids, dtype=np.int64)
        if self.global_ids.ndim != 1:
            raise TokenMapError(f"global ids must be 1-D, got shape {self.global_ids.shape}")
        if self.local_ids.ndim != 2:
            raise TokenMapError(f"local ids must form a 2-D grid, got shape {self.local_ids.shape}")

    @property
    def k_global(self) -> int:
        return self.global_ids.shape[0]

    @property
    def k_local(self) -> int:
        return int(self.local_ids.size)

    @property
    def k_total(self) -> int:
        return self.k_global + self.k_local

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.local_ids.shape

    def flat_local(self) -> np.ndarray:
        """Row-major flattening; every window protocol indexes this order."""
        return self.local_ids.reshape(-1)

    def copy(self) -> "TokenMap":
        return TokenMap(self.global_ids.copy(), self.local_ids.copy())


def save_token_map(tm: TokenMap, path: Union[str, Path]) -> None:
    h, w = tm.grid_shape
    parts = [TOKEN_MAP_MAGIC, struct.pack("<III", tm.k_global, h, w)]
    parts.append(tm.global_ids.astype("<u4").tobytes())
    parts.append(tm.local_ids.astype("<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_token_map(path: Union[str, Path]) -> TokenMap:
    blob = Path(path).read_bytes()
    if blob[:4] != TOKEN_MAP_MAGIC:
        raise TokenMapError(f"{path}: bad magic, not a token map file")
    kg, h, w = struct.unpack("<III", blob[4:16])
    need = 16 + 4 * (kg + h * w)
    if len(blob) != need:
        raise TokenMapError(f"{path}: expected {need} bytes, found {len(blob)}")
    gids = np.frombuffer(blob, dtype="<u4", count=kg, offset=16).astype(np.int64)
    lids = np.frombuffer(blob, dtype="<u4", count=h * w, offset=16 + 4 * kg).astype(np.int64)
    return TokenMap(gids, lids.reshape(h, w))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _init_weight(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv:
    def __init__(self, name: str, cin: int, cout: int, k: int, stride: int, padding: int,
                 rng: np.random.Generator, transposed: bool = False):
        self.stride, self.padding, self.transposed = stride, padding, transposed
        shape = (cin, cout, k, k) if transposed else (cout, cin, k, k)
        self.w = Tensor(_init_weight(rng, shape, cin * k * k), requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        op = ad.conv_transpose2d if self.transposed else ad.conv2d
        return op(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def parameters(self) -> dict[str, Tensor]:
        return {self.w.name: self.w, self.b.name: self.b}


class Dense:
    def __init__(self, name: str, cin: int, cout: int, rng: np.random.Generator):
        self.w = Tensor(_init_weight(rng, (cout, cin), cin), requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.w, self.b)

    def parameters(self) -> dict[str, Tensor]:
        return {self.w.name: self.w, self.b.name: self.b}


class ResBlock:
    def __init__(self, name: str, cin: int, cout: int, rng: np.random.Generator):
        self.conv1 = Conv(f"{name}.conv1", cin, cout, 3, 1, 1, rng)
        self.conv2 = Conv(f"{name}.conv2", cout, cout, 3, 1, 1, rng)
        self.skip = Conv(f"{name}.skip", cin, cout, 1, 1, 0, rng) if cin != cout else None

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv1(ad.silu(x))
        h = self.conv2(ad.silu(h))
        s = self.skip(x) if self.skip is not None else x
        return ad.add(s, h)

    def parameters(self) -> dict[str, Tensor]:
        out = {**self.conv1.parameters(), **self.conv2.parameters()}
        if self.skip is not None:
            out.update(self.skip.parameters())
        return out


def _to_sequence(x: Tensor) -> tuple[Tensor, tuple[int, ...]]:
    b, c, h, w = x.shape
    seq = ad.reshape(ad.transpose(x, (0, 2, 3, 1)), (b, h * w, c))
    return seq, (b, c, h, w)


def _from_sequence(seq: Tensor, shape: tuple[int, ...]) -> Tensor:
    b, c, h, w = shape
    return ad.transpose(ad.reshape(seq, (b, h, w, c)), (0, 3, 1, 2))


class SelfAttention:
    def __init__(self, name: str, channels: int, rng: np.random.Generator):
        self.q = Dense(f"{name}.q", channels, channels, rng)
        self.k = Dense(f"{name}.k", channels, channels, rng)
        self.v = Dense(f"{name}.v", channels, channels, rng)
        self.out = Dense(f"{name}.out", channels, channels, rng)

    def __call__(self, x: Tensor) -> Tensor:
        seq, shape = _to_sequence(x)
        attended = ad.attention(self.q(seq), self.k(seq), self.v(seq))
        return ad.add(x, _from_sequence(self.out(attended), shape))

    def parameters(self) -> dict[str, Tensor]:
        return {**self.q.parameters(), **self.k.parameters(),
                **self.v.parameters(), **self.out.parameters()}


class CrossAttention:
    """Local features query the quantized whole-image embeddings.

    Zeroing the output projection makes the block an exact no-op, which is
    the global-token ablation path.
    """

    def __init__(self, name: str, channels: int, context_dim: int, rng: np.random.Generator):
        self.q = Dense(f"{name}.q", channels, channels, rng)
        self.k = Dense(f"{name}.k", context_dim, channels, rng)
        self.v = Dense(f"{name}.v", context_dim, channels, rng)
        self.out = Dense(f"{name}.out", channels, channels, rng)

    def __call__(self, x: Tensor, context: Tensor) -> Tensor:
        seq, shape = _to_sequence(x)
        attended = ad.attention(self.q(seq), self.k(context), self.v(context))
        return ad.add(x, _from_sequence(self.out(attended), shape))

    def parameters(self) -> dict[str, Tensor]:
        return {**self.q.parameters(), **self.k.parameters(),
                **self.v.parameters(), **self.out.parameters()}


class Encoder:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c0, c1, c2, c3 = cfg.channels
        self.conv_in = Conv("enc.in", 3, c0, 3, 1, 1, rng)
        self.res0 = ResBlock("enc.res0", c0, c0, rng)
        self.down0 = Conv("enc.down0", c0, c0, 3, 2, 1, rng)
        self.res1 = ResBlock("enc.res1", c0, c1, rng)
        self.down1 = Conv("enc.down1", c1, c1, 3, 2, 1, rng)
        self.res2 = ResBlock("enc.res2", c1, c2, rng)
        self.down2 = Conv("enc.down2", c2, c2, 3, 2, 1, rng)
        self.res3 = ResBlock("enc.res3", c2, c3, rng)
        self.attn = SelfAttention("enc.attn", c3, rng)
        self.conv_out = Conv("enc.out", c3, cfg.d_local, 3, 1, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv_in(x)
        h = self.down0(self.res0(h))
        h = self.down1(self.res1(h))
        h = self.down2(self.res2(h))
        h = self.attn(self.res3(h))
        return self.conv_out(ad.silu(h))

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for part in (self.conv_in, self.res0, self.down0, self.res1, self.down1,
                     self.res2, self.down2, self.res3, self.attn, self.conv_out):
            out.update(part.parameters())
        return out


class Decoder:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c0, c1, c2, c3 = cfg.channels
        self.conv_in = Conv("dec.in", cfg.d_local, c3, 3, 1, 1, rng)
        self.self_attn = SelfAttention("dec.attn", c3, rng)
        self.cross_attn = CrossAttention("dec.cross", c3, cfg.global_dim, rng)
        self.res3 = ResBlock("dec.res3", c3, c3, rng)
        self.up2 = Conv("dec.up2", c3, c3, 4, 2, 1, rng, transposed=True)
        self.res2 = ResBlock("dec.res2", c3, c2, rng)
        self.up1 = Conv("dec.up1", c2, c2, 4, 2, 1, rng, transposed=True)
        self.res1 = ResBlock("dec.res1", c2, c1, rng)
        self.up0 = Conv("dec.up0", c1, c1, 4, 2, 1, rng, transposed=True)
        self.res0 = ResBlock("dec.res0", c1, c0, rng)
        self.conv_out = Conv("dec.out", c0, 3, 3, 1, 1, rng)

    def __call__(self, quantized: Tensor, context: Tensor) -> Tensor:
        h = self.conv_in(quantized)
        h = self.cross_attn(self.self_attn(h), context)
        h = self.res2(self.up2(self.res3(h)))
        h = self.res1(self.up1(h))
        h = self.res0(self.up0(h))
        return self.conv_out(ad.silu(h))

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for part in (self.conv_in, self.self_attn, self.cross_attn, self.res3, self.up2,
                     self.res2, self.up1, self.res1, self.up0, self.res0, self.conv_out):
            out.update(part.parameters())
        return out


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------


@dataclass
class LossCapture:
    """Assignment ids and stop-gradient values frozen at one evaluation point.

    Re-evaluating the loss under a capture holds every non-differentiable
    choice fixed, which is exactly the function central differences must
    probe to agree with the analytic backward pass.
    """

    local_ids: np.ndarray
    global_rows: np.ndarray
    st_offset: np.ndarray
    sg_features: np.ndarray
    sg_quantized: np.ndarray


class TokenizerModel:
    def __init__(
        self,
        config: ModelConfig,
        local_vocab: Vocabulary,
        local_table: EmbeddingTable,
        global_vocab: ExpandedVocabulary,
        global_table: EmbeddingTable,
        global_features: GlobalFeatureProvider,
        seed: int = 0,
    ):
        if global_table.rows != len(global_vocab):
            raise ValueError("TokenizerModel: global table rows do not match global vocabulary")
        if local_table.rows != len(local_vocab):
            raise ValueError("TokenizerModel: local table rows do not match local vocabulary")
        if global_table.dim != config.global_dim:
            raise ValueError(f"TokenizerModel: global table dim {global_table.dim} "
                             f"does not match configured global_dim {config.global_dim}")
        if global_features.dim != config.global_dim:
            raise ValueError("TokenizerModel: global feature provider dim mismatch")
        if config.k_global > global_table.rows:
            raise ValueError("TokenizerModel: k_global exceeds global codebook size")
        self.config = config
        self.local_vocab = local_vocab
        self.local_table = local_table
        self.global_vocab = global_vocab
        self.global_table = global_table
        self.global_features = global_features
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(config, rng)
        self.decoder = Decoder(config, rng)
        self.projector = Projector(local_table.dim, config.d_local, rng)

    def parameters(self) -> dict[str, Tensor]:
        return {**self.encoder.parameters(), **self.decoder.parameters(),
                **self.projector.parameters()}

    # -- inference ---------------------------------------------------------

    def _check_image(self, image: np.ndarray) -> np.ndarray:
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ValueError(f"expected a (3, H, W) image, got shape {arr.shape}")
        if arr.shape[1] % DOWNSAMPLE_FACTOR or arr.shape[2] % DOWNSAMPLE_FACTOR:
            raise ValueError(f"image dims {arr.shape[1:]} not divisible by {DOWNSAMPLE_FACTOR}")
        return arr

    def encode(self, image: np.ndarray, key: Optional[str] = None) -> tuple[Tensor, np.ndarray]:
        """Per-patch feature map (h, w, d_l) and the whole-image feature (d_g,)."""
        arr = self._check_image(image)
        fmap = self.encoder(Tensor(arr[None]))
        f_local = ad.transpose(fmap, (0, 2, 3, 1))
        f_global = np.asarray(self.global_features.features_for(arr, key), dtype=np.float64)
        if f_global.shape != (self.config.global_dim,):
            raise ValueError(f"global feature provider returned shape {f_global.shape}, "
                             f"expected ({self.config.global_dim},)")
        return Tensor(f_local.data[0]), f_global

    def projected_local_table(self) -> EmbeddingTable:
        return project(self.projector, self.local_table)

    def tokenize(self, image: np.ndarray, key: Optional[str] = None) -> TokenMap:
        features, f_global = self.encode(image, key)
        local = quantize_local(features.data, self.projected_local_table())
        global_ = quantize_global(f_global, self.global_table, self.config.k_global)
        return TokenMap(global_.token_ids, local.token_ids)

    def detokenize(self, tm: TokenMap) -> np.ndarray:
        h, w = tm.grid_shape
        if tm.local_ids.min(initial=0) < 0 or tm.local_ids.max(initial=0) >= self.local_table.rows:
            raise TokenMapError(f"local token id out of range for codebook "
                                f"with {self.local_table.rows} rows")
        if tm.global_ids.min(initial=0) < 0 or tm.global_ids.max(initial=0) >= self.global_table.rows:
            raise TokenMapError(f"global token id out of range for codebook "
                                f"with {self.global_table.rows} rows")
        projected = self.projected_local_table().matrix
        fq = projected[tm.flat_local()].reshape(1, h, w, self.config.d_local)
        quantized = Tensor(np.moveaxis(fq, 3, 1))
        context = Tensor(self.global_table.as_f64()[tm.global_ids][None])
        out = self.decoder(quantized, context)
        return out.data[0]

    # -- training graph ----------------------------------------------------

    def _batch_globals(self, images: np.ndarray, keys) -> np.ndarray:
        rows = []
        for i in range(images.shape[0]):
            key = keys[i] if keys is not None else None
            f = self.global_features.features_for(images[i], key)
            q = quantize_global(np.asarray(f, dtype=np.float64), self.global_table, self.config.k_global)
            rows.append(self.global_table.as_f64()[q.token_ids])
        return np.stack(rows)

    def training_loss(
        self,
        images: np.ndarray,
        keys=None,
        beta: float = 0.3,
        capture: Optional[LossCapture] = None,
    ) -> tuple[Tensor, dict[str, float], LossCapture]:
        """Scalar objective over a batch plus per-term values and the capture.

        Terms, each taken per image and averaged over the batch: squared
        reconstruction error, the distance between the (stopped) feature map
        and its quantization, and beta times the commitment distance pulling
        features toward their (stopped) codes.
        """
        arr = np.asarray(images, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        batch = arr.shape[0]
        x = Tensor(arr)

        fmap = self.encoder(x)                       # (B, d_l, h, w)
        f = ad.transpose(fmap, (0, 2, 3, 1))         # (B, h, w, d_l)
        table_node = self.projector.apply(Tensor(self.local_table.as_f64()))

        if capture is None:
            local = quantize_local(f.data.reshape(-1, self.config.d_local), table_node.data)
            local_ids = local.token_ids
            global_rows = self._batch_globals(arr, keys)
        else:
            local_ids = capture.local_ids
            global_rows = capture.global_rows

        fq = gather_quantized(table_node, _FlatIds(local_ids, f.shape[:-1]))

        if capture is None:
            st_offset = fq.data - f.data
            sg_features = f.data.copy()
            sg_quantized = fq.data.copy()
            capture_out = LossCapture(local_ids, global_rows, st_offset, sg_features, sg_quantized)
        else:
            st_offset = capture.st_offset
            sg_features = capture.sg_features
            sg_quantized = capture.sg_quantized
            capture_out = capture

        decoder_in = ad.add(f, ad.constant(st_offset))
        x_hat = self.decoder(ad.transpose(decoder_in, (0, 3, 1, 2)), Tensor(global_rows))

        diff = ad.sub(x_hat, x)
        recon = ad.mean(ad.tensor_sum(ad.mul(diff, diff), axes=(1, 2, 3)))

        d2 = ad.sub(ad.constant(sg_features), fq)
        codebook_term = ad.mean(ad.sqrt(ad.tensor_sum(ad.mul(d2, d2), axes=(1, 2, 3))))

        d3 = ad.sub(ad.constant(sg_quantized), f)
        commit_term = ad.mean(ad.sqrt(ad.tensor_sum(ad.mul(d3, d3), axes=(1, 2, 3))))

        loss = ad.add(ad.add(recon, codebook_term), ad.scale(commit_term, beta))
        parts = {
            "total": loss.item(),
            "recon": recon.item(),
            "codebook": codebook_term.item(),
            "commit": commit_term.item(),
            "batch": batch,
        }
        return loss, parts, capture_out


class _FlatIds:
    """Adapter giving gather_quantized a token_ids attribute of grid shape."""

    def __init__(self, flat_ids: np.ndarray, lead_shape: tuple):
        self.token_ids = np.asarray(flat_ids).reshape(lead_shape)


def vq_loss_terms(x: np.ndarray, x_hat: np.ndarray, features: np.ndarray,
                  quantized: np.ndarray, beta: float) -> tuple[float, float, float]:
    """Pure value-level form of the three objective terms for one image."""
    t1 = float(((x - x_hat) ** 2).sum())
    t2 = float(np.sqrt(((features - quantized) ** 2).sum()))
    t3 = beta * float(np.sqrt(((quantized - features) ** 2).sum()))
    return t1, t2, t3


def vq_loss(image: np.ndarray, model: TokenizerModel, beta: float = 0.3,
            key: Optional[str] = None) -> Tensor:
    """Scalar objective graph for a single image."""
    keys = [key] if key is not None else None
    loss, _, _ = model.training_loss(image, keys=keys, beta=beta)
    return loss
