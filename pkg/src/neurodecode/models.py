"""Encoder-decoder architectures: CNN and ViT encoders, a bi-LSTM decoder
with an MLP head, the contrastive projector, and transfer-learning
parameter partitioning."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .corpus import ACOUSTIC_DIM, GridGeometry
from .tensorfile import read_tensor, write_tensor

VIT_EMBED_DIM = 256
VIT_LATENT_DIM = 176
VIT_HEADS = 4
VIT_HEAD_DIM = 32
VIT_FF_DIM = 64
CNN_CHANNELS = (128, 64, 32)
LSTM_HIDDEN = 256
LSTM_LAYERS = 3
HEAD_HIDDEN = 1024
HEAD_DROPOUT = 0.5
PROJECTOR_HIDDEN = 128
LEAKY_SLOPE = 0.2


class ModelError(Exception):
    pass


def _kaiming_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    return q[:rows, :cols] if rows >= cols else q[:cols, :rows].T


def positional_encoding(t_len: int, d: int = VIT_LATENT_DIM) -> np.ndarray:
    """Sine/cosine positional code, (d, t_len)."""
    if d % 2 != 0:
        raise ModelError("positional encoding dimension must be even")
    pos = np.arange(t_len)[None, :]
    i = np.arange(d // 2)[:, None]
    angle = pos / (10000.0 ** (2 * i / d))
    pe = np.zeros((d, t_len))
    pe[0::2] = np.sin(angle)
    pe[1::2] = np.cos(angle)
    return pe


@dataclass
class ParamStore:
    params: dict[str, Tensor]
    patient_specific: set[str]

    def tensors(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def named(self) -> list[tuple[str, Tensor]]:
        return [(k, self.params[k]) for k in sorted(self.params)]


class ViTEncoder:
    """Per-frame MLP embedding, positional encoding, one 4-head attention
    block and a feed-forward block, each with residual + layer norm."""

    variant = "vit"

    def __init__(self, n_f: int, rng: np.random.Generator):
        self.n_f = n_f
        d = VIT_LATENT_DIM
        d_attn = VIT_HEADS * VIT_HEAD_DIM  # 128
        p = {}
        p["embed1.w"] = Tensor(_kaiming_uniform(rng, n_f, (n_f, VIT_EMBED_DIM)), True)
        p["embed1.b"] = Tensor(np.zeros(VIT_EMBED_DIM), True)
        p["embed2.w"] = Tensor(_kaiming_uniform(rng, VIT_EMBED_DIM, (VIT_EMBED_DIM, d)), True)
        p["embed2.b"] = Tensor(np.zeros(d), True)
        for name in ("attn.q", "attn.k", "attn.v"):
            p[f"{name}.w"] = Tensor(_kaiming_uniform(rng, d, (d, d_attn)), True)
            p[f"{name}.b"] = Tensor(np.zeros(d_attn), True)
        p["attn.out.w"] = Tensor(_kaiming_uniform(rng, d_attn, (d_attn, d)), True)
        p["attn.out.b"] = Tensor(np.zeros(d), True)
        p["ln1.g"] = Tensor(np.ones(d), True)
        p["ln1.b"] = Tensor(np.zeros(d), True)
        p["ffn1.w"] = Tensor(_kaiming_uniform(rng, d, (d, VIT_FF_DIM)), True)
        p["ffn1.b"] = Tensor(np.zeros(VIT_FF_DIM), True)
        p["ffn2.w"] = Tensor(_kaiming_uniform(rng, VIT_FF_DIM, (VIT_FF_DIM, d)), True)
        p["ffn2.b"] = Tensor(np.zeros(d), True)
        p["ln2.g"] = Tensor(np.ones(d), True)
        p["ln2.b"] = Tensor(np.zeros(d), True)
        self.store = ParamStore(p, {"embed1.w", "embed1.b"})

    @property
    def latent_dim(self) -> int:
        return VIT_LATENT_DIM

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        """x: (B, T, N_f) -> (B, T, 176)."""
        if x.shape[-1] != self.n_f:
            raise ModelError(f"expected feature dim {self.n_f}, got {x.shape[-1]}")
        p = self.store.params
        b, t_len, _ = x.shape
        h = ad.tanh(x @ p["embed1.w"] + p["embed1.b"])
        h = ad.tanh(h @ p["embed2.w"] + p["embed2.b"])
        h = h + Tensor(positional_encoding(t_len).T)

        q = self._heads(h @ p["attn.q.w"] + p["attn.q.b"], b, t_len)
        k = self._heads(h @ p["attn.k.w"] + p["attn.k.b"], b, t_len)
        v = self._heads(h @ p["attn.v.w"] + p["attn.v.b"], b, t_len)
        scores = (q @ ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(VIT_HEAD_DIM))
        attn = ad.softmax(scores, axis=-1)
        ctx = attn @ v  # (B, heads, T, head_dim)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t_len, VIT_HEADS * VIT_HEAD_DIM))
        h = ad.layer_norm(h + (ctx @ p["attn.out.w"] + p["attn.out.b"]),
                          p["ln1.g"], p["ln1.b"])
        ffn = ad.gelu(h @ p["ffn1.w"] + p["ffn1.b"]) @ p["ffn2.w"] + p["ffn2.b"]
        return ad.layer_norm(h + ffn, p["ln2.g"], p["ln2.b"])

    @staticmethod
    def _heads(x: Tensor, b: int, t_len: int) -> Tensor:
        return ad.transpose(ad.reshape(x, (b, t_len, VIT_HEADS, VIT_HEAD_DIM)),
                            (0, 2, 1, 3))

    def attention_weights(self, x: Tensor) -> np.ndarray:
        """Softmax attention matrix (B, heads, T, T), for diagnostics."""
        p = self.store.params
        b, t_len, _ = x.shape
        h = ad.tanh(x @ p["embed1.w"] + p["embed1.b"])
        h = ad.tanh(h @ p["embed2.w"] + p["embed2.b"])
        h = h + Tensor(positional_encoding(t_len).T)
        q = self._heads(h @ p["attn.q.w"] + p["attn.q.b"], b, t_len)
        k = self._heads(h @ p["attn.k.w"] + p["attn.k.b"], b, t_len)
        scores = (q @ ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(VIT_HEAD_DIM))
        return ad.softmax(scores, axis=-1).data


class CNNEncoder:
    """Three conv(3x3 or 2x2) -> batch norm -> leaky ReLU layers on the
    electrode grid, applied frame by frame; entirely patient-specific."""

    variant = "cnn"

    def __init__(self, grid: GridGeometry, kernel: int, rng: np.random.Generator):
        self.grid = grid
        self.kernel = kernel
        p = {}
        self.bn_states: list[BatchNormState] = []
        c_in = grid.n_features
        for layer, c_out in enumerate(CNN_CHANNELS):
            fan_in = c_in * kernel * kernel
            p[f"conv{layer}.w"] = Tensor(
                _kaiming_uniform(rng, fan_in, (c_out, c_in, kernel, kernel)), True)
            p[f"conv{layer}.b"] = Tensor(np.zeros(c_out), True)
            p[f"bn{layer}.g"] = Tensor(np.ones(c_out), True)
            p[f"bn{layer}.b"] = Tensor(np.zeros(c_out), True)
            self.bn_states.append(BatchNormState.create(c_out))
            c_in = c_out
        self.store = ParamStore(p, set(p))

    @property
    def latent_dim(self) -> int:
        return CNN_CHANNELS[-1] * self.grid.n_channels

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        """x: (B, T, 21, n_x, n_y) -> (B, T, 32 * n_x * n_y)."""
        b, t_len = x.shape[0], x.shape[1]
        if x.shape[2:] != (self.grid.n_features, self.grid.n_x, self.grid.n_y):
            raise ModelError(f"input grid {x.shape[2:]} does not match "
                             f"({self.grid.n_features}, {self.grid.n_x}, {self.grid.n_y})")
        h = ad.reshape(x, (b * t_len, self.grid.n_features, self.grid.n_x, self.grid.n_y))
        p = self.store.params
        for layer in range(len(CNN_CHANNELS)):
            h = ad.conv2d(h, p[f"conv{layer}.w"], p[f"conv{layer}.b"])
            h = ad.batch_norm(h, p[f"bn{layer}.g"], p[f"bn{layer}.b"],
                              self.bn_states[layer], train)
            h = ad.leaky_relu(h, LEAKY_SLOPE)
        return ad.reshape(h, (b, t_len, self.latent_dim))


class Decoder:
    """Three-layer bidirectional LSTM (hidden 256 per direction) with a
    512 -> 1024 -> 29 head and dropout between the head layers (default
    50%, configurable so capacity checks can train without it)."""

    def __init__(self, d_latent: int, rng: np.random.Generator,
                 head_dropout: float = HEAD_DROPOUT):
        self.d_latent = d_latent
        self.head_dropout = float(head_dropout)
        p = {}
        d_in = d_latent
        for layer in range(LSTM_LAYERS):
            for direction in ("fw", "bw"):
                prefix = f"lstm{layer}.{direction}"
                p[f"{prefix}.w_ih"] = Tensor(
                    _kaiming_uniform(rng, d_in, (d_in, 4 * LSTM_HIDDEN)), True)
                w_hh = np.concatenate([
                    _orthogonal(rng, LSTM_HIDDEN, LSTM_HIDDEN) for _ in range(4)
                ], axis=1)
                p[f"{prefix}.w_hh"] = Tensor(w_hh, True)
                bias = np.zeros(4 * LSTM_HIDDEN)
                bias[LSTM_HIDDEN:2 * LSTM_HIDDEN] = 1.0  # forget-gate bias
                p[f"{prefix}.b"] = Tensor(bias, True)
            d_in = 2 * LSTM_HIDDEN
        p["head1.w"] = Tensor(_kaiming_uniform(rng, 2 * LSTM_HIDDEN,
                                               (2 * LSTM_HIDDEN, HEAD_HIDDEN)), True)
        p["head1.b"] = Tensor(np.zeros(HEAD_HIDDEN), True)
        p["head2.w"] = Tensor(_kaiming_uniform(rng, HEAD_HIDDEN,
                                               (HEAD_HIDDEN, ACOUSTIC_DIM)), True)
        p["head2.b"] = Tensor(np.zeros(ACOUSTIC_DIM), True)
        self.store = ParamStore(p, set())

    def forward(self, latent: Tensor, train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        """latent: (B, T, d_latent) -> (B, T, 29)."""
        p = self.store.params
        h = ad.transpose(latent, (1, 0, 2))  # (T, B, D)
        for layer in range(LSTM_LAYERS):
            fw = ad.lstm_sequence(h, p[f"lstm{layer}.fw.w_ih"],
                                  p[f"lstm{layer}.fw.w_hh"], p[f"lstm{layer}.fw.b"])
            bw = ad.lstm_sequence(h, p[f"lstm{layer}.bw.w_ih"],
                                  p[f"lstm{layer}.bw.w_hh"], p[f"lstm{layer}.bw.b"],
                                  reverse=True)
            h = ad.concat([fw, bw], axis=2)
        h = ad.transpose(h, (1, 0, 2))  # (B, T, 512)
        h = h @ p["head1.w"] + p["head1.b"]
        if train:
            if rng is None:
                raise ModelError("dropout in train mode needs an rng")
            if self.head_dropout > 0.0:
                h = ad.dropout(h, self.head_dropout, train=True, rng=rng)
        return h @ p["head2.w"] + p["head2.b"]


class Projector:
    """MLP mapping the encoder latent to the 29-dim acoustic space."""

    def __init__(self, d_latent: int, rng: np.random.Generator):
        self.d_latent = d_latent
        p = {
            "proj1.w": Tensor(_kaiming_uniform(rng, d_latent,
                                               (d_latent, PROJECTOR_HIDDEN)), True),
            "proj1.b": Tensor(np.zeros(PROJECTOR_HIDDEN), True),
            "proj2.w": Tensor(_kaiming_uniform(rng, PROJECTOR_HIDDEN,
                                               (PROJECTOR_HIDDEN, ACOUSTIC_DIM)), True),
            "proj2.b": Tensor(np.zeros(ACOUSTIC_DIM), True),
        }
        self.store = ParamStore(p, set())

    def forward(self, latent: Tensor) -> Tensor:
        p = self.store.params
        return ad.gelu(latent @ p["proj1.w"] + p["proj1.b"]) @ p["proj2.w"] + p["proj2.b"]


class SpeechDecoder:
    """Full model: encoder (CNN or ViT) + bi-LSTM decoder + CLIP projector."""

    def __init__(self, encoder_variant: str, grid: GridGeometry, seed: int,
                 cnn_kernel: int = 2, head_dropout: float = HEAD_DROPOUT):
        rng = np.random.default_rng(seed)
        self.grid = grid
        if encoder_variant == "vit":
            self.encoder: ViTEncoder | CNNEncoder = ViTEncoder(grid.flattened_dim, rng)
        elif encoder_variant == "cnn":
            self.encoder = CNNEncoder(grid, cnn_kernel, rng)
        else:
            raise ModelError(f"unknown encoder variant {encoder_variant!r}")
        self.decoder = Decoder(self.encoder.latent_dim, rng,
                               head_dropout=head_dropout)
        self.projector = Projector(self.encoder.latent_dim, rng)

    @property
    def variant(self) -> str:
        return self.encoder.variant

    def prepare_input(self, features: np.ndarray) -> Tensor:
        """(B, E, 21, T) feature batch -> encoder input tensor."""
        b, e, f, t_len = features.shape
        if self.variant == "vit":
            flat = features.transpose(0, 3, 1, 2).reshape(b, t_len, e * f)
            return Tensor(flat)
        x = features.reshape(b, self.grid.n_x, self.grid.n_y, f, t_len)
        return Tensor(x.transpose(0, 4, 3, 1, 2))  # (B, T, 21, n_x, n_y)

    def encode(self, x: Tensor, train: bool = False) -> Tensor:
        return self.encoder.forward(x, train=train)

    def forward(self, x: Tensor, train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        return self.decoder.forward(self.encode(x, train=train), train=train, rng=rng)

    def project(self, latent: Tensor) -> Tensor:
        return self.projector.forward(latent)

    # -- parameter plumbing -------------------------------------------
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"encoder.{k}", v) for k, v in self.encoder.store.named()]
        out += [(f"decoder.{k}", v) for k, v in self.decoder.store.named()]
        out += [(f"projector.{k}", v) for k, v in self.projector.store.named()]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def encoder_and_projector_parameters(self) -> list[Tensor]:
        return ([t for _, t in self.encoder.store.named()]
                + [t for _, t in self.projector.store.named()])

    def patient_specific_names(self) -> set[str]:
        return {f"encoder.{k}" for k in self.encoder.store.patient_specific}

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {name: t.data for name, t in self.named_parameters()}
        if self.variant == "cnn":
            for i, bn in enumerate(self.encoder.bn_states):
                state[f"encoder.bn{i}.running_mean"] = bn.running_mean
                state[f"encoder.bn{i}.running_var"] = bn.running_var
        return state

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        current = self.state_arrays()
        for k, v in snap.items():
            current[k][...] = v

    def save_checkpoint(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        specific = self.patient_specific_names()
        manifest = {"variant": self.variant,
                    "grid": {"n_x": self.grid.n_x, "n_y": self.grid.n_y,
                             "n_features": self.grid.n_features},
                    "kernel": getattr(self.encoder, "kernel", None),
                    "tensors": {}}
        for name, arr in self.state_arrays().items():
            fname = name.replace("/", "_") + ".bin"
            write_tensor(out_dir / fname, arr)
            role = "patient_specific" if name in specific else "shared"
            manifest["tensors"][name] = {"file": fname, "shape": list(arr.shape),
                                         "role": role}
        path = out_dir / "checkpoint.json"
        with open(path, "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
        return path

    @classmethod
    def load_checkpoint(cls, path: str | Path) -> "SpeechDecoder":
        path = Path(path)
        with open(path) as f:
            manifest = json.load(f)
        grid = GridGeometry(**manifest["grid"])
        model = cls(manifest["variant"], grid, seed=0,
                    cnn_kernel=manifest.get("kernel") or 2)
        arrays = model.state_arrays()
        for name, meta in manifest["tensors"].items():
            arrays[name][...] = read_tensor(path.parent / meta["file"])
        return model


def transfer_init(source: SpeechDecoder, target_grid: GridGeometry,
                  seed: int) -> SpeechDecoder:
    """New model for a target participant: shared ViT weights, decoder and
    projector copied; the patient-specific first projection is re-initialized
    for the target input dimension.  CNN sources are rejected."""
    if source.variant != "vit":
        raise ModelError("transfer learning requires a ViT source encoder")
    target = SpeechDecoder("vit", target_grid, seed=seed,
                           head_dropout=source.decoder.head_dropout)
    specific = source.encoder.store.patient_specific
    for k, t in source.encoder.store.named():
        if k not in specific:
            target.encoder.store.params[k].data[...] = t.data
    for k, t in source.decoder.store.named():
        target.decoder.store.params[k].data[...] = t.data
    for k, t in source.projector.store.named():
        target.projector.store.params[k].data[...] = t.data
    return target
