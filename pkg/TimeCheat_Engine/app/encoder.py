import enum
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from app.errors import ConfigError, ShapeError
from app.layers import Linear, collect_parameters, constant, ones, zeros
from app.tensor import (
    Tensor,
    add,
    layer_norm,
    matmul,
    relu,
    reshape,
    scale,
    softmax,
    transpose,
)


class EncoderMode(enum.Enum):
    CI = "ci"
    CD = "cd"


def resolve_mode(value) -> EncoderMode:
    if isinstance(value, EncoderMode):
        return value
    try:
        return EncoderMode(str(value).strip().lower())
    except ValueError as exc:
        raise ConfigError(f"unknown encoder mode '{value}' (expected 'ci' or 'cd')") from exc


@dataclass
class EncoderLayerParams:
    query: Linear
    key: Linear
    value: Linear
    output: Linear
    norm1_gain: Tensor
    norm1_bias: Tensor
    ffn_in: Linear
    ffn_out: Linear
    norm2_gain: Tensor
    norm2_bias: Tensor


@dataclass
class EncoderParams:
    layers: List[EncoderLayerParams]
    num_heads: int
    mode: EncoderMode = EncoderMode.CI

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        patch_dim: int,
        num_layers: int = 2,
        num_heads: int = 2,
        ffn_dim: Optional[int] = None,
        mode=EncoderMode.CI,
        dtype=None,
    ) -> "EncoderParams":
        if patch_dim % 2 != 0:
            raise ConfigError(f"patch dimension T_P must be even, got {patch_dim}")
        if patch_dim % num_heads != 0:
            raise ConfigError(f"encoder heads ({num_heads}) must divide T_P ({patch_dim})")
        ffn_dim = ffn_dim or 2 * patch_dim
        layers = []
        for index in range(num_layers):
            prefix = f"encoder.layers.{index}"
            layers.append(
                EncoderLayerParams(
                    query=Linear.init(rng, patch_dim, patch_dim, f"{prefix}.query", dtype),
                    key=Linear.init(rng, patch_dim, patch_dim, f"{prefix}.key", dtype),
                    value=Linear.init(rng, patch_dim, patch_dim, f"{prefix}.value", dtype),
                    output=Linear.init(rng, patch_dim, patch_dim, f"{prefix}.output", dtype),
                    norm1_gain=ones((patch_dim,), f"{prefix}.norm1.gain", dtype),
                    norm1_bias=zeros((patch_dim,), f"{prefix}.norm1.bias", dtype),
                    ffn_in=Linear.init(rng, patch_dim, ffn_dim, f"{prefix}.ffn_in", dtype),
                    ffn_out=Linear.init(rng, ffn_dim, patch_dim, f"{prefix}.ffn_out", dtype),
                    norm2_gain=ones((patch_dim,), f"{prefix}.norm2.gain", dtype),
                    norm2_bias=zeros((patch_dim,), f"{prefix}.norm2.bias", dtype),
                )
            )
        return cls(layers=layers, num_heads=num_heads, mode=resolve_mode(mode))

    @property
    def patch_dim(self) -> Optional[int]:
        return self.layers[0].query.fan_in if self.layers else None

    def parameters(self):
        return collect_parameters(self)


@dataclass
class SeriesRepresentation:
    R: Tensor
    attention: List[np.ndarray] = field(default_factory=list, repr=False)


def positional_encoding(num_patches: int, patch_dim: int) -> np.ndarray:
    """Sinusoidal patch-position encoding of shape (P, T_P)."""
    if patch_dim % 2 != 0:
        raise ConfigError(f"patch dimension T_P must be even, got {patch_dim}")
    positions = np.arange(num_patches, dtype=np.float64)[:, None]
    pairs = np.arange(0, patch_dim, 2, dtype=np.float64)
    angles = positions / np.power(10000.0, pairs / patch_dim)
    encoding = np.zeros((num_patches, patch_dim))
    encoding[:, 0::2] = np.sin(angles)
    encoding[:, 1::2] = np.cos(angles)
    return encoding


def _attention_block(tokens: Tensor, layer: EncoderLayerParams, num_heads: int, keep: Optional[list]) -> Tensor:
    sequences, length, width = tokens.shape
    head_width = width // num_heads
    flat = reshape(tokens, (sequences * length, width))

    def split(projected: Tensor) -> Tensor:
        shaped = reshape(projected, (sequences, length, num_heads, head_width))
        return reshape(transpose(shaped, (0, 2, 1, 3)), (sequences * num_heads, length, head_width))

    queries = split(layer.query(flat))
    keys = split(layer.key(flat))
    values = split(layer.value(flat))
    scores = scale(matmul(queries, transpose(keys, (0, 2, 1))), 1.0 / np.sqrt(head_width))
    weights = softmax(scores)
    if keep is not None:
        keep.append(weights.data.reshape(sequences, num_heads, length, length).copy())
    context = reshape(matmul(weights, values), (sequences, num_heads, length, head_width))
    merged = reshape(transpose(context, (0, 2, 1, 3)), (sequences * length, width))

    attended = layer_norm(add(flat, layer.output(merged)), layer.norm1_gain, layer.norm1_bias)
    expanded = layer.ffn_out(relu(layer.ffn_in(attended)))
    out = layer_norm(add(attended, expanded), layer.norm2_gain, layer.norm2_bias)
    return reshape(out, (sequences, length, width))


def encode(H: Tensor, params: EncoderParams, keep_attention: bool = False) -> SeriesRepresentation:
    """
    Map patch embeddings H of shape (B, P, C, T_P), or (P, C, T_P) for one instance,
    to a representation R of the same shape.
    """
    single = H.ndim == 3
    if single:
        H = reshape(H, (1,) + H.shape)
    if H.ndim != 4:
        raise ShapeError("encode", H.shape, detail="expected (P, C, T_P) or (B, P, C, T_P)")
    batch, num_patches, num_channels, width = H.shape
    if params.patch_dim is not None and width != params.patch_dim:
        raise ShapeError(
            "encode",
            H.shape,
            (batch, num_patches, num_channels, params.patch_dim),
            detail=f"expected (P, C, T_P) with T_P={params.patch_dim}",
        )

    pe = positional_encoding(num_patches, width)
    if params.mode is EncoderMode.CI:
        tokens = reshape(transpose(H, (0, 2, 1, 3)), (batch * num_channels, num_patches, width))
        position = np.tile(pe[None], (batch * num_channels, 1, 1))
    else:
        tokens = reshape(H, (batch, num_patches * num_channels, width))
        position = np.tile(np.repeat(pe, num_channels, axis=0)[None], (batch, 1, 1))
    tokens = add(tokens, constant(position, H))

    attention: Optional[list] = [] if keep_attention else None
    for layer in params.layers:
        tokens = _attention_block(tokens, layer, params.num_heads, attention)

    if params.mode is EncoderMode.CI:
        R = transpose(reshape(tokens, (batch, num_channels, num_patches, width)), (0, 2, 1, 3))
    else:
        R = reshape(tokens, (batch, num_patches, num_channels, width))
    if single:
        R = reshape(R, (num_patches, num_channels, width))
    return SeriesRepresentation(R=R, attention=attention or [])
