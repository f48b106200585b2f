"""Token and channel mixers plus the block that composes one of each.

Every mixer is a pre-norm residual sublayer: Y = Mix(LN(X)) + X. Token
mixers act along the frame axis, channel mixers along the feature axis.
Parameter bundles are plain name -> Tensor mappings whose layouts are
declared here so model assembly and cost accounting stay in sync.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError
from .tensor import (
    Tensor,
    add,
    add_bias,
    avg_pool_channels,
    avg_pool_time,
    conv1d,
    gelu,
    layer_norm,
    matmul,
    mul,
    scale,
    softmax_rows,
    transpose,
)

DW_KERNEL = 7
POOL_KERNEL = 3
ISC_EXPANSION = 2
GEGLU_EXPANSION = 2
FFN_EXPANSION = 4
LN_EPS = 1e-5


class TokenMixerKind(str, Enum):
    SELF_ATTENTION = "self_attention"
    POOL = "pool"
    IDENTITY = "identity"
    ISC = "isc"
    DW = "dw"
    MSDW = "msdw"


class ChannelMixerKind(str, Enum):
    FFN = "ffn"
    POOL = "pool"
    IDENTITY = "identity"
    GEGLU = "geglu"


ALL_MIXER_COMBOS: list[tuple[TokenMixerKind, ChannelMixerKind]] = [
    (tk, ck) for tk in TokenMixerKind for ck in ChannelMixerKind
]

# token mixers whose depthwise kernel dominates very short sequences
CONV_TOKEN_KINDS = (TokenMixerKind.ISC, TokenMixerKind.DW, TokenMixerKind.MSDW)


def token_param_shapes(kind: TokenMixerKind, d: int) -> dict[str, tuple[int, ...]]:
    """Parameter layout of a token mixer at width ``d`` (insertion order fixed).

    Linear (FC) weights carry biases; mixer convolutions are bias-free.
    """
    if kind == TokenMixerKind.SELF_ATTENTION:
        return {
            "wq": (d, d), "bq": (d,),
            "wk": (d, d), "bk": (d,),
            "wv": (d, d), "bv": (d,),
            "wo": (d, d), "bo": (d,),
        }
    if kind == TokenMixerKind.ISC:
        hidden = ISC_EXPANSION * d
        return {
            "expand": (d, hidden),
            "depthwise": (hidden, 1, DW_KERNEL),
            "project": (hidden, d),
        }
    if kind == TokenMixerKind.DW:
        return {"depthwise": (d, 1, DW_KERNEL)}
    if kind == TokenMixerKind.MSDW:
        return {"depthwise7": (d, 1, DW_KERNEL), "depthwise1": (d, 1, 1)}
    if kind in (TokenMixerKind.POOL, TokenMixerKind.IDENTITY):
        return {}
    raise ConfigError(f"unknown token mixer kind: {kind}")


def channel_param_shapes(kind: ChannelMixerKind, d: int) -> dict[str, tuple[int, ...]]:
    """Parameter layout of a channel mixer at width ``d``."""
    if kind == ChannelMixerKind.FFN:
        hidden = FFN_EXPANSION * d
        return {
            "w_in": (d, hidden), "b_in": (hidden,),
            "w_out": (hidden, d), "b_out": (d,),
        }
    if kind == ChannelMixerKind.GEGLU:
        hidden = GEGLU_EXPANSION * d
        return {
            "w1": (d, hidden), "b1": (hidden,),
            "w2": (d, hidden), "b2": (hidden,),
            "w3": (hidden, d), "b3": (d,),
        }
    if kind in (ChannelMixerKind.POOL, ChannelMixerKind.IDENTITY):
        return {}
    raise ConfigError(f"unknown channel mixer kind: {kind}")


def param_count(shapes: dict[str, tuple[int, ...]]) -> int:
    return sum(int(np.prod(s)) for s in shapes.values())


def token_mix(
    kind: TokenMixerKind,
    params: dict[str, Tensor],
    gamma: Tensor,
    beta: Tensor,
    x: Tensor,
    eps: float = LN_EPS,
) -> Tensor:
    """Pre-norm residual token sublayer: Mix(LN(x)) + x along the frame axis."""
    z = layer_norm(x, gamma, beta, eps)
    if kind == TokenMixerKind.SELF_ATTENTION:
        d = x.value.shape[1]
        q = add_bias(matmul(z, params["wq"]), params["bq"])
        k = add_bias(matmul(z, params["wk"]), params["bk"])
        v = add_bias(matmul(z, params["wv"]), params["bv"])
        attn = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d)))
        out = add_bias(matmul(matmul(attn, v), params["wo"]), params["bo"])
    elif kind == TokenMixerKind.POOL:
        out = avg_pool_time(z, POOL_KERNEL)
    elif kind == TokenMixerKind.IDENTITY:
        out = z
    elif kind == TokenMixerKind.ISC:
        hidden = gelu(matmul(z, params["expand"]))
        hidden = gelu(
            conv1d(
                hidden,
                params["depthwise"],
                stride=1,
                padding=DW_KERNEL // 2,
                groups=hidden.value.shape[1],
            )
        )
        out = matmul(hidden, params["project"])
    elif kind == TokenMixerKind.DW:
        out = conv1d(
            z, params["depthwise"], stride=1, padding=DW_KERNEL // 2, groups=z.value.shape[1]
        )
    elif kind == TokenMixerKind.MSDW:
        d = z.value.shape[1]
        wide = conv1d(z, params["depthwise7"], stride=1, padding=DW_KERNEL // 2, groups=d)
        narrow = conv1d(z, params["depthwise1"], stride=1, padding=0, groups=d)
        out = gelu(add(wide, narrow))
    else:
        raise ConfigError(f"unknown token mixer kind: {kind}")
    return add(out, x)


def channel_mix(
    kind: ChannelMixerKind,
    params: dict[str, Tensor],
    gamma: Tensor,
    beta: Tensor,
    x: Tensor,
    eps: float = LN_EPS,
    residual: bool = True,
) -> Tensor:
    """Pre-norm channel sublayer: Mix(LN(x)) (+ x) along the feature axis."""
    z = layer_norm(x, gamma, beta, eps)
    if kind == ChannelMixerKind.FFN:
        hidden = gelu(add_bias(matmul(z, params["w_in"]), params["b_in"]))
        out = add_bias(matmul(hidden, params["w_out"]), params["b_out"])
    elif kind == ChannelMixerKind.GEGLU:
        gate = gelu(add_bias(matmul(z, params["w1"]), params["b1"]))
        value = add_bias(matmul(z, params["w2"]), params["b2"])
        out = add_bias(matmul(mul(gate, value), params["w3"]), params["b3"])
    elif kind == ChannelMixerKind.POOL:
        out = avg_pool_channels(z, POOL_KERNEL)
    elif kind == ChannelMixerKind.IDENTITY:
        out = z
    else:
        raise ConfigError(f"unknown channel mixer kind: {kind}")
    return add(out, x) if residual else out


@dataclass
class BlockParams:
    """Parameters of one block: two norm affines plus the two mixer bundles."""

    token: dict[str, Tensor]
    channel: dict[str, Tensor]
    token_gamma: Tensor
    token_beta: Tensor
    channel_gamma: Tensor
    channel_beta: Tensor

    def tensors(self) -> list[Tensor]:
        out = [self.token_gamma, self.token_beta]
        out.extend(self.token.values())
        out.extend([self.channel_gamma, self.channel_beta])
        out.extend(self.channel.values())
        return out


def afformer_block(
    token_kind: TokenMixerKind,
    channel_kind: ChannelMixerKind,
    params: BlockParams,
    x: Tensor,
    eps: float = LN_EPS,
    channel_residual: bool = True,
) -> Tensor:
    """Token sublayer followed by channel sublayer; shape preserving."""
    if token_kind in CONV_TOKEN_KINDS and x.value.shape[0] < DW_KERNEL:
        warnings.warn(
            f"block input has {x.value.shape[0]} frames, below the depthwise kernel "
            f"{DW_KERNEL}; zero padding dominates the receptive field",
            RuntimeWarning,
            stacklevel=2,
        )
    h = token_mix(token_kind, params.token, params.token_gamma, params.token_beta, x, eps)
    return channel_mix(
        channel_kind,
        params.channel,
        params.channel_gamma,
        params.channel_beta,
        h,
        eps,
        residual=channel_residual,
    )


def random_block_params(
    token_kind: TokenMixerKind,
    channel_kind: ChannelMixerKind,
    d: int,
    rng: np.random.Generator,
    spread: float = 0.4,
) -> BlockParams:
    """Random leaf parameters for one block; verification-harness helper."""

    def draw(shapes):
        return {name: Tensor(spread * rng.standard_normal(s)) for name, s in shapes.items()}

    return BlockParams(
        token=draw(token_param_shapes(token_kind, d)),
        channel=draw(channel_param_shapes(channel_kind, d)),
        token_gamma=Tensor(1.0 + 0.1 * rng.standard_normal(d)),
        token_beta=Tensor(0.1 * rng.standard_normal(d)),
        channel_gamma=Tensor(1.0 + 0.1 * rng.standard_normal(d)),
        channel_beta=Tensor(0.1 * rng.standard_normal(d)),
    )
