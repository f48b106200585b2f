"""Model assembly: projection, merge hierarchy, mixer blocks, and head.

The network maps a (seq_len x input_dim) frame matrix to class logits:
projection conv (same padding) down to ``d_model`` channels, then per stage
a strided merge conv followed by the stage's blocks, then a final layer
norm, temporal mean pooling, and a two-layer head. Checkpoints are a
bit-exact binary format (magic ``HAFC``).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import ConfigError, CorruptionError, FormatError, ShapeError
from .mixers import (
    BlockParams,
    ChannelMixerKind,
    TokenMixerKind,
    afformer_block,
    channel_param_shapes,
    token_param_shapes,
)
from .tensor import Tensor, add_bias, conv1d, gelu, layer_norm, matmul, mean_pool_time

CHECKPOINT_MAGIC = b"HAFC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 1024
    seq_len: int = 3200
    d_model: int = 8
    proj_kernel: int = 3
    stage_factors: tuple[int, ...] = (4, 2, 2)
    stage_depths: tuple[int, ...] = (2, 2, 1)
    token_mixer: TokenMixerKind = TokenMixerKind.MSDW
    channel_mixer: ChannelMixerKind = ChannelMixerKind.GEGLU
    head_hidden: int = 16
    num_classes: int = 2
    channel_residual: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.seq_len < 1:
            raise ConfigError(f"seq_len must be >= 1, got {self.seq_len}")
        if self.d_model < 1:
            raise ConfigError(f"d_model must be >= 1, got {self.d_model}")
        if self.proj_kernel < 1 or self.proj_kernel % 2 == 0:
            raise ConfigError(f"proj_kernel must be odd and >= 1, got {self.proj_kernel}")
        if len(self.stage_factors) != len(self.stage_depths) or not self.stage_factors:
            raise ConfigError(
                f"stage_factors {self.stage_factors} and stage_depths {self.stage_depths} "
                "must be non-empty and equally long"
            )
        if any(f < 1 for f in self.stage_factors):
            raise ConfigError(f"stage_factors must all be >= 1, got {self.stage_factors}")
        if any(d < 1 for d in self.stage_depths):
            raise ConfigError(f"stage_depths must all be >= 1, got {self.stage_depths}")
        length = self.seq_len
        for i, f in enumerate(self.stage_factors):
            if length % f != 0:
                raise ConfigError(
                    f"seq_len {self.seq_len} is not divisible by the running product of "
                    f"stage_factors at stage {i} (length {length}, factor {f})"
                )
            length //= f
        if self.head_hidden < 1:
            raise ConfigError(f"head_hidden must be >= 1, got {self.head_hidden}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")

    def stage_lengths(self) -> tuple[int, ...]:
        """Frame count after each stage's merge."""
        out = []
        length = self.seq_len
        for f in self.stage_factors:
            length //= f
            out.append(length)
        return tuple(out)

    def num_blocks(self) -> int:
        return sum(self.stage_depths)


class HierarchyPreset(str, Enum):
    H2 = "h2"
    H3_1 = "h3_1"
    H3_2 = "h3_2"
    H4 = "h4"


_PRESET_STAGES: dict[HierarchyPreset, tuple[tuple[int, ...], tuple[int, ...]]] = {
    HierarchyPreset.H2: ((4, 2), (2, 2)),
    HierarchyPreset.H3_1: ((4, 2, 2), (2, 2, 1)),
    HierarchyPreset.H3_2: ((4, 2, 2), (2, 2, 2)),
    HierarchyPreset.H4: ((4, 2, 2, 2), (2, 2, 2, 1)),
}


def apply_preset(preset: HierarchyPreset, cfg: ModelConfig) -> ModelConfig:
    """Overwrite stage_factors/stage_depths from a hierarchy preset."""
    factors, depths = _PRESET_STAGES[HierarchyPreset(preset)]
    out = replace(cfg, stage_factors=factors, stage_depths=depths)
    out.validate()
    return out


class ParameterStore:
    """Ordered name -> leaf Tensor map with gradient slots."""

    def __init__(self):
        self._items: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._items:
            raise ConfigError(f"duplicate parameter name: {name}")
        t = Tensor(value, requires_grad=True)
        self._items[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> list[str]:
        return list(self._items)

    def items(self):
        return self._items.items()

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None

    def total_scalars(self, exclude_prefix: str | None = None) -> int:
        return sum(
            t.value.size
            for name, t in self._items.items()
            if exclude_prefix is None or not name.startswith(exclude_prefix)
        )


def _fan_in(shape: tuple[int, ...]) -> int:
    if len(shape) == 2:  # linear weight stored (in, out), applied as x @ w
        return shape[0]
    if len(shape) == 3:  # conv kernel (Cout, Cin/groups, k)
        return shape[1] * shape[2]
    raise ConfigError(f"no fan-in convention for shape {shape}")


def build_model(cfg: ModelConfig, dtype=np.float64) -> "Model":
    """Allocate and initialize all parameters for ``cfg``.

    Weights are uniform on [-1/sqrt(fan_in), +1/sqrt(fan_in)] drawn from a
    counter-based Philox stream keyed by ``cfg.seed`` in declaration order;
    biases start at zero and norm affines at (1, 0), consuming no draws.
    """
    cfg.validate()
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    store = ParameterStore()
    d = cfg.d_model

    def uniform(shape):
        bound = 1.0 / math.sqrt(_fan_in(shape))
        return rng.uniform(-bound, bound, size=shape).astype(dtype, copy=False)

    def zeros(shape):
        return np.zeros(shape, dtype=dtype)

    def ones(shape):
        return np.ones(shape, dtype=dtype)

    def add_mixer(prefix, shapes):
        for name, shape in shapes.items():
            init = zeros(shape) if len(shape) == 1 else uniform(shape)
            store.add(f"{prefix}.{name}", init)

    store.add("projection.weight", uniform((d, cfg.input_dim, cfg.proj_kernel)))
    store.add("projection.bias", zeros((d,)))
    for s, (factor, depth) in enumerate(zip(cfg.stage_factors, cfg.stage_depths)):
        store.add(f"stage{s}.merge.weight", uniform((d, d, factor)))
        store.add(f"stage{s}.merge.bias", zeros((d,)))
        for b in range(depth):
            prefix = f"stage{s}.block{b}"
            store.add(f"{prefix}.token_norm.gamma", ones((d,)))
            store.add(f"{prefix}.token_norm.beta", zeros((d,)))
            add_mixer(f"{prefix}.token", token_param_shapes(cfg.token_mixer, d))
            store.add(f"{prefix}.channel_norm.gamma", ones((d,)))
            store.add(f"{prefix}.channel_norm.beta", zeros((d,)))
            add_mixer(f"{prefix}.channel", channel_param_shapes(cfg.channel_mixer, d))
    store.add("final_norm.gamma", ones((d,)))
    store.add("final_norm.beta", zeros((d,)))
    store.add("head.fc1.weight", uniform((d, cfg.head_hidden)))
    store.add("head.fc1.bias", zeros((cfg.head_hidden,)))
    store.add("head.fc2.weight", uniform((cfg.head_hidden, cfg.num_classes)))
    store.add("head.fc2.bias", zeros((cfg.num_classes,)))
    return Model(cfg, store, dtype)


@dataclass
class Model:
    """A built network: config, parameters, and the layer plan."""

    cfg: ModelConfig
    params: ParameterStore
    dtype: type = np.float64
    plan: list[dict] = field(init=False)

    def __post_init__(self):
        self._blocks: dict[tuple[int, int], BlockParams] = {}
        plan: list[dict] = [
            {
                "layer": "projection",
                "kernel": self.cfg.proj_kernel,
                "in_dim": self.cfg.input_dim,
                "out_dim": self.cfg.d_model,
                "frames": self.cfg.seq_len,
            }
        ]
        length = self.cfg.seq_len
        try:
            for s, (factor, depth) in enumerate(
                zip(self.cfg.stage_factors, self.cfg.stage_depths)
            ):
                length //= factor
                plan.append(
                    {"layer": "merge", "stage": s, "factor": factor, "frames": length}
                )
                for b in range(depth):
                    self._blocks[(s, b)] = self._wire_block(s, b)
                    plan.append(
                        {
                            "layer": "block",
                            "stage": s,
                            "index": b,
                            "token": self.cfg.token_mixer.value,
                            "channel": self.cfg.channel_mixer.value,
                            "frames": length,
                        }
                    )
            plan.append({"layer": "final_norm", "frames": length})
            plan.append(
                {
                    "layer": "head",
                    "hidden": self.cfg.head_hidden,
                    "classes": self.cfg.num_classes,
                }
            )
        except KeyError as exc:
            raise FormatError(f"parameter store is missing {exc.args[0]}") from None
        self.plan = plan

    def _wire_block(self, s: int, b: int) -> BlockParams:
        store, d = self.params, self.cfg.d_model
        prefix = f"stage{s}.block{b}"
        token = {
            name: store[f"{prefix}.token.{name}"]
            for name in token_param_shapes(self.cfg.token_mixer, d)
        }
        channel = {
            name: store[f"{prefix}.channel.{name}"]
            for name in channel_param_shapes(self.cfg.channel_mixer, d)
        }
        return BlockParams(
            token=token,
            channel=channel,
            token_gamma=store[f"{prefix}.token_norm.gamma"],
            token_beta=store[f"{prefix}.token_norm.beta"],
            channel_gamma=store[f"{prefix}.channel_norm.gamma"],
            channel_beta=store[f"{prefix}.channel_norm.beta"],
        )

    def block_params(self, stage: int, index: int) -> BlockParams:
        return self._blocks[(stage, index)]

    def stage_lengths(self) -> tuple[int, ...]:
        return self.cfg.stage_lengths()

    def forward(self, x, trace: list | None = None) -> Tensor:
        """Run the network on one sequence; returns raw logits (1 x classes).

        ``trace``, when given, collects the (frames, channels) shape after
        each stage.
        """
        cfg = self.cfg
        arr = np.asarray(x)
        if arr.shape != (cfg.seq_len, cfg.input_dim):
            raise ShapeError(
                f"input: expected {(cfg.seq_len, cfg.input_dim)}, got {arr.shape}"
            )
        store = self.params
        h = Tensor(arr.astype(self.dtype, copy=False), requires_grad=False)
        h = conv1d(
            h,
            store["projection.weight"],
            store["projection.bias"],
            stride=1,
            padding=cfg.proj_kernel // 2,
        )
        for s, (factor, depth) in enumerate(zip(cfg.stage_factors, cfg.stage_depths)):
            h = conv1d(
                h,
                store[f"stage{s}.merge.weight"],
                store[f"stage{s}.merge.bias"],
                stride=factor,
                padding=0,
            )
            for b in range(depth):
                h = afformer_block(
                    cfg.token_mixer,
                    cfg.channel_mixer,
                    self._blocks[(s, b)],
                    h,
                    channel_residual=cfg.channel_residual,
                )
            if trace is not None:
                trace.append((f"stage{s}", h.value.shape))
        h = layer_norm(h, store["final_norm.gamma"], store["final_norm.beta"])
        h = mean_pool_time(h)
        h = gelu(add_bias(matmul(h, store["head.fc1.weight"]), store["head.fc1.bias"]))
        return add_bias(matmul(h, store["head.fc2.weight"]), store["head.fc2.bias"])


# ---------------------------------------------------------------------------
# checkpoint serialization


def _config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "input_dim": cfg.input_dim,
        "seq_len": cfg.seq_len,
        "d_model": cfg.d_model,
        "proj_kernel": cfg.proj_kernel,
        "stage_factors": list(cfg.stage_factors),
        "stage_depths": list(cfg.stage_depths),
        "token_mixer": cfg.token_mixer.value,
        "channel_mixer": cfg.channel_mixer.value,
        "head_hidden": cfg.head_hidden,
        "num_classes": cfg.num_classes,
        "channel_residual": cfg.channel_residual,
        "seed": cfg.seed,
    }


def _config_from_dict(payload: dict) -> ModelConfig:
    expected = set(_config_to_dict(ModelConfig()))
    got = set(payload)
    if got != expected:
        raise FormatError(
            f"config fields do not match: missing {sorted(expected - got)}, "
            f"unexpected {sorted(got - expected)}"
        )
    try:
        return ModelConfig(
            input_dim=int(payload["input_dim"]),
            seq_len=int(payload["seq_len"]),
            d_model=int(payload["d_model"]),
            proj_kernel=int(payload["proj_kernel"]),
            stage_factors=tuple(int(v) for v in payload["stage_factors"]),
            stage_depths=tuple(int(v) for v in payload["stage_depths"]),
            token_mixer=TokenMixerKind(payload["token_mixer"]),
            channel_mixer=ChannelMixerKind(payload["channel_mixer"]),
            head_hidden=int(payload["head_hidden"]),
            num_classes=int(payload["num_classes"]),
            channel_residual=bool(payload["channel_residual"]),
            seed=int(payload["seed"]),
        )
    except (TypeError, ValueError) as exc:
        raise FormatError(f"invalid config payload: {exc}") from None


def save_checkpoint(model: Model, path) -> None:
    """Write magic, version, config JSON, then parameters in name order."""
    cfg_json = json.dumps(
        _config_to_dict(model.cfg), sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(cfg_json)))
        fh.write(cfg_json)
        names = sorted(model.params.names())
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            encoded = name.encode("utf-8")
            value = model.params[name].value
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def _read_exact(fh, n: int, path, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CorruptionError(f"{path}: truncated while reading {what}")
    return data


def load_checkpoint(path, dtype=np.float64) -> Model:
    """Inverse of ``save_checkpoint``; round-trips bit-exactly."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, path, "config length"))
        try:
            payload = json.loads(_read_exact(fh, cfg_len, path, "config").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptionError(f"{path}: unreadable config block: {exc}") from None
        cfg = _config_from_dict(payload)
        (count,) = struct.unpack("<I", _read_exact(fh, 4, path, "parameter count"))
        values: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, path, "name length"))
            name = _read_exact(fh, name_len, path, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, path, "rank"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, path, "shape"))
            size = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 8 * size, path, f"values of {name}")
            values[name] = np.frombuffer(raw, dtype="<f8").reshape(shape)
        if fh.read(1):
            raise CorruptionError(f"{path}: trailing bytes after last parameter")

    model = build_model(cfg, dtype=dtype)
    expected = set(model.params.names())
    if set(values) != expected:
        raise FormatError(
            f"{path}: parameter names do not match the config: "
            f"missing {sorted(expected - set(values))}, "
            f"unexpected {sorted(set(values) - expected)}"
        )
    for name, arr in values.items():
        tensor = model.params[name]
        if arr.shape != tensor.value.shape:
            raise FormatError(
                f"{path}: parameter {name} has shape {arr.shape}, "
                f"expected {tensor.value.shape}"
            )
        tensor.value = arr.astype(dtype)
    return model
