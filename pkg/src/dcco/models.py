"""Shared-weight MLP encoder with a fully-connected projection head.

Every layer except the last projection layer is ``affine -> group norm ->
relu``, optionally with weight standardization on the affine weights. The
last projection layer is a plain affine map. Weights are stored
``(out_features, in_features)``.
"""

from __future__ import annotations

import functools
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import IndivisibleWidth, InvalidConfig, ParseError, ShapeMismatch

GN_EPS = 1e-5
WS_EPS = 1e-10


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 64
    hidden_dims: tuple[int, ...] = (128, 128)
    # Optional extra body layer; when None the encoder output is the last
    # hidden layer (or the raw input when there are no hidden layers).
    embed_dim: int | None = None
    projection_dims: tuple[int, ...] = (128, 128, 128)
    groups: int = 8
    weight_standardization: bool = True
    gn_eps: float = GN_EPS
    ws_eps: float = WS_EPS

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "projection_dims", tuple(int(p) for p in self.projection_dims))
        self.validate()

    def validate(self) -> None:
        if self.input_dim < 1:
            raise InvalidConfig("input_dim must be >= 1", "input_dim")
        if not self.projection_dims:
            raise InvalidConfig("projection_dims must be non-empty", "projection_dims")
        if self.groups < 1:
            raise InvalidConfig("groups must be >= 1", "groups")
        for name, width in self._normed_widths():
            if width < 1:
                raise InvalidConfig(f"{name} width must be >= 1", name)
            if width % self.groups:
                raise IndivisibleWidth(
                    f"{name} width {width} not divisible by groups={self.groups}", name
                )
        if self.projection_dims[-1] < 1:
            raise InvalidConfig("last projection width must be >= 1", "projection_dims")

    def _normed_widths(self):
        for i, h in enumerate(self.hidden_dims):
            yield f"hidden_dims[{i}]", h
        if self.embed_dim is not None:
            yield "embed_dim", self.embed_dim
        for i, p in enumerate(self.projection_dims[:-1]):
            yield f"projection_dims[{i}]", p

    @property
    def feature_dim(self) -> int:
        """Width of the encoder output used by downstream probes."""
        if self.embed_dim is not None:
            return self.embed_dim
        if self.hidden_dims:
            return self.hidden_dims[-1]
        return self.input_dim

    @property
    def out_dim(self) -> int:
        return self.projection_dims[-1]

    def body_layers(self) -> list[tuple[str, int, int]]:
        layers, width = [], self.input_dim
        for i, h in enumerate(self.hidden_dims):
            layers.append((f"hidden{i}", width, h))
            width = h
        if self.embed_dim is not None:
            layers.append(("embed", width, self.embed_dim))
        return layers

    def head_layers(self) -> list[tuple[str, int, int]]:
        layers, width = [], self.feature_dim
        for i, p in enumerate(self.projection_dims):
            layers.append((f"proj{i}", width, p))
            width = p
        return layers

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        d["projection_dims"] = list(self.projection_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EncoderConfig:
        return cls(**d)


class ModelParams(dict):
    """Ordered ``name -> float64 array`` mapping.

    Insertion order is the canonical order used for aggregation and
    serialization. ``config`` is the :class:`EncoderConfig` when the params
    belong to an encoder, else ``None``.
    """

    def __init__(self, items=(), config: EncoderConfig | None = None):
        super().__init__(items)
        self.config = config

    def clone(self) -> ModelParams:
        return ModelParams(((k, np.array(v, copy=True)) for k, v in self.items()), self.config)

    def map(self, fn) -> ModelParams:
        return ModelParams(((k, fn(k, v)) for k, v in self.items()), self.config)

    def check_aligned(self, other) -> None:
        if list(self.keys()) != list(other.keys()):
            raise ShapeMismatch("parameter names differ")
        for k, v in self.items():
            if v.shape != other[k].shape:
                raise ShapeMismatch(f"{k}: {v.shape} vs {other[k].shape}")

    def bitwise_equal(self, other) -> bool:
        if list(self.keys()) != list(other.keys()):
            return False
        return all(
            self[k].shape == other[k].shape and self[k].tobytes() == np.asarray(other[k]).tobytes()
            for k in self
        )

    def max_abs_diff(self, other) -> float:
        self.check_aligned(other)
        return max((float(np.max(np.abs(self[k] - other[k]))) for k in self), default=0.0)


def _is_normed(name: str, config: EncoderConfig) -> bool:
    return name != f"proj{len(config.projection_dims) - 1}"


def init_params(config: EncoderConfig, seed: int) -> ModelParams:
    """Fan-in-scaled uniform weights ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``.

    Biases and norm shifts start at zero, norm scales at one.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    params = ModelParams(config=config)
    for name, fan_in, fan_out in config.body_layers() + config.head_layers():
        bound = np.sqrt(6.0 / fan_in)
        params[f"{name}/w"] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        params[f"{name}/b"] = np.zeros(fan_out)
        if _is_normed(name, config):
            params[f"{name}/gn_scale"] = np.ones(fan_out)
            params[f"{name}/gn_shift"] = np.zeros(fan_out)
    return params


def is_decay_exempt(name: str) -> bool:
    """Biases and normalization parameters are excluded from weight decay."""
    return not name.endswith("/w")


def bind_params(graph: ad.Graph, params: ModelParams, prefix: str = "") -> dict:
    nodes = {name: graph.param(prefix + name, value) for name, value in params.items()}
    return _ParamNodes(nodes, params.config)


class _ParamNodes(dict):
    def __init__(self, nodes, config):
        super().__init__(nodes)
        self.config = config


@functools.lru_cache(maxsize=None)
def _group_matrix(width: int, groups: int) -> np.ndarray:
    member = np.kron(np.eye(groups), np.ones((width // groups, 1)))
    member.flags.writeable = False
    return member


@functools.lru_cache(maxsize=None)
def _group_matrix_t(width: int, groups: int) -> np.ndarray:
    member_t = np.ascontiguousarray(_group_matrix(width, groups).T)
    member_t.flags.writeable = False
    return member_t


def group_norm(x: ad.Node, groups: int, scale=None, shift=None, eps: float = GN_EPS) -> ad.Node:
    """Per-sample group normalization of an ``N x w`` node.

    Group reductions are matmuls against a fixed ``w x groups`` membership
    matrix, so no sample ever mixes with another row.
    """
    width = x.shape[1]
    if width % groups:
        raise IndivisibleWidth(f"width {width} not divisible by groups={groups}", "groups")
    g = x.graph
    size = width // groups
    member = g.constant(_group_matrix(width, groups))
    member_t = g.constant(_group_matrix_t(width, groups))
    group_mean = (x @ member) / size
    centered = x - group_mean @ member_t
    group_var = (ad.square(centered) @ member) / size
    out = centered / (ad.sqrt(group_var + eps) @ member_t)
    if scale is not None:
        out = out * scale
    if shift is not None:
        out = out + shift
    return out


def standardize_weights(w: ad.Node, eps: float = WS_EPS) -> ad.Node:
    """Zero-mean, unit-variance incoming weights per output unit (row)."""
    centered = w - ad.mean(w, axis=1, keepdims=True)
    var = ad.mean(ad.square(centered), axis=1, keepdims=True)
    return centered / ad.sqrt(var + eps)


def _layer(h, nodes, name, config, normed):
    w = nodes[f"{name}/w"]
    if normed and config.weight_standardization:
        w = standardize_weights(w, config.ws_eps)
    h = h @ w.T + nodes[f"{name}/b"]
    if normed:
        h = group_norm(h, config.groups, nodes[f"{name}/gn_scale"], nodes[f"{name}/gn_shift"],
                       config.gn_eps)
        h = ad.relu(h)
    return h


def _as_nodes(params, graph):
    if isinstance(params, _ParamNodes):
        return params
    return bind_params(graph, params)


def _as_batch(batch, graph, width):
    node = batch if isinstance(batch, ad.Node) else graph.constant(batch)
    if node.value is not None:
        if node.value.ndim != 2 or node.shape[1] != width or node.shape[0] < 1:
            raise ShapeMismatch(f"batch shape {node.shape}, expected (N>=1, {width})")
    return node


def embed(params, batch, graph: ad.Graph) -> ad.Node:
    """Encoder body only: the features a downstream classifier sees."""
    nodes = _as_nodes(params, graph)
    config = nodes.config
    h = _as_batch(batch, graph, config.input_dim)
    for name, _, _ in config.body_layers():
        h = _layer(h, nodes, name, config, True)
    return h


def project(params, features: ad.Node, graph: ad.Graph) -> ad.Node:
    nodes = _as_nodes(params, graph)
    config = nodes.config
    h = features
    for name, _, _ in config.head_layers():
        h = _layer(h, nodes, name, config, _is_normed(name, config))
    return h


def encode(params, batch, graph: ad.Graph) -> ad.Node:
    """Body followed by projection head: ``N x input_dim -> N x d``."""
    nodes = _as_nodes(params, graph)
    return project(nodes, embed(nodes, batch, graph), graph)


def encode_values(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    g = ad.Graph()
    return encode(params, batch, g).value


def embed_values(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    g = ad.Graph()
    return embed(params, batch, g).value


# Checkpoint container (all little-endian):
#   magic b"DCCOPRM" | version u8 | meta_len u32 | meta JSON (utf-8)
#   | record_count u32 | records
# record: name_len u16 | name utf-8 | ndim u8 | dims u64[ndim] | float64[prod(dims)]

PARAMS_MAGIC = b"DCCOPRM"
PARAMS_VERSION = 1


def params_to_bytes(params: ModelParams, meta: dict | None = None) -> bytes:
    meta = dict(meta or {})
    if params.config is not None and "encoder_config" not in meta:
        meta["encoder_config"] = params.config.to_dict()
    meta_bytes = json.dumps(meta, sort_keys=True).encode() if meta else b""
    out = [PARAMS_MAGIC, struct.pack("<BI", PARAMS_VERSION, len(meta_bytes)), meta_bytes,
           struct.pack("<I", len(params))]
    for name, value in params.items():
        raw = name.encode()
        arr = np.ascontiguousarray(value, dtype="<f8")
        out.append(struct.pack("<HB", len(raw), arr.ndim))
        out.append(raw)
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def params_from_bytes(data: bytes) -> tuple[ModelParams, dict]:
    view = memoryview(data)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise ParseError(f"truncated while reading {what}", f"offset {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(len(PARAMS_MAGIC), "magic")) != PARAMS_MAGIC:
        raise ParseError("bad magic", "offset 0")
    version, meta_len = struct.unpack("<BI", take(5, "header"))
    if version != PARAMS_VERSION:
        raise ParseError(f"unsupported version {version}", f"offset {len(PARAMS_MAGIC)}")
    meta = json.loads(bytes(take(meta_len, "metadata"))) if meta_len else {}
    (count,) = struct.unpack("<I", take(4, "record count"))
    config = None
    if "encoder_config" in meta:
        config = EncoderConfig.from_dict(meta["encoder_config"])
    params = ModelParams(config=config)
    for _ in range(count):
        name_len, ndim = struct.unpack("<HB", take(3, "record header"))
        name = bytes(take(name_len, "record name")).decode()
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim, "record shape"))
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * n, f"payload of {name}"), dtype="<f8").reshape(shape)
        # Zero-copy read-only view; bytes are immutable so the array is too.
        params[name] = arr if arr.dtype == np.float64 else arr.astype(np.float64)
    if pos != len(view):
        raise ParseError("trailing bytes", f"offset {pos}")
    return params, meta


def save_params(path, params: ModelParams, meta: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(params_to_bytes(params, meta))
    tmp.replace(path)


def load_params(path) -> tuple[ModelParams, dict]:
    return params_from_bytes(Path(path).read_bytes())
