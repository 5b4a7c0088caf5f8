"""Federated round state machine: DCCO, FedAvg baselines and the centralized step.

Everything that crosses the client/server boundary is a :class:`Frame`
holding the serialized bytes of a :class:`ModelParams`, an
:class:`EncodingStats` or a :class:`ModelDelta`. Clients decode what they
receive and servers decode what they collect, so no in-memory object is
shared across the boundary.

A DCCO round has four message phases per participating client::

    MODEL_BROADCAST  server -> client   current model
    STATS_UPLOAD     client -> server   local encoding statistics
    AGG_STATS_BCAST  server -> client   aggregated statistics
    DELTA_UPLOAD     client -> server   local model delta, weight N_k

FedAvg rounds skip the two statistics phases.
"""

from __future__ import annotations

import enum
import hashlib
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import models, optim, stats
from .data import AugmentConfig, ClientDataset, make_views
from .errors import BatchTooSmall, EmptyList, EmptyRound, InvalidConfig, KTooLarge, ParseError
from .models import ModelParams
from .stats import EncodingStats

_SAMPLING_TAG = 0x5A3F
_DROPOUT_TAG = 0xD20F


class Tag(enum.IntEnum):
    MODEL_BROADCAST = 1
    STATS_UPLOAD = 2
    AGG_STATS_BROADCAST = 3
    DELTA_UPLOAD = 4


DOWNLINK = (Tag.MODEL_BROADCAST, Tag.AGG_STATS_BROADCAST)
UPLINK = (Tag.STATS_UPLOAD, Tag.DELTA_UPLOAD)


@dataclass(frozen=True)
class ModelDelta:
    params: ModelParams  # new_local_params - broadcast_params
    weight: int  # N_k
    client_id: int = -1


def delta_to_bytes(delta: ModelDelta) -> bytes:
    return struct.pack("<Qq", delta.weight, delta.client_id) + models.params_to_bytes(delta.params)


def delta_from_bytes(data: bytes) -> ModelDelta:
    if len(data) < 16:
        raise ParseError("truncated delta header", "offset 0")
    weight, client_id = struct.unpack_from("<Qq", data, 0)
    params, _ = models.params_from_bytes(data[16:])
    return ModelDelta(params, weight, client_id)


_PAYLOAD_TYPES = {
    Tag.MODEL_BROADCAST: (ModelParams, models.params_to_bytes),
    Tag.STATS_UPLOAD: (EncodingStats, stats.stats_to_bytes),
    Tag.AGG_STATS_BROADCAST: (EncodingStats, stats.stats_to_bytes),
    Tag.DELTA_UPLOAD: (ModelDelta, delta_to_bytes),
}

# Frame header: tag u8 | round u64 | client u64 | payload_len u64
_FRAME_HEADER = struct.Struct("<BQQQ")


@dataclass(frozen=True)
class Frame:
    tag: Tag
    round_index: int
    client_id: int
    payload: bytes

    @classmethod
    def pack(cls, tag: Tag, round_index: int, client_id: int, obj) -> Frame:
        """Build a frame from a typed object; only the schema's types are accepted."""
        kind, encode = _PAYLOAD_TYPES[tag]
        if not isinstance(obj, kind):
            raise TypeError(f"{tag.name} carries {kind.__name__}, got {type(obj).__name__}")
        return cls(tag, round_index, client_id, encode(obj))

    def unpack(self):
        if self.tag == Tag.MODEL_BROADCAST:
            return models.params_from_bytes(self.payload)[0]
        if self.tag in (Tag.STATS_UPLOAD, Tag.AGG_STATS_BROADCAST):
            return stats.stats_from_bytes(self.payload)
        return delta_from_bytes(self.payload)

    def to_bytes(self) -> bytes:
        return _FRAME_HEADER.pack(int(self.tag), self.round_index, self.client_id,
                                  len(self.payload)) + self.payload


class Transcript:
    """Append-only log of frames; can be written to and read from a file."""

    MAGIC = b"DCTR"
    VERSION = 1

    def __init__(self, frames: Sequence[Frame] = ()):
        self.frames: list[Frame] = list(frames)

    def record(self, frame: Frame) -> Frame:
        self.frames.append(frame)
        return frame

    def for_round(self, round_index: int) -> list[Frame]:
        return [f for f in self.frames if f.round_index == round_index]

    def counts(self, round_index: int | None = None) -> dict[Tag, int]:
        frames = self.frames if round_index is None else self.for_round(round_index)
        out = {t: 0 for t in Tag}
        for f in frames:
            out[f.tag] += 1
        return out

    def to_bytes(self) -> bytes:
        head = self.MAGIC + struct.pack("<BQ", self.VERSION, len(self.frames))
        return head + b"".join(f.to_bytes() for f in self.frames)

    @classmethod
    def from_bytes(cls, data: bytes) -> Transcript:
        if data[:4] != cls.MAGIC:
            raise ParseError("bad transcript magic", "offset 0")
        if len(data) < 13:
            raise ParseError("truncated transcript header", "offset 4")
        version, count = struct.unpack_from("<BQ", data, 4)
        if version != cls.VERSION:
            raise ParseError(f"unsupported transcript version {version}", "offset 4")
        pos, frames = 13, []
        for _ in range(count):
            if pos + _FRAME_HEADER.size > len(data):
                raise ParseError("truncated frame header", f"offset {pos}")
            tag, rnd, cid, n = _FRAME_HEADER.unpack_from(data, pos)
            if tag not in Tag._value2member_map_:
                raise ParseError(f"unknown frame tag {tag}", f"offset {pos}")
            pos += _FRAME_HEADER.size
            if pos + n > len(data):
                raise ParseError("truncated frame payload", f"offset {pos}")
            frames.append(Frame(Tag(tag), rnd, cid, bytes(data[pos:pos + n])))
            pos += n
        if pos != len(data):
            raise ParseError("trailing bytes", f"offset {pos}")
        return cls(frames)

    def dump(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> Transcript:
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class PrivacyAudit:
    frames_checked: int
    feature_leaks: list
    encoding_leaks: list

    @property
    def clean(self) -> bool:
        return not self.feature_leaks and not self.encoding_leaks


def audit_transcript(transcript: Transcript, sample_rows: Sequence[np.ndarray],
                     encoding_rows: Sequence[np.ndarray] = ()) -> PrivacyAudit:
    """Search every frame payload for the raw bytes of any per-sample row."""
    def needles(rows):
        return [(i, np.ascontiguousarray(r, dtype="<f8").tobytes()) for i, r in enumerate(rows)]

    feats, encs = needles(sample_rows), needles(encoding_rows)
    feature_leaks, encoding_leaks = [], []
    for k, frame in enumerate(transcript.frames):
        for i, needle in feats:
            if needle in frame.payload:
                feature_leaks.append((k, frame.tag.name, i))
        for i, needle in encs:
            if needle in frame.payload:
                encoding_leaks.append((k, frame.tag.name, i))
    return PrivacyAudit(len(transcript.frames), feature_leaks, encoding_leaks)


@dataclass(frozen=True)
class ServerState:
    model: ModelParams
    optimizer: optim.OptimizerState
    round_index: int = 0
    rng_seed: int = 0


@dataclass(frozen=True)
class ClientState:
    client_id: int
    dataset: ClientDataset

    def __post_init__(self):
        if len(self.dataset) < 1:
            raise InvalidConfig(f"client {self.client_id} has no data", "dataset")


@dataclass(frozen=True)
class RoundConfig:
    clients_per_round: int
    local_lr: float = 1.0
    local_steps: int = 1
    # local_steps > 1 uses stale aggregated statistics; opt in explicitly.
    allow_multi_step: bool = False
    server_lr: float = 1.0
    lam: float = stats.DEFAULT_LAMBDA
    eps: float = stats.DEFAULT_EPS
    temperature: float = stats.DEFAULT_TEMPERATURE
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    # Probability that a client disappears after uploading statistics; any
    # dropout aborts the attempt and the round is resampled.
    dropout_prob: float = 0.0
    max_attempts: int = 10
    workers: int = 1

    def validate(self, pool_size: int) -> None:
        if self.local_steps < 1:
            raise InvalidConfig("local_steps must be >= 1", "local_steps")
        if self.local_steps > 1 and not self.allow_multi_step:
            raise InvalidConfig("local_steps > 1 requires allow_multi_step", "local_steps")
        if not 1 <= self.clients_per_round:
            raise InvalidConfig("clients_per_round must be >= 1", "clients_per_round")
        if self.clients_per_round > pool_size:
            raise KTooLarge(f"clients_per_round={self.clients_per_round} > pool size {pool_size}")
        if self.local_lr <= 0:
            raise InvalidConfig("local_lr must be > 0", "local_lr")
        if self.workers < 1:
            raise InvalidConfig("workers must be >= 1", "workers")


@dataclass(frozen=True)
class RoundTrace:
    round_index: int
    client_ids: tuple[int, ...]
    counts: tuple[int, ...]
    stats_digest: str
    stats_count: int
    mean_loss: float
    server_lr: float
    messages: dict
    attempts: int
    wall_time: float = field(compare=False)

    def deterministic(self) -> dict:
        """All fields except wall time, for reproducibility checks."""
        return {
            "round_index": self.round_index,
            "client_ids": list(self.client_ids),
            "counts": list(self.counts),
            "stats_digest": self.stats_digest,
            "stats_count": self.stats_count,
            "mean_loss": self.mean_loss,
            "server_lr": self.server_lr,
            "messages": {t.name: n for t, n in self.messages.items()},
            "attempts": self.attempts,
        }


def sample_clients(pool_size: int, k: int, round_index: int, seed: int, attempt: int = 0) -> list[int]:
    """``k`` distinct positions in ``range(pool_size)``, sorted; deterministic per (seed, round)."""
    if k < 1:
        raise InvalidConfig("k must be >= 1", "clients_per_round")
    if k > pool_size:
        raise KTooLarge(f"cannot sample {k} clients from a pool of {pool_size}")
    rng = np.random.default_rng([seed, round_index, attempt, _SAMPLING_TAG])
    return sorted(int(i) for i in rng.choice(pool_size, size=k, replace=False))


def client_rng(seed: int, round_index: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, round_index, client_id])


def client_views(client: ClientState, seed: int, round_index: int,
                 augment: AugmentConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = client_rng(seed, round_index, client.client_id)
    return make_views(client.dataset.features, rng, augment)


def _selector(n: int, offset: int) -> np.ndarray:
    sel = np.zeros((n, 2 * n))
    sel[np.arange(n), np.arange(n) + offset] = 1.0
    return sel


def encode_pair(graph: ad.Graph, params, v1: np.ndarray, v2: np.ndarray,
                params_g=None) -> tuple[ad.Node, ad.Node]:
    """Encode both views. With one shared encoder they go through a single pass."""
    if params_g is not None:
        return models.encode(params, v1, graph), models.encode(params_g, v2, graph)
    n = v1.shape[0]
    both = models.encode(params, np.concatenate([v1, v2], axis=0), graph)
    return graph.constant(_selector(n, 0)) @ both, graph.constant(_selector(n, n)) @ both


class CCOSession:
    """One client's graph for a CCO step: encodings, local stats, loss."""

    def __init__(self, model: ModelParams, v1: np.ndarray, v2: np.ndarray):
        self.graph = ad.Graph()
        self.nodes = models.bind_params(self.graph, model)
        self.F, self.G = encode_pair(self.graph, self.nodes, v1, v2)
        self.local = stats.local_stats(self.F, self.G)

    def local_values(self) -> EncodingStats:
        return self.local.values()

    def gradients(self, aggregated: EncodingStats | None, lam: float, eps: float):
        """Loss and parameter gradients; ``aggregated=None`` uses local stats only."""
        used = self.local if aggregated is None else stats.combine_with_stop_gradient(self.local, aggregated)
        loss = stats.cco_loss(stats.correlation_matrix(used, eps), lam)
        grads = self.graph.backward(loss)
        return float(loss.value), ModelParams(((k, grads[n]) for k, n in self.nodes.items()))


def _sgd_delta(model: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
    return ModelParams(((k, -lr * g) for k, g in grads.items()), model.config)


def local_dcco_step(model: ModelParams, views: tuple[np.ndarray, np.ndarray],
                    aggregated: EncodingStats, lr: float = 1.0, lam: float = stats.DEFAULT_LAMBDA,
                    eps: float = stats.DEFAULT_EPS) -> ModelDelta:
    """One gradient-descent step on the CCO loss of the combined statistics."""
    if lr <= 0:
        raise InvalidConfig("lr must be > 0", "lr")
    session = CCOSession(model, *views)
    _, grads = session.gradients(aggregated, lam, eps)
    return ModelDelta(_sgd_delta(model, grads, lr), session.local.count)


def aggregate_deltas(deltas: Sequence[ModelDelta]) -> ModelDelta:
    """Weighted mean of deltas with weights ``N_k / sum N_k``, summed in client-id order."""
    if not deltas:
        raise EmptyList("no deltas to aggregate")
    ordered = sorted(deltas, key=lambda d: d.client_id)
    first = ordered[0].params
    for d in ordered[1:]:
        first.check_aligned(d.params)
    weights = [d.weight for d in ordered]
    merged = ModelParams(config=first.config)
    for name in first:
        merged[name] = stats.weighted_mean([d.params[name] for d in ordered], weights)
    return ModelDelta(merged, int(np.sum(weights)))


def apply_server_update(server: ServerState, delta: ModelDelta, lr: float) -> tuple:
    """Feed ``-delta`` to the server optimizer as a pseudo-gradient."""
    pseudo_grad = ModelParams(((k, -v) for k, v in delta.params.items()), server.model.config)
    return optim.apply(server.optimizer, server.model, pseudo_grad, lr)


def centralized_cco_step(model: ModelParams, pooled_views: tuple[np.ndarray, np.ndarray],
                         lr: float = 1.0, lam: float = stats.DEFAULT_LAMBDA,
                         eps: float = stats.DEFAULT_EPS) -> ModelParams:
    """Plain large-batch gradient-descent step on the CCO loss."""
    v1, v2 = pooled_views
    if v1.shape[0] < 2:
        raise BatchTooSmall("centralized step needs at least two samples")
    session = CCOSession(model, v1, v2)
    _, grads = session.gradients(None, lam, eps)
    return ModelParams(((k, p - lr * grads[k]) for k, p in model.items()), model.config)


def centralized_gradients(model: ModelParams, pooled_views, lam=stats.DEFAULT_LAMBDA,
                          eps=stats.DEFAULT_EPS) -> tuple[float, ModelParams]:
    session = CCOSession(model, *pooled_views)
    return session.gradients(None, lam, eps)


def _digest(agg: EncodingStats | None) -> str:
    if agg is None:
        return ""
    return hashlib.sha256(stats.stats_to_bytes(agg)).hexdigest()[:16]


def _pmap(fn: Callable, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


class _Round:
    """Shared plumbing: sampling, broadcast, delta collection, server update."""

    def __init__(self, server: ServerState, clients: Sequence[ClientState], config: RoundConfig,
                 transcript: Transcript | None):
        if not clients:
            raise EmptyRound("client pool is empty")
        config.validate(len(clients))
        self.server = server
        self.clients = clients
        self.config = config
        self.transcript = transcript if transcript is not None else Transcript()
        self.round_index = server.round_index
        self.started = time.perf_counter()

    def send(self, tag: Tag, client_id: int, obj) -> Frame:
        return self.transcript.record(Frame.pack(tag, self.round_index, client_id, obj))

    def sample(self, attempt: int = 0) -> list[ClientState]:
        picked = sample_clients(len(self.clients), self.config.clients_per_round,
                                self.round_index, self.server.rng_seed, attempt)
        chosen = [self.clients[i] for i in picked]
        if not any(len(c.dataset) for c in chosen):
            raise EmptyRound("no sampled client has data")
        return chosen

    def broadcast_model(self, chosen) -> dict[int, Frame]:
        # Every participant receives identical bytes; serialize once.
        payload = Frame.pack(Tag.MODEL_BROADCAST, self.round_index, -1, self.server.model).payload
        return {c.client_id: self.transcript.record(
                    Frame(Tag.MODEL_BROADCAST, self.round_index, c.client_id, payload))
                for c in chosen}

    def views(self, client: ClientState):
        return client_views(client, self.server.rng_seed, self.round_index, self.config.augment)

    def finish(self, chosen, delta_frames, losses, agg, attempts, start_count):
        deltas = [f.unpack() for f in delta_frames]
        merged = aggregate_deltas(deltas)
        opt_state, model = apply_server_update(self.server, merged, self.config.server_lr)
        counts = self.transcript.counts(self.round_index)
        messages = {t: counts[t] - start_count.get(t, 0) for t in Tag}
        trace = RoundTrace(
            round_index=self.round_index,
            client_ids=tuple(c.client_id for c in chosen),
            counts=tuple(len(c.dataset) for c in chosen),
            stats_digest=_digest(agg),
            stats_count=agg.count if agg is not None else int(np.sum([len(c.dataset) for c in chosen])),
            mean_loss=float(np.mean(losses)),
            server_lr=self.config.server_lr,
            messages=messages,
            attempts=attempts,
            wall_time=time.perf_counter() - self.started,
        )
        new_server = replace(self.server, model=model, optimizer=opt_state,
                             round_index=self.round_index + 1)
        return new_server, trace


def _dropped(seed, round_index, attempt, client_id, prob) -> bool:
    if prob <= 0:
        return False
    rng = np.random.default_rng([seed, round_index, attempt, client_id, _DROPOUT_TAG])
    return bool(rng.random() < prob)


def run_dcco_round(server: ServerState, clients: Sequence[ClientState], config: RoundConfig,
                   transcript: Transcript | None = None) -> tuple[ServerState, RoundTrace]:
    """One DCCO round: stats round-trip, local step on combined stats, weighted delta mean."""
    rnd = _Round(server, clients, config, transcript)
    start_count = rnd.transcript.counts(rnd.round_index)
    for attempt in range(config.max_attempts):
        chosen = rnd.sample(attempt)
        model_frames = rnd.broadcast_model(chosen)

        def client_stats(client):
            model = model_frames[client.client_id].unpack()
            v1, v2 = rnd.views(client)
            session = CCOSession(model, v1, v2)
            return model, (v1, v2), session

        sessions = _pmap(client_stats, chosen, config.workers)
        stats_frames = [rnd.send(Tag.STATS_UPLOAD, c.client_id, s.local_values())
                        for c, (_, _, s) in zip(chosen, sessions)]
        if any(_dropped(server.rng_seed, rnd.round_index, attempt, c.client_id, config.dropout_prob)
               for c in chosen):
            continue
        agg = stats.aggregate_stats([f.unpack() for f in stats_frames])
        agg_frames = {c.client_id: rnd.send(Tag.AGG_STATS_BROADCAST, c.client_id, agg)
                      for c in chosen}

        def client_train(item):
            client, (model, views, session) = item
            aggregated = agg_frames[client.client_id].unpack()
            loss, grads = session.gradients(aggregated, config.lam, config.eps)
            current = model
            for _ in range(config.local_steps - 1):
                current = ModelParams(((k, current[k] - config.local_lr * grads[k]) for k in current),
                                      model.config)
                _, grads = CCOSession(current, *views).gradients(aggregated, config.lam, config.eps)
            final = ModelParams(((k, current[k] - config.local_lr * grads[k]) for k in current),
                                model.config)
            delta = ModelParams(((k, final[k] - model[k]) for k in model), model.config)
            return loss, ModelDelta(delta, len(client.dataset), client.client_id)

        results = _pmap(client_train, list(zip(chosen, sessions)), config.workers)
        delta_frames = [rnd.send(Tag.DELTA_UPLOAD, c.client_id, d)
                        for c, (_, d) in zip(chosen, results)]
        return rnd.finish(chosen, delta_frames, [l for l, _ in results], agg, attempt + 1,
                          start_count)
    raise EmptyRound(f"round {rnd.round_index} aborted {config.max_attempts} times by dropout")


def _fedavg_round(server, clients, config, transcript, local_grads):
    rnd = _Round(server, clients, config, transcript)
    start_count = rnd.transcript.counts(rnd.round_index)
    chosen = rnd.sample()
    for c in chosen:
        if len(c.dataset) < 2:
            raise BatchTooSmall(f"client {c.client_id} has {len(c.dataset)} sample(s); "
                                "within-client losses need at least two")
    model_frames = rnd.broadcast_model(chosen)

    def client_train(client):
        model = model_frames[client.client_id].unpack()
        views = rnd.views(client)
        current = model
        for _ in range(config.local_steps):
            loss, grads = local_grads(current, views)
            current = ModelParams(((k, current[k] - config.local_lr * grads[k]) for k in current),
                                  model.config)
        delta = ModelParams(((k, current[k] - model[k]) for k in model), model.config)
        return loss, ModelDelta(delta, len(client.dataset), client.client_id)

    results = _pmap(client_train, chosen, config.workers)
    delta_frames = [rnd.send(Tag.DELTA_UPLOAD, c.client_id, d) for c, (_, d) in zip(chosen, results)]
    return rnd.finish(chosen, delta_frames, [l for l, _ in results], None, 1, start_count)


def run_fedavg_cco_round(server: ServerState, clients: Sequence[ClientState], config: RoundConfig,
                         transcript: Transcript | None = None) -> tuple[ServerState, RoundTrace]:
    """FedAvg round where each client's CCO loss uses only its own statistics."""
    def grads(model, views):
        return CCOSession(model, *views).gradients(None, config.lam, config.eps)

    return _fedavg_round(server, clients, config, transcript, grads)


def contrastive_gradients(model: ModelParams, views, temperature: float):
    g = ad.Graph()
    nodes = models.bind_params(g, model)
    F, G = encode_pair(g, nodes, *views)
    loss = stats.ntxent_loss(F, G, temperature)
    grads = g.backward(loss)
    return float(loss.value), ModelParams(((k, grads[n]) for k, n in nodes.items()))


def run_fedavg_contrastive_round(server: ServerState, clients: Sequence[ClientState],
                                 config: RoundConfig, transcript: Transcript | None = None
                                 ) -> tuple[ServerState, RoundTrace]:
    """FedAvg round with the within-client NT-Xent loss."""
    def grads(model, views):
        return contrastive_gradients(model, views, config.temperature)

    return _fedavg_round(server, clients, config, transcript, grads)


ROUND_FUNCTIONS = {
    "dcco": run_dcco_round,
    "fedavg_cco": run_fedavg_cco_round,
    "fedavg_contrastive": run_fedavg_contrastive_round,
}

