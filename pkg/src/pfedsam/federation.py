"""Personalized federated round engine.

Each client holds a global model (the architecture that is averaged on the
server) and, for presets with a separate personalized model, a student that
never leaves the client. A round runs three stages:

1. personalized training of the student against CE, the L-MoE auxiliary
   loss and distillation from the frozen round-start global model;
2. training of the global model on local data, then upload of its shared
   parameters;
3. weighted averaging of the uploads and redistribution.

The six ablation presets differ in which architectures are used, whether
L-MoE parameters stay on the client and whether distillation is applied.
"""
from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nm
from .data import DatasetSpec, generate_client, split, stack_samples
from .errors import ConfigError, ProtocolError
from .losses import LossWeights, ce_loss, personalized_loss
from .metrics import EvalResult, evaluate
from .optim import Adam
from .rng import stream
from .segmodel import ModelConfig, SegModel, build_model
from .serialization import serialized_size


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 5
    local_epochs_personalized: int = 1
    local_epochs_global: int = 1
    batch_size: int = 4
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    loss_weights: LossWeights = LossWeights()
    seed: int = 0

    def __post_init__(self):
        for key in ("rounds", "local_epochs_personalized", "local_epochs_global", "batch_size"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive", key)
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative", "learning_rate")
        for key in ("beta1", "beta2"):
            if not 0 <= getattr(self, key) < 1:
                raise ConfigError(f"{key} must lie in [0, 1)", key)
        if self.seed < 0:
            raise ConfigError("seed must be non-negative", "seed")


@dataclass(frozen=True)
class Preset:
    name: str
    student_variant: str | None  # None: the client trains and evaluates its global model only
    global_variant: str
    personalize: bool  # keep L-MoE parameters of the global model on the client
    distill: bool


PRESETS = {
    "A": Preset("A", None, "lora", False, False),
    "B": Preset("B", None, "lora_moe", False, False),
    "C": Preset("C", None, "lora_moe", True, False),
    "D": Preset("D", "lora", "lora", True, True),
    "E": Preset("E", "lora_moe", "lora_moe", True, True),
    "Ours": Preset("Ours", "lora_moe", "lora", True, True),
}


def get_preset(name) -> Preset:
    if isinstance(name, Preset):
        return name
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}", "preset") from None


@dataclass
class ClientState:
    client_id: str
    global_model: SegModel
    personalized_model: SegModel | None
    train: list
    test: list
    rng_stream_id: int = 0

    @property
    def n_train(self) -> int:
        return len(self.train)

    @property
    def eval_model(self) -> SegModel:
        return self.personalized_model if self.personalized_model is not None else self.global_model


@dataclass
class ServerState:
    round_index: int
    aggregated_global: dict


@dataclass
class RoundReport:
    round_index: int
    clients: list
    aggregation_weights: dict

    def to_dict(self) -> dict:
        return {"round": self.round_index, "aggregation_weights": self.aggregation_weights, "clients": self.clients}


def upload_names(model: SegModel, share_private: bool) -> frozenset:
    part = model.partition()
    return part.global_shared | part.local_private if share_private else part.global_shared


def param_hash(params) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(getattr(params[name], "data", params[name])).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- local training


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _mean_rows(rows):
    if not rows:
        return {}
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def client_personalized_update(client: ClientState, teacher_params, cfg: FedConfig, round_index: int = 0, distill: bool = True):
    """Train the client's personalized model for one local stage.

    The teacher is a frozen copy of the client's global-model architecture
    loaded with ``teacher_params``. Returns the per-step loss trace.
    """
    student = client.personalized_model
    if student is None:
        raise ProtocolError(f"client {client.client_id} has no personalized model")
    teacher = None
    if distill:
        required = client.global_model.partition().global_shared
        if not required <= set(teacher_params):
            missing = sorted(required - set(teacher_params))
            raise ProtocolError(f"teacher parameters missing {missing[:3]}")
        teacher = client.global_model.clone()
        try:
            teacher.load_state(teacher_params)
        except KeyError as exc:
            raise ProtocolError(str(exc)) from None
    images, masks = stack_samples(client.train)
    opt = Adam(student.trainable_params, cfg.learning_rate, (cfg.beta1, cfg.beta2))
    trace = []
    for epoch in range(cfg.local_epochs_personalized):
        rng = stream(cfg.seed, "batches", "personalized", client.client_id, round_index, epoch)
        for idx in _batches(len(images), cfg.batch_size, rng):
            student.zero_grad()
            logits, aux = student.forward_batch(images[idx])
            t_logits = None
            if teacher is not None:
                with nm.no_grad():
                    t_logits = teacher.forward_batch(images[idx])[0].data
            total, parts = personalized_loss(logits, masks[idx], t_logits, aux, cfg.loss_weights)
            opt.step(nm.backward(total))
            trace.append({**parts, "total": total.item()})
    return trace


def _train_global(model: SegModel, client: ClientState, cfg: FedConfig, round_index: int):
    images, masks = stack_samples(client.train)
    opt = Adam(model.trainable_params, cfg.learning_rate, (cfg.beta1, cfg.beta2))
    trace = []
    for epoch in range(cfg.local_epochs_global):
        rng = stream(cfg.seed, "batches", "global", client.client_id, round_index, epoch)
        for idx in _batches(len(images), cfg.batch_size, rng):
            model.zero_grad()
            logits, aux = model.forward_batch(images[idx])
            loss = ce_loss(logits, masks[idx])
            ce = loss.item()
            if aux is not None and cfg.loss_weights.lambda_lmoe:
                loss = loss + aux * cfg.loss_weights.lambda_lmoe
            opt.step(nm.backward(loss))
            trace.append({"ce": ce, "total": loss.item()})
    return trace


def client_global_update(client: ClientState, incoming_global, cfg: FedConfig, round_index: int = 0, share_private: bool = False):
    """Load the incoming aggregate, train locally, return ``(payload, trace)``.

    The payload contains exactly the upload name set of the global model:
    the globally shared partition, plus L-MoE parameters only when
    ``share_private`` (plain FedAvg over everything).
    """
    model = client.global_model
    names = upload_names(model, share_private)
    if set(incoming_global) != names:
        extra = sorted(set(incoming_global) - names)
        missing = sorted(names - set(incoming_global))
        raise ProtocolError(f"incoming global map mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    model.load_state(incoming_global)
    trace = _train_global(model, client, cfg, round_index)
    return model.state(names), trace


# ---------------------------------------------------------------- server


def server_aggregate(payloads) -> dict[str, np.ndarray]:
    """n_train-weighted average of ``(client_id, n_train, params)`` uploads.

    Summation runs in ascending client_id order regardless of input order.
    """
    if not payloads:
        raise ProtocolError("nothing to aggregate")
    ordered = sorted(payloads, key=lambda p: p[0])
    ids = [p[0] for p in ordered]
    if len(set(ids)) != len(ids):
        raise ProtocolError("duplicate client ids in aggregation")
    keys = set(ordered[0][2])
    for cid, _, params in ordered[1:]:
        if set(params) != keys:
            raise ProtocolError(f"client {cid} uploaded a different parameter set")
    total = sum(p[1] for p in ordered)
    if total <= 0:
        raise ProtocolError("total training size must be positive")
    weights = [p[1] / total for p in ordered]
    out = {}
    for name in sorted(keys):
        shape = np.shape(ordered[0][2][name])
        acc = None
        for w, (cid, _, params) in zip(weights, ordered):
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ProtocolError(f"client {cid}: {name} has shape {arr.shape}, expected {shape}")
            acc = w * arr if acc is None else acc + w * arr
        out[name] = acc
    return out


def aggregation_weights(clients) -> dict[str, float]:
    total = sum(c.n_train for c in clients)
    return {c.client_id: c.n_train / total for c in sorted(clients, key=lambda c: c.client_id)}


# ---------------------------------------------------------------- rounds


def thread_count(threads=None) -> int:
    if threads is None:
        raw = os.environ.get("PFSM_THREADS", "0")
        try:
            threads = int(raw)
        except ValueError:
            raise ConfigError(f"PFSM_THREADS must be an integer, got {raw!r}", "PFSM_THREADS") from None
    return max(int(threads), 1)


def _map_clients(fn, clients, threads):
    if threads <= 1 or len(clients) <= 1:
        return [fn(c) for c in clients]
    with ThreadPoolExecutor(max_workers=min(threads, len(clients))) as pool:
        return list(pool.map(fn, clients))


def run_round(server: ServerState, clients, cfg: FedConfig, preset="Ours", threads=None):
    """Run one round; returns ``(new ServerState, RoundReport)``."""
    preset = get_preset(preset)
    threads = thread_count(threads)
    r = server.round_index
    if r < 0:
        raise ProtocolError("round index must be non-negative")
    snapshot = {k: v.copy() for k, v in server.aggregated_global.items()}
    share_private = not preset.personalize

    def stage1(client):
        if client.personalized_model is None:
            return []
        teacher = {**client.global_model.state(client.global_model.partition().local_private), **snapshot}
        return client_personalized_update(client, teacher, cfg, r, distill=preset.distill)

    def stage2(client):
        return client_global_update(client, snapshot, cfg, r, share_private)

    p_traces = _map_clients(stage1, clients, threads)
    results = _map_clients(stage2, clients, threads)

    uploads = [(c.client_id, c.n_train, payload) for c, (payload, _) in zip(clients, results)]
    aggregated = server_aggregate(uploads)
    for c in clients:
        c.global_model.load_state(aggregated)

    bytes_down = serialized_size(aggregated)
    rows = []
    for c, p_trace, (payload, g_trace) in zip(clients, p_traces, results):
        pers = evaluate(c.eval_model, c.test, c.client_id, "personalized")
        glob = evaluate(c.global_model, c.test, c.client_id, "global")
        mean_p = _mean_rows(p_trace)
        rows.append(
            {
                "client_id": c.client_id,
                "personalized_loss": {k: mean_p.get(k, 0.0) for k in ("ce", "lmoe", "kd", "total")} if p_trace else None,
                "personalized_steps": len(p_trace),
                "global_train_loss": _mean_rows(g_trace).get("total", 0.0),
                "global_steps": len(g_trace),
                "personalized_dice": pers.dice,
                "personalized_iou": pers.iou,
                "global_dice": glob.dice,
                "global_iou": glob.iou,
                "payload_bytes_up": serialized_size(payload),
                "payload_bytes_down": bytes_down,
                "payload_keys": sorted(payload),
            }
        )
    report = RoundReport(r, rows, aggregation_weights(clients))
    return ServerState(r + 1, aggregated), report


# ---------------------------------------------------------------- experiments


@dataclass
class ExperimentReport:
    preset: str
    rounds: list
    results: list  # per-client personalized EvalResult
    unseen: EvalResult | None
    payload_up_total: int
    payload_down_total: int
    base_hash_before: str
    base_hash_after: str
    clients: list = field(repr=False, default_factory=list)
    server: ServerState | None = field(repr=False, default=None)
    global_model: SegModel | None = field(repr=False, default=None)

    @property
    def mean_dice(self) -> float:
        return float(np.mean([r.dice for r in self.results]))

    @property
    def mean_iou(self) -> float:
        return float(np.mean([r.iou for r in self.results]))

    def payload_up_by_client(self) -> dict[str, int]:
        out = {}
        for rep in self.rounds:
            for row in rep.clients:
                out[row["client_id"]] = out.get(row["client_id"], 0) + row["payload_bytes_up"]
        return out


def make_clients(preset, model_config: ModelConfig, specs, seed: int):
    """Build client states sharing one frozen base and one initial global model."""
    datasets = []
    for spec in specs:
        samples = generate_client(spec, model_config.image_size, model_config.mask_scale)
        datasets.append((spec.client_id, *split(samples, 0.9, spec.seed)))
    return clients_from_samples(preset, model_config, datasets, seed)


def clients_from_samples(preset, model_config: ModelConfig, datasets, seed: int):
    """Client states from ``(client_id, train, test)`` triples."""
    preset = get_preset(preset)
    proto = build_model(model_config.with_variant(preset.global_variant), seed)
    base = proto.base_params
    student_proto = None
    if preset.student_variant is not None:
        student_proto = build_model(model_config.with_variant(preset.student_variant), seed, base_params=base)
    clients = []
    for i, (client_id, train, test) in enumerate(datasets):
        student = student_proto.clone() if student_proto is not None else None
        clients.append(ClientState(client_id, proto.clone(), student, list(train), list(test), i))
    return clients, proto


def federate(preset, cfg: FedConfig, clients, proto: SegModel, threads=None, on_round=None):
    """Run ``cfg.rounds`` rounds; returns the final server state and the round reports."""
    preset = get_preset(preset)
    names = upload_names(proto, not preset.personalize)
    server = ServerState(0, proto.state(names))
    reports = []
    for _ in range(cfg.rounds):
        server, report = run_round(server, clients, cfg, preset, threads)
        reports.append(report)
        if on_round is not None:
            on_round(report)
    return server, reports


def final_global_model(preset: Preset, proto: SegModel, server: ServerState, clients) -> SegModel:
    model = proto.clone()
    model.load_state(server.aggregated_global)
    private = model.partition().local_private
    if private and preset.personalize:
        # no personal state exists for a held-out site: use the size-weighted mean of the clients' L-MoE parameters
        mean_private = server_aggregate([(c.client_id, c.n_train, c.global_model.state(private)) for c in clients])
        model.load_state(mean_private)
    return model


def run_experiment(
    preset,
    cfg: FedConfig,
    model_config: ModelConfig,
    client_specs,
    unseen_spec: DatasetSpec | None = None,
    threads=None,
    on_round=None,
) -> ExperimentReport:
    preset = get_preset(preset)
    ids = [s.client_id for s in client_specs]
    if len(set(ids)) != len(ids):
        raise ConfigError("client ids must be unique", "client_id")
    clients, proto = make_clients(preset, model_config, client_specs, cfg.seed)
    base_before = proto.base_hash()
    server, reports = federate(preset, cfg, clients, proto, threads, on_round)

    results = [evaluate(c.eval_model, c.test, c.client_id, "personalized") for c in clients]
    final_global = final_global_model(preset, proto, server, clients)
    unseen = None
    if unseen_spec is not None:
        samples = generate_client(unseen_spec, model_config.image_size, model_config.mask_scale)
        unseen = evaluate(final_global, samples, unseen_spec.client_id, "global")
    up = sum(row["payload_bytes_up"] for rep in reports for row in rep.clients)
    down = sum(row["payload_bytes_down"] for rep in reports for row in rep.clients)
    hashes = {c.global_model.base_hash() for c in clients}
    hashes |= {c.personalized_model.base_hash() for c in clients if c.personalized_model is not None}
    after = hashes.pop() if len(hashes) == 1 else "inconsistent"
    return ExperimentReport(preset.name, reports, results, unseen, up, down, base_before, after, clients, server, final_global)


def with_rounds(cfg: FedConfig, rounds: int) -> FedConfig:
    return replace(cfg, rounds=rounds)
