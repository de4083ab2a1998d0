"""Deterministic federated self-learning simulation.

One round: broadcast the global model to a seeded cohort, let each client
decode (when its refresh is due) and run E local adaptation steps on its own
cached hypotheses, collect parameter deltas, aggregate them as a convex
combination in sorted client-id order, and apply the aggregate through the
server optimizer as a pseudo-gradient.

Privacy boundary: the only type that crosses from client to server is
ClientUpdate(client_id, delta, sample_count). Features, references and
hypotheses stay on the client. The protocol's encryption step is represented
by a no-op boundary marker (encrypt_update).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad
from . import model as M
from .decoder import beam_search
from .model import ModelParams, Topology
from .selflearn import Method, METHOD_TOPOLOGY
from .trainer import (AdamState, TrainConfig, TrainMode, adam_step, kd_1best_loss,
                      labels_from_nbest, nbest_loss, run_steps, validation_cer,
                      validation_loss)


class FedError(Exception):
    pass


class Weighting(str, Enum):
    UNIFORM = "uniform"
    SAMPLE_PROPORTIONAL = "sample_proportional"


@dataclass
class Client:
    """One simulated speaker: private utterances plus decode cache and counters."""
    client_id: str
    utterances: list
    cached_nbest: list = field(default=None)
    last_decode_round: int = -1
    cursor: int = 0
    steps_done: int = 0

    def __post_init__(self):
        if not self.utterances:
            raise FedError(f"client {self.client_id} has no utterances")

    @property
    def sample_count(self) -> int:
        return len(self.utterances)


@dataclass(frozen=True)
class ClientUpdate:
    """The only payload a client sends to the server."""
    client_id: str
    delta: dict          # tensor name -> ndarray (theta_local - theta_global)
    sample_count: int


@dataclass(frozen=True)
class FedConfig:
    cohort_size: int = 8
    local_steps: int = 10
    decode_refresh_interval: int = 512
    server_optimizer: str = "plain"  # "plain" or "adam"
    server_lr: float = 1.0
    weighting: Weighting = Weighting.UNIFORM
    total_rounds: int = 16
    seed: int = 0
    method: Method = Method.MTL_SHARED_AE
    n_best: int = 4
    beam_width: int = 8
    max_decode_len: int = 16
    temperature: float = 1.0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=1))

    def __post_init__(self):
        if self.decode_refresh_interval < 1:
            raise FedError("decode_refresh_interval must be >= 1")
        if self.cohort_size < 1 or self.local_steps < 1:
            raise FedError("cohort_size and local_steps must be >= 1")
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "weighting", Weighting(self.weighting))


@dataclass
class RoundRecord:
    round_index: int
    participant_ids: list
    client_delta_norms: dict
    aggregate_delta_norm: float
    validation_loss: float | None = None
    validation_cer: float | None = None


def partition_by_speaker(tagged_utterances) -> list:
    """Build one client per distinct speaker from (speaker_id, Utterance) pairs.

    Also accepts a corpus Dataset. The utterance multiset is preserved;
    clients come back sorted by speaker id.
    """
    if hasattr(tagged_utterances, "speakers") and hasattr(tagged_utterances, "utterances"):
        pairs = list(zip(tagged_utterances.speakers, tagged_utterances.utterances))
    else:
        pairs = list(tagged_utterances)
    groups: dict = {}
    for speaker, utt in pairs:
        if speaker is None or speaker == "":
            raise FedError("every utterance must carry a speaker id")
        groups.setdefault(str(speaker), []).append(utt)
    return [Client(client_id=sid, utterances=groups[sid]) for sid in sorted(groups)]


def schedule_decodes(clients, counter: int, config: FedConfig) -> list:
    """Clients whose N-best cache is stale at this aggregation step.

    Due when the client never decoded (first participation) or when
    counter - last_decode_round >= the refresh interval.
    """
    if counter < 0:
        raise FedError("aggregation step counter must be >= 0")
    due = []
    for c in clients:
        if c.last_decode_round < 0 or counter - c.last_decode_round >= config.decode_refresh_interval:
            due.append(c)
    return due


def encrypt_update(update: ClientUpdate) -> ClientUpdate:
    """Protocol encryption boundary; identity here (no encryption in the sim)."""
    return update


def client_decode(client: Client, params: ModelParams, config: FedConfig,
                  round_index: int) -> None:
    """Refresh the client's N-best cache with the given (global) model."""
    cached = []
    for utt in client.utterances:
        nbest = beam_search(params, utt.features, beam_width=config.beam_width,
                            n_best=config.n_best, max_len=config.max_decode_len,
                            temperature=config.temperature)
        cached.append(nbest)
    client.cached_nbest = cached
    client.last_decode_round = round_index


def client_local_adapt(client: Client, global_params: ModelParams, config: FedConfig,
                       round_index: int) -> ModelParams:
    """Run E local self-learning steps from a copy of the global model.

    The client cycles through its utterances, one optimizer step each, using
    its cached hypotheses as labels. Optimizer state is fresh per
    participation (stateless clients). Returns the locally trained copy.
    """
    if client.cached_nbest is None:
        raise FedError(f"client {client.client_id}: no cached hypotheses; decode first")
    params = global_params.clone()
    method = config.method
    topology = METHOD_TOPOLOGY[method]
    dispatch = params.config.sharing_topology if topology is not None else Topology.SINGLE
    if topology is not None and params.config.sharing_topology == Topology.SINGLE:
        raise FedError("multi-task local adaptation needs a branched global model")
    smoothing = config.train.label_smoothing
    examples = []
    for _ in range(config.local_steps):
        idx = client.cursor % len(client.utterances)
        examples.append((client.utterances[idx], client.cached_nbest[idx]))
        client.cursor += 1

    if method == Method.ONE_BEST:
        def loss_fn(p, example, _ps, _rng):
            utt, nbest = example
            return kd_1best_loss(p, utt, nbest.hypotheses[0], smoothing=smoothing)
        mode = TrainMode.KD_1BEST
    else:
        def loss_fn(p, example, _ps, _rng):
            utt, nbest = example
            return nbest_loss(p, utt, labels_from_nbest(nbest), dispatch, smoothing=smoothing)
        mode = TrainMode.MLL_NBEST if method == Method.MLL else TrainMode.MTL_NBEST

    cfg = dataclasses.replace(config.train, batch_size=1, mode=mode)
    rng = np.random.default_rng([config.seed, round_index, _client_stream(client.client_id)])
    run_steps(params, examples, loss_fn, cfg, AdamState(), rng, shuffle=False)
    client.steps_done += config.local_steps
    return params


def _client_stream(client_id: str) -> int:
    return int.from_bytes(client_id.encode(), "little") % (2 ** 31)


def compute_delta(local: ModelParams, global_params: ModelParams) -> dict:
    return {name: local[name].data.astype(np.float64) - global_params[name].data.astype(np.float64)
            for name in global_params.names()}


def aggregate_updates(updates, weighting: Weighting) -> dict:
    """Convex combination of client deltas, folded in sorted client-id order."""
    updates = sorted(updates, key=lambda u: u.client_id)
    if not updates:
        raise FedError("aggregate_updates: no updates")
    if weighting == Weighting.SAMPLE_PROPORTIONAL:
        total = sum(u.sample_count for u in updates)
        weights = [u.sample_count / total for u in updates]
    else:
        weights = [1.0 / len(updates)] * len(updates)
    agg = {name: np.zeros_like(arr) for name, arr in updates[0].delta.items()}
    for u, w in zip(updates, weights):
        for name, arr in u.delta.items():
            agg[name] += w * arr
    return agg


@dataclass
class ServerState:
    adam: AdamState = field(default_factory=AdamState)


def server_apply(global_params: ModelParams, aggregate: dict, config: FedConfig,
                 state: ServerState) -> None:
    """Apply the aggregated delta as a pseudo-gradient through the server optimizer.

    Plain mode: theta += lr * delta (lr=1 reproduces FedAvg model averaging).
    Adam mode: standard Adam on gradient -delta.
    """
    if config.server_optimizer == "plain":
        for name, arr in aggregate.items():
            t = global_params[name]
            t.data += (config.server_lr * arr).astype(t.data.dtype)
    elif config.server_optimizer == "adam":
        grads = {name: -arr for name, arr in aggregate.items()}
        cfg = dataclasses.replace(config.train, learning_rate=config.server_lr,
                                  grad_clip_norm=0.0)
        adam_step(global_params, grads, state.adam, cfg)
    else:
        raise FedError(f"unknown server optimizer {config.server_optimizer!r}")


def run_round(global_params: ModelParams, clients, config: FedConfig,
              round_index: int = 0, server_state: ServerState | None = None,
              validation_utts=None):
    """One federated round; returns (updated global params, RoundRecord).

    The cohort is drawn by a seeded sampler keyed on (config.seed, round), so
    records reproduce bitwise for identical configs. Clients sampled for the
    first time decode immediately regardless of the refresh schedule.
    """
    if config.cohort_size > len(clients):
        raise FedError(f"cohort size {config.cohort_size} exceeds client count {len(clients)}")
    server_state = server_state or ServerState()
    clients = sorted(clients, key=lambda c: c.client_id)
    rng = np.random.default_rng([config.seed, 0xFED, round_index])
    picked = rng.choice(len(clients), size=config.cohort_size, replace=False)
    cohort = [clients[i] for i in sorted(int(i) for i in picked)]

    due = set(id(c) for c in schedule_decodes(cohort, round_index, config))
    updates = []
    for client in cohort:
        if id(client) in due:
            client_decode(client, global_params, config, round_index)
        local = client_local_adapt(client, global_params, config, round_index)
        update = ClientUpdate(client_id=client.client_id,
                              delta=compute_delta(local, global_params),
                              sample_count=client.sample_count)
        updates.append(encrypt_update(update))

    aggregate = aggregate_updates(updates, config.weighting)
    server_apply(global_params, aggregate, config, server_state)

    record = RoundRecord(
        round_index=round_index,
        participant_ids=[c.client_id for c in cohort],
        client_delta_norms={u.client_id: ad.global_norm(u.delta.values()) for u in updates},
        aggregate_delta_norm=ad.global_norm(aggregate.values()),
    )
    if validation_utts:
        record.validation_loss = validation_loss(global_params, validation_utts)
        record.validation_cer = validation_cer(global_params, validation_utts,
                                               max_len=config.max_decode_len)
    return global_params, record


def run_simulation(seed_params: ModelParams, clients, config: FedConfig,
                   validation_utts=None):
    """Run the configured number of rounds; returns (final SINGLE params, records).

    Multi-task methods get their branches on the global model up front so all
    client deltas share one layout; the returned model is branch-stripped.
    """
    params = seed_params.clone()
    topology = METHOD_TOPOLOGY[config.method]
    if topology is not None and params.config.sharing_topology == Topology.SINGLE:
        params = M.add_branches(params, config.n_best, topology)
    state = ServerState()
    records = []
    for round_index in range(config.total_rounds):
        params, record = run_round(params, clients, config, round_index, state,
                                   validation_utts)
        records.append(record)
    return M.strip_branches(params), records
