"""Loss construction and optimization.

Three loss families share one teacher-forced decoder unroll:
  * supervised: smoothed cross-entropy against the reference, with scheduled
    sampling of the previous input token;
  * 1-best distillation: the same computation with a decoded hypothesis as
    the target and pure teacher forcing;
  * weighted N-best: the confidence-weighted sum of per-hypothesis losses,
    dispatched through one branch (multi-label) or one branch per rank
    (multi-task). The encoder runs once per utterance and is reused.

All losses are per-token (length-normalized) so long hypotheses cannot
dominate the weighted sum. Updates are standard Adam with bias correction and
optional global-norm gradient clipping.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import Tensor
from .metrics import corpus_error_rate, strip_eos
from .model import ModelParams, Topology, Utterance


class TrainError(Exception):
    pass


class TrainMode(str, Enum):
    SUPERVISED = "supervised"
    KD_1BEST = "kd_1best"
    MLL_NBEST = "mll_nbest"
    MTL_NBEST = "mtl_nbest"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    label_smoothing: float = 0.1
    sampling_max: float = 0.3     # scheduled-sampling ceiling
    sampling_ramp_frac: float = 0.5  # fraction of planned steps spent ramping 0 -> max
    batch_size: int = 16
    max_epochs: int = 20
    grad_clip_norm: float = 5.0
    mode: TrainMode = TrainMode.SUPERVISED

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise TrainError("label_smoothing must be in [0, 1)")
        if not 0.0 <= self.sampling_max <= 1.0:
            raise TrainError("sampling_max must be in [0, 1]")
        for name in ("learning_rate", "batch_size", "max_epochs"):
            if getattr(self, name) <= 0:
                raise TrainError(f"{name} must be positive")


@dataclass(frozen=True)
class WeightedLabel:
    """One N-best hypothesis as a training target: tokens, weight, rank."""
    tokens: tuple
    weight: float
    rank: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.tokens:
            raise TrainError("WeightedLabel tokens must be non-empty")
        if not 0.0 < self.weight <= 1.0:
            raise TrainError(f"WeightedLabel weight must be in (0, 1], got {self.weight}")
        if self.rank < 1:
            raise TrainError("WeightedLabel rank starts at 1")


def labels_from_nbest(nbest) -> list:
    """WeightedLabels for every hypothesis of an NBestList, rank order preserved."""
    return [WeightedLabel(tokens=h.tokens, weight=w, rank=i + 1)
            for i, (h, w) in enumerate(zip(nbest.hypotheses, nbest.weights))]


def sampling_prob(step: int, planned_steps: int, cfg: TrainConfig) -> float:
    """Linear 0 -> sampling_max ramp over the first ramp_frac of planned steps."""
    ramp = max(1, int(planned_steps * cfg.sampling_ramp_frac))
    if step >= ramp:
        return cfg.sampling_max
    return cfg.sampling_max * step / ramp


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def _sequence_loss(params: ModelParams, enc_out, enc_proj, tokens, smoothing: float,
                   branch: int = 0, p: float = 0.0, rng=None, dropout_rng=None) -> Tensor:
    logits = M.sequence_logits(params, branch, enc_out, enc_proj, tokens,
                               sampling_prob=p, rng=rng, dropout_rng=dropout_rng)
    return ad.cross_entropy(logits, tokens, smoothing=smoothing)


def _encode_once(params: ModelParams, utterance: Utterance, dropout_rng=None):
    enc_out = M.encode(params, utterance.features, dropout_rng=dropout_rng)
    enc_proj = M.encoder_projection(params, enc_out)
    return enc_out, enc_proj


def supervised_loss(params: ModelParams, utterance: Utterance, p: float = 0.0,
                    smoothing: float = 0.1, rng=None, dropout_rng=None) -> Tensor:
    """Mean per-token smoothed CE against the reference, scheduled-sampled at p.

    Dropout (when enabled in the model config) draws masks from dropout_rng;
    leaving it None keeps the loss deterministic.
    """
    if utterance.reference is None or not utterance.reference:
        raise TrainError("supervised_loss requires an utterance with a reference")
    if not 0.0 <= p <= 1.0:
        raise TrainError(f"sampling probability must be in [0, 1], got {p}")
    enc_out, enc_proj = _encode_once(params, utterance, dropout_rng)
    return _sequence_loss(params, enc_out, enc_proj, utterance.reference, smoothing,
                          p=p, rng=rng, dropout_rng=dropout_rng)


def kd_1best_loss(params: ModelParams, utterance: Utterance, hyp,
                  smoothing: float = 0.1) -> Tensor:
    """Teacher-forced CE with a decoded hypothesis standing in for the reference.

    The hypothesis may come from the model's own decode or from any other
    checkpoint; the loss is agnostic to the source.
    """
    tokens = hyp.tokens if hasattr(hyp, "tokens") else tuple(hyp)
    if not tokens:
        raise TrainError("kd_1best_loss requires a non-empty hypothesis")
    enc_out, enc_proj = _encode_once(params, utterance)
    return _sequence_loss(params, enc_out, enc_proj, tokens, smoothing)


def nbest_loss(params: ModelParams, utterance: Utterance, labels, topology: Topology,
               smoothing: float = 0.1) -> Tensor:
    """Confidence-weighted sum of per-hypothesis losses over one utterance.

    Multi-label routing (SINGLE topology) sends every term through branch 0;
    multi-task routing sends rank n through branch n-1. Encoder activations
    are computed once and shared by all terms.
    """
    labels = list(labels)
    if not labels:
        raise TrainError("nbest_loss requires at least one weighted label")
    for i, lab in enumerate(labels):
        if lab.rank != i + 1:
            raise TrainError(f"labels must be ranked 1..N in order, got rank {lab.rank} "
                             f"at position {i}")
    topology = Topology(topology)
    if topology == Topology.SINGLE:
        branches = [0] * len(labels)
    else:
        if params.config.num_task_branches < len(labels):
            raise TrainError(f"multi-task loss over {len(labels)} hypotheses needs at least "
                             f"that many branches, model has {params.config.num_task_branches}")
        branches = list(range(len(labels)))
    enc_out, enc_proj = _encode_once(params, utterance)
    total = None
    for lab, branch in zip(labels, branches):
        term = _sequence_loss(params, enc_out, enc_proj, lab.tokens, smoothing, branch=branch)
        term = ad.mul(term, Tensor(np.asarray(lab.weight, dtype=term.data.dtype)))
        total = term if total is None else ad.add(total, term)
    return total


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    skipped: int = 0


def adam_step(params: ModelParams, grads: dict, state: AdamState, cfg: TrainConfig) -> bool:
    """One Adam update from explicit gradients; returns False on non-finite grads.

    Clips by global norm first when cfg.grad_clip_norm > 0; a skipped step
    leaves parameters and moments untouched but is counted in the state.
    """
    if not grads:
        return True
    arrays = list(grads.values())
    norm = ad.global_norm(arrays)
    if not np.isfinite(norm):
        state.skipped += 1
        return False
    scale = 1.0
    if cfg.grad_clip_norm > 0 and norm > cfg.grad_clip_norm:
        scale = cfg.grad_clip_norm / norm
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        tensor = params[name]
        g = g * scale if scale != 1.0 else g
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        mhat = m / bias1
        vhat = v / bias2
        tensor.data -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    return True


# --------------------------------------------------------------------------
# epoch runner shared by the CLI, the self-learning loop and the fed clients
# --------------------------------------------------------------------------


class TrainLog:
    """Line-delimited JSON training log: step, mode, loss, grad norm, p, wall time."""

    def __init__(self, path=None):
        self._fh = open(path, "a", encoding="utf-8") if path else None

    def write(self, **fields) -> None:
        if self._fh is not None:
            fields["time"] = time.time()
            self._fh.write(json.dumps(fields) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def run_steps(params: ModelParams, examples, loss_fn, cfg: TrainConfig,
              adam_state: AdamState, rng, planned_steps: int = 0, step_offset: int = 0,
              log: TrainLog | None = None, shuffle: bool = True) -> dict:
    """One pass over `examples`, batching gradients and stepping Adam.

    `loss_fn(params, example, p, rng)` builds the scalar loss for one example.
    Returns summary stats; `step_offset`/`planned_steps` drive the sampling
    schedule for supervised mode.
    """
    order = np.arange(len(examples))
    if shuffle:
        rng.shuffle(order)
    losses = []
    step = step_offset
    skipped = 0
    batch: list = []
    for pos, idx in enumerate(order):
        batch.append(examples[int(idx)])
        if len(batch) < cfg.batch_size and pos != len(order) - 1:
            continue
        params.zero_grads()
        p = sampling_prob(step, planned_steps, cfg) if cfg.mode == TrainMode.SUPERVISED else 0.0
        inv_batch = 1.0 / len(batch)
        batch_loss = 0.0
        for example in batch:
            loss = loss_fn(params, example, p, rng)
            batch_loss += loss.item()
            ad.backward(ad.mul(loss, Tensor(np.asarray(inv_batch, dtype=loss.data.dtype))))
        grads = params.grads()
        stepped = adam_step(params, grads, adam_state, cfg)
        if not stepped:
            skipped += 1
        batch_loss *= inv_batch
        losses.append(batch_loss)
        if log is not None:
            log.write(step=step, mode=cfg.mode.value, loss=batch_loss,
                      grad_norm=ad.global_norm(grads.values()), sampling_p=p,
                      skipped=not stepped)
        step += 1
        batch = []
    return {"steps": step - step_offset, "mean_loss": float(np.mean(losses)) if losses else 0.0,
            "final_step": step, "skipped_steps": skipped}


def train_supervised(params: ModelParams, train_utts, val_utts, cfg: TrainConfig, *,
                     seed: int, max_decode_len: int, target_cer: float = 0.0,
                     patience: int = 0, log: TrainLog | None = None):
    """Epoch loop for supervised training with CER-based model selection.

    Trains in place, evaluates validation CER each epoch, and returns
    (best checkpoint, per-epoch history). Stops early once CER reaches
    target_cer or fails to improve for `patience` epochs (0 disables).
    """
    if cfg.mode != TrainMode.SUPERVISED:
        raise TrainError("train_supervised needs a SUPERVISED-mode config")
    rng = np.random.default_rng([seed, 0x5EED])
    adam_state = AdamState()
    batches_per_epoch = -(-len(train_utts) // cfg.batch_size)
    planned_steps = cfg.max_epochs * batches_per_epoch
    smoothing = cfg.label_smoothing

    def loss_fn(p, utt, sched_p, step_rng):
        dropout_rng = step_rng if p.config.dropout > 0.0 else None
        return supervised_loss(p, utt, p=sched_p, smoothing=smoothing, rng=step_rng,
                               dropout_rng=dropout_rng)

    best_params = params.clone()
    best_cer = validation_cer(params, val_utts, max_len=max_decode_len)
    history = [{"epoch": 0, "mean_loss": None, "validation_cer": best_cer}]
    step = 0
    bad_epochs = 0
    for epoch in range(1, cfg.max_epochs + 1):
        stats = run_steps(params, train_utts, loss_fn, cfg, adam_state, rng,
                          planned_steps=planned_steps, step_offset=step, log=log)
        step = stats["final_step"]
        cer = validation_cer(params, val_utts, max_len=max_decode_len)
        history.append({"epoch": epoch, "mean_loss": stats["mean_loss"],
                        "validation_cer": cer})
        if cer < best_cer:
            best_cer = cer
            best_params = params.clone()
            bad_epochs = 0
        else:
            bad_epochs += 1
        if cer <= target_cer or (patience and bad_epochs >= patience):
            break
    return best_params, history


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def validation_cer(params: ModelParams, utterances, max_len: int, branch: int = 0) -> float:
    """Pooled CER of greedy decodes against references (content tokens only)."""
    pairs = []
    for utt in utterances:
        if utt.reference is None:
            raise TrainError("validation utterances need references")
        hyp = M.greedy_decode(params, utt.features, max_len=max_len, branch=branch)
        pairs.append((strip_eos(utt.reference), strip_eos(hyp)))
    return corpus_error_rate(pairs)


def validation_loss(params: ModelParams, utterances, smoothing: float = 0.0) -> float:
    """Mean teacher-forced per-token CE over a labeled set (no gradients)."""
    total = 0.0
    with ad.no_grad():
        for utt in utterances:
            enc_out, enc_proj = _encode_once(params, utt)
            total += _sequence_loss(params, enc_out, enc_proj, utt.reference, smoothing).item()
    return total / max(1, len(utterances))
