"""Iterative self-learning: decode, adapt on weighted N-best labels, fine-tune
on the 1-best, re-decode, and stop when validation CER stops improving.

Adaptation references never reach a gradient: the adaptation loss path accepts
only decoded hypotheses (WeightedLabels built from NBestLists), and reference
fields on adaptation utterances are used solely for reporting the decode
error rates. Validation references drive stopping, never gradients.

The returned model is the branch-stripped checkpoint with the best validation
CER among all evaluated iterations, the seed itself included.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import model as M
from .decoder import beam_search, write_nbest_file
from .metrics import corpus_error_rate, nbest_oracle_error_rate, strip_eos
from .model import ModelParams, Topology
from .trainer import (AdamState, TrainConfig, TrainLog, TrainMode, kd_1best_loss,
                      labels_from_nbest, nbest_loss, run_steps, validation_cer)


class SelfLearnError(Exception):
    pass


class Method(str, Enum):
    ONE_BEST = "one_best"
    MLL = "mll"
    MTL_SHARED_AED = "mtl_shared_aed"
    MTL_SHARED_AE = "mtl_shared_ae"


METHOD_TOPOLOGY = {
    Method.ONE_BEST: None,
    Method.MLL: None,
    Method.MTL_SHARED_AED: Topology.SHARED_AED,
    Method.MTL_SHARED_AE: Topology.SHARED_AE,
}


@dataclass(frozen=True)
class SelfLearnConfig:
    method: Method = Method.MTL_SHARED_AE
    n_best: int = 4
    nbest_epochs: int = 2
    onebest_epochs: int = 2
    max_outer_iterations: int = 3
    beam_width: int = 8
    max_decode_len: int = 16
    temperature: float = 1.0
    improve_margin: float = 0.001  # absolute CER improvement required to continue
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def __post_init__(self):
        if self.n_best < 1:
            raise SelfLearnError("n_best must be >= 1")
        method = Method(self.method)
        object.__setattr__(self, "method", method)
        if method == Method.ONE_BEST:
            object.__setattr__(self, "n_best", 1)
        if self.beam_width < self.n_best:
            object.__setattr__(self, "beam_width", self.n_best)


@dataclass
class IterationRecord:
    iteration: int
    validation_cer: float
    nbest_loss: float | None = None
    onebest_loss: float | None = None
    adapt_cer_1best: float | None = None   # decode quality on the adaptation set,
    adapt_cer_oracle: float | None = None  # reported only when references exist
    skipped_utterances: int = 0


@dataclass
class SelfLearnReport:
    method: str
    iterations: list = field(default_factory=list)
    stopping_reason: str = ""
    best_iteration: int = 0
    best_cer: float = float("inf")


def _decode_adaptation(params: ModelParams, utterances, cfg: SelfLearnConfig):
    """N-best decode of the adaptation set; returns (kept (utt, nbest) pairs, skipped)."""
    decoded = []
    skipped = 0
    for utt in utterances:
        nbest = beam_search(params, utt.features, beam_width=cfg.beam_width,
                            n_best=cfg.n_best, max_len=cfg.max_decode_len,
                            temperature=cfg.temperature)
        usable = [h for h in nbest.hypotheses if len(strip_eos(h.tokens)) > 0]
        if not usable:
            skipped += 1
            continue
        decoded.append((utt, nbest))
    return decoded, skipped


def _adapt_cer(decoded) -> tuple:
    """(1-best CER, oracle CER) against adaptation references, when present."""
    refs = []
    one_best = []
    lists = []
    for utt, nbest in decoded:
        if utt.reference is None:
            return None, None
        refs.append(strip_eos(utt.reference))
        one_best.append(strip_eos(nbest.hypotheses[0].tokens))
        lists.append([strip_eos(h.tokens) for h in nbest.hypotheses])
    if not refs:
        return None, None
    return corpus_error_rate(zip(refs, one_best)), nbest_oracle_error_rate(refs, lists)


def run_self_learning(seed_params: ModelParams, adaptation_utts, validation_utts,
                      config: SelfLearnConfig, log: TrainLog | None = None):
    """Adapt a seed model on unlabeled data; returns (params, SelfLearnReport).

    Per outer iteration: beam-decode the adaptation set, grow task branches if
    the method needs them, train on the weighted N-best labels, fine-tune on
    the 1-best through the main branch, then evaluate validation CER. Stops
    when CER fails to improve on the best so far by `improve_margin`.
    """
    if not adaptation_utts:
        raise SelfLearnError("adaptation set is empty")
    if not validation_utts:
        raise SelfLearnError("validation set is empty")
    cfg = config
    method = cfg.method
    smoothing = cfg.train.label_smoothing
    params = seed_params.clone()
    rng = np.random.default_rng([cfg.seed, 0xAD])
    adam_state = AdamState()

    report = SelfLearnReport(method=method.value)
    seed_cer = validation_cer(params, validation_utts, max_len=cfg.max_decode_len)
    report.iterations.append(IterationRecord(iteration=0, validation_cer=seed_cer))
    best_cer = seed_cer
    best_params = params.clone()
    best_iter = 0

    nbest_mode = (TrainMode.MLL_NBEST if method in (Method.ONE_BEST, Method.MLL)
                  else TrainMode.MTL_NBEST)
    nbest_cfg = dataclasses.replace(cfg.train, mode=nbest_mode)
    onebest_cfg = dataclasses.replace(cfg.train, mode=TrainMode.KD_1BEST)

    for outer in range(1, cfg.max_outer_iterations + 1):
        decoded, skipped = _decode_adaptation(params, adaptation_utts, cfg)
        if not decoded:
            report.stopping_reason = "all adaptation utterances produced empty hypotheses"
            break
        adapt_1best, adapt_oracle = _adapt_cer(decoded)

        topology = METHOD_TOPOLOGY[method]
        if topology is not None and params.config.sharing_topology == Topology.SINGLE:
            params = M.add_branches(params, cfg.n_best, topology)
        dispatch = params.config.sharing_topology if topology is not None else Topology.SINGLE

        examples = [(utt, labels_from_nbest(nbest)) for utt, nbest in decoded]

        def nbest_fn(p, example, _p_sched, _rng):
            utt, labels = example
            return nbest_loss(p, utt, labels, dispatch, smoothing=smoothing)

        nbest_stats = {"mean_loss": None}
        for _ in range(cfg.nbest_epochs):
            nbest_stats = run_steps(params, examples, nbest_fn, nbest_cfg, adam_state,
                                    rng, log=log)

        def onebest_fn(p, example, _p_sched, _rng):
            utt, labels = example
            return kd_1best_loss(p, utt, labels[0], smoothing=smoothing)

        onebest_stats = {"mean_loss": None}
        for _ in range(cfg.onebest_epochs):
            onebest_stats = run_steps(params, examples, onebest_fn, onebest_cfg, adam_state,
                                      rng, log=log)

        cer = validation_cer(params, validation_utts, max_len=cfg.max_decode_len)
        report.iterations.append(IterationRecord(
            iteration=outer, validation_cer=cer,
            nbest_loss=nbest_stats["mean_loss"], onebest_loss=onebest_stats["mean_loss"],
            adapt_cer_1best=adapt_1best, adapt_cer_oracle=adapt_oracle,
            skipped_utterances=skipped))

        improved_enough = cer < best_cer - cfg.improve_margin
        if cer < best_cer:
            # any improvement updates the returned checkpoint (stopping
            # soundness: return the minimum-CER iteration), but only a
            # margin-sized one keeps the loop going
            best_cer = cer
            best_params = params.clone()
            best_iter = outer
        if not improved_enough:
            report.stopping_reason = (f"validation CER {cer:.4f} did not improve on best "
                                      f"by {cfg.improve_margin}")
            break
    else:
        report.stopping_reason = f"reached max outer iterations ({cfg.max_outer_iterations})"

    report.best_iteration = best_iter
    report.best_cer = best_cer
    final = M.strip_branches(best_params)
    return final, report


def cache_decodes(params: ModelParams, utterances, path, beam_width: int = 8,
                  n_best: int = 4, max_len: int = 16, temperature: float = 1.0) -> int:
    """Decode utterances and write the N-best dump; returns records written."""
    entries = []
    for i, utt in enumerate(utterances):
        nbest = beam_search(params, utt.features, beam_width=beam_width, n_best=n_best,
                            max_len=max_len, temperature=temperature)
        entries.append((f"utt{i:06d}", nbest))
    try:
        return write_nbest_file(path, entries)
    except OSError as exc:
        raise SelfLearnError(f"cannot write decode cache to {path}: {exc}") from exc
