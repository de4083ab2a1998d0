"""Beam-search N-best decoding with confidence-weighted hypothesis lists.

Hypothesis confidence is the length-normalized log-probability (sum of
per-step log-probs divided by token count, EOS included); raw scores would
make the softmax weighting collapse onto the shortest hypothesis. Completed
hypotheses accumulate in a finished pool and the final ranking is by
normalized score with a lexicographic token tie-break, so results are
deterministic for fixed parameters and input.

The search never extends a candidate with PAD or SOS: PAD is forbidden in
hypotheses and SOS is an input-only token. Log-probs are the model's raw
distribution (decode_step does no masking).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (EOS, PAD, SOS, DecoderState, ModelParams,
                    build_encoder_cache, decode_step_batch, init_decoder_state)


class DecodeError(Exception):
    pass


@dataclass(frozen=True)
class Hypothesis:
    """A decoded token sequence and its length-normalized confidence score."""
    tokens: tuple
    score: float

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.tokens:
            raise DecodeError("hypothesis must have at least one token")
        if PAD in self.tokens:
            raise DecodeError("hypothesis contains PAD")
        if self.score > 0.0:
            raise DecodeError(f"confidence score must be <= 0, got {self.score}")

    @property
    def total_logprob(self) -> float:
        return self.score * len(self.tokens)

    @property
    def truncated(self) -> bool:
        return self.tokens[-1] != EOS


def nbest_weights(scores, temperature: float = 1.0) -> np.ndarray:
    """Softmax of confidence scores at the given temperature.

    Positive, order-preserving, and summing to 1 (stably computed by shifting
    the max before exponentiating).
    """
    if temperature <= 0:
        raise DecodeError(f"nbest_weights: temperature must be positive, got {temperature}")
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size < 1:
        raise DecodeError("nbest_weights: need at least one score")
    z = s / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass(frozen=True)
class NBestList:
    """Ranked hypotheses for one utterance plus their softmax weights."""
    hypotheses: tuple
    temperature: float = 1.0
    weights: tuple = field(default=None)

    def __post_init__(self):
        hyps = tuple(self.hypotheses)
        if not hyps:
            raise DecodeError("NBestList must contain at least one hypothesis")
        for a, b in zip(hyps, hyps[1:]):
            if a.score < b.score:
                raise DecodeError("NBestList hypotheses must be sorted by score descending")
        object.__setattr__(self, "hypotheses", hyps)
        w = nbest_weights([h.score for h in hyps], self.temperature)
        object.__setattr__(self, "weights", tuple(float(x) for x in w))

    def __len__(self):
        return len(self.hypotheses)

    @property
    def scores(self) -> tuple:
        return tuple(h.score for h in self.hypotheses)


@dataclass
class _Beam:
    tokens: tuple
    total: float
    state_index: int  # row into the batched decoder state


def beam_search(params: ModelParams, features, beam_width: int, n_best: int,
                max_len: int, temperature: float = 1.0) -> NBestList:
    """Top-N completed hypotheses under beam search (branch 0).

    If nothing reaches EOS within max_len (or fewer than n_best do), the
    highest-scoring active beams are force-terminated and returned as
    truncated hypotheses (detectable by a non-EOS final token).
    """
    if not (beam_width >= n_best >= 1):
        raise DecodeError(f"beam_search requires beam_width >= n_best >= 1, "
                          f"got B={beam_width}, N={n_best}")
    if max_len < 1:
        raise DecodeError(f"beam_search requires max_len >= 1, got {max_len}")
    cache = build_encoder_cache(params, features)
    vocab = params.config.vocab_size
    allowed = [v for v in range(vocab) if v not in (PAD, SOS)]

    beams = [_Beam(tokens=(), total=0.0, state_index=0)]
    state = init_decoder_state(params)
    finished: list[Hypothesis] = []

    for _ in range(max_len):
        prev = [b.tokens[-1] if b.tokens else SOS for b in beams]
        log_probs, state = decode_step_batch(params, 0, prev, state, cache)
        candidates = []
        for bi, beam in enumerate(beams):
            lp = log_probs[bi]
            for v in allowed:
                candidates.append((beam.total + float(lp[v]), beam.tokens + (v,), bi))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        # the top-B candidates by total log-prob advance; completed ones move
        # to the finished pool and release their slot for nothing (standard)
        next_beams = []
        for total, tokens, bi in candidates[:beam_width]:
            if tokens[-1] == EOS:
                finished.append(Hypothesis(tokens=tokens, score=total / len(tokens)))
            else:
                next_beams.append(_Beam(tokens=tokens, total=total, state_index=bi))
        beams = next_beams
        if not beams:
            break
        rows = [b.state_index for b in beams]
        state = DecoderState(hidden=[h[rows] for h in state.hidden], context=state.context[rows])
        for i, b in enumerate(beams):
            b.state_index = i
        if len(finished) >= n_best:
            floor = sorted(finished, key=_rank_key)[n_best - 1].score
            best_possible = max(b.total / max_len if b.total < 0 else 0.0 for b in beams)
            if best_possible < floor:
                break

    if len(finished) < n_best:
        actives = [b for b in beams if b.tokens]
        for b in sorted(actives, key=lambda b: (-b.total / len(b.tokens), b.tokens)):
            if len(finished) >= n_best:
                break
            finished.append(Hypothesis(tokens=b.tokens, score=b.total / len(b.tokens)))
    if not finished:
        raise DecodeError("beam search produced no hypotheses (max_len too small?)")
    finished.sort(key=_rank_key)
    return NBestList(hypotheses=tuple(finished[:n_best]), temperature=temperature)


def _rank_key(h: Hypothesis):
    return (-h.score, h.tokens)


# --------------------------------------------------------------------------
# N-best dump format: line-delimited cache of decodes
# --------------------------------------------------------------------------
#
#   # nbest v1 temperature=<repr>
#   <utt_id>\t<rank>\t<score repr>\t<weight repr>\t<space-joined token ids>
#
# One record per hypothesis; scores/weights use full-precision float repr so
# a read-back list is identical to the written one.

DUMP_HEADER_PREFIX = "# nbest v1 temperature="


def write_nbest_file(path, entries) -> int:
    """Write (utt_id, NBestList) pairs; returns the number of records written."""
    entries = list(entries)
    temperature = entries[0][1].temperature if entries else 1.0
    records = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{DUMP_HEADER_PREFIX}{temperature!r}\n")
        for utt_id, nbest in entries:
            if nbest.temperature != temperature:
                raise DecodeError("write_nbest_file: mixed temperatures in one dump")
            for rank, (hyp, weight) in enumerate(zip(nbest.hypotheses, nbest.weights), start=1):
                tokens = " ".join(str(t) for t in hyp.tokens)
                fh.write(f"{utt_id}\t{rank}\t{hyp.score!r}\t{weight!r}\t{tokens}\n")
                records += 1
    return records


def read_nbest_file(path) -> dict:
    """Read a dump back into {utt_id: NBestList}, preserving order and scores."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith(DUMP_HEADER_PREFIX):
            raise DecodeError(f"{path}:1: not an N-best dump (bad header)")
        temperature = float(header[len(DUMP_HEADER_PREFIX):])
        by_utt: dict = {}
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise DecodeError(f"{path}:{lineno}: expected 5 tab-separated fields")
            utt_id, rank_s, score_s, _weight_s, tokens_s = parts
            hyp = Hypothesis(tokens=tuple(int(t) for t in tokens_s.split()),
                             score=float(score_s))
            by_utt.setdefault(utt_id, []).append((int(rank_s), hyp))
    result = {}
    for utt_id, ranked in by_utt.items():
        ranked.sort(key=lambda rh: rh[0])
        result[utt_id] = NBestList(hypotheses=tuple(h for _, h in ranked),
                                   temperature=temperature)
    return result
