"""Edit-distance error rates: per-pair counts, pooled corpus rates, N-best oracle."""

from __future__ import annotations

from dataclasses import dataclass

from .model import EOS


class MetricsError(Exception):
    pass


@dataclass(frozen=True)
class ErrorCounts:
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int

    @property
    def total(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        return self.total / self.ref_len


def edit_distance(ref, hyp) -> ErrorCounts:
    """Minimal unit-cost alignment counts transforming ref into hyp.

    Cost ties are broken deterministically: substitution, then deletion, then
    insertion. The total S+I+D is the Levenshtein distance either way.
    """
    ref = list(ref)
    hyp = list(hyp)
    if not ref:
        raise MetricsError("edit_distance: reference must be non-empty")
    n, m = len(ref), len(hyp)
    # dp[j] = (cost, S, D, I) for aligning ref[:i] to hyp[:j]
    prev = [(j, 0, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, i, 0)]
        ri = ref[i - 1]
        for j in range(1, m + 1):
            if ri == hyp[j - 1]:
                c, s, d, ins = prev[j - 1]
                cur.append((c, s, d, ins))
                continue
            # candidates in tie-break preference order
            sc, ss, sd, si = prev[j - 1]
            dc, ds, dd, di = prev[j]
            ic, is_, id_, ii = cur[j - 1]
            best = (sc + 1, ss + 1, sd, si)
            if dc + 1 < best[0]:
                best = (dc + 1, ds, dd + 1, di)
            if ic + 1 < best[0]:
                best = (ic + 1, is_, id_, ii + 1)
            cur.append(best)
        prev = cur
    cost, s, d, ins = prev[m]
    counts = ErrorCounts(substitutions=s, insertions=ins, deletions=d, ref_len=n)
    assert counts.total == cost
    return counts


def corpus_error_rate(pairs) -> float:
    """Pooled (sum errors / sum ref lengths) rate over (ref, hyp) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise MetricsError("corpus_error_rate: need at least one pair")
    errors = 0
    length = 0
    for ref, hyp in pairs:
        counts = edit_distance(ref, hyp)
        errors += counts.total
        length += counts.ref_len
    return errors / length


def nbest_oracle_error_rate(refs, nbest_lists) -> float:
    """Pooled rate scoring, per utterance, the lowest-error hypothesis in its list."""
    refs = list(refs)
    nbest_lists = list(nbest_lists)
    if len(refs) != len(nbest_lists):
        raise MetricsError("nbest_oracle_error_rate: refs and lists must align")
    errors = 0
    length = 0
    for ref, nbest in zip(refs, nbest_lists):
        hyps = nbest.hypotheses if hasattr(nbest, "hypotheses") else nbest
        if not hyps:
            raise MetricsError("nbest_oracle_error_rate: empty N-best list")
        best = None
        for h in hyps:
            tokens = h.tokens if hasattr(h, "tokens") else h
            counts = edit_distance(ref, tokens)
            if best is None or counts.total < best.total:
                best = counts
        errors += best.total
        length += best.ref_len
    return errors / length


def strip_eos(tokens):
    """Drop the trailing EOS so rates are computed on content tokens."""
    tokens = tuple(tokens)
    if tokens and tokens[-1] == EOS:
        return tokens[:-1]
    return tokens
