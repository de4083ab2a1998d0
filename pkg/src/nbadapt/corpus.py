"""Synthetic sequence-transduction corpora with a controllable domain shift.

Each content token owns an emission prototype vector; an utterance emits a
few noisy copies of each token's prototype in order. The "shifted" domain
rotates the prototype matrix in feature space (Givens rotations in disjoint
coordinate planes) and perturbs it, standing in for an accent change. Data
generation is a pure function of (TaskSpec, domain, index): every utterance
gets its own counter-based RNG stream, so parallel generation matches serial.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .model import EOS, NUM_SPECIALS, Utterance


class CorpusError(Exception):
    pass


class Domain(str, Enum):
    SEED = "seed"
    SHIFTED = "shifted"


_DOMAIN_CODE = {Domain.SEED: 0, Domain.SHIFTED: 1}


@dataclass(frozen=True)
class TaskSpec:
    vocab_size: int = 12
    feature_dim: int = 16
    frames_per_token: tuple = (1, 3)
    noise_sigma: float = 0.3
    shift_angle_deg: float = 50.0
    shift_perturbation: float = 0.3
    seq_len_range: tuple = (3, 8)
    speaker_jitter_sigma: float = 0.1
    seed: int = 12345

    def __post_init__(self):
        object.__setattr__(self, "frames_per_token", tuple(int(x) for x in self.frames_per_token))
        object.__setattr__(self, "seq_len_range", tuple(int(x) for x in self.seq_len_range))
        if self.frames_per_token[0] < 1 or self.frames_per_token[0] > self.frames_per_token[1]:
            raise CorpusError("frames_per_token must satisfy 1 <= f_min <= f_max")
        if self.noise_sigma < 0:
            raise CorpusError("noise_sigma must be >= 0")
        if self.seq_len_range[0] < 1 or self.seq_len_range[0] > self.seq_len_range[1]:
            raise CorpusError("seq_len_range must satisfy 1 <= min <= max")
        if self.vocab_size <= NUM_SPECIALS:
            raise CorpusError("vocab_size must include at least one content token")

    @property
    def content_tokens(self):
        return range(NUM_SPECIALS, self.vocab_size)

    def prototypes(self, domain: Domain) -> np.ndarray:
        """(V, D) emission prototypes; pairwise content distances exceed 4*sigma.

        The seed-domain matrix is drawn once from the spec seed and rescaled if
        needed to honor the separation guarantee. The shifted domain applies a
        block-plane rotation by shift_angle_deg plus a Gaussian perturbation.
        """
        rng = np.random.default_rng([self.seed, 11])
        protos = rng.standard_normal((self.vocab_size, self.feature_dim))
        content = protos[NUM_SPECIALS:]
        dmin = _min_pairwise_distance(content)
        required = 4.0 * self.noise_sigma
        if required > 0 and dmin < required * 1.05:
            protos = protos * (required * 1.05 / dmin)
        if Domain(domain) == Domain.SEED:
            return protos
        rot = _plane_rotation(self.feature_dim, np.deg2rad(self.shift_angle_deg))
        shifted = protos @ rot.T
        if self.shift_perturbation > 0:
            g = np.random.default_rng([self.seed, 77]).standard_normal(protos.shape)
            shifted = shifted + self.shift_perturbation * g
        return shifted


def _min_pairwise_distance(rows: np.ndarray) -> float:
    diffs = rows[:, None, :] - rows[None, :, :]
    d = np.sqrt((diffs ** 2).sum(-1))
    n = rows.shape[0]
    return float(d[np.triu_indices(n, k=1)].min())


def _plane_rotation(dim: int, angle: float) -> np.ndarray:
    """Rotation by `angle` in every disjoint (2i, 2i+1) coordinate plane."""
    rot = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, dim - 1, 2):
        rot[i, i] = c
        rot[i + 1, i + 1] = c
        rot[i, i + 1] = -s
        rot[i + 1, i] = s
    return rot


@dataclass
class Dataset:
    ids: list
    speakers: list
    utterances: list
    domain: Domain

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)


def generate(spec: TaskSpec, domain, n_utterances: int, n_speakers: int = 1,
             stream: int = 0) -> Dataset:
    """Sample a dataset; reproducible from (spec, domain, stream) alone.

    Tokens are drawn uniformly over the content vocabulary; each token emits
    f ~ U[f_min, f_max] frames of prototype + N(0, sigma^2) noise. Speakers
    are assigned round-robin, each with a small fixed emission offset shared
    across streams. Distinct `stream` values give disjoint draws, so train
    and validation splits never overlap.
    """
    if n_utterances < 1 or n_speakers < 1:
        raise CorpusError("n_utterances and n_speakers must be >= 1")
    domain = Domain(domain)
    code = _DOMAIN_CODE[domain]
    protos = spec.prototypes(domain)
    f_min, f_max = spec.frames_per_token
    len_min, len_max = spec.seq_len_range
    jitter = [
        np.random.default_rng([spec.seed, 500_000 + s]).normal(
            0.0, spec.speaker_jitter_sigma, spec.feature_dim)
        if spec.speaker_jitter_sigma > 0 else np.zeros(spec.feature_dim)
        for s in range(n_speakers)
    ]
    ids, speakers, utterances = [], [], []
    n_content = spec.vocab_size - NUM_SPECIALS
    for i in range(n_utterances):
        rng = np.random.default_rng([spec.seed, code, stream, i])
        length = int(rng.integers(len_min, len_max + 1))
        # no adjacent repeats: with a variable frames-per-token rate, a repeated
        # token's boundary would be unrecoverable and the task unidentifiable
        draws = rng.integers(0, n_content, size=length)
        tokens = np.empty(length, dtype=np.int64)
        tokens[0] = NUM_SPECIALS + draws[0]
        for j in range(1, length):
            step = int(draws[j]) % (n_content - 1) + 1 if n_content > 1 else 0
            tokens[j] = NUM_SPECIALS + (int(tokens[j - 1]) - NUM_SPECIALS + step) % n_content
        frames = []
        for tok in tokens:
            f = int(rng.integers(f_min, f_max + 1))
            emission = protos[tok] + rng.normal(0.0, spec.noise_sigma, (f, spec.feature_dim))
            frames.append(emission)
        speaker_idx = i % n_speakers
        features = np.concatenate(frames, axis=0) + jitter[speaker_idx]
        reference = tuple(int(t) for t in tokens) + (EOS,)
        ids.append(f"{domain.value}-{stream}-{i:06d}")
        speakers.append(f"spk{speaker_idx:04d}")
        utterances.append(Utterance(features=features, reference=reference))
    return Dataset(ids=ids, speakers=speakers, utterances=utterances, domain=domain)


# --------------------------------------------------------------------------
# augmentation (feature-domain analogs of amplitude/speed/noise perturbation)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    amplitude_range: tuple | None = None  # e.g. (0.8, 1.25)
    speed_range: tuple | None = None      # e.g. (0.9, 1.1)
    noise_sigma: float = 0.0


def resample_speed(features: np.ndarray, speed: float) -> np.ndarray:
    """Change the frame rate by `speed`: K frames become round(K / speed).

    Rows are linearly interpolated at the new positions; speed 1.0 is the
    identity.
    """
    if speed <= 0:
        raise CorpusError("speed must be positive")
    if speed == 1.0:
        return features.copy()
    k = features.shape[0]
    new_k = max(1, int(round(k / speed)))
    if new_k == k:
        return features.copy()
    positions = np.linspace(0.0, k - 1.0, new_k)
    lo = np.floor(positions).astype(int)
    hi = np.minimum(lo + 1, k - 1)
    frac = (positions - lo)[:, None]
    return (1.0 - frac) * features[lo] + frac * features[hi]


def augment(utterance: Utterance, config: AugmentConfig, rng=None) -> Utterance:
    """Perturb features, never tokens; with everything disabled it is identity."""
    feats = utterance.features.copy()
    if (config.amplitude_range or config.speed_range or config.noise_sigma > 0) and rng is None:
        raise CorpusError("augment with enabled perturbations requires an rng")
    if config.amplitude_range:
        lo, hi = config.amplitude_range
        scale = float(rng.uniform(lo, hi))
        if scale != 1.0:
            feats = feats * scale
    if config.speed_range:
        lo, hi = config.speed_range
        feats = resample_speed(feats, float(rng.uniform(lo, hi)))
    if config.noise_sigma > 0:
        feats = feats + rng.normal(0.0, config.noise_sigma, feats.shape)
    return Utterance(features=feats, reference=utterance.reference)


# --------------------------------------------------------------------------
# dataset files
# --------------------------------------------------------------------------
#
#   # nbadapt dataset v1 feature_dim=<D> domain=<domain> count=<N>
#   utt <id> <speaker> <domain> <n_frames> <token ids or ->
#   <frame row: D space-joined float reprs>   x n_frames
#
# Floats are written with Python's shortest round-trip repr, so a load after
# save reproduces features bitwise at float64.

_HEADER_PREFIX = "# nbadapt dataset v1 "


def save(dataset: Dataset, path) -> int:
    """Write the dataset; returns bytes written."""
    lines = [f"{_HEADER_PREFIX}feature_dim={_dim(dataset)} domain={dataset.domain.value} "
             f"count={len(dataset)}"]
    for utt_id, speaker, utt in zip(dataset.ids, dataset.speakers, dataset.utterances):
        tokens = " ".join(str(t) for t in utt.reference) if utt.reference else "-"
        k = utt.features.shape[0]
        lines.append(f"utt {utt_id} {speaker} {dataset.domain.value} {k} {tokens}")
        for row in utt.features:
            lines.append(" ".join(repr(float(x)) for x in row))
    blob = ("\n".join(lines) + "\n").encode()
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def _dim(dataset: Dataset) -> int:
    return dataset.utterances[0].features.shape[1] if dataset.utterances else 0


def load(path) -> Dataset:
    """Read a dataset file; malformed input raises CorpusError with a line number."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(_HEADER_PREFIX):
        raise CorpusError(f"{path}:1: not a dataset file")
    header = dict(kv.split("=", 1) for kv in lines[0][len(_HEADER_PREFIX):].split())
    try:
        dim = int(header["feature_dim"])
        domain = Domain(header["domain"])
        count = int(header["count"])
    except (KeyError, ValueError) as exc:
        raise CorpusError(f"{path}:1: bad header ({exc})") from exc
    ids, speakers, utterances = [], [], []
    lineno = 1
    idx = 1
    for _ in range(count):
        if idx >= len(lines):
            raise CorpusError(f"{path}:{lineno + 1}: truncated file "
                              f"(expected {count} utterances, got {len(utterances)})")
        lineno = idx + 1
        parts = lines[idx].split(" ", 5)
        if len(parts) != 6 or parts[0] != "utt":
            raise CorpusError(f"{path}:{lineno}: expected an 'utt' record line")
        _, utt_id, speaker, _domain, k_str, tokens_s = parts
        try:
            k = int(k_str)
        except ValueError:
            raise CorpusError(f"{path}:{lineno}: bad frame count {k_str!r}")
        idx += 1
        rows = []
        for r in range(k):
            if idx >= len(lines):
                raise CorpusError(f"{path}:{idx + 1}: truncated file inside utterance {utt_id}")
            row = lines[idx].split()
            if len(row) != dim:
                raise CorpusError(f"{path}:{idx + 1}: expected {dim} values, got {len(row)}")
            try:
                rows.append([float(x) for x in row])
            except ValueError as exc:
                raise CorpusError(f"{path}:{idx + 1}: bad float ({exc})") from exc
            idx += 1
        reference = None
        if tokens_s != "-":
            try:
                reference = tuple(int(t) for t in tokens_s.split())
            except ValueError as exc:
                raise CorpusError(f"{path}:{lineno}: bad token ids ({exc})") from exc
        ids.append(utt_id)
        speakers.append(speaker)
        utterances.append(Utterance(features=np.asarray(rows, dtype=np.float64),
                                    reference=reference))
    return Dataset(ids=ids, speakers=speakers, utterances=utterances, domain=domain)
