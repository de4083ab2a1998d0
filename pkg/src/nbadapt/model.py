"""Attention-based encoder-decoder with per-task output branches.

The encoder is a stack of bidirectional GRU layers; the decoder is a
unidirectional GRU stack driven by concat(prev-token embedding, previous
context), with the output layer reading concat(decoder state, context).
Attention scores are e_k = w . relu(Ws s + Wh h_k + b), softmax-normalized.

GRU cell (one variant, pinned for oracle tests):
    r  = sigmoid(W_r [h, x] + b_r)
    z  = sigmoid(W_z [h, x] + b_z)
    c  = tanh(W_c [r*h, x] + b_c)
    h' = (1 - z) * h + z * c
The [h, x] weights are stored split by factor (hidden part `Wh*`, input part
`Wx*`) so whole-sequence input projections are one matmul per gate; the math
is identical to the concatenated form.

Multi-task sharing: SHARED_AED gives every branch its own output layer on the
shared decoder; SHARED_AE gives every branch its own decoder stack and output
layer on the shared encoder/attention. Branch 0 is the main task and keeps
the unprefixed tensor names, so stripping branches never touches it.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD, SOS, EOS = 0, 1, 2
NUM_SPECIALS = 3

CHECKPOINT_MAGIC = b"NBCK"
CHECKPOINT_VERSION = 1


class ModelError(Exception):
    pass


class Topology(str, Enum):
    SINGLE = "single"
    SHARED_AED = "shared_aed"
    SHARED_AE = "shared_ae"


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    vocab_size: int
    encoder_layers: int = 1
    encoder_hidden: int = 32  # per direction
    decoder_layers: int = 1
    decoder_hidden: int = 64
    embed_dim: int = 32
    attention_dim: int = 32
    num_task_branches: int = 1
    sharing_topology: Topology = Topology.SINGLE
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("feature_dim", "vocab_size", "encoder_layers", "encoder_hidden",
                     "decoder_layers", "decoder_hidden", "embed_dim", "attention_dim",
                     "num_task_branches"):
            if getattr(self, name) < 1:
                raise ModelError(f"ModelConfig.{name} must be positive")
        if self.vocab_size <= NUM_SPECIALS:
            raise ModelError("vocab_size must leave room for at least one content token")
        if (self.num_task_branches == 1) != (self.sharing_topology == Topology.SINGLE):
            raise ModelError("num_task_branches must be 1 exactly when topology is SINGLE")

    @property
    def encoder_out_dim(self) -> int:
        return 2 * self.encoder_hidden


@dataclass
class Utterance:
    """A feature sequence with an optional reference token sequence.

    References end in EOS; features are stored at float64 and cast to the
    active precision when they enter the model.
    """
    features: np.ndarray  # (K, D)
    reference: tuple | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ModelError(f"utterance features must be (K>=1, D), got {self.features.shape}")
        if self.reference is not None:
            self.reference = tuple(int(t) for t in self.reference)
            if not self.reference or self.reference[-1] != EOS:
                raise ModelError("reference must be non-empty and end in EOS")


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

_GATES = ("r", "z", "c")


class ModelParams:
    """Named trainable tensors plus the config describing their layout."""

    def __init__(self, config: ModelConfig, tensors: dict):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list:
        return sorted(self.tensors)

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict:
        return {k: t.grad for k, t in self.tensors.items() if t.grad is not None}

    def clone(self) -> "ModelParams":
        return ModelParams(self.config, {k: _param(t.data.copy()) for k, t in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config,
                           {k: _param(t.data.astype(dtype)) for k, t in self.tensors.items()})

    def decoder_prefix(self, branch: int) -> str:
        cfg = self.config
        if branch >= cfg.num_task_branches or branch < 0:
            raise ModelError(f"branch {branch} out of range (have {cfg.num_task_branches})")
        if branch == 0 or cfg.sharing_topology != Topology.SHARED_AE:
            return "dec"
        return f"task{branch}.dec"

    def out_prefix(self, branch: int) -> str:
        cfg = self.config
        if branch >= cfg.num_task_branches or branch < 0:
            raise ModelError(f"branch {branch} out of range (have {cfg.num_task_branches})")
        return "out" if branch == 0 else f"task{branch}.out"

    def gru_tensors(self, prefix: str, layer: int) -> tuple:
        base = f"{prefix}.{layer}"
        out = []
        for gate in _GATES:
            out += [self.tensors[f"{base}.{gate}.Wh"], self.tensors[f"{base}.{gate}.Wx"],
                    self.tensors[f"{base}.{gate}.b"]]
        return tuple(out)


def _param(data) -> Tensor:
    t = Tensor(data, requires_grad=True, dtype=np.asarray(data).dtype)
    return t


def _init_gru(tensors: dict, prefix: str, layer: int, hidden: int, input_dim: int, rng,
              scale: float) -> None:
    base = f"{prefix}.{layer}"
    for gate in _GATES:
        tensors[f"{base}.{gate}.Wh"] = _param(_uniform(rng, (hidden, hidden), scale))
        tensors[f"{base}.{gate}.Wx"] = _param(_uniform(rng, (hidden, input_dim), scale))
        tensors[f"{base}.{gate}.b"] = _param(np.zeros(hidden, dtype=ad.default_dtype()))


def _uniform(rng, shape, scale=0.08):
    return rng.uniform(-scale, scale, size=shape).astype(ad.default_dtype())


def init_params(config: ModelConfig, seed: int, init_scale: float = 0.08) -> ModelParams:
    """Fresh SINGLE-topology parameters, uniform(-init_scale, init_scale), seeded.

    Training uses the 0.08 default; gradient-check fixtures pass a larger
    scale (0.5) so true gradients sit well above the float64 finite-difference
    noise floor.
    """
    if config.sharing_topology != Topology.SINGLE:
        raise ModelError("init_params creates SINGLE-topology models; use add_branches after")
    rng = np.random.default_rng(seed)
    t: dict = {}
    in_dim = config.feature_dim
    for layer in range(config.encoder_layers):
        for direction in ("f", "b"):
            _init_gru(t, f"enc.{direction}", layer, config.encoder_hidden, in_dim, rng,
                      init_scale)
        in_dim = config.encoder_out_dim
    he = config.encoder_out_dim
    t["att.Ws"] = _param(_uniform(rng, (config.attention_dim, config.decoder_hidden), init_scale))
    t["att.Wh"] = _param(_uniform(rng, (config.attention_dim, he), init_scale))
    t["att.b"] = _param(np.zeros(config.attention_dim, dtype=ad.default_dtype()))
    t["att.w"] = _param(_uniform(rng, (config.attention_dim,), init_scale))
    t["emb.E"] = _param(_uniform(rng, (config.vocab_size, config.embed_dim), init_scale))
    dec_in = config.embed_dim + he
    for layer in range(config.decoder_layers):
        _init_gru(t, "dec", layer, config.decoder_hidden, dec_in, rng, init_scale)
        dec_in = config.decoder_hidden
    t["out.W"] = _param(_uniform(rng, (config.vocab_size, config.decoder_hidden + he), init_scale))
    t["out.b"] = _param(np.zeros(config.vocab_size, dtype=ad.default_dtype()))
    return ModelParams(config, t)


def add_branches(params: ModelParams, n: int, topology: Topology) -> ModelParams:
    """Grow a SINGLE model to n task branches; new branches copy the main task.

    Shared tensors keep their identity (the returned params reference the same
    Tensor objects), so gradients from any branch flow into one storage.
    """
    if params.config.sharing_topology != Topology.SINGLE:
        raise ModelError("add_branches requires a SINGLE-topology model")
    if n < 2:
        raise ModelError(f"add_branches needs n >= 2, got {n}")
    topology = Topology(topology)
    if topology == Topology.SINGLE:
        raise ModelError("add_branches target topology must be SHARED_AED or SHARED_AE")
    tensors = dict(params.tensors)
    for b in range(1, n):
        for name, t in params.tensors.items():
            copy_decoder = topology == Topology.SHARED_AE and name.startswith("dec.")
            if copy_decoder or name.startswith("out."):
                tensors[f"task{b}.{name}"] = _param(t.data.copy())
    cfg = dataclasses.replace(params.config, num_task_branches=n, sharing_topology=topology)
    return ModelParams(cfg, tensors)


def strip_branches(params: ModelParams) -> ModelParams:
    """Keep the main task branch only, returning a SINGLE-topology model."""
    tensors = {k: t for k, t in params.tensors.items() if not k.startswith("task")}
    cfg = dataclasses.replace(params.config, num_task_branches=1,
                              sharing_topology=Topology.SINGLE)
    return ModelParams(cfg, tensors)


# --------------------------------------------------------------------------
# fused tape ops (GRU sequence scan, GRU step, attention scores)
# --------------------------------------------------------------------------


def gru_sequence(x_seq: Tensor, gru: tuple, reverse: bool = False) -> Tensor:
    """Run a GRU over all rows of x_seq from zero state; returns (K, H) states.

    Output row k is aligned to input frame k in both scan directions. One tape
    entry covers the whole scan; backward is the standard reverse loop.
    """
    whr, wxr, br, whz, wxz, bz, whc, wxc, bc = gru
    x = x_seq.data
    k_len = x.shape[0]
    hidden = whr.data.shape[0]
    xr = x @ wxr.data.T + br.data
    xz = x @ wxz.data.T + bz.data
    xc = x @ wxc.data.T + bc.data
    order = range(k_len - 1, -1, -1) if reverse else range(k_len)
    out = np.empty((k_len, hidden), dtype=x.dtype)
    rs = np.empty_like(out)
    zs = np.empty_like(out)
    cs = np.empty_like(out)
    hprev = np.empty_like(out)
    h = np.zeros(hidden, dtype=x.dtype)
    tr_whr, tr_whz, tr_whc = whr.data.T, whz.data.T, whc.data.T
    for k in order:
        hprev[k] = h
        r = _sigm(h @ tr_whr + xr[k])
        z = _sigm(h @ tr_whz + xz[k])
        c = np.tanh((r * h) @ tr_whc + xc[k])
        h = (1.0 - z) * h + z * c
        rs[k], zs[k], cs[k] = r, z, c
        out[k] = h

    result = ad._wrap(out)

    def bwd(g):
        dar = np.empty_like(out)
        daz = np.empty_like(out)
        dac = np.empty_like(out)
        dh_next = np.zeros(hidden, dtype=x.dtype)
        for k in reversed(order):
            dh = g[k] + dh_next
            hp, r, z, c = hprev[k], rs[k], zs[k], cs[k]
            dz = dh * (c - hp)
            dc = dh * z
            dhp = dh * (1.0 - z)
            a_c = dc * (1.0 - c * c)
            drh = a_c @ whc.data
            dr = drh * hp
            dhp += drh * r
            a_z = dz * z * (1.0 - z)
            dhp += a_z @ whz.data
            a_r = dr * r * (1.0 - r)
            dhp += a_r @ whr.data
            dar[k], daz[k], dac[k] = a_r, a_z, a_c
            dh_next = dhp
        rh = rs * hprev
        dx = dar @ wxr.data + daz @ wxz.data + dac @ wxc.data
        return (dx,
                dar.T @ hprev, dar.T @ x, dar.sum(0),
                daz.T @ hprev, daz.T @ x, daz.sum(0),
                dac.T @ rh, dac.T @ x, dac.sum(0))

    return ad.record("gru_sequence", result, (x_seq, whr, wxr, br, whz, wxz, bz, whc, wxc, bc), bwd)


def gru_cell(h: Tensor, x: Tensor, gru: tuple) -> Tensor:
    """Single GRU step on 1-D state/input vectors (training-path decoder)."""
    whr, wxr, br, whz, wxz, bz, whc, wxc, bc = gru
    hd, xd = h.data, x.data
    r = _sigm(hd @ whr.data.T + xd @ wxr.data.T + br.data)
    z = _sigm(hd @ whz.data.T + xd @ wxz.data.T + bz.data)
    rh = r * hd
    c = np.tanh(rh @ whc.data.T + xd @ wxc.data.T + bc.data)
    out = ad._wrap((1.0 - z) * hd + z * c)

    def bwd(g):
        dz = g * (c - hd)
        dc = g * z
        dh = g * (1.0 - z)
        a_c = dc * (1.0 - c * c)
        drh = a_c @ whc.data
        dr = drh * hd
        dh = dh + drh * r
        a_z = dz * z * (1.0 - z)
        dh = dh + a_z @ whz.data
        a_r = dr * r * (1.0 - r)
        dh = dh + a_r @ whr.data
        dx = a_r @ wxr.data + a_z @ wxz.data + a_c @ wxc.data
        return (dh, dx,
                np.outer(a_r, hd), np.outer(a_r, xd), a_r,
                np.outer(a_z, hd), np.outer(a_z, xd), a_z,
                np.outer(a_c, rh), np.outer(a_c, xd), a_c)

    return ad.record("gru_cell", out, (h, x, whr, wxr, br, whz, wxz, bz, whc, wxc, bc), bwd)


def attention_scores(s: Tensor, enc_proj: Tensor, ws: Tensor, b: Tensor, w: Tensor) -> Tensor:
    """Normalized attention weights for one decoder state over K frames.

    enc_proj is the precomputed (K, A) projection of the encoder outputs by
    att.Wh; scores are w . relu(Ws s + enc_proj_k + b), softmaxed over k.
    """
    sp = ws.data @ s.data
    pre = enc_proj.data + sp + b.data
    act = np.maximum(pre, 0.0)
    e = act @ w.data
    e = e - e.max()
    ex = np.exp(e)
    alpha = ex / ex.sum()
    out = ad._wrap(alpha)

    def bwd(g):
        de = (g - float(g @ alpha)) * alpha
        dact = de[:, None] * w.data
        dw = act.T @ de
        dpre = dact * (pre > 0)
        dsp = dpre.sum(0)
        return (ws.data.T @ dsp, dpre, np.outer(dsp, s.data), dsp, dw)

    return ad.record("attention_scores", out, (s, enc_proj, ws, b, w), bwd)


def _sigm(a):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-a))


# --------------------------------------------------------------------------
# forward passes
# --------------------------------------------------------------------------


def encode(params: ModelParams, features, dropout_rng=None) -> Tensor:
    """Bidirectional encoder: (K, D) features -> (K, 2*encoder_hidden) states."""
    cfg = params.config
    feats = np.asarray(features)
    if feats.ndim != 2 or feats.shape[1] != cfg.feature_dim:
        raise ModelError(f"encode: features must be (K, {cfg.feature_dim}), got {feats.shape}")
    x = Tensor(feats.astype(ad.default_dtype(), copy=False))
    for layer in range(cfg.encoder_layers):
        fwd = gru_sequence(x, params.gru_tensors("enc.f", layer))
        bwd_states = gru_sequence(x, params.gru_tensors("enc.b", layer), reverse=True)
        x = ad.concat([fwd, bwd_states], axis=1)
        if cfg.dropout > 0.0 and dropout_rng is not None:
            x = _dropout(x, cfg.dropout, dropout_rng)
    return x


def _dropout(t: Tensor, rate: float, rng) -> Tensor:
    mask = (rng.random(t.shape) >= rate).astype(t.data.dtype) / (1.0 - rate)
    return ad.mul(t, Tensor(mask, dtype=t.data.dtype))


def encoder_projection(params: ModelParams, enc_out: Tensor) -> Tensor:
    """Attention key projection of encoder outputs, shared across decode steps."""
    return ad.matmul(enc_out, params["att.Wh"], transpose_b=True)


def attend(params: ModelParams, decoder_state: Tensor, encoder_outputs: Tensor):
    """Context vector and attention weights for one decoder state."""
    proj = encoder_projection(params, encoder_outputs)
    alpha = attention_scores(decoder_state, proj, params["att.Ws"], params["att.b"], params["att.w"])
    context = ad.matmul(alpha, encoder_outputs)
    return context, alpha


@dataclass
class EncoderCache:
    """Inference-side encoder state: raw outputs plus the attention projection."""
    enc_out: np.ndarray   # (K, He)
    enc_proj: np.ndarray  # (K, A)


@dataclass
class DecoderState:
    """Per-beam decoder recurrent state; rows are beam entries."""
    hidden: list           # per layer: (B, Hd)
    context: np.ndarray    # (B, He)


def build_encoder_cache(params: ModelParams, features) -> EncoderCache:
    with ad.no_grad():
        enc = encode(params, features).data
    return EncoderCache(enc_out=enc, enc_proj=enc @ params["att.Wh"].data.T)


def init_decoder_state(params: ModelParams, batch: int = 1) -> DecoderState:
    cfg = params.config
    dt = params["att.Ws"].data.dtype
    return DecoderState(
        hidden=[np.zeros((batch, cfg.decoder_hidden), dtype=dt) for _ in range(cfg.decoder_layers)],
        context=np.zeros((batch, cfg.encoder_out_dim), dtype=dt),
    )


def _gru_cell_np(h, x, gru):
    whr, wxr, br, whz, wxz, bz, whc, wxc, bc = (t.data for t in gru)
    r = _sigm(h @ whr.T + x @ wxr.T + br)
    z = _sigm(h @ whz.T + x @ wxz.T + bz)
    c = np.tanh((r * h) @ whc.T + x @ wxc.T + bc)
    return (1.0 - z) * h + z * c


def decode_step_batch(params: ModelParams, branch: int, prev_tokens, state: DecoderState,
                      cache: EncoderCache):
    """One inference decode step for a batch of beams; pure numpy, not taped."""
    cfg = params.config
    dec_prefix = params.decoder_prefix(branch)
    out_prefix = params.out_prefix(branch)
    emb = params["emb.E"].data[np.asarray(prev_tokens, dtype=np.int64)]
    x = np.concatenate([emb, state.context], axis=1)
    hidden = []
    for layer in range(cfg.decoder_layers):
        h = _gru_cell_np(state.hidden[layer], x, params.gru_tensors(dec_prefix, layer))
        hidden.append(h)
        x = h
    s = hidden[-1]
    sp = s @ params["att.Ws"].data.T
    pre = sp[:, None, :] + cache.enc_proj[None, :, :] + params["att.b"].data
    e = np.maximum(pre, 0.0) @ params["att.w"].data
    e = e - e.max(axis=1, keepdims=True)
    ex = np.exp(e)
    alpha = ex / ex.sum(axis=1, keepdims=True)
    context = alpha @ cache.enc_out
    logits = np.concatenate([s, context], axis=1) @ params[f"{out_prefix}.W"].data.T \
        + params[f"{out_prefix}.b"].data
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return log_probs, DecoderState(hidden=hidden, context=context)


def decode_step(params: ModelParams, branch: int, prev_token: int, state: DecoderState,
                encoder_outputs):
    """Log-distribution over the vocabulary for one step (inference path).

    `encoder_outputs` may be an EncoderCache or a raw (K, He) array/Tensor.
    Returns ((V,) log-probs, new state). The distribution is the raw model
    softmax; token filtering is the search's job.
    """
    if isinstance(encoder_outputs, EncoderCache):
        cache = encoder_outputs
    else:
        enc = encoder_outputs.data if isinstance(encoder_outputs, Tensor) else np.asarray(encoder_outputs)
        cache = EncoderCache(enc_out=enc, enc_proj=enc @ params["att.Wh"].data.T)
    log_probs, new_state = decode_step_batch(params, branch, [int(prev_token)], state, cache)
    return log_probs[0], new_state


def sequence_logits(params: ModelParams, branch: int, enc_out: Tensor, enc_proj: Tensor,
                    targets, sampling_prob: float = 0.0, rng=None,
                    dropout_rng=None) -> Tensor:
    """Teacher-forced (optionally scheduled-sampled) decoder unroll on the tape.

    Predicts targets[0..M-1] from inputs [SOS, targets[0..M-2]]; with
    sampling_prob > 0 the previous input token is drawn from the model's own
    previous-step distribution with that probability. Returns (M, V) logits.
    Decoder-output dropout applies when the config rate is set and a
    dropout_rng is passed (off in evaluation and by default).
    """
    cfg = params.config
    targets = [int(t) for t in targets]
    if not targets:
        raise ModelError("sequence_logits: empty target sequence")
    if sampling_prob > 0.0 and rng is None:
        raise ModelError("sequence_logits: sampling_prob > 0 requires an rng")
    dec_prefix = params.decoder_prefix(branch)
    out_w = params[f"{params.out_prefix(branch)}.W"]
    out_b = params[f"{params.out_prefix(branch)}.b"]
    dec_grus = [params.gru_tensors(dec_prefix, layer) for layer in range(cfg.decoder_layers)]
    dt = out_w.data.dtype
    hidden = [Tensor(np.zeros(cfg.decoder_hidden, dtype=dt)) for _ in range(cfg.decoder_layers)]
    context = Tensor(np.zeros(cfg.encoder_out_dim, dtype=dt))
    ws, att_b, att_w = params["att.Ws"], params["att.b"], params["att.w"]
    emb_table = params["emb.E"]
    drop = cfg.dropout if (cfg.dropout > 0.0 and dropout_rng is not None) else 0.0

    rows = []
    step_logits = []
    prev_token = SOS
    for i in range(len(targets)):
        if i > 0:
            if sampling_prob > 0.0 and rng.random() < sampling_prob:
                probs = np.exp(_log_softmax_np(step_logits[i - 1].data))
                p64 = probs.astype(np.float64)
                prev_token = int(rng.choice(cfg.vocab_size, p=p64 / p64.sum()))
            else:
                prev_token = targets[i - 1]
        emb = ad.take(emb_table, prev_token)
        x = ad.concat([emb, context])
        for layer in range(cfg.decoder_layers):
            hidden[layer] = gru_cell(hidden[layer], x, dec_grus[layer])
            x = hidden[layer]
        top = _dropout(hidden[-1], drop, dropout_rng) if drop > 0.0 else hidden[-1]
        alpha = attention_scores(top, enc_proj, ws, att_b, att_w)
        context = ad.matmul(alpha, enc_out)
        row = ad.concat([top, context])
        rows.append(row)
        if sampling_prob > 0.0:
            step_logits.append(ad.add(ad.matmul(row, out_w, transpose_b=True), out_b))
    if sampling_prob > 0.0:
        return ad.stack(step_logits)
    stacked = ad.stack(rows)
    return ad.add(ad.matmul(stacked, out_w, transpose_b=True), out_b)


def _log_softmax_np(z):
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def greedy_decode(params: ModelParams, features, max_len: int, branch: int = 0) -> tuple:
    """Argmax decoding used for evaluation; returns tokens ending in EOS when found."""
    cache = build_encoder_cache(params, features)
    state = init_decoder_state(params)
    tokens = []
    prev = SOS
    for _ in range(max_len):
        log_probs, state = decode_step_batch(params, branch, [prev], state, cache)
        lp = log_probs[0].copy()
        lp[PAD] = -np.inf
        lp[SOS] = -np.inf
        prev = int(lp.argmax())
        tokens.append(prev)
        if prev == EOS:
            break
    return tuple(tokens)


# --------------------------------------------------------------------------
# checkpoint container (binary format v1; layout documented in the README)
# --------------------------------------------------------------------------

_DTYPE_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def save_checkpoint(params: ModelParams, path, rng_state=None) -> None:
    """Write a versioned checkpoint: config, named tensors, optional RNG state."""
    cfg = dataclasses.asdict(params.config)
    cfg["sharing_topology"] = params.config.sharing_topology.value
    cfg_bytes = json.dumps(cfg, sort_keys=True).encode()
    rng_bytes = json.dumps(rng_state).encode() if rng_state is not None else b""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(rng_bytes)))
        fh.write(rng_bytes)
        names = params.names()
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            data = params.tensors[name].data
            code = data.dtype.itemsize
            raw = data.astype(_DTYPE_CODES[code], copy=False)
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", code, data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(raw.tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (ModelParams, rng_state or None)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def unpack(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, blob, off)
        off += struct.calcsize(fmt)
        return vals

    magic = blob[:4]
    off = 4
    if magic != CHECKPOINT_MAGIC:
        raise ModelError(f"{path}: not a checkpoint file (bad magic {magic!r})")
    (version,) = unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = unpack("<I")
    cfg_dict = json.loads(blob[off:off + cfg_len].decode())
    off += cfg_len
    cfg_dict["sharing_topology"] = Topology(cfg_dict["sharing_topology"])
    config = ModelConfig(**cfg_dict)
    (rng_len,) = unpack("<I")
    rng_state = json.loads(blob[off:off + rng_len].decode()) if rng_len else None
    off += rng_len
    (n_tensors,) = unpack("<I")
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = unpack("<H")
        name = blob[off:off + name_len].decode()
        off += name_len
        code, ndim = unpack("<BB")
        shape = unpack(f"<{ndim}I")
        dtype = _DTYPE_CODES[code]
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(blob, dtype=dtype, count=count, offset=off).reshape(shape)
        off += count * dtype.itemsize
        tensors[name] = _param(data.astype(dtype.newbyteorder("="), copy=True))
    return ModelParams(config, tensors), rng_state
