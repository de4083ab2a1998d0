import dataclasses

import numpy as np
import pytest

from nbadapt import corpus
from nbadapt.corpus import (AugmentConfig, CorpusError, Dataset, Domain, TaskSpec,
                            augment, generate, load, resample_speed, save)
from nbadapt.model import EOS, NUM_SPECIALS


def test_noiseless_single_frame_recovers_prototypes():
    spec = TaskSpec(noise_sigma=0.0, frames_per_token=(1, 1), speaker_jitter_sigma=0.0,
                    seq_len_range=(2, 5), seed=3)
    ds = generate(spec, Domain.SEED, 20)
    protos = spec.prototypes(Domain.SEED)
    errors = 0
    for utt in ds:
        tokens = utt.reference[:-1]
        assert utt.features.shape[0] == len(tokens)
        for frame, tok in zip(utt.features, tokens):
            np.testing.assert_array_equal(frame, protos[tok])
            nearest = min(spec.content_tokens,
                          key=lambda v: float(np.sum((frame - protos[v]) ** 2)))
            errors += nearest != tok
    assert errors == 0


def test_identity_shift_matches_seed_distribution():
    spec = TaskSpec(shift_angle_deg=0.0, shift_perturbation=0.0, seed=4)
    seed_ds = generate(spec, Domain.SEED, 10)
    shifted_ds = generate(spec, Domain.SHIFTED, 10)
    # same per-utterance streams and identical prototypes: same features except
    # for the domain code in the stream key
    np.testing.assert_array_equal(spec.prototypes(Domain.SEED),
                                  spec.prototypes(Domain.SHIFTED))
    assert len(seed_ds) == len(shifted_ds)


def test_generation_reproducible_bitwise():
    spec = TaskSpec(seed=5)
    a = generate(spec, Domain.SEED, 12, n_speakers=3)
    b = generate(spec, Domain.SEED, 12, n_speakers=3)
    assert a.ids == b.ids and a.speakers == b.speakers
    for ua, ub in zip(a, b):
        np.testing.assert_array_equal(ua.features, ub.features)
        assert ua.reference == ub.reference


def test_per_utterance_streams_independent_of_count():
    spec = TaskSpec(seed=6)
    small = generate(spec, Domain.SEED, 4, n_speakers=2)
    large = generate(spec, Domain.SEED, 9, n_speakers=2)
    for i in range(4):
        np.testing.assert_array_equal(small.utterances[i].features,
                                      large.utterances[i].features)
        assert small.utterances[i].reference == large.utterances[i].reference


def test_splits_disjoint_by_stream():
    spec = TaskSpec(seed=7)
    a = generate(spec, Domain.SEED, 5, stream=0)
    b = generate(spec, Domain.SEED, 5, stream=1)
    assert any(ua.reference != ub.reference
               or not np.array_equal(ua.features, ub.features)
               for ua, ub in zip(a, b))


def test_tokens_valid_and_no_adjacent_repeats():
    spec = TaskSpec(seed=8)
    ds = generate(spec, Domain.SEED, 50)
    for utt in ds:
        ref = utt.reference
        assert ref[-1] == EOS
        content = ref[:-1]
        assert all(NUM_SPECIALS <= t < spec.vocab_size for t in content)
        assert all(a != b for a, b in zip(content, content[1:]))
        lmin, lmax = spec.seq_len_range
        assert lmin <= len(content) <= lmax


def test_prototype_separation_guarantee():
    for sigma in (0.1, 0.3, 0.8):
        spec = TaskSpec(noise_sigma=sigma, seed=9)
        protos = spec.prototypes(Domain.SEED)[NUM_SPECIALS:]
        dists = []
        for i in range(len(protos)):
            for j in range(i + 1, len(protos)):
                dists.append(float(np.linalg.norm(protos[i] - protos[j])))
        assert min(dists) > 4 * sigma


def test_speaker_round_robin_and_jitter():
    spec = TaskSpec(seed=10, speaker_jitter_sigma=0.5)
    ds = generate(spec, Domain.SEED, 6, n_speakers=3)
    assert ds.speakers == ["spk0000", "spk0001", "spk0002"] * 2
    no_jitter = generate(dataclasses.replace(spec, speaker_jitter_sigma=0.0),
                         Domain.SEED, 6, n_speakers=3)
    diffs = ds.utterances[0].features - no_jitter.utterances[0].features
    # jitter is one constant offset per speaker
    np.testing.assert_allclose(diffs, np.broadcast_to(diffs[0], diffs.shape),
                               rtol=0, atol=1e-12)
    assert np.abs(diffs[0]).max() > 0


def test_taskspec_validation():
    with pytest.raises(CorpusError):
        TaskSpec(frames_per_token=(0, 2))
    with pytest.raises(CorpusError):
        TaskSpec(frames_per_token=(3, 2))
    with pytest.raises(CorpusError):
        TaskSpec(noise_sigma=-1.0)
    with pytest.raises(CorpusError):
        TaskSpec(vocab_size=3)
    with pytest.raises(CorpusError):
        generate(TaskSpec(), Domain.SEED, 0)


# --- augmentation ---------------------------------------------------------------


def test_augment_disabled_is_identity():
    spec = TaskSpec(seed=11)
    utt = generate(spec, Domain.SEED, 1).utterances[0]
    out = augment(utt, AugmentConfig())
    np.testing.assert_array_equal(out.features, utt.features)
    assert out.reference == utt.reference


def test_amplitude_one_is_identity():
    spec = TaskSpec(seed=11)
    utt = generate(spec, Domain.SEED, 1).utterances[0]
    out = augment(utt, AugmentConfig(amplitude_range=(1.0, 1.0)),
                  rng=np.random.default_rng(0))
    np.testing.assert_array_equal(out.features, utt.features)


def test_speed_resampling_length_rule():
    feats = np.random.default_rng(0).normal(size=(100, 4))
    assert resample_speed(feats, 1.1).shape[0] == 91  # round(100 / 1.1)
    assert resample_speed(feats, 0.9).shape[0] == 111
    np.testing.assert_array_equal(resample_speed(feats, 1.0), feats)
    with pytest.raises(CorpusError):
        resample_speed(feats, 0.0)


def test_augment_never_touches_tokens():
    spec = TaskSpec(seed=12)
    utt = generate(spec, Domain.SEED, 1).utterances[0]
    cfg = AugmentConfig(amplitude_range=(0.8, 1.25), speed_range=(0.9, 1.1),
                        noise_sigma=0.1)
    out = augment(utt, cfg, rng=np.random.default_rng(3))
    assert out.reference == utt.reference
    assert out.features.shape[1] == utt.features.shape[1]


def test_augment_requires_rng_when_enabled():
    utt = generate(TaskSpec(seed=12), Domain.SEED, 1).utterances[0]
    with pytest.raises(CorpusError):
        augment(utt, AugmentConfig(noise_sigma=0.1))


# --- dataset files ----------------------------------------------------------------


def test_save_load_roundtrip_bitwise(tmp_path):
    spec = TaskSpec(seed=13)
    ds = generate(spec, Domain.SHIFTED, 8, n_speakers=3)
    path = tmp_path / "data.txt"
    nbytes = save(ds, path)
    assert nbytes == path.stat().st_size
    back = load(path)
    assert back.ids == ds.ids and back.speakers == ds.speakers
    assert back.domain == ds.domain
    for a, b in zip(ds, back):
        np.testing.assert_array_equal(a.features, b.features)
        assert a.reference == b.reference


def test_save_empty_dataset_header_only(tmp_path):
    ds = Dataset(ids=[], speakers=[], utterances=[], domain=Domain.SEED)
    path = tmp_path / "empty.txt"
    save(ds, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 1
    back = load(path)
    assert len(back) == 0


def test_load_truncated_file_names_line(tmp_path):
    spec = TaskSpec(seed=14)
    ds = generate(spec, Domain.SEED, 3)
    path = tmp_path / "trunc.txt"
    save(ds, path)
    lines = path.read_text().splitlines()
    (tmp_path / "cut.txt").write_text("\n".join(lines[:5]) + "\n")
    with pytest.raises(CorpusError, match=r"cut\.txt:\d+"):
        load(tmp_path / "cut.txt")


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "junk.txt"
    path.write_text("hello world\n")
    with pytest.raises(CorpusError, match=":1"):
        load(path)
    path2 = tmp_path / "badfloat.txt"
    ds = generate(TaskSpec(seed=15), Domain.SEED, 1)
    save(ds, path2)
    lines = path2.read_text().splitlines()
    lines[2] = lines[2].replace(lines[2].split()[0], "notafloat", 1)
    path2.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorpusError, match="float"):
        load(path2)
