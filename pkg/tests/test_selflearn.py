import numpy as np
import pytest

from nbadapt import autodiff as ad
from nbadapt import corpus
from nbadapt import model as M
from nbadapt.decoder import read_nbest_file
from nbadapt.model import Topology, Utterance
from nbadapt.selflearn import (Method, SelfLearnConfig, SelfLearnError, cache_decodes,
                               run_self_learning)
from nbadapt.trainer import TrainConfig, validation_cer


@pytest.fixture(autouse=True)
def float32_mode():
    # self-learning runs at experiment precision
    with ad.precision("float32"):
        ad.clear_tape()
        yield
        ad.clear_tape()


SPEC = corpus.TaskSpec(vocab_size=7, feature_dim=6, frames_per_token=(1, 2),
                       seq_len_range=(2, 4), noise_sigma=0.15, shift_angle_deg=45.0,
                       shift_perturbation=0.2, speaker_jitter_sigma=0.05, seed=21)
MODEL = M.ModelConfig(feature_dim=6, vocab_size=7, encoder_hidden=10, decoder_hidden=12,
                      embed_dim=6, attention_dim=8)


@pytest.fixture(scope="module")
def tiny_world():
    """A quickly trained seed model plus small shifted adaptation/validation sets."""
    from nbadapt.trainer import TrainMode, train_supervised
    with ad.precision("float32"):
        train = list(corpus.generate(SPEC, "seed", 150, n_speakers=5, stream=0))
        val = list(corpus.generate(SPEC, "seed", 40, n_speakers=5, stream=1))
        adapt = list(corpus.generate(SPEC, "shifted", 60, n_speakers=5, stream=2))
        sval = list(corpus.generate(SPEC, "shifted", 30, n_speakers=5, stream=3))
        params = M.init_params(MODEL, seed=3)
        cfg = TrainConfig(learning_rate=3e-3, batch_size=8, max_epochs=8,
                          mode=TrainMode.SUPERVISED)
        seed_model, _ = train_supervised(params, train, val, cfg, seed=3,
                                         max_decode_len=10, target_cer=0.02, patience=8)
    return seed_model, adapt, sval


def sl_config(method=Method.MLL, **kw):
    base = dict(method=method, n_best=2, nbest_epochs=1, onebest_epochs=1,
                max_outer_iterations=2, beam_width=4, max_decode_len=10,
                train=TrainConfig(learning_rate=1e-3, batch_size=4), seed=0)
    base.update(kw)
    return SelfLearnConfig(**base)


def test_one_best_forces_n1():
    cfg = sl_config(method=Method.ONE_BEST, n_best=4)
    assert cfg.n_best == 1


def test_beam_width_at_least_n_best():
    cfg = sl_config(n_best=4, beam_width=2)
    assert cfg.beam_width >= 4


def test_empty_sets_rejected(tiny_world):
    seed_model, adapt, sval = tiny_world
    with pytest.raises(SelfLearnError):
        run_self_learning(seed_model, [], sval, sl_config())
    with pytest.raises(SelfLearnError):
        run_self_learning(seed_model, adapt, [], sl_config())


def test_run_reports_and_returns_best(tiny_world):
    seed_model, adapt, sval = tiny_world
    final, report = run_self_learning(seed_model, adapt, sval, sl_config(seed=1))
    assert final.config.sharing_topology == Topology.SINGLE
    assert report.iterations[0].iteration == 0
    assert report.best_cer == min(it.validation_cer for it in report.iterations)
    # the returned model is the best checkpoint, stripped: its CER reproduces
    assert validation_cer(final, sval, max_len=10) == pytest.approx(report.best_cer)
    assert report.stopping_reason


def test_mtl_run_creates_and_strips_branches(tiny_world):
    seed_model, adapt, sval = tiny_world
    cfg = sl_config(method=Method.MTL_SHARED_AE, seed=2)
    final, report = run_self_learning(seed_model, adapt, sval, cfg)
    assert final.config.num_task_branches == 1
    assert final.param_count() == seed_model.param_count()
    assert not any(name.startswith("task") for name in final.names())


def test_label_hygiene_references_never_train(tiny_world):
    # corrupting every adaptation reference must not change the trajectory
    seed_model, adapt, sval = tiny_world
    corrupted = [Utterance(features=u.features,
                           reference=(3, 4, 3, M.EOS)) for u in adapt]
    cfg = sl_config(method=Method.MLL, seed=7)
    final_a, rep_a = run_self_learning(seed_model, adapt, sval, cfg)
    final_b, rep_b = run_self_learning(seed_model, corrupted, sval, cfg)
    assert [it.validation_cer for it in rep_a.iterations] == \
           [it.validation_cer for it in rep_b.iterations]
    assert [it.nbest_loss for it in rep_a.iterations] == \
           [it.nbest_loss for it in rep_b.iterations]
    for name in final_a.names():
        np.testing.assert_array_equal(final_a[name].data, final_b[name].data)
    # only the reporting fields may differ
    assert rep_a.iterations[1].adapt_cer_1best != rep_b.iterations[1].adapt_cer_1best


def test_unlabeled_adaptation_is_supported(tiny_world):
    seed_model, adapt, sval = tiny_world
    unlabeled = [Utterance(features=u.features) for u in adapt]
    final, report = run_self_learning(seed_model, unlabeled, sval, sl_config(seed=4))
    assert report.iterations[1].adapt_cer_1best is None
    assert report.iterations[1].adapt_cer_oracle is None


def test_determinism(tiny_world):
    seed_model, adapt, sval = tiny_world
    cfg = sl_config(method=Method.MTL_SHARED_AED, seed=9)
    final_a, rep_a = run_self_learning(seed_model, adapt, sval, cfg)
    final_b, rep_b = run_self_learning(seed_model, adapt, sval, cfg)
    assert [it.validation_cer for it in rep_a.iterations] == \
           [it.validation_cer for it in rep_b.iterations]
    for name in final_a.names():
        np.testing.assert_array_equal(final_a[name].data, final_b[name].data)


def test_cache_decodes_roundtrip(tiny_world, tmp_path):
    seed_model, adapt, sval = tiny_world
    path = tmp_path / "cache.nbest"
    count = cache_decodes(seed_model, adapt[:10], path, beam_width=4, n_best=2,
                          max_len=10)
    assert count == sum(
        len(nb.hypotheses) for nb in read_nbest_file(path).values())
    back = read_nbest_file(path)
    assert len(back) == 10
    assert count <= 20  # up to N per utterance


def test_cache_decodes_empty_list(tiny_world, tmp_path):
    seed_model, _, _ = tiny_world
    assert cache_decodes(seed_model, [], tmp_path / "none.nbest") == 0


def test_cache_decodes_bad_path(tiny_world, tmp_path):
    seed_model, adapt, _ = tiny_world
    with pytest.raises(SelfLearnError, match="cache"):
        cache_decodes(seed_model, adapt[:1], tmp_path / "missing_dir" / "x.nbest")


def test_stopping_returns_minimum_even_on_marginal_improvement(tiny_world, monkeypatch):
    # an iteration that improves CER by less than the margin stops the loop
    # but must still be the returned checkpoint (minimum over evaluated)
    seed_model, adapt, sval = tiny_world
    import nbadapt.selflearn as sl
    fake_cers = iter([0.30, 0.20, 0.1995])  # seed, iter1, iter2: tiny final gain
    monkeypatch.setattr(sl, "validation_cer",
                        lambda *a, **k: next(fake_cers))
    cfg = sl_config(method=Method.MLL, seed=5, max_outer_iterations=4,
                    improve_margin=0.001)
    final, report = run_self_learning(seed_model, adapt[:6], sval[:2], cfg)
    assert report.best_cer == 0.1995
    assert report.best_iteration == 2
    assert "did not improve" in report.stopping_reason
