"""Standard finite-difference gradient checks on a tiny model.

Every loss the trainer can build is checked end to end: supervised (teacher
forced), 1-best distillation, and the weighted 2-best loss through both
multi-task topologies. Runs in float64 with init scale 0.5 so true gradients
sit above the finite-difference noise floor.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import model as M
from .model import Topology, Utterance
from .trainer import WeightedLabel, kd_1best_loss, nbest_loss, supervised_loss

TINY_CONFIG = M.ModelConfig(feature_dim=3, vocab_size=5, encoder_hidden=4,
                            decoder_hidden=4, embed_dim=3, attention_dim=4)


def tiny_fixture(seed: int = 1):
    """A tiny model plus one 3-frame utterance with a 3-token reference."""
    params = M.init_params(TINY_CONFIG, seed=seed, init_scale=0.5)
    rng = np.random.default_rng(seed + 100)
    utt = Utterance(features=rng.normal(size=(3, 3)), reference=(3, 4, 2))
    return params, utt


def run_standard_gradchecks(tol: float = 1e-4, h: float = 1e-4, seed: int = 1):
    """Returns [(name, GradCheckReport)] for the full set of loss gradients."""
    checks = []

    params, utt = tiny_fixture(seed)
    checks.append(("supervised loss", params,
                   lambda p=params, u=utt: supervised_loss(p, u, p=0.0, smoothing=0.1)))

    params2, utt2 = tiny_fixture(seed + 1)
    hyp_tokens = (4, 3, 2)
    checks.append(("1-best distillation loss", params2,
                   lambda p=params2, u=utt2: kd_1best_loss(p, u, hyp_tokens, smoothing=0.1)))

    labels = [WeightedLabel(tokens=(3, 2), weight=0.75, rank=1),
              WeightedLabel(tokens=(4, 4, 2), weight=0.25, rank=2)]
    for topology, label in ((Topology.SHARED_AED, "2-best multi-task loss (shared AED)"),
                            (Topology.SHARED_AE, "2-best multi-task loss (shared AE)")):
        base, uttn = tiny_fixture(seed + 2)
        branched = M.add_branches(base, 2, topology)
        checks.append((label, branched,
                       lambda p=branched, u=uttn, t=topology:
                       nbest_loss(p, u, labels, t, smoothing=0.1)))

    base_mll, utt_mll = tiny_fixture(seed + 3)
    checks.append(("2-best multi-label loss", base_mll,
                   lambda p=base_mll, u=utt_mll:
                   nbest_loss(p, u, labels, Topology.SINGLE, smoothing=0.1)))

    reports = []
    for name, params_i, fn in checks:
        reports.append((name, ad.grad_check(fn, params_i.tensors, h=h, tol=tol)))
    return reports
