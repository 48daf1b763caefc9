import math

import numpy as np
import pytest
import torch

from streetcompat.data import filter_pairable
from streetcompat.losses import LossConfig
from streetcompat.netcore import init_model
from streetcompat.trainer import (EarlyStopping, NonFiniteLossError, TrainConfig, build_batch,
                                  discriminator_phase, generator_phase, lr_at, make_optimizers,
                                  train, train_step)
from streetcompat.losses import discriminator_loss
from streetcompat.netcore import forward_discriminator, forward_generator
from conftest import make_catalog, make_person


def _snapshot(module):
    return [p.detach().clone() for p in module.parameters()]


def _same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


@pytest.fixture
def pools(small_synth):
    return filter_pairable(small_synth.source), list(small_synth.target.entries)


@pytest.fixture
def batch(pools, tiny_config):
    return build_batch(*pools, TrainConfig(), np.random.default_rng(0), tiny_config.input_resolution)


# ---------------------------------------------------------------------------- batches

def test_batch_counts(batch):
    assert batch.source.shape[0] == 32 and batch.target.shape[0] == 32
    assert len(batch.pair_index.pairs) == 32


def test_batch_pairs_stay_within_person_and_cross_regions(pools, tiny_config):
    for seed in range(20):
        b = build_batch(*pools, TrainConfig(), np.random.default_rng(seed), tiny_config.input_resolution)
        b.pair_index.validate(len(b.person_ids), b.person_ids)
        for i, j in b.pair_index.pairs:
            assert b.person_ids[i] == b.person_ids[j]
            assert b.region_keys[i] != b.region_keys[j]
        assert len(set(b.person_ids)) == 16


def test_person_with_exactly_two_regions_uses_both():
    src = [make_person(f"i{k}", f"p{k}") for k in range(16)]
    tgt = [make_catalog()]
    b = build_batch(src, tgt, TrainConfig(), np.random.default_rng(0), 8)
    for k in range(16):
        keys = {key for pid, key in zip(b.person_ids, b.region_keys) if pid == f"p{k}"}
        assert keys == {(f"i{k}", 0), (f"i{k}", 1)}


def test_batch_too_few_persons():
    src = [make_person(f"i{k}", f"p{k}") for k in range(15)]
    with pytest.raises(ValueError, match="persons"):
        build_batch(src, [make_catalog()], TrainConfig(), np.random.default_rng(0), 8)


def test_config_cross_field_check():
    with pytest.raises(ValueError, match="persons_per_batch"):
        TrainConfig(persons_per_batch=10)
    with pytest.raises(ValueError):
        TrainConfig(decay_mode="cosine")


# ---------------------------------------------------------------------------- schedule

def test_lr_values():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 5e-5
    assert lr_at(499, cfg) == 5e-5
    assert lr_at(500, cfg) == pytest.approx(4.925e-5, rel=1e-12)
    assert lr_at(1000, cfg) == pytest.approx(5e-5 * 0.985 ** 2, rel=1e-12)


def test_lr_multiply_mode():
    cfg = TrainConfig(decay_mode="multiply_by_factor")
    assert lr_at(500, cfg) == pytest.approx(5e-5 * 0.015, rel=1e-12)


def test_lr_monotone():
    cfg = TrainConfig()
    values = [lr_at(s, cfg) for s in range(0, 20_000, 37)]
    assert all(a >= b for a, b in zip(values, values[1:]))


# ---------------------------------------------------------------------------- phases

@pytest.mark.parametrize("variant", ["as_written", "second_term_on_target"])
def test_freeze_contracts(tiny_state, batch, variant):
    cfg = TrainConfig()
    optim = make_optimizers(tiny_state, cfg)
    loss_cfg = LossConfig(eq2_variant=variant)
    for _ in range(5):
        g, e, d = (_snapshot(m) for m in (tiny_state.generator, tiny_state.embedder, tiny_state.discriminator))
        discriminator_phase(tiny_state, batch, optim, 1e-2)
        assert _same(g, _snapshot(tiny_state.generator)) and _same(e, _snapshot(tiny_state.embedder))
        assert not _same(d, _snapshot(tiny_state.discriminator))
        d = _snapshot(tiny_state.discriminator)
        generator_phase(tiny_state, batch, optim, 1e-2, loss_cfg)
        assert _same(d, _snapshot(tiny_state.discriminator))
        assert all(p.requires_grad for p in tiny_state.discriminator.parameters())


def test_discriminator_step_descends(tiny_state, batch):
    state = tiny_state.to(torch.float64)
    b = batch
    b.source, b.target = b.source.double(), b.target.double()

    def l_d():
        with torch.no_grad():
            return float(discriminator_loss(forward_discriminator(state, forward_generator(state, b.target)),
                                            forward_discriminator(state, forward_generator(state, b.source))))

    before = l_d()
    discriminator_phase(state, b, make_optimizers(state, TrainConfig()), 1e-6)
    assert l_d() < before


def test_train_step_counts_one_alternation(tiny_state, batch):
    state, m = train_step(tiny_state, batch, TrainConfig(), LossConfig())
    assert state.step == 1 and m.step == 0
    assert all(math.isfinite(v) for v in (m.l_c, m.L_G, m.L_D))
    assert m.lr == 5e-5


def test_non_finite_loss_aborts(tiny_state, batch):
    with torch.no_grad():
        next(tiny_state.generator.parameters()).fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as err:
        train_step(tiny_state, batch, TrainConfig(), LossConfig())
    assert err.value.step == 0 and "L_D" in err.value.values


# ---------------------------------------------------------------------------- loop

def test_early_stopping_semantics():
    s = EarlyStopping(3)
    flags = [s.update(v, k) for k, v in enumerate([0.6, 0.7, 0.69, 0.68, 0.67])]
    assert flags == [True, True, False, False, False]
    assert s.should_stop and s.best == 0.7 and s.best_step == 1


def test_train_early_stop_returns_best(pools, tiny_config):
    scores = iter([0.6, 0.7, 0.69, 0.68, 0.67, 0.99])
    cfg = TrainConfig(max_steps=50, eval_every=1, early_stop_patience=3)
    res = train(*pools, lambda s: {"comp_auc": next(scores), "fitb_acc": 0.0}, cfg, LossConfig(),
                init_model(tiny_config, 0))
    assert res.last_state.step == 5
    assert res.state.step == 2 and res.best_score == 0.7


def test_max_steps_zero(pools, tiny_config):
    state = init_model(tiny_config, 0)
    fp = state.fingerprint()
    res = train(*pools, None, TrainConfig(max_steps=0), LossConfig(), state)
    assert res.log == [] and res.state.step == 0 and res.state.fingerprint() == fp


def test_training_deterministic(pools, tiny_config, tmp_path):
    runs = []
    for k in range(2):
        res = train(*pools, None, TrainConfig(max_steps=6), LossConfig(), init_model(tiny_config, 4),
                    log_path=tmp_path / f"log{k}.jsonl")
        runs.append((res.state.fingerprint(), (tmp_path / f"log{k}.jsonl").read_bytes()))
    assert runs[0] == runs[1]


def test_zero_lambda_ignores_discriminator(pools, tiny_config):
    """With both adversarial weights at zero the discriminator's trajectory cannot reach theta/omega."""
    loss = LossConfig(lambda1=0.0, lambda2=0.0)
    fps = []
    for scale in (1.0, 50.0):
        res = train(*pools, None, TrainConfig(max_steps=8, disc_lr_scale=scale), loss, init_model(tiny_config, 2))
        fps.append((_snapshot(res.state.generator), _snapshot(res.state.embedder),
                    _snapshot(res.state.discriminator)))
    assert _same(fps[0][0], fps[1][0]) and _same(fps[0][1], fps[1][1])
    assert not _same(fps[0][2], fps[1][2])


def test_resume_continues_batch_sequence(pools, tiny_config):
    cfg = TrainConfig(max_steps=6)
    full = train(*pools, None, cfg, LossConfig(), init_model(tiny_config, 1))
    first = train(*pools, None, TrainConfig(max_steps=3), LossConfig(), init_model(tiny_config, 1))
    rest = train(*pools, None, cfg, LossConfig(), first.state, first.optimizers)
    assert rest.state.step == 6
    assert rest.state.fingerprint() == full.state.fingerprint()
