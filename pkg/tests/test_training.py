import itertools

import numpy as np
import pytest

from cpdr.data import SynthSpec, generate_synthetic
from cpdr.network import ModelConfig, build_model
from cpdr.tensor import ParamSet, Tensor, UsageError, backward, grad_check, sigmoid
from cpdr.training import (
    PAPER_VERBATIM, STANDARD_2X, AdamState, LossConfig, Schedule, adam_step, deep_supervised_loss, dice_loss,
    iou_loss, make_batches, poly_warmup_lr, total_loss, train,
)
from oracles import bilinear_direct


def T(values, shape=None):
    arr = np.asarray(values, dtype=float)
    return Tensor(arr.reshape(shape or (1, 1) + arr.shape[-2:] if arr.ndim >= 2 else (1, 1, 1, arr.size)))


GRIDS = [np.array(bits, dtype=float).reshape(1, 1, 2, 2) for bits in itertools.product((0, 1), repeat=4)]


# ----------------------------------------------------------------------------- losses


def test_dice_examples():
    y = GRIDS[7]  # three foreground pixels
    assert abs(dice_loss(Tensor(y), Tensor(y), LossConfig(epsilon=1e-12, dice_variant=PAPER_VERBATIM)).item() - 0.5) < 1e-9
    assert abs(dice_loss(Tensor(y), Tensor(y), LossConfig(epsilon=1e-12)).item()) < 1e-12
    p, y = T([1, 0, 0, 0]), T([1, 1, 0, 0])
    assert dice_loss(p, y, LossConfig(epsilon=1.0)).item() == pytest.approx(0.25, abs=1e-15)


def test_iou_examples():
    y = GRIDS[9]
    assert iou_loss(Tensor(y), Tensor(y)).item() == 0.0
    p = Tensor(np.array([1, 1, 1, 1, 0, 0, 0, 0], dtype=float).reshape(1, 1, 2, 4))
    y = Tensor(1.0 - p.data)
    assert iou_loss(p, y, LossConfig(epsilon=1.0)).item() == pytest.approx(1 - 1 / 9, abs=1e-15)
    z = Tensor(np.zeros((1, 1, 2, 2)))
    assert iou_loss(z, z, LossConfig(epsilon=1.0)).item() == 0.0


def test_total_is_sum_of_parts():
    r = np.random.default_rng(0)
    p, y = Tensor(r.uniform(size=(2, 1, 3, 3))), Tensor((r.uniform(size=(2, 1, 3, 3)) > 0.5).astype(float))
    cfg = LossConfig()
    assert total_loss(p, y, cfg).item() == dice_loss(p, y, cfg).item() + iou_loss(p, y, cfg).item()
    assert total_loss(y, y, cfg).item() == 0.0


@pytest.mark.parametrize("variant", [STANDARD_2X, PAPER_VERBATIM])
def test_total_loss_grad_check(variant):
    r = np.random.default_rng(1)
    logits = Tensor(r.normal(size=(1, 1, 2, 2)))
    y = Tensor(np.array([1.0, 0.0, 1.0, 1.0]).reshape(1, 1, 2, 2))
    cfg = LossConfig(epsilon=0.5, dice_variant=variant)
    assert grad_check(lambda t: total_loss(sigmoid(t), y, cfg), logits) < 1e-6
    probs = Tensor(r.uniform(0.1, 0.9, size=(1, 1, 2, 2)))
    assert grad_check(lambda t: total_loss(t, y, cfg), probs) < 1e-6


def test_exhaustive_2x2_contracts():
    eps_small = LossConfig(epsilon=1e-12)
    eps_small_verbatim = LossConfig(epsilon=1e-12, dice_variant=PAPER_VERBATIM)
    for y in GRIDS:
        assert iou_loss(Tensor(y), Tensor(y)).item() == 0.0
        assert abs(dice_loss(Tensor(y), Tensor(y), eps_small).item()) < 1e-12
        if y.any():
            assert abs(dice_loss(Tensor(y), Tensor(y), eps_small_verbatim).item() - 0.5) < 1e-9
    losses = [
        lambda p, y: iou_loss(p, y, LossConfig()),
        lambda p, y: dice_loss(p, y, LossConfig()),
        lambda p, y: dice_loss(p, y, LossConfig(dice_variant=PAPER_VERBATIM)),
    ]
    for p, y in itertools.product(GRIDS, GRIDS):
        for loss in losses:
            before = loss(Tensor(p), Tensor(y)).item()
            assert 0.0 <= before <= 1.0
            for k in np.flatnonzero(p.ravel() == y.ravel()):
                flipped = p.copy().ravel()
                flipped[k] = 1.0 - flipped[k]
                assert loss(Tensor(flipped.reshape(p.shape)), Tensor(y)).item() >= before


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(epsilon=0)
    with pytest.raises(ValueError):
        LossConfig(stage_weights=(1, 0, 1))
    with pytest.raises(ValueError):
        LossConfig(dice_variant="triple")


# ----------------------------------------------------------------------------- deep supervision


def block_mask(seed=0):
    """16x16 mask built from 4x4 blocks, so 2x/4x half-pixel downscales stay binary."""
    coarse = (np.random.default_rng(seed).uniform(size=(4, 4)) > 0.5).astype(float)
    coarse[0, 0], coarse[3, 3] = 1.0, 0.0
    return np.kron(coarse, np.ones((4, 4)))[None, None]


def test_saturated_logits_give_near_zero_loss():
    y = block_mask()
    from cpdr.tensor import resize_array
    logits = [Tensor(60.0 * (2 * resize_array(y, s, s) - 1)) for s in (4, 8, 16)]
    bundle = deep_supervised_loss(logits, Tensor(y))
    assert bundle.value < 1e-12


def test_stage_weights_one_is_plain_sum():
    r = np.random.default_rng(2)
    logits = [Tensor(r.normal(size=(1, 1, s, s))) for s in (4, 8, 16)]
    b = deep_supervised_loss(logits, Tensor(block_mask()), LossConfig(stage_weights=(1, 1, 1)))
    assert b.value == pytest.approx(sum(b.stage_totals), abs=1e-14)
    for d, i, t in zip(b.dice, b.iou, b.stage_totals):
        assert t == pytest.approx(d + i, abs=1e-14)


def test_stage_targets_match_bilinear_oracle():
    y = np.zeros((16, 16))
    y[5:11, 5:11] = 1.0  # centered square, not aligned to the downscale grid
    logits = [Tensor(np.zeros((1, 1, s, s))) for s in (4, 8, 16)]
    b = deep_supervised_loss(logits, Tensor(y[None, None]))
    for target, s in zip(b.targets, (4, 8, 16)):
        assert np.max(np.abs(target[0, 0] - bilinear_direct(y, s, s))) < 1e-12


def test_wrong_number_of_stages():
    with pytest.raises(UsageError):
        deep_supervised_loss([Tensor(np.zeros((1, 1, 4, 4)))] * 2, Tensor(np.zeros((1, 1, 16, 16))))


def test_each_stage_loss_matters():
    m = build_model(ModelConfig(backbone_widths=(4, 4, 8, 8), decoder_width=4, input_size=(32, 32)))
    r = np.random.default_rng(3)
    x = Tensor(r.uniform(size=(1, 3, 32, 32)))
    y = Tensor((r.uniform(size=(1, 1, 32, 32)) > 0.5).astype(float))

    def grads(keep):
        m.parameters.zero_grad()
        b = deep_supervised_loss(m(x), y)
        logits = m(x)
        # rebuild the loss from the kept stages only
        from cpdr.training import resize_target
        total = None
        for k in keep:
            yk = resize_target(y, logits[k].shape[2], logits[k].shape[3])
            term = total_loss(sigmoid(logits[k]), yk)
            total = term if total is None else total + term
        backward(total)
        assert b.value > 0
        return {n: p.grad.copy() for n, p in m.parameters}

    full = grads([0, 1, 2])
    for drop in range(3):
        partial = grads([k for k in range(3) if k != drop])
        assert any(not np.allclose(full[n], partial[n], rtol=0, atol=1e-14) for n in full)


# ----------------------------------------------------------------------------- schedule


def test_poly_warmup_boundaries():
    s = Schedule(base_lr=0.01, warmup_epochs=5, total_epochs=45, gamma=3, steps_per_epoch=2)
    w, t = s.warmup_steps, s.total_steps
    assert poly_warmup_lr(s, 0) == pytest.approx(0.01 / w)
    assert poly_warmup_lr(s, w - 1) == pytest.approx(0.01)
    assert poly_warmup_lr(s, w) == 0.01
    assert poly_warmup_lr(s, w + (t - w) // 2) == pytest.approx(0.01 * 0.125, rel=1e-12)
    assert poly_warmup_lr(s, t - 1) == pytest.approx(0.01 * (1 / (t - w)) ** 3, rel=1e-12)
    assert poly_warmup_lr(s, t) == 0.0
    with pytest.raises(UsageError):
        poly_warmup_lr(s, t + 1)
    with pytest.raises(UsageError):
        poly_warmup_lr(s, -1)


def test_schedule_never_negative():
    s = Schedule(base_lr=1e-3, warmup_epochs=1, total_epochs=7, gamma=5, steps_per_epoch=3)
    assert all(poly_warmup_lr(s, k) >= 0 for k in range(s.total_steps + 1))
    with pytest.raises(ValueError):
        Schedule(warmup_epochs=5, total_epochs=5)


# ----------------------------------------------------------------------------- adam


def scalar_param(value):
    return Tensor(np.full((1, 1, 1, 1), float(value)), requires_grad=True)


def test_adam_zero_grad_keeps_param():
    x = scalar_param(1.5)
    ps = ParamSet([("x", x)])
    state = AdamState()
    x.grad = np.ones_like(x.data)
    adam_step(ps, state, 0.1)
    m_before, v_before = state.m["x"].copy(), state.v["x"].copy()
    value = x.data.copy()
    x.grad = np.zeros_like(x.data)
    adam_step(ps, state, 0.1)
    # moments decay, parameter moves only by the remaining momentum
    assert np.all(np.abs(state.m["x"]) < np.abs(m_before)) and np.all(state.v["x"] < v_before)
    y = scalar_param(2.0)
    fresh = ParamSet([("y", y)])
    y.grad = np.zeros_like(y.data)
    adam_step(fresh, AdamState(), 0.1)
    assert y.data.item() == 2.0
    assert not np.array_equal(x.data, value)


def test_adam_first_step_is_sign():
    x = Tensor(np.array([1.0, -2.0, 0.5]).reshape(1, 1, 1, 3), requires_grad=True)
    x.grad = np.array([3.0, -0.01, 1e-3]).reshape(x.shape)
    start = x.data.copy()
    adam_step(ParamSet([("x", x)]), AdamState(), 0.1)
    np.testing.assert_allclose(x.data - start, -0.1 * np.sign([3.0, -0.01, 1e-3]).reshape(x.shape), rtol=1e-4)
    np.testing.assert_array_equal(x.grad, 0.0)


def test_adam_minimizes_square():
    x = scalar_param(1.0)
    ps, state = ParamSet([("x", x)]), AdamState()
    for _ in range(100):
        backward((x * x).sum())
        adam_step(ps, state, 0.1)
    assert abs(x.item()) < 0.1


def test_adam_requires_grads():
    x = scalar_param(1.0)
    with pytest.raises(UsageError):
        adam_step(ParamSet([("x", x)]), AdamState(), 0.1)


# ----------------------------------------------------------------------------- loop


def test_make_batches_drop_last_and_seeded():
    a = make_batches(10, 4, np.random.default_rng(0))
    b = make_batches(10, 4, np.random.default_rng(0))
    assert len(a) == 2 and all(len(x) == 4 for x in a)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def tiny_run(seed=0, steps=6):
    data = generate_synthetic(SynthSpec(count=4, size=32, seed=seed))
    m = build_model(ModelConfig(backbone_widths=(4, 4, 4, 4), decoder_width=4, input_size=(32, 32), seed=seed))
    sched = Schedule(base_lr=1e-3, warmup_epochs=1, total_epochs=3, gamma=3, steps_per_epoch=2)
    return m, sched, train(m, data, sched, batch_size=2, seed=seed, max_steps=steps)


def test_training_is_deterministic():
    m1, _, a = tiny_run()
    m2, _, b = tiny_run()
    assert [r.total for r in a.steps] == [r.total for r in b.steps]
    for (_, p), (_, q) in zip(m1.parameters, m2.parameters):
        assert p.data.tobytes() == q.data.tobytes()


def test_lr_trace_follows_schedule():
    _, sched, log = tiny_run()
    assert [r.lr for r in log.steps] == [poly_warmup_lr(sched, k) for k in range(len(log.steps))]
    assert [r.step for r in log.steps] == list(range(6))
    assert [r.epoch for r in log.steps] == [0, 0, 1, 1, 2, 2]


def test_log_csv(tmp_path):
    _, _, log = tiny_run(steps=2)
    log.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,lr,dice,iou,total,train_mae"
    assert len(lines) == 3


def test_single_sample_loss_decreases():
    data = generate_synthetic(SynthSpec(count=1, size=32, seed=4))
    m = build_model(ModelConfig(backbone_widths=(8, 8, 8, 8), decoder_width=8, input_size=(32, 32)))
    sched = Schedule(base_lr=1e-3, warmup_epochs=1, total_epochs=20, gamma=3, steps_per_epoch=1)
    log = train(m, data, sched, batch_size=1, seed=0, max_steps=8, augment=False)
    totals = [r.total for r in log.steps]
    run = best = 0
    for a, b in zip(totals, totals[1:]):
        run = run + 1 if b < a else 0
        best = max(best, run)
    assert best >= 3, totals


def test_train_rejects_empty_dataset():
    m = build_model(ModelConfig(backbone_widths=(4, 4, 4, 4), decoder_width=4, input_size=(32, 32)))
    with pytest.raises(ValueError):
        train(m, [], Schedule(warmup_epochs=0, total_epochs=1))
