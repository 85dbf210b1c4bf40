import numpy as np
import pytest

from din import ops
from din.checkpoint import read_checkpoint
from din.config import OptimizerConfig
from din.data import DegradationSpec, PairedSample, synthetic_pairs
from din.gradcheck import gradcheck
from din.metrics import PSNR_CAP, MetricsRecord, psnr, ssim
from din.model import DIHEDRAL_GROUP, ModelConfig, dihedral, init_params
from din.optim import OptimState, adam_step
from din.tensor import NumericalError, ShapeError, Tensor, backward
from din.train import dataset_loss, evaluate, l1_loss, train, write_metrics

TINY = ModelConfig(M=1, D=1, B=1, K=2, channels=8, growth=4, scale=2)


# ---------------------------------------------------------------------------
# loss


def test_l1_values():
    t = Tensor(np.random.default_rng(0).uniform(size=(2, 3, 4, 4)))
    assert l1_loss(t, t).item() == 0.0
    assert abs(l1_loss(Tensor(t.data + 0.5), t).item() - 0.5) < 1e-15
    with pytest.raises(ShapeError):
        l1_loss(t, Tensor(np.zeros((2, 3, 4, 5))))


def test_l1_gradient_is_sign_over_numel():
    rng = np.random.default_rng(1)
    target = Tensor(rng.uniform(size=(1, 2, 3, 3)))
    pred = Tensor(target.data + rng.choice([-1, 1], size=target.shape) * rng.uniform(0.1, 1, target.shape),
                  requires_grad=True)
    backward(l1_loss(pred, target))
    np.testing.assert_allclose(pred.grad, np.sign(pred.data - target.data) / pred.size, atol=1e-15)
    pred.grad = None
    assert gradcheck(lambda p: l1_loss(p, target), [pred]) < 1e-7


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_grads_leave_params():
    p = Tensor(np.arange(6.0).reshape(2, 3))
    state = OptimState(lr=0.1)
    for _ in range(5):
        adam_step([p], [np.zeros_like(p.data)], state)
    np.testing.assert_array_equal(p.data, np.arange(6.0).reshape(2, 3))
    assert state.t == 5


def test_adam_single_step_closed_form():
    g = np.array([0.3, -2.0, 1e-3, 0.0])
    p = Tensor(np.zeros(4))
    state = OptimState(lr=0.01)
    adam_step([p], [g], state)
    np.testing.assert_allclose(p.data, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12, atol=0)


def test_adam_matches_scalar_recurrence():
    rng = np.random.default_rng(2)
    gs = rng.standard_normal(30)
    p = Tensor(np.zeros(1))
    state = OptimState(lr=0.05)
    m = v = x = 0.0
    for t, g in enumerate(gs, start=1):
        adam_step([p], [np.array([g])], state)
        m = 0.9 * m + 0.1 * g
        v = 0.99 * v + 0.01 * g * g
        x -= 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.99**t)) + 1e-8)
    assert abs(p.data[0] - x) < 1e-12


def test_adam_constant_gradient_step_tends_to_lr_sign():
    p = Tensor(np.zeros(2))
    state = OptimState(lr=1e-3)
    g = np.array([4.0, -0.02])
    for _ in range(3000):
        before = p.data.copy()
        adam_step([p], [g], state)
    np.testing.assert_allclose(p.data - before, -1e-3 * np.sign(g), rtol=1e-5)


def test_adam_nan_gradient_aborts():
    p = Tensor(np.zeros(3))
    state = OptimState(lr=0.1)
    with pytest.raises(NumericalError):
        adam_step([p], [np.array([0.0, np.nan, 1.0])], state)
    assert state.t == 0 and not p.data.any()


@pytest.mark.parametrize("seed", range(5))
def test_convex_problem_loss_non_increasing(seed):
    # lr is small enough that 450 steps stay in the descent phase; at the exact
    # fit L1 + Adam jitters around zero and windows can tick up by ~1e-4
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((1, 4, 6, 6)))
    w_true = rng.standard_normal((3, 4, 1, 1))
    target = Tensor(ops.conv2d(x, Tensor(w_true)).data)
    w = Tensor(np.zeros((3, 4, 1, 1)), requires_grad=True)
    state = OptimState(lr=2e-3)
    losses = []
    for _ in range(450):
        w.grad = None
        loss = l1_loss(ops.conv2d(x, w), target)
        backward(loss)
        adam_step([w], [w.grad], state)
        losses.append(loss.item())
    windows = np.array(losses[50:]).reshape(-1, 20).mean(axis=1)
    assert np.all(np.diff(windows) <= 0)
    assert losses[-1] < 0.5 * losses[0]


def test_lr_schedule():
    o = OptimizerConfig(lr=1e-3, decay_every=10, decay_factor=0.5)
    assert [o.lr_at(s) for s in (0, 9, 10, 25)] == [1e-3, 1e-3, 5e-4, 2.5e-4]
    assert OptimizerConfig(lr=1.0, decay_every=0).lr_at(10**6) == 1.0


# ---------------------------------------------------------------------------
# training loop


def one_pair(size=16):
    return synthetic_pairs(1, size, DegradationSpec.bi(2), seed=0)


def test_train_lr_zero_is_a_no_op():
    pairs = one_pair()
    params = init_params(TINY, seed=1)
    before = {n: t.data.copy() for n, t in params.named_parameters()}
    res = train(params, TINY, pairs, OptimizerConfig(lr=0.0, steps=5), patch_size=8, batch_size=1, do_augment=False)
    for n, t in params.named_parameters():
        np.testing.assert_array_equal(t.data, before[n])
    assert len(set(res.losses)) == 1 and res.steps == 5


def test_train_is_deterministic(tmp_path):
    pairs = one_pair(24)
    runs = []
    for i in range(2):
        params = init_params(TINY, seed=2)
        res = train(params, TINY, pairs, OptimizerConfig(lr=1e-3, steps=8), patch_size=6, batch_size=2,
                    seed=5, out_dir=tmp_path / str(i))
        runs.append(res.losses)
    assert runs[0] == runs[1]
    assert (tmp_path / "0" / "loss.csv").read_bytes() == (tmp_path / "1" / "loss.csv").read_bytes()
    assert (tmp_path / "0" / "checkpoint.dinckpt").read_bytes() == (tmp_path / "1" / "checkpoint.dinckpt").read_bytes()


def test_train_writes_loss_csv(tmp_path):
    train(init_params(TINY), TINY, one_pair(), OptimizerConfig(lr=1e-3, steps=3, decay_every=2), patch_size=4,
          batch_size=1, out_dir=tmp_path)
    rows = (tmp_path / "loss.csv").read_text().splitlines()
    assert rows[0] == "step,loss,lr" and len(rows) == 4
    assert [float(r.split(",")[2]) for r in rows[1:]] == [1e-3, 1e-3, 5e-4]


def test_train_nan_keeps_last_good_checkpoint(tmp_path):
    pairs = one_pair()
    params = init_params(TINY)
    train(params, TINY, pairs, OptimizerConfig(lr=1e-3, steps=2), patch_size=4, batch_size=1, out_dir=tmp_path)
    good = (tmp_path / "checkpoint.dinckpt").read_bytes()
    bad = [PairedSample(pairs[0].lq, Tensor(np.full(pairs[0].hq.shape, np.nan)), "bad")]
    with pytest.raises(NumericalError, match="step 1"):
        train(params, TINY, bad, OptimizerConfig(lr=1e-3, steps=3), patch_size=4, batch_size=1, out_dir=tmp_path)
    assert (tmp_path / "checkpoint.dinckpt").read_bytes() == good
    _, _, meta = read_checkpoint(tmp_path / "checkpoint.dinckpt")
    assert meta["step"] == 2


def test_train_empty_dataset():
    with pytest.raises(ValueError):
        train(init_params(TINY), TINY, [], OptimizerConfig(steps=1))


def test_overfit_single_image():
    cfg = ModelConfig(M=1, D=1, B=1, K=3, channels=16, growth=8, scale=2)
    pairs = one_pair(16)
    params = init_params(cfg, seed=0)
    start = dataset_loss(params, cfg, pairs)
    res = train(params, cfg, pairs, OptimizerConfig(lr=2e-3, steps=2000, decay_every=1000), patch_size=8,
                batch_size=2, log_every=0)
    assert np.mean(res.losses[-50:]) < 0.01
    assert dataset_loss(params, cfg, pairs) < start


# ---------------------------------------------------------------------------
# metrics


def test_psnr_cap_and_known_value():
    a = np.random.default_rng(4).uniform(0.1, 0.9, size=(1, 1, 16, 16))
    assert psnr(a, a) == PSNR_CAP
    assert ssim(a, a) == 1.0
    assert abs(psnr(a + 1 / 255, a) - 20 * np.log10(255)) < 1e-9
    assert abs(20 * np.log10(255) - 48.13) < 5e-3
    with pytest.raises(ShapeError):
        psnr(a, a[:, :, :8])


def test_psnr_y_channel_weighting():
    a = np.full((1, 3, 4, 4), 0.5)
    b = a.copy()
    b[:, 1] += 0.1
    err = 128.553 / 255 * 0.1
    assert abs(psnr(b, a) - 10 * np.log10(1 / err**2)) < 1e-9
    assert abs(psnr(b, a, y_channel=False) - 10 * np.log10(3 / 0.01)) < 1e-9


def ssim_oracle(a, b):
    r = np.arange(11) - 5
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * 1.5**2))
    g /= g.sum()
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(a.shape[0] - 10):
        for j in range(a.shape[1] - 10):
            x, y = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            mx, my = (g * x).sum(), (g * y).sum()
            vx = (g * (x - mx) ** 2).sum()
            vy = (g * (y - my) ** 2).sum()
            cxy = (g * (x - mx) * (y - my)).sum()
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return np.mean(vals)


def test_ssim_matches_bruteforce_oracle():
    rng = np.random.default_rng(5)
    a = rng.uniform(size=(16, 16))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert abs(ssim(a[None, None], b[None, None]) - ssim_oracle(a, b)) < 1e-12


def test_ssim_of_negative_is_negative():
    v = 0.3 * np.random.default_rng(6).choice([-1, 1], size=(16, 16))
    a, b = 0.5 + v, 0.5 - v
    s = ssim(a[None, None], b[None, None])
    assert s < 0 and abs(s - ssim_oracle(a, b)) < 1e-12


def test_ssim_too_small():
    with pytest.raises(ShapeError):
        ssim(np.zeros((1, 1, 8, 8)), np.ones((1, 1, 8, 8)))


def test_psnr_ssim_dihedral_invariant():
    rng = np.random.default_rng(7)
    a = rng.uniform(size=(1, 3, 16, 20))
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    p0, s0 = psnr(a, b), ssim(a, b)
    for k, f in DIHEDRAL_GROUP:
        ta, tb = dihedral(a, k, f).copy(), dihedral(b, k, f).copy()
        assert abs(psnr(ta, tb) - p0) < 1e-9
        assert abs(ssim(ta, tb) - s0) < 1e-9


# ---------------------------------------------------------------------------
# evaluation outputs


def test_evaluate_and_write_metrics(tmp_path):
    pairs = synthetic_pairs(2, 24, DegradationSpec.bi(2), seed=3)
    params = init_params(TINY)
    records, outputs = evaluate(params, TINY, pairs)
    assert [r.id for r in records] == [p.id for p in pairs]
    assert outputs[0].shape == pairs[0].hq.shape
    ens, _ = evaluate(params, TINY, pairs, ensemble=True)
    assert all(np.isfinite(r.psnr_db) for r in ens)
    write_metrics(tmp_path / "a", records)
    write_metrics(tmp_path / "b", [MetricsRecord(r.id, r.psnr_db, r.ssim, 999.0) for r in records])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    summary = (tmp_path / "a" / "summary.txt").read_text().splitlines()
    assert "PSNR" in summary[0] and "SSIM" in summary[0] and summary[-1].startswith("DIN")
