import numpy as np
import pytest

from moeisr import autodiff as ad
from moeisr.autodiff import Tensor
from moeisr.errors import UsageError
from moeisr.models import load_checkpoint, save_checkpoint
from moeisr.routing import route_train
from moeisr.sampling import assemble_query_features, feature_unfold, nearest_latent
from moeisr.models import encode
from moeisr.training import (
    AdamState,
    TrainConfig,
    adam_step,
    balance_loss,
    evaluate,
    l1_loss,
    total_loss,
    train_on_images,
)

TINY = dict(feat_dim=4, n_res_blocks=1, mapper_layers=2, mapper_hidden=4, expert_hidden=8,
            patch=8, scale_min=1.0, scale_max=2.0, n_queries=64, log_every=0)


def D(x):
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)


# ---------------------------------------------------------------- losses

def test_l1_zero_and_half(rng):
    x = rng.random((10, 3))
    assert float(l1_loss(D(x), D(x)).data) == 0.0
    assert float(l1_loss(D(x + 0.5), D(x)).data) == pytest.approx(0.5, abs=1e-12)


def test_l1_matches_accumulation(rng):
    a, b = rng.random((17, 3)), rng.random((17, 3))
    acc = 0.0
    for u, v in zip(a.ravel(), b.ravel()):
        acc += abs(u - v)
    assert abs(float(l1_loss(D(a), D(b)).data) - acc / a.size) < 1e-9


def test_l1_shape_mismatch():
    with pytest.raises(UsageError):
        l1_loss(D(np.zeros((2, 3))), D(np.zeros((3, 3))))


def test_balance_uniform_is_zero():
    assert float(balance_loss(D(np.full((8, 4), 0.25)), [1, 1, 1, 1]).data) == 0.0


def test_balance_all_on_one_expert():
    probs = np.zeros((8, 4))
    probs[:, 0] = 1
    assert float(balance_loss(D(probs), [1, 1, 1, 1]).data) == 12.0 == 2 * 8 * 3 / 4


def test_balance_weighted_uniform():
    assert float(balance_loss(D(np.full((8, 4), 0.25)), [2, 1, 1, 1]).data) == 2.0


def test_balance_zero_iff_weighted_loads_equal(rng):
    probs = ad.softmax(D(rng.normal(size=(12, 3)))).data
    load = probs.sum(axis=0)
    w = (12 / 3) / load
    assert float(balance_loss(D(probs), w).data) == pytest.approx(0.0, abs=1e-12)
    assert float(balance_loss(D(probs), np.ones(3)).data) > 0


def test_total_loss_combinations(rng):
    x = rng.random((6, 3))
    probs = D(np.full((4, 4), 0.25))
    loss, _, _ = total_loss(D(x), D(x), probs, TrainConfig())
    assert float(loss.data) == 0.0
    pred, target = D(x + 0.1), D(x)
    skewed_probs = D(np.tile([1.0, 0, 0, 0], (4, 1)))
    cfg = TrainConfig(beta=0.0)
    loss, l1, _ = total_loss(pred, target, skewed_probs, cfg)
    assert float(loss.data) == pytest.approx(3000 * float(l1.data))
    assert TrainConfig().alpha == 3000 and TrainConfig().beta == 1


def test_config_validation():
    with pytest.raises(UsageError):
        TrainConfig(weights=[1, 1, 0, 1])
    with pytest.raises(UsageError):
        TrainConfig(tau=0)
    with pytest.raises(UsageError):
        TrainConfig(alpha=-1)


# ---------------------------------------------------------------- Adam

def test_adam_first_step_closed_form():
    p = {"w": np.full((3, 2), 0.5)}
    new, state = adam_step(p, {"w": np.ones((3, 2))}, AdamState(), lr=1e-4)
    np.testing.assert_allclose(new["w"] - 0.5, -1e-4 / (1 + 1e-8), rtol=1e-12)
    assert state.step == 1


def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState({"w": np.array([0.5, 0.5])}, {"w": np.array([0.0, 0.0])}, 0)
    new, s2 = adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(new["w"], p["w"])
    _, s3 = adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_allclose(s3.m["w"], 0.45)


def test_adam_does_not_mutate_inputs():
    p = {"w": np.ones(3)}
    adam_step(p, {"w": np.ones(3)}, AdamState())
    np.testing.assert_array_equal(p["w"], 1.0)


# ---------------------------------------------------------------- training loop

@pytest.fixture(scope="module")
def hr_image():
    r = np.random.default_rng(0)
    yy, xx = np.mgrid[0:24, 0:24] / 24
    return np.clip(np.stack([xx, yy, 0.5 * (xx + yy)], -1) + 0.05 * r.random((24, 24, 3)), 0, 1)


def test_first_step_loss_finite_positive(hr_image):
    lines = []
    train_on_images([hr_image], TrainConfig(steps=1, log_every=1, **{k: v for k, v in TINY.items()
                                                                      if k != "log_every"}), emit=lines.append)
    loss = float(lines[0].split()[3])
    assert np.isfinite(loss) and loss > 0
    assert lines[0].startswith("step 0 loss ")
    assert " l1 " in lines[0] and " lb " in lines[0]


def test_training_is_deterministic(hr_image):
    cfg = TrainConfig(steps=5, seed=3, **TINY)
    a = train_on_images([hr_image], cfg)
    b = train_on_images([hr_image], cfg)
    for name in a.tensors:
        assert a[name].data.tobytes() == b[name].data.tobytes()


def test_training_batch_of_patches(hr_image):
    p = train_on_images([hr_image, hr_image[::-1]], TrainConfig(steps=2, batch=3, **TINY))
    assert all(np.all(np.isfinite(t.data)) for t in p.tensors.values())


def test_periodic_eval_lines(hr_image, tmp_path):
    lines = []
    train_on_images([hr_image], TrainConfig(steps=4, eval_every=2, **TINY), tmp_path / "c.ck", lines.append)
    evals = [l for l in lines if l.startswith("eval scale ")]
    assert len(evals) == 2
    assert evals[0].split()[5] == "shares"
    assert (tmp_path / "c.ck").exists()


def test_evaluate_out_of_scale_and_shares(hr_image):
    params = TrainConfig(**TINY).model()
    for s in (1.0, 3.3, 8.0):
        r = evaluate(params, [hr_image], s)
        assert np.isfinite(r.mean_psnr)
        assert sum(r.counts) == hr_image.shape[0] * hr_image.shape[1]
        assert len(r.shares) == 4
        assert 0 < r.mean_ratio <= 1


def test_checkpoint_round_trip_eval_bit_identical(hr_image, tmp_path):
    params = train_on_images([hr_image], TrainConfig(steps=3, **TINY))
    save_checkpoint(tmp_path / "m.ck", params)
    back = load_checkpoint(tmp_path / "m.ck")
    assert evaluate(params, [hr_image], 2.0).mean_psnr == evaluate(back, [hr_image], 2.0).mean_psnr


def test_one_hot_mapper_sends_no_gradient_to_other_experts(rng):
    with ad.precision(np.float64):
        params = TrainConfig(**TINY).model(dtype=np.float64)
    lr = rng.random((6, 6, 3))
    z = encode(lr, params)
    b = nearest_latent(rng.uniform(-1, 1, size=(30, 2)), (6, 6), (0.1, 0.1))
    feats = assemble_query_features(b, feature_unfold(z))
    pred, _ = route_train(feats, b.site, None, params, weights=D(np.tile(np.eye(4)[2], (30, 1))))
    loss = ad.scale(l1_loss(pred, D(rng.random((30, 3)))), 3000.0)
    grads = ad.backward(loss, params.trainable())
    for name, t in params.tensors.items():
        g = grads[t.id].data
        if name.startswith("expert.") and not name.startswith("expert.2."):
            assert not g.any(), name
    assert grads[params["expert.2.0.weight"].id].data.any()
