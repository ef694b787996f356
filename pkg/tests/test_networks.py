import numpy as np
import pytest

from jointfh.gradcheck import MICRO_NET, check_joint
from jointfh.layers import Conv2d, Residual, ShapeError, StaleCacheError, check_arrays, parameter_count
from jointfh.losses import LossWeights, combined_loss
from jointfh.networks import (CheckpointError, JointNetwork, NetConfig, build_frnet, build_srnet,
                              load_checkpoint, read_checkpoint_meta, save_checkpoint)
from jointfh.tensor import make_rng


def table1_param_count():
    # 9x9x3 -> 64, 1x1x64 -> 32, 1x1x32 -> 3, each with biases
    total = 0
    for k, cin, cout in [(9, 3, 64), (1, 64, 32), (1, 32, 3)]:
        total += k * k * cin * cout + cout
    return total


def test_srnet_paper_param_count():
    assert parameter_count(build_srnet(NetConfig.paper(), make_rng(0))) == table1_param_count() == 17795


def test_frnet_paper_shape_chain():
    cfg = NetConfig.paper()
    frnet = build_frnet(cfg, rng=None)
    chain = frnet.shape_chain((1, *cfg.image_shape))
    assert all(min(shape) >= 1 for _, shape in chain)
    assert chain[-1][1] == (1, 512)


def test_config_validation():
    with pytest.raises(ValueError):
        NetConfig(height=30)
    with pytest.raises(ValueError):
        NetConfig(blocks=(1, 0, 1, 1))
    with pytest.raises(ValueError):
        NetConfig(srnet_kernels=(8, 1, 1))


def test_frnet_collapse_names_stage():
    with pytest.raises(ShapeError, match="stage 2"):
        build_frnet(NetConfig(height=8, width=8, stage_pad=0))


def test_srnet_preserves_shape():
    cfg = NetConfig()
    out = build_srnet(cfg, make_rng(0)).forward(make_rng(1).normal(size=(2, 3, 32, 28)))
    assert out.shape == (2, 3, 32, 28)


def test_srnet_zero_weights_gives_bias_image():
    cfg = NetConfig(srnet_init="he")
    srnet = build_srnet(cfg, rng=None)
    srnet.layers[-1].params["bias"][:] = [0.1, -0.2, 0.3]
    out = srnet.forward(make_rng(1).normal(size=(1, 3, 8, 8)))
    for c, v in enumerate([0.1, -0.2, 0.3]):
        assert np.all(out[0, c] == v)


def test_identity_init_passes_input_through():
    net = JointNetwork.build(NetConfig(), seed=0)
    x = make_rng(2).normal(size=(3, 3, 32, 28))
    hallucinated, feats = net.forward(x)
    np.testing.assert_allclose(hallucinated, x, rtol=0, atol=1e-12)
    assert feats.shape == (3, 64)


def test_zero_residual_branch_is_plain_backbone():
    cfg = NetConfig(height=16, width=16, channels=(2, 3, 4, 4))
    frnet = build_frnet(cfg, make_rng(0))
    plain = [layer for layer in frnet.layers if not isinstance(layer, Residual)]
    for layer in frnet.layers:
        if isinstance(layer, Residual):
            for _, arr in layer.named_parameters():
                arr[...] = 0.0
    x = make_rng(3).normal(size=(2, 3, 16, 16))
    y = x
    for layer in plain:
        y = layer.forward(y)
    assert np.array_equal(frnet.forward(x), y)


def test_forward_is_deterministic():
    x = make_rng(5).normal(size=(2, 3, 32, 28))
    a = JointNetwork.build(NetConfig(), seed=4).forward(x)
    b = JointNetwork.build(NetConfig(), seed=4).forward(x)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_forward_rejects_wrong_shape():
    with pytest.raises(ShapeError):
        JointNetwork.build(NetConfig()).forward(np.zeros((1, 3, 28, 32)))


def test_backward_needs_forward():
    with pytest.raises(StaleCacheError):
        JointNetwork.build(MICRO_NET).backward(np.zeros((1, 6)), None)


def test_zero_gradients_give_zero_parameter_gradients():
    net = JointNetwork.build(MICRO_NET, 1)
    _, f = net.forward(make_rng(0).normal(size=(2, 3, 16, 16)))
    grads = net.backward(np.zeros_like(f), np.zeros((2, 3, 16, 16)))
    assert set(grads) == {k for k in net.parameters() if not k.startswith("softmax")}
    assert all(not g.any() for g in grads.values())


def test_alpha_zero_srnet_gets_only_recognition_gradient():
    net = JointNetwork.build(MICRO_NET, 2)
    rng = make_rng(1)
    x = rng.normal(size=(3, 3, 16, 16))
    gt = rng.normal(size=x.shape)
    labels = np.array([0, 1, 2])
    pred, f = net.forward(x)
    res = combined_loss(pred, gt, f, labels, net.softmax, net.centers, LossWeights(0.0, 1.0, 0.008))
    with_injection = net.backward(res.grad_x, res.grad_pred_hr)
    net.forward(x)
    without = net.backward(res.grad_x, None)
    for k, g in with_injection.items():
        assert np.array_equal(g, without[k])
    assert any(np.abs(g).sum() > 0 for k, g in with_injection.items() if k.startswith("srnet"))


@pytest.mark.parametrize("seed", range(4))
def test_joint_gradient_matches_finite_differences(seed):
    assert check_joint(seed).max_rel_error < 1e-4


def test_splice_consistency_all_srnet_parameters():
    # Exhaustive over every SRNET parameter (no sampling).
    cfg = MICRO_NET
    net = JointNetwork.build(cfg, 7)
    rng = make_rng(7, 1)
    x = rng.normal(scale=0.1, size=(2, *cfg.image_shape))
    gt = rng.normal(scale=0.5, size=x.shape)
    labels = np.array([0, 2])
    weights = LossWeights()
    pred, f = net.forward(x)
    res = combined_loss(pred, gt, f, labels, net.softmax, net.centers, weights)
    grads = net.backward(res.grad_x, res.grad_pred_hr)
    srnet = {k: v for k, v in net.parameters().items() if k.startswith("srnet")}
    analytic = {k: grads[k].copy() for k in srnet}
    half = LossWeights(weights.alpha, weights.beta1, weights.beta2 / 2)

    def evaluate():
        p, ff = net.forward(x)
        return combined_loss(p, gt, ff, labels, net.softmax, net.centers, half).loss

    def pattern():
        return b"|".join([*net.srnet.patterns(), *net.frnet.patterns()])

    assert check_arrays(evaluate, srnet, analytic, 1e-3, pattern).max_rel_error < 1e-4


def test_corrupted_gradient_is_caught():
    def corrupt(g):
        g["frnet.0.weight"] *= 1.1
    assert check_joint(0, corrupt=corrupt).max_rel_error > 1e-2


def trained_ish(seed=3):
    net = JointNetwork.build(NetConfig(), seed)
    rng = make_rng(seed, 50)
    net.centers.M[...] = rng.normal(size=net.centers.M.shape)
    net.centers.gamma = 0.25
    net.step = 123
    return net


def test_checkpoint_round_trip(tmp_path):
    net = trained_ish()
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(net, a, meta={"mode": "joint"})
    back = load_checkpoint(a)
    save_checkpoint(back, b, meta={"mode": "joint"})
    assert a.read_bytes() == b.read_bytes()
    assert back.step == 123 and back.centers.gamma == 0.25
    for k, v in net.state_tensors().items():
        assert np.array_equal(v, back.state_tensors()[k])
    x = make_rng(0).normal(size=(2, 3, 32, 28))
    assert np.array_equal(net.forward(x)[1], back.forward(x)[1])
    assert read_checkpoint_meta(a)["meta"] == {"mode": "joint"}


def test_truncated_checkpoint_rejected(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(trained_ish(), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-11])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(trained_ish(), path)
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_copy_is_independent():
    net = trained_ish()
    other = net.copy()
    other.parameters()["srnet.0.weight"][...] += 1
    assert not np.array_equal(other.parameters()["srnet.0.weight"], net.parameters()["srnet.0.weight"])
    assert np.array_equal(other.centers.M, net.centers.M)


def test_conv_input_grad_flag():
    conv = Conv2d(1, 1, 3, pad=1, rng=make_rng(0))
    conv.input_grad = False
    y = conv.forward(np.ones((1, 1, 4, 4)))
    assert conv.backward(np.ones_like(y)) is None
