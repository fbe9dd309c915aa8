import numpy as np
import pytest

import nodulemtl.model as model
from conftest import KinkProbe, sampled_gradient_check
from nodulemtl.errors import ConfigError, FormatError, ShapeError
from nodulemtl.losses import MultiTaskLossConfig, cross_entropy_class, cross_entropy_voxel, multi_task_loss
from nodulemtl.model import (
    NetworkConfig,
    build_network,
    expected_parameter_count,
    forward,
    load_weights,
    predict,
    predict_batch,
    save_weights,
)
from nodulemtl.tensor import Tensor, backward, concat

TINY = dict(input_shape=(2, 8, 8), channels_per_stage=(2,) * 14, pool_positions=(2, 4),
            upsample_positions=(8, 10), fc_hidden=4)


def tiny(**kw) -> NetworkConfig:
    return NetworkConfig(**{**TINY, **kw})


def conv_block(cin, cout, bn=True):
    return 27 * cin * cout + cout + (2 * cout if bn else 0)


def test_nineteen_layers():
    names = build_network(tiny()).layer_names()
    assert len(names) == 19
    assert sum(n.startswith("trunk") for n in names) == 14
    assert names[-1] == "cls:fc2-softmax"


def test_parameter_count_default_layout():
    cfg = NetworkConfig(fc_hidden=16)  # full channel widths, small fc to keep the build quick
    ch = cfg.channels_per_stage
    trunk = conv_block(1, ch[0]) + sum(conv_block(a, b) for a, b in zip(ch, ch[1:]))
    flat = 1 * 8 * 32 * 32
    heads = conv_block(16, 1, bn=False) + conv_block(16, 1) + flat * 16 + 16 + 16 * 2 + 2
    assert expected_parameter_count(cfg) == trunk + heads
    assert build_network(cfg).num_parameters() == trunk + heads


@pytest.mark.parametrize("layout", [((2, 4, 6), (8, 10, 12)), ((2, 5), (4, 8)), ((1,), (14,))])
@pytest.mark.parametrize("skips", [False, True])
def test_parameter_count_matches_build(layout, skips):
    cfg = NetworkConfig(input_shape=(2, 8, 8), channels_per_stage=tuple(range(1, 15)),
                        pool_positions=layout[0], upsample_positions=layout[1], fc_hidden=3, skips=skips)
    assert build_network(cfg).num_parameters() == expected_parameter_count(cfg)


def test_skip_widths():
    # layer 9 reads upsampled layer 8 (2 ch) joined with the pre-pool map of layer 4 (2 ch)
    net = build_network(tiny(skips=True, channels_per_stage=(2,) * 14))
    assert net.trunk[8].weight.shape[1] == 4
    assert net.trunk[10].weight.shape[1] == 4
    assert net.trunk[9].weight.shape[1] == 2


@pytest.mark.parametrize("kwargs", [
    dict(channels_per_stage=(2,) * 13),
    dict(upsample_positions=(8,)),
    dict(pool_positions=(9, 10), upsample_positions=(2, 11)),
    dict(input_shape=(2, 6, 8)),
    dict(dtype="float16"),
])
def test_config_errors(kwargs):
    with pytest.raises(ConfigError):
        tiny(**kwargs)


def test_output_shapes_and_ranges(rng):
    net = build_network(tiny())
    cls, seg = forward(net, rng.uniform(size=(3, 1, 2, 8, 8)))
    assert cls.shape == (3, 2) and seg.shape == (3, 1, 2, 8, 8)
    np.testing.assert_allclose(cls.data.sum(axis=1), 1.0)
    assert ((seg.data > 0) & (seg.data < 1)).all()
    with pytest.raises(ShapeError):
        forward(net, np.zeros((3, 1, 2, 8, 4)))


def test_build_is_deterministic():
    a, b = build_network(tiny(seed=7)), build_network(tiny(seed=7))
    c = build_network(tiny(seed=8))
    for (na, ta), (_, tb), (_, tc) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        np.testing.assert_array_equal(ta.data, tb.data, err_msg=na)
    assert any(not np.array_equal(ta.data, tc.data) for ta, tc in zip(a.parameters(), c.parameters()))


@pytest.mark.parametrize("zeroed,kept", [("seg", 0), ("cls", 1)])
def test_heads_are_independent(rng, zeroed, kept):
    net = build_network(tiny()).eval()
    x = rng.uniform(size=(2, 1, 2, 8, 8))
    before = forward(net, x)[kept].data.copy()
    for p in net.head_parameters(zeroed):
        p.data[...] = 0.0
    np.testing.assert_array_equal(forward(net, x)[kept].data, before)


def _loss_parts(net, x, labels, masks):
    cls, seg = forward(net, x)
    return cross_entropy_class(cls, labels), cross_entropy_voxel(seg, masks)


def _grads(net, loss):
    for p in net.parameters():
        p.grad = None
    backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in net.parameters()]


def test_gradients_are_additive(rng):
    net = build_network(tiny()).eval()
    x = rng.uniform(size=(2, 1, 2, 8, 8))
    labels, masks = [0, 1], (rng.uniform(size=(2, 1, 2, 8, 8)) > 0.7).astype(float)
    g_cls = _grads(net, _loss_parts(net, x, labels, masks)[0])
    g_seg = _grads(net, _loss_parts(net, x, labels, masks)[1])
    l_cls, l_seg = _loss_parts(net, x, labels, masks)
    g_sum = _grads(net, multi_task_loss(l_cls, l_seg, [], MultiTaskLossConfig()))
    for a, b, s in zip(g_cls, g_seg, g_sum):
        assert np.abs(a + b - s).max() < 1e-10
    # the segmentation loss never reaches the classifier head, and vice versa
    names = [n for n, _ in net.named_parameters()]
    for n, g in zip(names, g_seg):
        if n.startswith("cls_"):
            assert not g.any(), n
    for n, g in zip(names, g_cls):
        if n.startswith("seg_"):
            assert not g.any(), n


def test_end_to_end_gradient_check(rng, monkeypatch):
    cfg = tiny(channels_per_stage=(2, 2, 3, 3, 3, 3, 3, 3, 3, 3, 3, 2, 2, 2), fc_hidden=5)
    net = build_network(cfg).eval()
    x = rng.uniform(size=(2, 1, 2, 8, 8))
    labels, masks = [1, 0], (rng.uniform(size=(2, 1, 2, 8, 8)) > 0.7).astype(float)
    loss_cfg = MultiTaskLossConfig(lam=1e-3)
    params = net.parameters()

    def f():
        l_cls, l_seg = _loss_parts(net, x, labels, masks)
        return multi_task_loss(l_cls, l_seg, params, loss_cfg)

    analytic = _grads(net, f())
    worst, checked, skipped = sampled_gradient_check(f, params, analytic, KinkProbe(monkeypatch), rng)
    assert checked == 20 and skipped < 20
    assert worst < 1e-4


def test_concat_gradient(rng):
    a = Tensor(rng.normal(size=(1, 2, 1, 2, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=(1, 3, 1, 2, 2)), requires_grad=True)
    w = rng.normal(size=(1, 5, 1, 2, 2))
    out = concat([a, b])
    assert out.shape == (1, 5, 1, 2, 2)
    backward((out * w).sum())
    np.testing.assert_array_equal(a.grad, w[:, :2])
    np.testing.assert_array_equal(b.grad, w[:, 2:])
    with pytest.raises(ShapeError):
        concat([a, Tensor(np.zeros((1, 2, 1, 2, 4)))])


class TestWeights:
    def test_round_trip(self, tmp_path, rng):
        cfg = tiny(skips=True)
        net = build_network(cfg)
        forward(net, rng.uniform(size=(2, 1, 2, 8, 8)))  # moves the BN running stats
        save_weights(net, tmp_path / "a.ndlw")
        back = load_weights(tmp_path / "a.ndlw", cfg)
        for (n, a), (_, b) in zip(model._state_arrays(net), model._state_arrays(back)):
            np.testing.assert_array_equal(a, b, err_msg=n)
        save_weights(back, tmp_path / "b.ndlw")
        assert (tmp_path / "a.ndlw").read_bytes() == (tmp_path / "b.ndlw").read_bytes()
        x = rng.uniform(size=(2, 2, 8, 8))
        for p, q in zip(predict_batch(net, x), predict_batch(back, x)):
            np.testing.assert_array_equal(p, q)

    def test_mismatched_config_names_both_signatures(self, tmp_path):
        save_weights(build_network(tiny()), tmp_path / "w.ndlw")
        with pytest.raises(FormatError) as err:
            load_weights(tmp_path / "w.ndlw", tiny(fc_hidden=6))
        msg = str(err.value)
        assert '"fc_hidden": 4' in msg and '"fc_hidden": 6' in msg

    def test_corruption_is_detected(self, tmp_path):
        path = tmp_path / "w.ndlw"
        save_weights(build_network(tiny()), path)
        blob = bytearray(path.read_bytes())
        blob[-40] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="checksum"):
            load_weights(path, tiny())
        path.write_bytes(b"XXXX" + bytes(blob[4:]))
        with pytest.raises(FormatError, match="magic"):
            load_weights(path, tiny())

    def test_seed_does_not_change_layout(self, tmp_path):
        save_weights(build_network(tiny(seed=1)), tmp_path / "w.ndlw")
        load_weights(tmp_path / "w.ndlw", tiny(seed=2))


def test_predict_threshold_is_inclusive(monkeypatch):
    net = build_network(tiny())
    seg = np.full((1, 1, 2, 8, 8), 0.2)
    seg[0, 0, 0, 0, :3] = [0.5, 0.4999999, 0.9]
    monkeypatch.setattr(model, "predict_batch", lambda n, p: (np.array([[0.3, 0.7]]), seg))
    prob, mask = predict(net, np.zeros((2, 8, 8)))
    assert prob == 0.7
    assert mask[0, 0, :3].tolist() == [1, 0, 1] and mask.sum() == 2
    with pytest.raises(ConfigError):
        predict(net, np.zeros((2, 8, 8)), seg_threshold=1.0)


def test_float32_network(rng):
    net = build_network(tiny(dtype="float32"))
    cls, seg = forward(net, rng.uniform(size=(1, 1, 2, 8, 8)))
    assert cls.data.dtype == np.float32 and seg.data.dtype == np.float32
