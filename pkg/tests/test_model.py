import numpy as np
import pytest

from birads_mtl import gradcheck as gc
from birads_mtl.errors import InvalidInputError
from birads_mtl.losses import LossHyper
from birads_mtl.model import (MAGIC, Checkpoint, NetConfig, ToyNet, from_bytes,
                              load_checkpoint, parameter_gradients, to_bytes)


def batch(rng, n=3, size=16):
    images = rng.uniform(size=(n, size, size))
    masks = np.zeros((n, size, size))
    masks[0, 4:10, 5:11] = 1
    if n > 1:
        masks[1, 2:6, 2:6] = 1
    return images, masks, np.array([1.0, 0.0, 0.0][:n])


def primed(config=NetConfig(), seed=0):
    ckpt = Checkpoint.fresh(config, seed=seed)
    ckpt.norm_r.update([2.0, 40.0])
    ckpt.norm_t.update([0.0, 0.05])
    return ckpt


def test_zero_final_layers():
    net = ToyNet(NetConfig(zero_final=True), seed=1)
    net.params["cls.b"].data[...] = 0.25
    seg, cls = net.forward(np.random.default_rng(0).uniform(size=(2, 16, 16)))
    assert np.all(seg.data == 0) and np.all(cls.data == 0.25)


def test_shapes_and_determinism(rng):
    net = ToyNet(seed=3)
    x = rng.uniform(size=(2, 64, 64))
    s1, m1 = net.forward(x)
    s2, m2 = ToyNet(seed=3).forward(x)
    assert s1.shape == (2, 64, 64) and m1.shape == (2,)
    assert s1.data.tobytes() == s2.data.tobytes() and m1.data.tobytes() == m2.data.tobytes()


def test_single_image_forward(rng):
    seg, cls = ToyNet().forward(rng.uniform(size=(8, 16)))
    assert seg.shape == (1, 8, 16) and cls.shape == (1,)


@pytest.mark.parametrize("shape", [(1, 12, 16), (1, 16, 20)])
def test_indivisible_dimensions(shape):
    with pytest.raises(InvalidInputError):
        ToyNet().forward(np.zeros(shape))


def test_three_channel_encoder(rng):
    net = ToyNet(NetConfig(in_channels=3), seed=0)
    assert net.params["enc1.w"].shape[1] == 3
    assert net.forward(rng.uniform(size=(1, 8, 8)))[0].shape == (1, 8, 8)


def test_float32_mode(rng):
    net = ToyNet(NetConfig(dtype="float32"))
    seg, cls = net.forward(rng.uniform(size=(1, 8, 8)))
    assert seg.data.dtype == np.float32 and cls.data.dtype == np.float32


def test_alpha_zero_u_gradient(rng):
    ckpt = primed()
    ckpt.prior.u.data[:] = rng.normal(size=4)
    hyper = LossHyper(alpha=0.0)
    _, grads = parameter_gradients(ckpt, *batch(rng), hyper)
    np.testing.assert_allclose(grads["prior.u"], 2 * hyper.beta * ckpt.prior.u.data, rtol=1e-15)


def test_classifier_head_idle_without_cls_terms(rng):
    _, grads = parameter_gradients(primed(), *batch(rng), LossHyper(w_cls=0.0, alpha=0.0))
    assert np.all(grads["cls.w"] == 0) and np.all(grads["cls.b"] == 0)


def test_consistency_path_reaches_decoder(rng):
    hyper = LossHyper(w_seg=0.0, w_cls=0.0, lambda_nt=0.0, beta=0.0, alpha=1.0)
    _, grads = parameter_gradients(primed(), *batch(rng), hyper, consistency_grad="prior")
    assert np.linalg.norm(grads["dec1.w"]) > 0 and np.linalg.norm(grads["head.w"]) > 0


def test_tiny_network_finite_differences():
    net = ToyNet(NetConfig(widths=(2, 4, 4)))
    assert net.num_parameters() <= 2000
    for seed in range(2):
        rep = gc.network_check(seed=seed, probes=20)
        assert rep.passed(1e-4, 1e-7), rep


def test_checkpoint_round_trip(tmp_path, rng):
    ckpt = primed(seed=5)
    ckpt.step, ckpt.meta = 17, {"alpha": 0.2, "mode": "proposed"}
    ckpt.prior.u.data[:] = rng.normal(size=4)
    path = tmp_path / "c.bin"
    ckpt.save(path)
    back = load_checkpoint(path)
    assert path.read_bytes()[:8] == MAGIC
    assert to_bytes(back) == path.read_bytes()
    assert back.step == 17 and back.meta == ckpt.meta
    assert back.norm_r == ckpt.norm_r and back.norm_t == ckpt.norm_t
    x, m, y = batch(rng)
    a = ckpt.objective(x, m, y, LossHyper())
    b = back.objective(x, m, y, LossHyper())
    assert a.breakdown.total == b.breakdown.total
    assert a.soft_mask.tobytes() == b.soft_mask.tobytes()


def test_float32_checkpoint_keeps_dtype():
    back = from_bytes(to_bytes(primed(NetConfig(dtype="float32"))))
    assert back.net.params["enc1.w"].data.dtype == np.float32


def test_scalar_parameter_keeps_shape():
    back = from_bytes(to_bytes(primed()))
    assert back.net.params["cls.b"].shape == ()


@pytest.mark.parametrize("blob", [b"", b"NOTACKPT" + bytes(8), None])
def test_corrupt_checkpoint(blob):
    if blob is None:
        blob = to_bytes(primed())[:-20]
    with pytest.raises(InvalidInputError):
        from_bytes(blob)


def test_missing_checkpoint_names_path(tmp_path):
    with pytest.raises(OSError, match="gone.bin"):
        load_checkpoint(tmp_path / "gone.bin")


def test_eval_objective_leaves_ema_untouched(rng):
    ckpt = primed()
    before = (ckpt.norm_r.state(), ckpt.norm_t.state())
    ckpt.objective(*batch(rng), LossHyper(), training=False)
    assert before == (ckpt.norm_r.state(), ckpt.norm_t.state())
    ckpt.objective(*batch(rng), LossHyper(), training=True)
    assert before != (ckpt.norm_r.state(), ckpt.norm_t.state())
