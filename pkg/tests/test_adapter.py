import numpy as np
import pytest

from rfa import numcore as nc
from rfa.adapter import (VAE, LossWeights, RfaInference, RfaModule, distill_infer, erroneous_labels, kl_term,
                         loss_cn, loss_components, loss_cr, loss_fb, loss_tp, loss_ub, rfa_forward,
                         strip_to_inference, triplet)
from rfa.attacks import AttackSpec
from rfa.backbone import SplitNet, load_checkpoint, ref_net_d, save_checkpoint
from rfa.metrics import adapter_outputs, prediction_correlations, robust_accuracy
from rfa.numcore import Rng, Tensor, finite_diff_check
from rfa.trainer import Adam


def narrow_net(seed=2):
    blocks = [{"kind": "dense", "out": w} for w in (8, 7, 6, 5, 3)]
    return SplitNet((6,), blocks, 3, seed=seed)


@pytest.fixture
def small():
    """Tiny backbone, adapter at d=4 and a paired clean / shifted feature batch."""
    net = narrow_net()
    rfa = RfaModule(net, 4, latent_dim=3, hidden=5, seed=1)
    rng = Rng(0, "adapter-small")
    x = rng.uniform(size=(4, 6))
    y = np.array([0, 1, 2, 1])
    z_plus = net.forward_slice(x, 0, 4, track_params=False).data
    z_minus = z_plus + 0.3 * rng.normal(z_plus.shape)
    return net, rfa, x, y, z_plus, z_minus


def fd_param(owner: dict, name: str, loss_fn, tol=1e-6):
    """Finite-difference check of ``loss_fn()`` with respect to owner[name]."""
    orig = owner[name]

    def fn(w):
        owner[name] = w
        return loss_fn()

    try:
        rep = finite_diff_check(fn, orig.data.copy(), h=1e-5, tol=tol)
    finally:
        owner[name] = orig
    return rep


# ---------------------------------------------------------------- forward


def test_forward_shapes_match_input(small):
    _, rfa, _, _, zp, _ = small
    out = rfa_forward(rfa, zp, Rng(0))
    assert out["z_r"].shape == zp.shape and out["z_n"].shape == zp.shape
    assert out["mu_r"].shape == (4, 3) and out["logvar_n"].shape == (4, 3)


def test_forced_low_variance_is_deterministic(small):
    _, rfa, _, _, zp, _ = small
    for vae in (rfa.vae_r, rfa.vae_n):
        vae.params["logvar.weight"] = Tensor(np.zeros_like(vae.params["logvar.weight"].data), requires_grad=True)
        vae.params["logvar.bias"] = Tensor(np.full(3, -40.0), requires_grad=True)
    a = rfa_forward(rfa, zp, Rng(1))["z_r"].data
    b = rfa_forward(rfa, zp, Rng(2))["z_r"].data
    np.testing.assert_allclose(a, b, atol=1e-7)
    m1, m2 = rfa_forward(rfa, zp)["z_n"].data, rfa_forward(rfa, zp)["z_n"].data
    assert np.array_equal(m1, m2)


def test_forward_rejects_wrong_dimension(small):
    _, rfa, *_ = small
    with pytest.raises(nc.ShapeError):
        rfa_forward(rfa, np.zeros((2, 7)))


def test_heads_start_equal_to_backbone_tail(small):
    net, rfa, _, _, zp, _ = small
    ref = net.forward_slice(zp, 4, 5).data
    assert np.array_equal(rfa.head_r(zp).data, ref) and np.array_equal(rfa.head_n(zp).data, ref)


def test_gradients_reach_every_adapter_parameter(small):
    _, rfa, _, y, zp, zm = small
    y_bar = np.array([1, 2, 0, 0])
    comps = loss_components(rfa, zp, zm, y, y_bar, LossWeights(lambda_kl=0.1), Rng(3))
    grads = nc.backward(loss_fb(LossWeights(lambda_kl=0.1), comps))
    for name, p in rfa.named_params().items():
        assert p.node_id in grads, name


@pytest.mark.parametrize("sub,name", [("vae_r", "enc.weight"), ("vae_r", "out.weight"), ("vae_n", "mu.weight"),
                                      ("vae_n", "dec.weight"), ("head_r", "block0.weight"),
                                      ("head_n", "block0.bias")])
def test_fb_loss_finite_differences_per_subnetwork(small, sub, name):
    _, rfa, _, y, zp, zm = small
    y_bar = np.array([1, 2, 0, 0])
    w = LossWeights()
    fn = lambda: loss_fb(w, loss_components(rfa, zp, zm, y, y_bar, w))
    rep = fd_param(getattr(rfa, sub).params, name, fn)
    assert rep.passed, rep.max_rel_err


# ---------------------------------------------------------------- composite losses vs finite differences


def _outs(rfa, zp, zm):
    return rfa_forward(rfa, zp), rfa_forward(rfa, zm)


@pytest.mark.parametrize("which", ["cr", "cn", "tp", "kl"])
def test_loss_terms_finite_differences(small, which):
    _, rfa, _, y, zp, zm = small
    y_bar = np.array([1, 2, 0, 0])

    def fn():
        op, om = _outs(rfa, zp, zm)
        if which == "cr":
            return loss_cr(rfa, op, om, y)
        if which == "cn":
            return loss_cn(rfa, op, om, y, y_bar)
        if which == "tp":
            return loss_tp(op, om, 0.5)
        return kl_term([op, om])

    for sub, name in (("vae_r", "enc.weight"), ("vae_n", "out.bias")):
        if which == "cr" and sub == "vae_n" or which == "cn" and sub == "vae_r":
            continue
        rep = fd_param(getattr(rfa, sub).params, name, fn)
        assert rep.passed, (which, name, rep.max_rel_err)


def test_ub_loss_finite_differences_reach_backbone(small):
    net, rfa, x, y, _, zm = small
    w = LossWeights()

    def fn():
        zp = net.forward_slice(x, 0, 4)
        comps = loss_components(rfa, zp, zm, y, None, w, with_cn=False)
        return loss_ub(w, comps, nc.cross_entropy(net(x), y))

    for owner, name in ((net.params, "block1.weight"), (net.params, "block4.bias"), (rfa.vae_r.params, "mu.bias")):
        rep = fd_param(owner, name, fn)
        assert rep.passed, (name, rep.max_rel_err)


# ---------------------------------------------------------------- triplet


def test_triplet_worked_examples():
    a, p, n = np.array([0.0]), np.array([1.0]), np.array([2.0])
    assert triplet(a, p, n, 1.0).item() == 0.0
    assert triplet(a, p, n, 4.0).item() == 1.0


def test_triplet_identical_positive_and_negative_gives_tau():
    rng = Rng(0, "tp")
    a, p = rng.normal((5, 4)), rng.normal((5, 4))
    assert triplet(a, p, p, 0.7).item() == pytest.approx(0.7, abs=1e-15)


def test_triplet_saturated_when_negative_far():
    a = np.zeros((3, 4))
    assert triplet(a, a, np.ones((3, 4)), 1.0).item() == 0.0


def test_triplet_shape_mismatch():
    with pytest.raises(nc.ShapeError):
        triplet(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 4)), 1.0)


def test_loss_tp_identical_tensors_gives_two_tau():
    z = Tensor(Rng(1).normal((4, 6)))
    out = {"z_r": z, "z_n": z}
    assert loss_tp(out, out, 0.5).item() == pytest.approx(1.0)


def test_loss_tp_far_negatives_and_vanishing_gradient():
    zr = Tensor(np.zeros((3, 4)))
    zn_minus = Tensor(np.full((3, 4), 50.0), requires_grad=True)
    zn_plus = Tensor(np.full((3, 4), 50.0), requires_grad=True)
    val = loss_tp({"z_r": zr, "z_n": zn_plus}, {"z_r": zr, "z_n": zn_minus}, 0.5)
    assert val.item() == 0.0
    grads = nc.backward(nc.add(val, nc.mul(nc.sum(zn_plus), 0.0)))
    assert np.all(grads.get(zn_minus.node_id, np.zeros(1)) == 0)


# ---------------------------------------------------------------- objectives


def test_loss_fb_and_ub_arithmetic():
    w = LossWeights()
    assert loss_fb(w, {"cr": 1.0, "cn": 0.5, "tp": 0.25}).item() == pytest.approx(1.3, abs=1e-15)
    assert loss_ub(w, {"cr": 1.0, "tp": 0.25, "cn": 123.0}, 0.5).item() == pytest.approx(1.4, abs=1e-15)
    assert loss_fb(w, {"cr": 0.0, "cn": 0.0, "tp": 0.0}).item() == 0.0


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(lambda_cn=-0.1)


def test_losses_nonnegative_and_symmetric_when_inputs_equal(small):
    _, rfa, _, y, zp, _ = small
    op, om = _outs(rfa, zp, zp)
    cr = loss_cr(rfa, op, om, y)
    assert cr.item() >= 0
    single = nc.cross_entropy(rfa.head_r(op["z_r"]), y).item()
    assert cr.item() == pytest.approx(2 * single, abs=1e-14)
    assert loss_cn(rfa, op, om, y, (y + 1) % 3).item() >= 0


def test_erroneous_labels_never_equal_truth():
    logits = np.array([[3.0, 1.0, 2.0], [0.0, 5.0, 1.0], [1.0, 1.0, 0.0]])
    y = np.array([0, 2, 0])
    yb = erroneous_labels(logits, y)
    assert yb.tolist() == [2, 1, 1]
    assert np.all(yb != y)


def test_fb_step_leaves_backbone_bitwise(small):
    net, rfa, x, y, _, _ = small
    before = net.checksum()
    w = LossWeights()
    zp = net.forward_slice(x, 0, 4, track_params=False)
    zm = Tensor(zp.data + 0.1)
    comps = loss_components(rfa, zp, zm, y, np.array([1, 2, 0, 0]), w)
    grads = nc.backward(loss_fb(w, comps))
    Adam(rfa.param_list()).step(grads)
    Adam(net.param_list()).step(grads)
    assert net.checksum() == before


def test_ub_step_changes_both_parameter_sets(small):
    net, rfa, x, y, _, _ = small
    nb, na = net.checksum(), rfa.checksum()
    w = LossWeights()
    zp = net.forward_slice(x, 0, 4)
    zm = net.forward_slice(np.clip(x + 0.05, 0, 1), 0, 4)
    comps = loss_components(rfa, zp, zm, y, None, w, with_cn=False)
    grads = nc.backward(loss_ub(w, comps, nc.cross_entropy(net(x), y)))
    Adam(rfa.param_list()).step(grads)
    Adam(net.param_list()).step(grads)
    assert net.checksum() != nb and rfa.checksum() != na


# ---------------------------------------------------------------- inference module


def test_strip_keeps_vae_r_only(small):
    net, rfa, x, *_ = small
    inf = strip_to_inference(rfa)
    assert isinstance(inf, RfaInference)
    assert inf.num_params() < rfa.num_params()
    assert np.array_equal(distill_infer(inf, net, x)["y_hat_R"], distill_infer(rfa, net, x)["y_hat_R"])


def test_stripped_module_checkpoint_round_trip(tmp_path, small):
    net, rfa, x, *_ = small
    inf = strip_to_inference(rfa)
    save_checkpoint(inf, tmp_path / "a.rfa")
    back = load_checkpoint(tmp_path / "a.rfa")
    save_checkpoint(back, tmp_path / "b.rfa")
    assert (tmp_path / "a.rfa").read_bytes() == (tmp_path / "b.rfa").read_bytes()
    assert np.array_equal(distill_infer(back, net, x)["y_hat_R"], distill_infer(inf, net, x)["y_hat_R"])


def test_full_module_checkpoint_round_trip(tmp_path, small):
    net, rfa, x, *_ = small
    save_checkpoint(rfa, tmp_path / "a.rfa")
    back = load_checkpoint(tmp_path / "a.rfa")
    save_checkpoint(back, tmp_path / "b.rfa")
    assert (tmp_path / "a.rfa").read_bytes() == (tmp_path / "b.rfa").read_bytes()
    assert back.checksum() == rfa.checksum()


def test_distill_infer_rows_and_determinism(small):
    net, rfa, x, *_ = small
    a, b = distill_infer(rfa, net, x), distill_infer(rfa, net, x)
    assert np.array_equal(a["y_hat_R"], b["y_hat_R"])
    np.testing.assert_allclose(a["y_hat"].sum(axis=1), 1, atol=1e-12)
    np.testing.assert_allclose(a["y_hat_R"].sum(axis=1), 1, atol=1e-12)
    np.testing.assert_array_equal(a["y_hat"], nc.softmax_np(net(x).data))


def test_identity_vae_passes_features_through(small):
    net, _, x, *_ = small
    rfa = RfaModule(net, 4, identity_init=True)
    out = distill_infer(rfa, net, x)
    np.testing.assert_allclose(out["y_hat_R"], out["y_hat"], atol=1e-12)
    assert VAE.identity(4).feature_dim == 4


def test_distill_infer_split_mismatch(small):
    net, rfa, *_ = small
    with pytest.raises(ValueError):
        distill_infer(RfaModule(ref_net_d(6, 3), 3), net, np.zeros((1, 6)))
    assert distill_infer(rfa, narrow_net(seed=5), np.zeros((1, 6)))["y_hat"].shape == (1, 3)


def test_adapter_site_range():
    with pytest.raises(IndexError):
        RfaModule(ref_net_d(6, 3), 5)


# ---------------------------------------------------------------- trained adapter behaviour


def test_trained_adapter_keeps_clean_accuracy(split_fb, split_backbone, split_data):
    rfa, _ = split_fb
    _, test = split_data
    acc = robust_accuracy(split_backbone, None, test, rfa)
    assert acc >= 0.9


def test_trained_head_n_tracks_backbone_under_attack(split_fb, split_backbone, split_data):
    rfa, _ = split_fb
    _, test = split_data
    corr = prediction_correlations(split_backbone, rfa, test.subset(np.arange(200)), AttackSpec(space="input"))
    assert corr["cos(y_N-, y_D-)"] >= 0.6
    assert corr["cos(y_R-, y_N-)"] < corr["cos(y_R-, y_D+)"]


def test_trained_head_r_recovers_labels_backbone_loses(split_fb, split_backbone, split_data):
    rfa, _ = split_fb
    _, test = split_data
    sub = test.subset(np.arange(200))
    from rfa.attacks import run_attack
    x_adv = run_attack(split_backbone, sub.images, sub.labels, AttackSpec(space="input"), Rng(0))
    out = adapter_outputs(split_backbone, rfa, x_adv)
    acc_r = np.mean(np.argmax(out["p_r"], 1) == sub.labels)
    acc_d = np.mean(np.argmax(out["p_d"], 1) == sub.labels)
    assert acc_r > acc_d
