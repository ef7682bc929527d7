import numpy as np
import pytest
import torch
from scipy.signal import convolve2d
from torch import nn

from mmser.base import ConfigError, DenseHead, TrainingError, run_training
from mmser.mocap import ShapeError
from mmser.mocap_net import MoCapClassifier, MoCapNetConfig, SelfAttention, build_model, conv2d, pooled_size

from oracles import conv2d_full_oracle, conv2d_valid_oracle, numeric_grad

TINY = dict(n_filters=4, lstm_units=8, dense_widths=(16, 8), batch_size=4)


def test_conv2d_identity_kernel(rng):
    x = rng.normal(size=(6, 7))
    np.testing.assert_array_equal(conv2d(x, [[1.0]]), x)
    np.testing.assert_array_equal(conv2d(x, [[1.0]], "same"), x)


def test_conv2d_worked_example():
    # the flipped kernel pairs x(0,0) with y(1,1) and x(1,1) with y(0,0)
    np.testing.assert_array_equal(conv2d([[1, 2], [3, 4]], [[1, 0], [0, 1]]), [[5.0]])
    np.testing.assert_array_equal(conv2d([[1, 2], [3, 4]], [[0, 1], [0, 0]]), [[3.0]])


def test_conv2d_matches_double_sum_oracle(rng):
    for _ in range(30):
        h, w = rng.integers(1, 11, 2)
        a, b = rng.integers(1, min(h, 5) + 1), rng.integers(1, min(w, 5) + 1)
        x, k = rng.normal(size=(h, w)), rng.normal(size=(a, b))
        np.testing.assert_allclose(conv2d(x, k, "full"), conv2d_full_oracle(x, k), atol=1e-12)
        np.testing.assert_allclose(conv2d(x, k), conv2d_valid_oracle(x, k), atol=1e-12)


@pytest.mark.parametrize("mode", ["full", "valid", "same"])
def test_conv2d_agrees_with_scipy(mode, rng):
    for _ in range(20):
        x = rng.normal(size=tuple(rng.integers(5, 11, 2)))
        k = rng.normal(size=tuple(rng.integers(1, 6, 2)))
        np.testing.assert_allclose(conv2d(x, k, mode), convolve2d(x, k, mode), atol=1e-12)


def test_conv2d_errors():
    with pytest.raises(ShapeError):
        conv2d(np.zeros((0, 3)), [[1.0]])
    with pytest.raises(ShapeError):
        conv2d(np.ones((3, 3)), np.zeros((0, 0)))
    with pytest.raises(ShapeError):
        conv2d(np.ones((2, 2)), np.ones((3, 3)), "valid")
    with pytest.raises(ValueError):
        conv2d(np.ones((2, 2)), np.ones((1, 1)), "circular")


def test_attention_single_step():
    torch.manual_seed(0)
    att = SelfAttention(6)
    x = torch.randn(1, 6)
    out = att(x)
    assert torch.equal(att.last_weights, torch.ones(1, 1))
    torch.testing.assert_close(out, att.value(x))


def test_attention_rows_are_distributions():
    torch.manual_seed(1)
    att = SelfAttention(8)
    x = torch.randn(3, 5, 8)
    assert att(x).shape == x.shape
    torch.testing.assert_close(att.last_weights.sum(-1), torch.ones(3, 5), atol=1e-6, rtol=0)


def _gradcheck(module, x, rel_tol=1e-3, step=1e-4):
    """Compare autograd against central differences for the input and every parameter."""
    module = module.double()
    x = x.double().requires_grad_(True)
    probe = torch.randn_like(module(x), generator=torch.Generator().manual_seed(7))
    loss = lambda: float((module(x) * probe).sum())  # noqa: E731
    (module(x) * probe).sum().backward()
    tensors = [("input", x)] + list(module.named_parameters())
    for name, t in tensors:
        analytic = t.grad.detach().numpy().copy()
        arr = t.data.numpy()
        with torch.no_grad():
            numeric = numeric_grad(loss, arr, step)
        err = np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), 1e-8)
        assert err < rel_tol, f"{name}: relative error {err:.2e}"


def test_gradients_self_attention():
    torch.manual_seed(2)
    _gradcheck(SelfAttention(4), torch.randn(2, 5, 4))


def test_gradients_dense_head():
    torch.manual_seed(3)
    _gradcheck(DenseHead(6, (5, 4)), torch.randn(3, 6))


def test_gradients_conv_layer():
    torch.manual_seed(4)
    _gradcheck(nn.Conv2d(2, 3, 3, padding="same"), torch.randn(2, 2, 6, 5))


def test_pooled_size():
    assert pooled_size(200, 5) == 7
    assert pooled_size(189, 5) == 6
    assert pooled_size(6, 5) == 1


def test_config_errors():
    with pytest.raises(ConfigError, match="LSTM"):
        MoCapNetConfig(variant="conv", attention=True)
    with pytest.raises(ConfigError):
        MoCapNetConfig(variant="conv_lstm_attn", attention=False)
    with pytest.raises(ConfigError):
        MoCapNetConfig(variant="transformer")
    with pytest.raises(ConfigError):
        MoCapNetConfig(dropout_mode="spatial")


def test_full_size_forward_probabilities():
    clf = MoCapClassifier(n_filters=8, random_state=0).build()
    p = clf.predict_proba(np.random.default_rng(0).normal(size=(2, 200, 189)))
    assert p.shape == (2, 4)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert clf.embedding_dim == 256


def test_layer_stack_per_variant():
    for variant, lstm, att in (("conv", False, False), ("conv_lstm", True, False), ("conv_lstm_attn", True, True)):
        net = build_model(MoCapNetConfig(variant=variant, **{k: v for k, v in TINY.items() if k != "batch_size"}), (200, 18))
        bb = net.backbone
        assert (bb.lstm is not None, bb.attention is not None) == (lstm, att)
        assert sum(isinstance(m, nn.Conv2d) for m in bb.conv) == 5
        assert sum(isinstance(m, nn.MaxPool2d) for m in bb.conv) == 5
        assert len(net.head.hidden) == 2


def test_hand_model1_builds_without_lstm():
    clf = MoCapClassifier(variant="conv", **TINY).build((200, 18))
    assert clf.net_.backbone.lstm is None
    assert clf.decision_function(np.zeros((3, 200, 18))).shape == (3, 4)


def test_same_seed_same_initial_parameters():
    a = MoCapClassifier(**TINY, random_state=5).build()
    b = MoCapClassifier(**TINY, random_state=5).build()
    c = MoCapClassifier(**TINY, random_state=6).build()
    assert a.state_hash() == b.state_hash() != c.state_hash()
    count = lambda m: sum(p.numel() for p in m.net_.parameters())  # noqa: E731
    assert count(a) == count(c)


def test_zero_input_output_reproducible():
    x = np.zeros((1, 200, 189))
    a = MoCapClassifier(**TINY, random_state=1).build().decision_function(x)
    b = MoCapClassifier(**TINY, random_state=1).build().decision_function(x)
    np.testing.assert_array_equal(a, b)


def _tiny_data(n=8, rng=None):
    rng = rng or np.random.default_rng(0)
    X = rng.normal(size=(n, 200, 18)).astype(np.float32)
    y = np.arange(n) % 4
    return X, y


def test_epochs_zero_leaves_weights():
    X, y = _tiny_data()
    built = MoCapClassifier(**TINY, epochs=0).build((200, 18))
    fitted = MoCapClassifier(**TINY, epochs=0).fit(X, y)
    assert built.state_hash() == fitted.state_hash()
    assert not fitted.is_trained_ and fitted.history_ == []


def test_training_is_deterministic():
    X, y = _tiny_data()
    a = MoCapClassifier(**TINY, epochs=3, learning_rate=1e-3).fit(X, y)
    b = MoCapClassifier(**TINY, epochs=3, learning_rate=1e-3).fit(X, y)
    assert a.history_ == b.history_
    assert a.state_hash() == b.state_hash()
    assert len(a.history_) == 3 and a.history_[-1].epoch == 3


def test_batch_order_does_not_change_predictions():
    X, y = _tiny_data(12)
    clf = MoCapClassifier(**TINY, epochs=2, learning_rate=1e-3).fit(X, y)
    perm = np.random.default_rng(3).permutation(12)
    np.testing.assert_allclose(clf.predict_proba(X)[perm], clf.predict_proba(X[perm]), atol=1e-6)


def test_shape_mismatch_errors():
    X, y = _tiny_data()
    clf = MoCapClassifier(**TINY, epochs=1).fit(X, y)
    with pytest.raises(ShapeError):
        clf.predict(np.zeros((1, 200, 189)))
    with pytest.raises(ShapeError, match="200 partitions"):
        MoCapClassifier(**TINY).fit(np.zeros((4, 100, 18)), [0, 1, 2, 3])
    with pytest.raises(ValueError, match="NaN"):
        clf.predict(np.full((1, 200, 18), np.nan))


def test_tie_goes_to_lowest_label():
    clf = MoCapClassifier(**TINY).build((200, 18))
    with torch.no_grad():
        clf.net_.head.out.weight.zero_()
        clf.net_.head.out.bias.zero_()
    p = clf.predict_proba(np.ones((2, 200, 18)))
    np.testing.assert_allclose(p, 0.25)
    assert clf.predict(np.ones((2, 200, 18))).tolist() == [0, 0]


def test_nan_loss_aborts_with_location():
    net = nn.Linear(3, 4)
    data = torch.tensor([[1.0, 2.0, 3.0], [float("nan"), 0.0, 0.0]])
    with pytest.raises(TrainingError, match="epoch 1, batch 1"):
        run_training(net, (data,), torch.tensor([0, 1]), optimizer="adam", learning_rate=1e-3, epochs=2,
                     batch_size=1, seed=0)


def test_sklearn_params_round_trip():
    clf = MoCapClassifier(variant="conv_lstm", n_filters=32)
    params = clf.get_params()
    assert params["variant"] == "conv_lstm" and params["n_filters"] == 32
    from sklearn.base import clone

    assert clone(clf).get_params() == params
