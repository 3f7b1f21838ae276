import numpy as np
import pytest

from osfi.encoder import (LR_BY_MODE, EncoderConfig, MLPEncoder, TrainConfig, backward,
                          checkpoint_bytes, checkpoint_from_bytes, embed, finetune, forward,
                          load_checkpoint, parameter_report, save_checkpoint, set_finetune_mode)
from osfi.errors import ConfigurationError, NumericalError, ProtocolError
from osfi.head import init_random, init_weight_imprint

from gradcheck import SMALL, encoder_errors, make_encoder

TOL = 1e-4


@pytest.mark.parametrize("loss", ["cosface", "softmax"])
def test_gradients_match_finite_differences(rng, loss):
    errors = encoder_errors(rng, loss)
    assert max(errors.values()) < TOL, errors


def test_adapter_gradients_match_finite_differences(rng):
    errors = encoder_errors(rng, adapter=True)
    assert any(".adapter." in k for k in errors)
    assert max(errors.values()) < TOL, errors


def test_bias_before_batchnorm_has_zero_gradient(rng):
    enc = make_encoder(rng)
    emb, cache = forward(enc, rng.normal(size=(8, SMALL.input_dim)), training=True)
    grads = backward(enc, cache, rng.normal(size=emb.shape))
    for i in range(len(enc.blocks)):
        assert np.abs(grads[f"blocks.{i}.linear.bias"]).max() < 1e-12


def test_zero_upstream_gives_zero_gradients(rng):
    enc = make_encoder(rng, adapter=True)
    emb, cache = forward(enc, rng.normal(size=(8, SMALL.input_dim)), training=True)
    for g in backward(enc, cache, np.zeros_like(emb), respect_mode=False).values():
        assert not g.any()


def test_backward_contract_errors(rng):
    enc = make_encoder(rng)
    x = rng.normal(size=(8, SMALL.input_dim))
    emb, cache = forward(enc, x, training=True)
    with pytest.raises(ProtocolError):
        backward(enc, cache, np.zeros((7, SMALL.output_dim)))
    _, eval_cache = forward(enc, x)
    with pytest.raises(ProtocolError):
        backward(enc, eval_cache, np.zeros_like(emb))


def test_forward_errors(rng):
    enc = make_encoder(rng)
    with pytest.raises(ProtocolError):
        forward(enc, rng.normal(size=(1, SMALL.input_dim)), training=True)
    with pytest.raises(ProtocolError):
        forward(enc, rng.normal(size=(4, SMALL.input_dim + 1)))
    x = rng.normal(size=(4, SMALL.input_dim))
    x[0, 0] = np.inf
    with pytest.raises(NumericalError):
        forward(enc, x)


def test_zero_variance_batch_normalizes_to_beta(rng):
    enc = MLPEncoder.create(SMALL)
    x = np.tile(rng.normal(size=SMALL.input_dim), (4, 1))
    _, cache = forward(enc, x, training=True)
    h_in, _, z_hat, _, y = cache.layers[0]
    np.testing.assert_array_equal(z_hat, 0.0)
    np.testing.assert_array_equal(y, 0.0)


def test_eval_forward_is_deterministic(rng):
    enc = make_encoder(rng)
    x = rng.normal(size=(5, SMALL.input_dim))
    np.testing.assert_array_equal(forward(enc, x)[0], forward(enc, x)[0])


def test_zero_adapter_is_output_neutral(rng):
    enc = MLPEncoder.create(SMALL)
    x = rng.normal(size=(6, SMALL.input_dim))
    before = forward(enc, x)[0]
    set_finetune_mode(enc, "adapter")
    assert all(b.adapter.enabled for b in enc.blocks)
    np.testing.assert_array_equal(forward(enc, x)[0], before)


def test_momentum_one_keeps_last_batch_statistics(rng):
    enc = MLPEncoder.create(SMALL)
    for blk in enc.blocks:
        blk.bn.momentum = 1.0
    data = rng.normal(size=(24, SMALL.input_dim))
    for batch in np.split(data, 3):
        _, cache = forward(enc, batch, training=True)
    h_in = cache.layers[0][0]
    z = h_in @ enc.blocks[0].linear.weight.T + enc.blocks[0].linear.bias
    np.testing.assert_allclose(enc.blocks[0].bn.running_mean, z.mean(0), atol=1e-6)
    np.testing.assert_allclose(enc.blocks[0].bn.running_var, z.var(0), atol=1e-6)
    # eval mode on the last batch now reproduces the training-mode output
    np.testing.assert_allclose(forward(enc, batch)[0], forward(enc.copy(), batch, training=True)[0],
                               atol=1e-6)


def test_parameter_counts_per_mode():
    enc = MLPEncoder.create(EncoderConfig())
    full = set_finetune_mode(enc, "full")
    assert full["trainable"] == full["total"] == 64 * 128 + 128 + 3 * (128 * 128 + 128) + 4 * 256 + 128 * 32 + 32
    bn = set_finetune_mode(enc, "bn_only")["trainable"]
    assert bn == sum(2 * b.bn.gamma.size for b in enc.blocks) == 1024
    adapter = set_finetune_mode(enc, "adapter")["trainable"]
    assert adapter == sum(b.adapter.up.size + b.adapter.down.size for b in enc.blocks)
    assert adapter == 16 * (128 + 64) + 3 * 16 * (128 + 128)
    partial = set_finetune_mode(enc, "partial")["trainable"]
    assert partial == 2 * (128 * 128 + 128 + 256) + 128 * 32 + 32
    assert 10 * bn < adapter < partial < full["trainable"]


def test_unknown_mode_rejected():
    with pytest.raises(ConfigurationError):
        set_finetune_mode(MLPEncoder.create(SMALL), "bn")


def gallery(rng, C=6, m=3):
    centers = rng.normal(size=(C, SMALL.input_dim)) * 2
    x = np.repeat(centers, m, axis=0) + 0.3 * rng.normal(size=(C * m, SMALL.input_dim))
    return x, np.repeat(np.arange(C), m)


@pytest.mark.parametrize("mode", ["full", "partial", "adapter", "bn_only"])
def test_frozen_parameters_stay_bit_identical(rng, mode):
    enc = MLPEncoder.create(SMALL)
    x, y = gallery(rng)
    clf = init_random(6, SMALL.output_dim, 0)
    set_finetune_mode(enc, mode)
    before = enc.state_dict()
    finetune(enc, clf, x, y, TrainConfig(epochs=3, batch_size=8))
    after = enc.state_dict()
    for name in enc.parameters():
        changed = not np.array_equal(before[name], after[name])
        if name in enc.trainable:
            assert changed or name.endswith("linear.bias"), name
        else:
            assert not changed, name


def test_bn_only_updates_running_stats(rng):
    enc = MLPEncoder.create(SMALL)
    x, y = gallery(rng)
    before = enc.state_dict()
    finetune(enc, init_random(6, SMALL.output_dim, 0), x, y, TrainConfig(epochs=1), mode="bn_only")
    assert not np.array_equal(before["blocks.0.bn.running_mean"], enc.blocks[0].bn.running_mean)


def test_zero_epochs_changes_nothing(rng):
    enc = MLPEncoder.create(SMALL)
    x, y = gallery(rng)
    clf = init_random(6, SMALL.output_dim, 0)
    w0, before = clf.weight.copy(), enc.state_dict()
    res = finetune(enc, clf, x, y, TrainConfig(epochs=0), mode="full")
    assert res.steps == 0 and res.losses == []
    np.testing.assert_array_equal(clf.weight, w0)
    for k, v in enc.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_fixed_seed_reproduces_loss_trajectory(rng):
    x, y = gallery(rng)
    runs = []
    for _ in range(2):
        enc = MLPEncoder.create(SMALL)
        runs.append(finetune(enc, init_random(6, SMALL.output_dim, 0), x, y,
                             TrainConfig(epochs=4, batch_size=8, input_jitter=0.1), mode="full").losses)
    assert runs[0] == runs[1]


def test_bn_only_loss_decreases_over_first_epochs():
    from osfi.protocol import SyntheticConfig, generate_synthetic, make_split
    _, ev = generate_synthetic(SyntheticConfig(num_pretrain_ids=2, pretrain_samples_per_id=2))
    split = make_split(ev, 3, 0)
    enc = MLPEncoder.create(EncoderConfig())
    clf = init_weight_imprint(embed(enc, split.gallery.x), split.gallery.labels)
    # one full batch per epoch, so the per-epoch loss is not mini-batch noise
    cfg = TrainConfig(epochs=5, batch_size=len(split.gallery))
    res = finetune(enc, clf, split.gallery.x, split.gallery.labels, cfg, mode="bn_only")
    assert all(b < a for a, b in zip(res.losses, res.losses[1:]))


def test_finetune_rejects_empty_gallery():
    enc = MLPEncoder.create(SMALL)
    with pytest.raises(ProtocolError):
        finetune(enc, init_random(1, SMALL.output_dim, 0), np.empty((0, SMALL.input_dim)), [], TrainConfig())


def test_default_learning_rates():
    assert TrainConfig().lr_for("full") == LR_BY_MODE["adapter"] == 1e-4
    assert TrainConfig().lr_for("bn_only") == LR_BY_MODE["partial"] == 1e-3
    assert TrainConfig(learning_rate=0.5).lr_for("full") == 0.5
    assert (TrainConfig().epochs, TrainConfig().batch_size) == (20, 128)


def test_checkpoint_round_trip(tmp_path, rng):
    enc = make_encoder(rng, adapter=True)
    clf = init_random(4, SMALL.output_dim, 1, labels=[3, 5, 7, 9])
    sha = save_checkpoint(tmp_path / "enc.ckpt", enc, clf)
    loaded, clf2, sha2 = load_checkpoint(tmp_path / "enc.ckpt")
    assert sha == sha2 and loaded.mode == "adapter"
    assert checkpoint_bytes(loaded, clf2) == checkpoint_bytes(enc, clf)
    x = rng.normal(size=(5, SMALL.input_dim))
    np.testing.assert_array_equal(forward(loaded, x)[0], forward(enc, x)[0])
    np.testing.assert_array_equal(clf2.labels, [3, 5, 7, 9])
    assert (tmp_path / "enc.ckpt").read_bytes()[:5] == b"OSFI1"


def test_checkpoint_rejects_garbage():
    with pytest.raises(ProtocolError):
        checkpoint_from_bytes(b"NOPE!" + bytes(8))
    data = checkpoint_bytes(MLPEncoder.create(SMALL))
    with pytest.raises(ProtocolError):
        checkpoint_from_bytes(data[:-3])
    with pytest.raises(ProtocolError):
        checkpoint_from_bytes(data + b"\0")


def test_parameter_report_excludes_adapters_from_total():
    enc = MLPEncoder.create(SMALL)
    rep = parameter_report(enc)
    assert rep["adapter_added"] == sum(b.adapter.up.size + b.adapter.down.size for b in enc.blocks)
