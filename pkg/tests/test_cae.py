import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusvdd.cae import CaeConfig, CaeModel, PretrainConfig, cae_forward, minibatches, pretrain, reconstruction_loss
from fusvdd.tensor import NumericError, ShapeError, Tensor


def _model(size=(8, 8), c=2, widths=(4, 8), seed=0, **kw) -> CaeModel:
    return CaeModel(CaeConfig(c, size, widths, **kw), np.random.default_rng(seed), np.float64)


def test_cae_is_symmetric_and_bias_free():
    m = CaeModel(CaeConfig(3, (8, 8)), np.random.default_rng(0))
    enc = [b.conv.weight.shape for b in m.encoder.blocks]
    dec = [b.conv.weight.shape for b in m.decoder]
    assert enc == [(16, 3, 3, 3), (32, 16, 3, 3), (32, 32, 3, 3), (64, 32, 3, 3)]
    assert dec == enc[::-1]  # transposed kernels are stored [in, out, k, k]
    assert all(b.conv.bias is None and b.bn.beta is None for b in m.blocks)
    assert m.config.embedding_shape == (64, 1, 1)


@pytest.mark.parametrize("size", [(8, 8), (16, 16), (13, 17)])
def test_reconstruction_shape(size, rng):
    x = rng.standard_normal((2, 2) + size)
    recon, emb = cae_forward(x, _model(size))
    assert recon.shape == x.shape
    assert emb.shape == (2,) + _model(size).config.embedding_shape


@pytest.mark.parametrize("training", [True, False])
def test_zero_input_propagates(training):
    m = _model()
    m.set_training(training)
    recon, emb = cae_forward(np.zeros((3, 2, 8, 8)), m)
    assert not recon.data.any() and not emb.data.any()


def test_identity_layers_reconstruct_nonnegative_input(rng):
    m = _model((6, 6), c=3, widths=(3, 3, 3, 3), downsample=False)
    m.set_training(False)
    for b in m.blocks:
        w = np.zeros_like(b.conv.weight.data)
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        b.conv.weight.data = w
        b.bn.eps = 0.0
    x = np.maximum(rng.standard_normal((2, 3, 6, 6)), 0)
    recon, _ = cae_forward(x, m)
    assert np.array_equal(recon.data, x)


def test_shape_mismatch_rejected(rng):
    with pytest.raises(ShapeError):
        cae_forward(rng.standard_normal((1, 3, 8, 8)), _model())
    with pytest.raises(ShapeError):
        cae_forward(rng.standard_normal((1, 2, 8, 7)), _model())


def test_encoder_path_is_single_source_of_truth(rng):
    m = _model()
    m.set_training(False)
    x = rng.standard_normal((3, 2, 8, 8))
    _, emb = cae_forward(x, m)
    assert np.array_equal(m.encoder(Tensor(x)).data, emb.data)


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=20)
def test_reconstruction_loss_definition(seed):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal((3, 2, 4, 4)), r.standard_normal((3, 2, 4, 4))
    loss = float(reconstruction_loss(Tensor(y), Tensor(x)).data)
    assert loss >= 0
    assert loss == pytest.approx(np.sum((y - x) ** 2) / 3, rel=1e-12)
    assert float(reconstruction_loss(Tensor(x), Tensor(x)).data) == 0.0


def test_minibatches_merge_trailing_singleton():
    batches = minibatches(np.arange(9), 4)
    assert [len(b) for b in batches] == [4, 5]
    assert np.array_equal(np.concatenate(batches), np.arange(9))
    assert [len(b) for b in minibatches(np.arange(10), 4)] == [4, 4, 2]
    assert [len(b) for b in minibatches(np.arange(1), 4)] == [1]


def test_pretrain_zero_dataset_is_fixed_point():
    history = pretrain(np.zeros((12, 2, 8, 8)), PretrainConfig(epochs=3, batch_size=4), _model())
    assert history == [0.0, 0.0, 0.0]


def test_pretrain_determinism_and_progress(rng):
    data = np.abs(rng.standard_normal((24, 2, 8, 8)))
    cfg = PretrainConfig(epochs=8, batch_size=8, seed=3)
    h1 = pretrain(data, cfg, _model(seed=1))
    h2 = pretrain(data, cfg, _model(seed=1))
    assert h1 == h2
    assert all(np.isfinite(h1)) and h1[-1] < h1[0]


def test_pretrain_leaves_eval_mode_at_init_scale(rng):
    m = _model()
    pretrain(np.abs(rng.standard_normal((16, 2, 8, 8))), PretrainConfig(epochs=2, batch_size=8), m)
    assert not any(b.bn.training for b in m.blocks)
    for b in m.encoder.blocks:
        w = b.conv.weight.data
        assert np.sqrt(np.mean(w**2)) == pytest.approx(np.sqrt(2 / (w.shape[1] * 9)), rel=1e-9)


def test_pretrain_errors(rng):
    with pytest.raises(ValueError, match="empty"):
        pretrain(np.zeros((0, 2, 8, 8)), PretrainConfig(epochs=1), _model())
    with pytest.raises(ValueError):
        PretrainConfig(epochs=0).validate()
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        pretrain(np.full((4, 2, 8, 8), 1e200), PretrainConfig(epochs=1, batch_size=4), _model())


def test_state_roundtrip(rng):
    a, b = _model(seed=1), _model(seed=2)
    b.load(a.state())
    x = rng.standard_normal((2, 2, 8, 8))
    a.set_training(False)
    b.set_training(False)
    assert np.array_equal(cae_forward(x, a)[0].data, cae_forward(x, b)[0].data)
