import numpy as np
import pandas as pd
import pytest

from .. import autodiff as ad
from ..autodiff import Tensor
from ..denoiser import predict_eps
from ..diffusion import forward_noise, uniform_step_indices
from ..errors import ConfigError, DatasetError, DivergenceError, FrozenParamsError
from ..probe import get_direction
from ..toyset import ToyDataset, make_dataset
from ..training import (DivergenceGuard, TrainConfig, _optimize, edit_loss_terms, edit_sample, markov_chain_indices,
                        pretrain_denoiser, recon_loss_terms, reconstruct, train, train_edit_markov_baseline,
                        train_edit_score_matching, train_rectifier_recon, train_rectifier_recon_l1_variants)
from .test_rectifier import randomize_heads


@pytest.fixture
def tiny_data():
    return make_dataset(0, 8, image_size=8)


def fast(mode, **overrides):
    values = dict(steps=2, batch_size=3, seed=5, log_every=0)
    values.update(overrides)
    return TrainConfig.defaults(mode, **values)


def same_tensors(a, b):
    return list(a.tensors) == list(b.tensors) and all(np.array_equal(a.tensors[k].data, b.tensors[k].data)
                                                      for k in a.tensors)


def test_default_hyperparameters():
    """Test the optimizer defaults for reconstruction and editing runs."""
    for mode in ("recon", "recon_l1", "recon_l1_dw"):
        cfg = TrainConfig.defaults(mode)
        assert (cfg.lr, cfg.weight_decay, cfg.lr_decay, cfg.lr_decay_every) == (1e-3, 1e-5, 0.9, 5000)
    for mode in ("edit_sm", "edit_markov"):
        cfg = TrainConfig.defaults(mode)
        assert (cfg.lr, cfg.weight_decay, cfg.lr_decay, cfg.lr_decay_every) == (1e-3, 0.0, 0.9, 10)
        assert cfg.lambda_clip == 1.0 and cfg.lambda_recon == 1.0
        assert cfg.attribute == "brighter"
    cfg = TrainConfig.defaults("edit_markov")
    assert (cfg.markov_chain, cfg.markov_grad_steps) == (10, 3)
    assert TrainConfig.defaults("recon_l1_dw").dw_weight == 1e-2
    assert TrainConfig.defaults("recon").batch_size == 16
    state = TrainConfig.defaults("recon").optimizer([])
    assert (state.beta1, state.beta2, state.eps) == (0.9, 0.999, 1e-8)


def test_config_validation():
    """Test unknown modes, negative weights and bad markov truncation are rejected."""
    with pytest.raises(ConfigError):
        TrainConfig.defaults("finetune")
    with pytest.raises(ConfigError):
        TrainConfig.defaults("recon", lambda_recon=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig.defaults("edit_sm", attribute=None)
    with pytest.raises(ConfigError):
        TrainConfig.defaults("edit_sm", attribute="bluer")
    with pytest.raises(ConfigError):
        TrainConfig.defaults("edit_markov", markov_chain=2, markov_grad_steps=3)


def test_zero_offset_loss_equals_frozen_loss(tiny_denoiser, tiny_rectifier, tiny_schedule, rng):
    """Test a fresh rectifier's noise-fitting loss is the frozen model's loss exactly."""
    x0 = rng.uniform(-1, 1, (3, 1, 8, 8))
    t = np.array([1, 8, 20])
    eps = rng.standard_normal(x0.shape)
    x_t = forward_noise(x0, t, eps, tiny_schedule)
    loss, terms = recon_loss_terms(fast("recon"), tiny_denoiser, tiny_rectifier, x0, t, eps, x_t, tiny_schedule)
    frozen = ad.mean(ad.square(ad.sub(predict_eps(tiny_denoiser, x_t, t), Tensor(eps))))
    assert loss.item() == frozen.item()
    assert terms == {}


def test_dw_term_zero_at_init(tiny_denoiser, tiny_rectifier, tiny_schedule, rng):
    """Test the offset regularizer vanishes for zero offsets and l1_dw equals l1 there."""
    x0 = rng.uniform(-1, 1, (2, 1, 8, 8))
    t = np.array([3, 11])
    eps = rng.standard_normal(x0.shape)
    x_t = forward_noise(x0, t, eps, tiny_schedule)
    l1_loss, l1_terms = recon_loss_terms(fast("recon_l1"), tiny_denoiser, tiny_rectifier, x0, t, eps, x_t,
                                         tiny_schedule)
    dw_loss, dw_terms = recon_loss_terms(fast("recon_l1_dw"), tiny_denoiser, tiny_rectifier, x0, t, eps, x_t,
                                         tiny_schedule)
    assert dw_terms["dw"].item() == 0.0
    assert dw_loss.item() == l1_loss.item() == l1_terms["l1"].item()


def test_edit_loss_decomposition(rng):
    """Test L_edit = λ_clip·directional + λ_recon·ℓ1 with the terms evaluated independently."""
    x0 = rng.uniform(-1, 1, (2, 1, 8, 8))
    edited = x0 + 0.1 * rng.standard_normal(x0.shape)
    cfg = fast("edit_sm", lambda_clip=2.0, lambda_recon=0.5)
    loss, d, l1 = edit_loss_terms(cfg, get_direction("brighter"), x0, edited)
    assert loss.item() == 2.0 * d.item() + 0.5 * l1.item()


def test_pretrain_runs_and_is_deterministic(tiny_denoiser_config, tiny_data, tiny_schedule, tmp_path):
    """Test pretraining logs every step and a fixed seed reproduces θ bit for bit."""
    log_path = str(tmp_path / "logs" / "pretrain.csv")
    cfg = fast("pretrain", steps=3, log_path=log_path)
    a = pretrain_denoiser(cfg, tiny_data, tiny_schedule, denoiser_config=tiny_denoiser_config)
    b = pretrain_denoiser(cfg, tiny_data, tiny_schedule, denoiser_config=tiny_denoiser_config)
    assert a.params.checksum() == b.params.checksum()
    assert list(a.history["step"]) == [0, 1, 2]
    assert np.isfinite(a.final_loss)
    logged = pd.read_csv(log_path)
    assert list(logged.columns) == ["step", "loss", "lr", "wallclock"]
    assert len(logged) == 3


def test_pretrain_changes_parameters(tiny_denoiser, tiny_data, tiny_schedule):
    """Test pretraining updates θ in place."""
    before = tiny_denoiser.checksum()
    pretrain_denoiser(fast("pretrain"), tiny_data, tiny_schedule, params=tiny_denoiser)
    assert tiny_denoiser.checksum() != before


def test_empty_dataset_rejected(tiny_denoiser, tiny_schedule):
    """Test trainers refuse an empty dataset."""
    empty = ToyDataset(np.zeros((0, 1, 8, 8)), pd.DataFrame())
    with pytest.raises(DatasetError):
        pretrain_denoiser(fast("pretrain"), empty, tiny_schedule, params=tiny_denoiser)


@pytest.mark.parametrize("mode", ["recon", "recon_l1", "recon_l1_dw"])
def test_recon_training_keeps_denoiser_frozen(mode, tiny_denoiser, tiny_rectifier, tiny_data, tiny_schedule):
    """Test every reconstruction variant trains R and leaves θ untouched."""
    before = tiny_denoiser.checksum()
    initial = tiny_rectifier.copy()
    result = train_rectifier_recon(fast(mode), tiny_denoiser, tiny_data, tiny_schedule, R=tiny_rectifier)
    assert tiny_denoiser.checksum() == before == result.frozen_checksum
    assert not same_tensors(result.params, initial)
    assert np.isfinite(result.final_loss)
    expected = {"recon": [], "recon_l1": ["l1"], "recon_l1_dw": ["l1", "dw"]}[mode]
    assert list(result.history.columns) == ["step", "loss"] + expected + ["lr", "wallclock"]


def test_recon_l1_variants_entry_point(tiny_denoiser, tiny_rectifier, tiny_data, tiny_schedule):
    """Test the ℓ1 entry point accepts only the ℓ1 modes."""
    result = train_rectifier_recon_l1_variants(fast("recon_l1"), tiny_denoiser, tiny_data, tiny_schedule,
                                               R=tiny_rectifier)
    assert "l1" in result.history
    with pytest.raises(ConfigError):
        train_rectifier_recon_l1_variants(fast("recon"), tiny_denoiser, tiny_data, tiny_schedule)


def test_recon_training_is_deterministic(tiny_denoiser, tiny_data, tiny_schedule):
    """Test a fixed seed reproduces the trained rectifier bit for bit."""
    from ..rectifier import RectifierConfig
    rcfg = RectifierConfig.for_denoiser(tiny_denoiser.config, encoder_widths=(4, 8), subnet_hidden=8)
    a = train_rectifier_recon(fast("recon"), tiny_denoiser, tiny_data, tiny_schedule, rectifier_config=rcfg)
    b = train_rectifier_recon(fast("recon"), tiny_denoiser, tiny_data, tiny_schedule, rectifier_config=rcfg)
    assert same_tensors(a.params, b.params)
    assert a.history["loss"].equals(b.history["loss"])


def test_frozen_parameter_change_detected(tiny_denoiser, tiny_data, tiny_schedule):
    """Test the checksum guard catches a loop that updates θ."""
    x = tiny_data.images[:2]

    def loss_fn(rng):
        loss = ad.mean(ad.square(predict_eps(tiny_denoiser, x, 4)))
        ad.backward(loss)
        return {"loss": loss.item()}

    with pytest.raises(FrozenParamsError):
        _optimize(fast("recon"), tiny_denoiser.parameters(), loss_fn, frozen=tiny_denoiser)


def test_divergence_guard():
    """Test non-finite losses and a blown-up moving average abort training."""
    with pytest.raises(DivergenceError):
        DivergenceGuard(10.0).check(0, {"loss": float("nan")})

    guard = DivergenceGuard(10.0, window=2)
    for step, loss in enumerate([1.0, 1.0, 2.0, 5.0]):
        guard.check(step, {"loss": loss})
    assert guard.reference == 1.0
    with pytest.raises(DivergenceError) as e:
        guard.check(4, {"loss": 100.0})
    assert "step 4" in str(e.value)


def test_score_matching_edit_training(tiny_denoiser, tiny_rectifier, tiny_data, tiny_schedule):
    """Test score-matching editing logs its terms and leaves R_init and θ untouched."""
    randomize_heads(tiny_rectifier, np.random.default_rng(0), scale=0.01)
    initial = tiny_rectifier.copy()
    before = tiny_denoiser.checksum()
    result = train_edit_score_matching(fast("edit_sm"), tiny_denoiser, tiny_rectifier, tiny_data, tiny_schedule)
    assert same_tensors(tiny_rectifier, initial)
    assert not same_tensors(result.params, initial)
    assert tiny_denoiser.checksum() == before
    assert list(result.history.columns) == ["step", "loss", "direction", "l1", "lr", "wallclock"]
    h = result.history
    assert np.allclose(h["loss"], h["direction"] + h["l1"], rtol=1e-12, atol=0)


def test_score_matching_is_deterministic(tiny_denoiser, tiny_rectifier, tiny_data, tiny_schedule):
    """Test a fixed seed reproduces the edit rectifier bit for bit."""
    a = train_edit_score_matching(fast("edit_sm"), tiny_denoiser, tiny_rectifier, tiny_data, tiny_schedule)
    b = train_edit_score_matching(fast("edit_sm"), tiny_denoiser, tiny_rectifier, tiny_data, tiny_schedule)
    assert same_tensors(a.params, b.params)


@pytest.mark.parametrize("chain, grad_steps", [(3, 1), (3, 2), (3, 3), (1, 1)])
def test_markov_baseline_training(chain, grad_steps, tiny_denoiser, tiny_rectifier, tiny_data, tiny_schedule):
    """Test the chained baseline for truncation windows from one step to the full chain."""
    before = tiny_denoiser.checksum()
    cfg = fast("edit_markov", markov_chain=chain, markov_grad_steps=grad_steps)
    result = train_edit_markov_baseline(cfg, tiny_denoiser, tiny_rectifier, tiny_data, tiny_schedule)
    assert tiny_denoiser.checksum() == before
    assert len(result.history) == 2
    assert np.isfinite(result.history[["loss", "direction", "l1"]].to_numpy()).all()
    assert not same_tensors(result.params, tiny_rectifier)


def test_markov_chain_indices(tiny_schedule):
    """Test the chain subsamples down from t_start and a single step uses t_start itself."""
    assert markov_chain_indices(fast("edit_markov", markov_chain=3), tiny_schedule) == \
        uniform_step_indices(20, 3)
    assert markov_chain_indices(fast("edit_markov", markov_chain=1, markov_grad_steps=1, markov_t_start=7),
                                tiny_schedule) == [7]
    assert markov_chain_indices(fast("edit_markov", markov_chain=10, markov_t_start=4), tiny_schedule) == \
        [1, 2, 3, 4]
    with pytest.raises(ConfigError):
        markov_chain_indices(fast("edit_markov", markov_t_start=25), tiny_schedule)


def test_train_dispatch(tiny_denoiser, tiny_data, tiny_schedule):
    """Test mode dispatch and its missing-input errors."""
    with pytest.raises(ConfigError):
        train(fast("recon"), tiny_data, tiny_schedule)
    with pytest.raises(ConfigError):
        train(fast("edit_sm"), tiny_data, tiny_schedule, params=tiny_denoiser)
    with pytest.raises(ConfigError):
        train_rectifier_recon(fast("edit_sm"), tiny_denoiser, tiny_data, tiny_schedule)
    with pytest.raises(ConfigError):
        train_edit_score_matching(fast("edit_markov"), tiny_denoiser, None, tiny_data, tiny_schedule)


def test_zero_offset_edit_equals_reconstruction(tiny_denoiser, tiny_rectifier, tiny_schedule, rng):
    """Test a zero-offset rectifier reproduces frozen inversion and sampling exactly."""
    x0 = rng.uniform(-1, 1, (2, 1, 8, 8))
    steps = uniform_step_indices(20, 5)
    edited, record = edit_sample(tiny_denoiser, tiny_rectifier, x0, steps, tiny_schedule)
    plain = reconstruct(tiny_denoiser, None, x0, steps, tiny_schedule)
    assert np.array_equal(edited, plain)
    assert np.array_equal(record.final, edited)
    ddpm_a, _ = edit_sample(tiny_denoiser, tiny_rectifier, x0, steps, tiny_schedule, sampler="ddpm",
                            rng=np.random.default_rng(9))
    ddpm_b, _ = edit_sample(tiny_denoiser, None, x0, steps, tiny_schedule, sampler="ddpm",
                            rng=np.random.default_rng(9))
    assert np.array_equal(ddpm_a, ddpm_b)


def test_edit_sample_errors(tiny_denoiser, tiny_schedule, rng):
    """Test unknown samplers and unseeded ancestral sampling are rejected."""
    x0 = rng.uniform(-1, 1, (1, 1, 8, 8))
    with pytest.raises(ConfigError):
        edit_sample(tiny_denoiser, None, x0, [20], tiny_schedule, sampler="euler")
    with pytest.raises(ConfigError):
        edit_sample(tiny_denoiser, None, x0, [20], tiny_schedule, sampler="ddpm")
