import math

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from ghostv2 import Tensor
from ghostv2.errors import ConfigError, DivergenceError
from ghostv2.train import SyntheticDataset, TrainConfig, evaluate, make_model, train_toy
from ghostv2.weights import load_weights

SHORT = dict(steps=6, batch_size=8, samples_per_class=8)


def test_dataset_is_deterministic_and_balanced():
    a = SyntheticDataset(3, samples_per_class=5).split()
    b = SyntheticDataset(3, samples_per_class=5).split()
    c = SyntheticDataset(4, samples_per_class=5).split()
    (tx, ty), (vx, vy) = a
    assert np.array_equal(tx, b[0][0]) and np.array_equal(vy, b[1][1])
    assert not np.array_equal(tx, c[0][0])
    assert tx.shape == (20, 32, 32, 3) and vx.shape == (4 * 32, 32, 32, 3)
    assert np.bincount(ty).tolist() == [5] * 4


def test_classes_share_marginal_statistics():
    (x, y), _ = SyntheticDataset(0).split()
    means = [x[y == k].mean() for k in range(4)]
    assert max(means) - min(means) < 0.05


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(steps=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(lr=-0.1).validate()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()
    TrainConfig(lr=0.0).validate()


def test_zero_learning_rate_keeps_loss_at_chance():
    log, _ = train_toy(TrainConfig(lr=0.0, **SHORT))
    assert all(v == log.losses[0] for v in log.losses)
    assert log.losses[0] == pytest.approx(math.log(4), abs=1e-12)


def test_initial_loss_is_ln_k():
    for k in (2, 3, 4):
        log, _ = train_toy(TrainConfig(steps=1, num_classes=k, batch_size=8, samples_per_class=4))
        assert abs(log.losses[0] - math.log(k)) < 0.1


def test_divergence_is_reported():
    cfg = TrainConfig(**SHORT)
    model = make_model(cfg)
    model.classifier.kernel.weight.data[0, 0, 0, 0] = np.nan
    with pytest.raises(DivergenceError) as err:
        train_toy(cfg, model=model)
    assert err.value.step == 1 and math.isnan(err.value.loss)


def test_same_seed_same_log():
    a, _ = train_toy(TrainConfig(seed=5, **SHORT))
    b, _ = train_toy(TrainConfig(seed=5, **SHORT))
    assert a.losses == b.losses and a.to_dict() == b.to_dict()


def test_training_log_independent_of_threads():
    logs = []
    for n in (1, 4):
        with threadpool_limits(limits=n):
            logs.append(train_toy(TrainConfig(seed=2, **SHORT))[0].losses)
    assert logs[0] == logs[1]


def test_saved_weights_reproduce_evaluation(tmp_path):
    cfg = TrainConfig(seed=1, **SHORT)
    path = tmp_path / "toy.gnv2"
    log, model = train_toy(cfg, weights_path=path)
    assert log.weights_path == str(path)
    fresh = make_model(TrainConfig(seed=99, **SHORT))
    load_weights(fresh, path)
    _, (vx, vy) = SyntheticDataset(cfg.seed, samples_per_class=cfg.samples_per_class).split()
    assert evaluate(fresh, vx, vy) == log.test_accuracy
    probe = Tensor.wrap(vx[:4].astype(model.dtype))
    assert np.array_equal(fresh(probe, "eval").data, model(probe, "eval").data)


def test_make_model_adapts_head():
    model = make_model(TrainConfig(num_classes=3, image_size=16))
    assert model.spec.num_classes == 3 and model.spec.input_size == 16
    assert model(Tensor.zeros((1, 16, 16, 3), model.dtype)).shape == (1, 3)
