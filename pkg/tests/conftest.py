import numpy as np
import pytest

from mask_core import MaskLogits
from model import BaseLayer, Batch, HeadLayer, LossKind, MaskedNetwork
from numeric_core import Activation, make_rng
from tasks import TaskKind, TaskSpec


@pytest.fixture
def rng() -> np.random.Generator:
    return make_rng(1234)


@pytest.fixture
def make_network():
    """Factory for small random networks with ReLU base layers."""

    def factory(
        seed=0,
        widths=(3, 4, 3),
        outputs=1,
        loss_kind=LossKind.SQUARED_ERROR,
        t_large=2.0,
        t_small=2.0,
        mask_bias=False,
        head_hidden=True,
    ):
        rng = make_rng(seed)
        base = []
        for index, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
            w0 = rng.normal(size=(fan_in, fan_out))
            bias_logits = None
            if mask_bias:
                bias_logits = MaskLogits(
                    rng.normal(0.0, 0.5, size=fan_out), t_large, t_small
                )
            base.append(
                BaseLayer(
                    name=f"layer{index}",
                    w0=w0,
                    bias0=rng.normal(0.0, 0.5, size=fan_out),
                    logits=MaskLogits(
                        rng.normal(0.0, 0.5, size=w0.shape), t_large, t_small
                    ),
                    activation=Activation.RELU,
                    bias_logits=bias_logits,
                )
            )
        width = widths[-1]
        head = []
        if head_hidden:
            head.append(
                HeadLayer(
                    rng.normal(size=(width, width)),
                    rng.normal(0.0, 0.5, size=width),
                    Activation.RELU,
                )
            )
        head.append(
            HeadLayer(
                rng.normal(size=(width, outputs)),
                np.zeros(outputs),
                Activation.IDENTITY,
            )
        )
        return MaskedNetwork(base, head, loss_kind)

    return factory


@pytest.fixture
def make_batch():
    """Factory for random batches; ``classes`` > 0 gives class-index targets."""

    def factory(seed=0, rows=6, input_dim=3, outputs=1, classes=0):
        rng = make_rng(seed)
        inputs = rng.normal(size=(rows, input_dim))
        if classes:
            targets = rng.integers(0, classes, size=rows).astype(np.float64)
        else:
            targets = rng.normal(size=(rows, outputs))
        return Batch(inputs, targets)

    return factory


@pytest.fixture
def linear_instance():
    """
    Factory for a convex masking problem: one linear base layer of d weights
    feeding a fixed identity head, with targets produced by a known mask.

    Returns (network, data, true mask).
    """

    def factory(seed=0, d=8, rows=64, noise=0.01):
        rng = make_rng(seed)
        signs = rng.choice([-1.0, 1.0], size=d)
        w0 = (signs * rng.uniform(0.5, 1.5, size=d)).reshape(d, 1)
        true_mask = rng.random(size=(d, 1)) < 0.5
        inputs = rng.normal(size=(rows, d))
        targets = inputs @ (w0 * true_mask) + noise * rng.normal(size=(rows, 1))
        net = MaskedNetwork(
            [
                BaseLayer(
                    name="linear",
                    w0=w0,
                    bias0=np.zeros(1),
                    activation=Activation.IDENTITY,
                )
            ],
            [HeadLayer([[1.0]], [0.0], Activation.IDENTITY)],
            LossKind.SQUARED_ERROR,
        )
        return net, Batch(inputs, targets), true_mask

    return factory


@pytest.fixture
def tiny_task_spec() -> TaskSpec:
    return TaskSpec(
        n_train=40,
        n_eval=20,
        input_dim=4,
        hidden_dims=(6,),
        head_hidden=False,
        pretrain_steps=20,
        seed=3,
    )


@pytest.fixture(scope="session")
def blobs_task_spec() -> TaskSpec:
    """A three-class Gaussian-blobs task sized for the slow experiment tests."""
    return TaskSpec(
        kind=TaskKind.GAUSSIAN_BLOBS_CLASSIFICATION,
        n_train=256,
        n_eval=128,
        hidden_dims=(32, 32),
        pretrain_steps=500,
    )


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "config.toml"
    path.write_text(
        """
[task]
n_train = 40
n_eval = 20
input_dim = 4
hidden_dims = [6]
head_hidden = false
pretrain_steps = 20
seed = 3

[training]
step_budget = 30
batch_size = 8
eval_every = 10
gamma = 0.01

[pruner]
total_steps = 30
batch_size = 8
prune_every = 10
eval_every = 10
round_steps = 10

[sensitivity]
retrain_steps = 10
batch_size = 8
sigmas = [0.01]
"""
    )
    return path
