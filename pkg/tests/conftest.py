import pytest

from cxrelay.nn import TrainConfig, build_artifact, reference_architecture, train
from cxrelay.synthetic import make_disc_dataset


@pytest.fixture(scope="session")
def desk_task():
    """200 train / 50 val bright-vs-dark disc images at 128x128."""
    x, y = make_disc_dataset(250, seed=42, side=128)
    return (x[:200], y[:200]), (x[200:], y[200:])


@pytest.fixture(scope="session")
def trained_reference(desk_task):
    """Reference CNN trained once per session (shared by training and
    compression acceptance criteria)."""
    train_xy, val_xy = desk_task
    model = build_artifact(reference_architecture(), seed=0)
    cfg = TrainConfig(batch_size=64, learning_rate=0.001, epochs=12,
                      patience=12, optimizer="adam", seed=0)
    artifact, history = train(model, train_xy, val_xy, cfg)
    return artifact, history
