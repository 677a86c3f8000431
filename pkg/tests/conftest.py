import numpy as np
import pytest

from vaells.model import AnchorSet, Hyperparameters, ModelState
from vaells.nets import MlpParams
from vaells.transport import TransportDictionary


def toy_hp(**kw):
    base = dict(data_dim=4, latent_dim=2, hidden_units=8, num_operators=1, anchors_per_class=1,
                batch_size=3, train_steps=10, num_restarts=1)
    base.update(kw)
    return Hyperparameters(**base)


def toy_model(hp, rng, n_anchors=1, labels=None, psi_std=0.3):
    anchors = AnchorSet(rng.standard_normal((n_anchors, hp.data_dim)),
                        labels if labels is not None else np.zeros(n_anchors, dtype=int))
    model = ModelState.initialize(hp, anchors, rng)
    model.dictionary = TransportDictionary(psi_std * rng.standard_normal(model.dictionary.operators.shape))
    return model


def linear_autoencoder(D, d):
    """Encoder/decoder pair built from ReLU pairs so that g(f(x)) = x on span(E)."""
    rng = np.random.default_rng(0)
    E, _ = np.linalg.qr(rng.standard_normal((D, d)))
    # relu(v) - relu(-v) = v gives an exact linear map through one hidden layer
    W0 = np.vstack([E.T, -E.T])
    enc = MlpParams([W0, np.hstack([np.eye(d), -np.eye(d)])], [np.zeros(2 * d), np.zeros(d)],
                    ["relu", "identity"])
    dec = MlpParams([np.vstack([np.eye(d), -np.eye(d)]), np.hstack([E, -E])],
                    [np.zeros(2 * d), np.zeros(D)], ["relu", "identity"])
    return enc, dec, E


def rotation_generator(scale=1.0):
    return scale * np.array([[0.0, -1.0], [1.0, 0.0]])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One summary line per acceptance criterion, printed after the test run.
ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    line = f"{name}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
