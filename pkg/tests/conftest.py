import numpy as np
import pytest

from anatseg import autoencoder as ae
from anatseg import latent
from anatseg.phantoms import myo_of, phantom_labels

N_TRAIN = 1000
N_HELDOUT = 200


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def phantom_masks():
    """1000 training and 200 held-out binary myocardium masks, 64x64."""
    g = np.random.default_rng(0)
    masks = np.array([myo_of(phantom_labels(g, 64)) for _ in range(N_TRAIN + N_HELDOUT)])
    return masks[:N_TRAIN], masks[N_TRAIN:]


@pytest.fixture(scope="session")
def trained_ae(phantom_masks):
    """The full-size model: d=16, default widths, 60 epochs. Takes a few minutes."""
    train, _ = phantom_masks
    model, history = ae.train_autoencoder(train, ae.TrainConfig(epochs=60))
    return model, history


@pytest.fixture(scope="session")
def latent_bank(trained_ae, phantom_masks):
    model, _ = trained_ae
    train, _ = phantom_masks
    z = ae.encode(model, train)
    gmm = latent.fit_gmm_em(z, latent.DEFAULT_K, seed=0).model
    bank = latent.build_latent_bank(gmm, model, n_target=2000, seed=1, training_latents=z)
    return gmm, bank


def pytest_terminal_summary(terminalreporter):
    from acceptlog import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
