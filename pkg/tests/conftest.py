"""Shared fixtures: tiny trained bundles and phantom datasets.

The heavyweight session fixtures at the bottom back the acceptance suite;
they only run when a test actually requests them.
"""

import numpy as np
import pytest

from bldn.data import Image2D, generate_phantom, synth_noise
from bldn.trainer import TrainConfig, train


@pytest.fixture(scope="session")
def toy_trained_bundle(tmp_path_factory):
    """A small bundle trained on constant signal + Gaussian noise (sigma 20).

    Converges close to the analytic NLL minimum in a few seconds; used by
    trainer/inference sanity tests.
    """
    rng = np.random.default_rng(0)
    clean = [Image2D(np.full((64, 64), 100.0, dtype=np.float32))
             for _ in range(4)]
    noisy = [synth_noise(c, "gaussian", rng, sigma=20.0) for c in clean]
    config = TrainConfig(epochs=12, steps_per_epoch=25, tiles_per_step=8,
                         tile_size=32, lr_initial=2e-3, base_filters=8,
                         nnet_hidden=16, nnet_blocks=2, seed=1)
    out = tmp_path_factory.mktemp("toy") / "toy.bldn"
    bundle = train(config, noisy, out_path=out)
    return {"bundle": bundle, "config": config, "noisy": noisy,
            "ckpt": out, "sigma_true": 20.0}


def _phantom_set(seed, count, size=128):
    rng = np.random.default_rng(seed)
    return [generate_phantom(size, size, rng) for _ in range(count)]


def _add_gaussian(clean, seed, sigma):
    rng = np.random.default_rng(seed)
    return [synth_noise(c, "gaussian", rng, sigma=sigma) for c in clean]


@pytest.fixture(scope="session")
def phantom_gaussian_data():
    """64 training phantoms + 8 held-out, with sigma = 10% of signal range."""
    train_clean = _phantom_set(100, 64)
    heldout_clean = _phantom_set(101, 8)
    lo = min(im.values.min() for im in train_clean)
    hi = max(im.values.max() for im in train_clean)
    sigma = 0.1 * float(hi - lo)
    return {
        "train_clean": train_clean,
        "train_noisy": _add_gaussian(train_clean, 102, sigma),
        "heldout_clean": heldout_clean,
        "heldout_noisy": _add_gaussian(heldout_clean, 103, sigma),
        "sigma": sigma,
    }


def _reduced_config(**overrides):
    base = dict(epochs=40, steps_per_epoch=50, tiles_per_step=16, tile_size=64,
                base_filters=32, seed=7)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def gaussian_bundle(phantom_gaussian_data, tmp_path_factory):
    """Reduced-protocol training on the Gaussian-noise phantom set (N=1)."""
    out = tmp_path_factory.mktemp("gauss") / "gauss.bldn"
    bundle = train(_reduced_config(), phantom_gaussian_data["train_noisy"],
                   out_path=out)
    return {"bundle": bundle, "ckpt": out}


@pytest.fixture(scope="session")
def phantom_pg_data():
    """Phantom set with Poisson-Gaussian noise (alpha=5, eta=12)."""
    clean = _phantom_set(110, 64)
    dataset_min = float(min(im.values.min() for im in clean))
    rng = np.random.default_rng(111)
    noisy = [synth_noise(c, "poisson_gaussian", rng, dataset_min=dataset_min,
                         alpha=5.0, eta=12.0) for c in clean]
    return {"clean": clean, "noisy": noisy, "dataset_min": dataset_min,
            "alpha": 5.0, "eta": 12.0}


@pytest.fixture(scope="session")
def pg_bundle(phantom_pg_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("pg") / "pg.bldn"
    bundle = train(_reduced_config(seed=8), phantom_pg_data["noisy"],
                   out_path=out)
    return {"bundle": bundle, "ckpt": out}


@pytest.fixture(scope="session")
def phantom_skew_data():
    """Phantom set with signal-scaled centered-exponential (skewed) noise."""
    clean = _phantom_set(120, 64)
    rng = np.random.default_rng(121)
    slope = 0.15
    noisy = []
    for c in clean:
        eps = rng.exponential(1.0, size=c.values.shape) - 1.0
        values = c.values + slope * c.values * eps.astype(np.float32)
        noisy.append(Image2D(values.astype(np.float32), pair_id=c.pair_id))
    return {"clean": clean, "noisy": noisy, "slope": slope}


@pytest.fixture(scope="session")
def skew_bundles(phantom_skew_data, tmp_path_factory):
    """N=1 and N=2 variants trained on the same skewed-noise dataset."""
    tmp = tmp_path_factory.mktemp("skew")
    out1 = tmp / "n1.bldn"
    out2 = tmp / "n2.bldn"
    b1 = train(_reduced_config(seed=9, mixture_components=1),
               phantom_skew_data["noisy"], out_path=out1)
    b2 = train(_reduced_config(seed=9, mixture_components=2),
               phantom_skew_data["noisy"], out_path=out2)
    return {"n1": b1, "n2": b2, "ckpt_n1": out1, "ckpt_n2": out2}
