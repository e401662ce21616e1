import numpy as np
import pytest

from gfra.detector import GammaState, effective_pilots, model_covariance, sample_covariance


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def random_instance(rng, L=12, K=8, N=3, M=40, noise_var=1.0, d_max=100.0, active_frac=0.5):
    """A random detector problem with a partly populated gamma.

    The sample covariance comes from M draws of a model with its own
    random activity, so it is full rank but not matched to the state.
    """
    pilots = crandn(rng, L, K) * np.sqrt(2)
    G = crandn(rng, L, N)
    eff = effective_pilots(pilots, G)
    truth = rng.uniform(0.2, 2.0, K) * (rng.random(K) < active_frac)
    Sigma = model_covariance(truth, eff, noise_var)
    C = np.linalg.cholesky(Sigma)
    sigma_hat = sample_covariance(C @ crandn(rng, L, M))
    state = GammaState.initial(sigma_hat, eff, noise_var, d_max=d_max)
    state.gamma[:] = rng.uniform(0, 1.5, K) * (rng.random(K) < 0.6)
    state.refresh(sigma_hat, eff)
    return eff, sigma_hat, state


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
