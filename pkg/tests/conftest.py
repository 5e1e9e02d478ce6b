import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from td2rdm import hubbard, oracle, purifier


@pytest.fixture(scope="session")
def trapped_gs_m4():
    """Correlated trapped ground state on four sites."""
    cfg = hubbard.HubbardConfig(sites=4, particles=4, interaction=1.0, trap=0.6)
    psi = oracle.ground_state(cfg)
    return cfg, psi


@pytest.fixture(scope="session")
def trapped_gs_m6():
    """System (i): six sites, strong interaction, tight trap."""
    cfg = hubbard.HubbardConfig(sites=6, particles=6, interaction=2.2, trap=1.0)
    psi = oracle.ground_state(cfg)
    return cfg, psi


@pytest.fixture(scope="session")
def dimer_gs():
    cfg = hubbard.HubbardConfig(sites=2, particles=2, interaction=1.0, trap=0.0)
    psi = oracle.ground_state(cfg)
    return cfg, psi


@pytest.fixture(scope="session")
def conserved_set_m6(trapped_gs_m6):
    cfg, _ = trapped_gs_m6
    x1, x2 = hubbard.conserved_ops(cfg)
    return purifier.build_conserved_set([x1, x2], cfg.sites)


def random_hermitian(rng: np.random.Generator, n: int) -> np.ndarray:
    x = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return 0.5 * (x + x.conj().T)
