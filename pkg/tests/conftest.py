import numpy as np
import pytest
from scipy.linalg import expm

from switchfilter.switching import SwitchingParams


@pytest.fixture
def base_params():
    return SwitchingParams.standard(1.0)


def generator_mgf(params, alpha, t):
    """``expm(t (Q + alpha diag(gamma))) 1``: both conditional MGFs by brute force."""
    a, b = params.rate_plus, params.rate_minus
    Q = np.array([[-a, a], [b, -b]])
    G = Q + alpha * np.diag([params.gamma_plus, params.gamma_minus])
    return expm(t * G) @ np.ones(2)


def count_law(params, t, n_max, from_mode="+"):
    """``P(N_t = n)`` for ``n < n_max`` from the chain that also tracks the count."""
    a, b = params.rate_plus, params.rate_minus
    size = 2 * (n_max + 1)
    Q = np.zeros((size, size))
    for k in range(n_max + 1):
        for m, rate in ((0, a), (1, b)):
            i = 2 * k + m
            Q[i, i] = -rate
            if k < n_max:
                Q[i, 2 * (k + 1) + (1 - m)] = rate
    start = np.zeros(size)
    start[0 if from_mode == "+" else 1] = 1.0
    p = start @ expm(t * Q)
    return p.reshape(-1, 2).sum(axis=1)[:n_max]
