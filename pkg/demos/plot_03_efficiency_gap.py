"""
How much does the independence assumption buy?
==============================================

The efficient score uses the independence of errors and covariates; the
alternative score does not. The difference of their information matrices
is non-negative definite and vanishes in the variance row.
"""

import numpy as np

import effreg
from effreg.simulate import sample_gumbel

rng = np.random.default_rng(0)
n = 100_000
beta = np.array([12.0, -0.5])
model = effreg.exponential_model()
error = effreg.gumbel_error(1.5)
x = rng.gamma(2.5, 1.5, n)
data = effreg.Dataset(x, model.evaluate(x[:, None], beta) + sample_gumbel(1.5, n, rng))

gap = effreg.efficiency_gap(model, error, effreg.Theta(beta, error.variance), data)
np.set_printoptions(precision=5, suppress=True)
print("M1 - M2 =\n", gap)
print("eigenvalues:", np.linalg.eigvalsh(gap))
