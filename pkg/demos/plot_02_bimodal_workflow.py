"""
A bimodal-residual workflow
===========================

1. fit by least squares and look at the residuals,
2. refit with a kernel density for the errors,
3. refit with a two-component normal mixture suggested by the residual plot.
"""

import os

import numpy as np

import effreg
from effreg.diagnose import diagnose

path = os.path.join(os.path.dirname(effreg.__file__), "data", "datasets", "bimodal_synthetic.csv")
data = effreg.read_csv(path, "y")
model = effreg.linear_model(data.l)

# %%
# Step 1: least squares residuals are clearly non-normal.
ols = effreg.solve_efficient(data, model)
d = diagnose(ols.residuals)
print(f"skewness {d.skewness:.3f}, excess kurtosis {d.excess_kurtosis:.3f}, "
      f"Shapiro-Wilk p = {d.shapiro_p:.2e}")
counts, edges = d.hist_counts, d.hist_edges
for c, lo in zip(counts, edges):
    print(f"{lo:7.2f} {'#' * int(c)}")

# %%
# Steps 2 and 3: semiparametric (kernel) and mixture fits.
for mode in ("kernel", "mixture"):
    fit = effreg.solve_efficient(data, model, effreg.FitConfig(error_mode=mode))
    print(fit.summary())
    if mode == "mixture":
        print("mixture parameters:", np.round(fit.error_model["mu"], 3))
