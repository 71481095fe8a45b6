"""Writes synthetic_hourly.csv: 90 days of hourly data, a 24-slot sinusoidal
profile plus an exact-transition OU process (theta 0.5 1/h, mu 200 MW,
sigma 300 MW/sqrt(h)), seed 20190101."""

import numpy as np
import pandas as pd

theta, mu, sigma = 0.5, 200.0, 300.0
days = 90
rng = np.random.default_rng(20190101)
n = 24 * days
a = np.exp(-theta)
sd = sigma * np.sqrt((1 - a * a) / (2 * theta))
x = np.empty(n)
x[0] = mu
for k in range(1, n):
    x[k] = mu + (x[k - 1] - mu) * a + sd * rng.standard_normal()
hours = np.arange(n)
profile = 500.0 * np.sin(2 * np.pi * (hours % 24) / 24)
stamps = pd.date_range("2019-01-01 00:00", periods=n, freq="h")
pd.DataFrame({"timestamp": stamps.strftime("%Y-%m-%dT%H:%M:%S"), "value": np.round(profile + x, 6)}).to_csv(
    "synthetic_hourly.csv", index=False
)
