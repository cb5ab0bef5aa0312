"""Synthetic design shared by the demo scripts."""

import numpy as np

from gfe import DgpSpec


def cosine_profiles(G, T):
    """Zero-sum rows with unit mean square; distinct frequencies and phases."""
    t = np.arange(T)
    rows = [np.cos(2 * np.pi * (1 + g // 2) * t / T + (g % 2) * np.pi / 2) for g in range(G)]
    a = np.array(rows)
    a -= a.mean(axis=1, keepdims=True)
    return a / np.sqrt((a**2).mean(axis=1, keepdims=True))


def demo_spec(G=4, N=2000, T=12, sigma_v=0.47, **kw):
    return DgpSpec(
        theta0=[0.5, -0.3],
        profiles0=cosine_profiles(G, T),
        sigma_x=[1.0, 1.0],
        sigma_v=sigma_v,
        rho=np.linspace(-0.3, 0.4, 2 * G).reshape(2, G),
        N=N,
        T=T,
        group_shares=np.full(G, 1.0 / G),
        covariate_names=("x1", "x2"),
        **kw,
    )
