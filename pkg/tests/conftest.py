import numpy as np
import pytest

from gfe.panel import PanelData
from gfe.simulation import DgpSpec


def random_panel(rng, N, T, k, missing=0.0, min_obs=2):
    """Gaussian panel with unit effects; each unit keeps at least ``min_obs`` periods."""
    y = rng.normal(size=(N, T)) + rng.normal(size=(N, 1))
    x = rng.normal(size=(N, T, k))
    mask = rng.random((N, T)) >= missing
    for i in range(N):
        if mask[i].sum() < min_obs:
            mask[i, rng.choice(T, size=min(min_obs, T), replace=False)] = True
    # every period observed by at least two units
    for t in range(T):
        if mask[:, t].sum() < 2:
            mask[rng.choice(N, size=2, replace=False), t] = True
    return PanelData(tuple(range(N)), tuple(range(1, T + 1)), y, x, mask)


def three_unit_panel():
    y = np.array([[1.0, 2.0], [3.0, 0.0], [4.0, 5.0]])
    mask = np.array([[True, True], [True, False], [True, True]])
    return PanelData(("1", "2", "3"), (1, 2), y, np.zeros((3, 2, 0)), mask)


def equal_energy_profiles(G, T, amplitude=1.0):
    """Zero-sum rows with identical mean square, pairwise well separated."""
    t = np.arange(T)
    rows = []
    for g in range(G):
        freq = 1 + g // 2
        phase = 0.0 if g % 2 == 0 else np.pi / 2
        rows.append(np.cos(2 * np.pi * freq * t / T + phase))
    a = np.array(rows)
    a -= a.mean(axis=1, keepdims=True)
    a /= np.sqrt((a**2).mean(axis=1, keepdims=True))
    return amplitude * a


def min_pairwise_shifted_distance(profiles):
    s = profiles - profiles[:, :1]
    G = s.shape[0]
    return min(np.linalg.norm(s[g] - s[h]) for g in range(G) for h in range(g + 1, G))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def three_unit():
    return three_unit_panel()


def make_spec(G=3, N=300, T=12, k=2, sigma_v=0.0, rho=None, theta0=None, amplitude=1.0, **kw):
    profiles = equal_energy_profiles(G, T, amplitude)
    if rho is None:
        rho = np.linspace(-0.3, 0.4, k * G).reshape(k, G)
    if theta0 is None:
        theta0 = np.linspace(0.5, -0.3, k)
    kw.setdefault("group_shares", np.full(G, 1.0 / G))
    kw.setdefault("sigma_x", np.ones(k))
    return DgpSpec(theta0=theta0, profiles0=profiles, sigma_v=sigma_v,
                   rho=rho, N=N, T=T, **kw)


# acceptance criterion number -> one-line verdict, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
