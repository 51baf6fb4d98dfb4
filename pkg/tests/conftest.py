import numpy as np
import pytest

from lsec import datagen
from lsec.datagen import GenConfig
from lsec.graph import build_tripartite


def finite_diff(loss_fn, arr: np.ndarray, i: int, h: float = 1e-5) -> float:
    """Central difference of a scalar function w.r.t. one array coordinate."""
    flat = arr.ravel()
    orig = flat[i]
    flat[i] = orig + h
    lp = loss_fn()
    flat[i] = orig - h
    lm = loss_fn()
    flat[i] = orig
    return (lp - lm) / (2.0 * h)


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def tiny_tripartite(seed: int = 3, n_users: int = 10, n_items: int = 12, n_streamers: int = 8):
    return datagen.generate(GenConfig(
        n_users=n_users, n_items=n_items, n_streamers=n_streamers,
        buys_per_user=4, follows_per_user=2, seed=seed,
    ))


def manual_tripartite(n_users, n_items, n_streamers, buy, follow, sell, buy_ts=None):
    return build_tripartite(n_users, n_items, n_streamers,
                            np.array(buy, dtype=np.int64).reshape(-1, 2),
                            np.array(follow, dtype=np.int64).reshape(-1, 2),
                            np.array(sell, dtype=np.int64).reshape(-1, 2),
                            buy_timestamps=None if buy_ts is None else np.array(buy_ts))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
