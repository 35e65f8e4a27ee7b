import numpy as np
import pytest

from imtscast.config import TrainConfig
from imtscast.data import ImtsSample, RawSeries


def random_sample(rng, max_variates=6, max_obs=12, allow_empty_variates=True) -> ImtsSample:
    """A random irregular sample with distinct per-variate times."""
    n = int(rng.integers(1, max_variates + 1))
    series, qtimes, qtargets = [], [], []
    total = 0
    for v in range(n):
        lo = 0 if allow_empty_variates and n > 1 else 1
        count = int(rng.integers(lo, max_obs + 1))
        # Sort a uniform draw; duplicates within a variate are measure-zero.
        times = np.sort(rng.uniform(0.0, 10.0, size=count))
        values = rng.standard_normal(count)
        series.append(RawSeries(variate_id=v + 1, times=times, values=values))
        total += count
        nq = int(rng.integers(0, 3))
        qtimes.append(np.sort(rng.uniform(10.0, 12.0, size=nq)))
        qtargets.append(rng.standard_normal(nq))
    if total == 0:
        series[0] = RawSeries(variate_id=1, times=np.array([1.0]), values=np.array([0.5]))
    return ImtsSample(sample_id=int(rng.integers(0, 10_000)), series=tuple(series),
                      query_times=tuple(qtimes), query_targets=tuple(qtargets))


@pytest.fixture
def tiny_config() -> TrainConfig:
    return TrainConfig(hidden=16, heads=2, rff_dim=16, kernels=4,
                       conv_channels=4, time_dim=8, blocks=2, seed=0)
