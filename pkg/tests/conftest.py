import numpy as np
import pytest

from mrcbf.barriers import SegwayBarrierConfig, estimate_lipschitz, segway_barriers
from mrcbf.dynamics import SegwayParams, segway_system
from mrcbf.sim import PDGains


@pytest.fixture(scope="session")
def segway():
    return segway_system(SegwayParams())


@pytest.fixture(scope="session")
def barrier_cfg():
    return SegwayBarrierConfig()


@pytest.fixture(scope="session")
def barriers(barrier_cfg):
    return segway_barriers(barrier_cfg)


@pytest.fixture(scope="session")
def lips(segway, barriers, barrier_cfg):
    ts = barrier_cfg.theta_star
    box = [(-2.0, 2.0), (-3.6, 3.6), (ts - 0.65, ts + 0.65), (-3.6, 3.6)]
    return estimate_lipschitz(barriers[0], segway, box, 15)


@pytest.fixture(scope="session")
def gains():
    return PDGains(position=-0.5, velocity=-3.0, pitch=-60.0, pitch_rate=-8.0)


@pytest.fixture
def state_sampler(barrier_cfg):
    """Uniform sampler over the safe set (optionally shrunk inward)."""

    def make(rng, shrink=1.0):
        c = barrier_cfg.half_width * shrink
        ts = barrier_cfg.theta_star
        a_e = barrier_cfg.rate_gain

        def sample():
            dth = rng.uniform(-c, c)
            lo = -a_e * (barrier_cfg.half_width + dth) * shrink
            hi = a_e * (barrier_cfg.half_width - dth) * shrink
            return np.array([rng.uniform(-1, 1), rng.uniform(-1, 1),
                             ts + dth, rng.uniform(lo, hi)])

        return sample

    return make
