import numpy as np
import pytest

from enclasso.deepc import ControlWeights, build_hankel, building_plant, collect_offline

ULP = 2.0 ** -40


@pytest.fixture(scope="session")
def building():
    """Building example: m=p=4, M=4, N=8, T=84 with the control weights used throughout."""
    w = ControlWeights.building_example()
    traj = collect_offline(building_plant(0), 84, 0)
    h = build_hankel(traj, w, 4, 8)
    rng = np.random.default_rng(3)
    ybar, ubar = traj.y_d[-16:], traj.u_d[-16:]
    r = np.repeat(rng.uniform(-1, 1, (1, 4)), 8, axis=0).ravel()
    return dict(w=w, traj=traj, h=h, ybar=ybar, ubar=ubar, r=r, Jf=h.Jf(ybar, r, ubar))
