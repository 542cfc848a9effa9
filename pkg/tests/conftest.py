import numpy as np
import pytest

from maxctrl import DimMode, GridSpec, assemble_operator_set, assemble_tez


def spec3d(n, box=1.0, t_final=1.0, n_steps=2):
    hi = (box,) * 3 if np.isscalar(box) else tuple(box)
    return GridSpec(a=(0.0, 0.0, 0.0), b=hi, n_cells=n, t_final=t_final, n_steps=n_steps)


def spec2d(n, box=1.0, t_final=1.0, n_steps=2):
    hi = (box,) * 2 if np.isscalar(box) else tuple(box)
    return GridSpec(
        a=(0.0, 0.0), b=hi, n_cells=n, t_final=t_final, n_steps=n_steps,
        dim_mode=DimMode.TEZ2D,
    )


@pytest.fixture(scope="session")
def ops222():
    return assemble_operator_set(spec3d((2, 2, 2)))


@pytest.fixture(scope="session")
def ops234():
    return assemble_operator_set(spec3d((2, 3, 4)))


@pytest.fixture(scope="session")
def tez44():
    return assemble_tez(spec2d((4, 4)))
