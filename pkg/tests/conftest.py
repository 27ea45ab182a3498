import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cpmm_exec.closed_form import ControlParams  # noqa: E402

REF = ControlParams(phi=1e-5, alpha=5.0, eta=1.0, T=0.1, beta=1.0, gamma=0.02, sigma=0.03, kappa=1e7)


@pytest.fixture(scope="session")
def ref_params():
    return REF


@pytest.fixture(scope="session")
def ref_fields():
    """Model I solve at the reference parameters on the default 201x201x200 grid."""
    from cpmm_exec.pde import PicardConfig, default_grid_model1, solve_model1

    return solve_model1(REF, default_grid_model1(2000.0, 2000.0), PicardConfig())
