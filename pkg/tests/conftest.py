import pytest

# values quoted for the prototype detector
EPS_XT = 0.0975
EPS_D_PRIME = 2.3e-3
EPS_D = EPS_D_PRIME / (1 - EPS_XT)
ETA = 0.5


@pytest.fixture
def paper_params():
    from mppc.model import DetectorParams

    return DetectorParams(eta=ETA, eps_d=EPS_D, eps_xt=EPS_XT, xt_variant="chain", n_max=40)
