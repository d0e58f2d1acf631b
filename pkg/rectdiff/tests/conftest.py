import numpy as np
import pytest
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker

from ..denoiser import DenoiserConfig, build_denoiser
from ..diffusion import make_linear_schedule
from ..registry import Base
from ..rectifier import RectifierConfig, build_rectifier

# Use an in-memory SQLite database for testing
TEST_DB_URL = "sqlite:///:memory:"

TINY_CONFIG = """\
seed = 0
out_dir = out
image_size = 8
widths = 4,8
groups = 2
temb_dim = 8
encoder_widths = 4,8
subnet_hidden = 8
T = 20
beta_start = 1e-3
beta_end = 0.2
n_train = 16
n_edit = 4
n_heldout = 4
pretrain_steps = 4
recon_steps = 3
edit_steps = 2
batch_size = 4
markov_chain = 3
markov_grad_steps = 2
step_counts = 2,5
lambda_grid = 0,1
eval_steps = 4
metrics = L1,L2,SSIM,posterior_gap,noise_loss,probe_shift,off_attr_drift
gap_t_samples = 1
progress = false
log_every = 0
"""


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end acceptance run")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def engine():
    """Create a fresh database engine for each test."""
    engine = create_engine(TEST_DB_URL)
    Base.metadata.create_all(engine)
    yield engine
    Base.metadata.drop_all(engine)


@pytest.fixture
def session(engine):
    """Create a new session for each test."""
    Session = sessionmaker(bind=engine)
    session = Session()
    yield session
    session.close()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_denoiser_config():
    return DenoiserConfig(image_size=8, channels=1, widths=(4, 8), groups=2, temb_dim=8, T=20, seed=3)


@pytest.fixture
def tiny_denoiser(tiny_denoiser_config):
    return build_denoiser(tiny_denoiser_config)


@pytest.fixture
def tiny_schedule():
    return make_linear_schedule(20, 1e-3, 0.2)


@pytest.fixture
def tiny_rectifier(tiny_denoiser):
    cfg = RectifierConfig.for_denoiser(tiny_denoiser.config, encoder_widths=(4, 8), subnet_hidden=8)
    return build_rectifier(tiny_denoiser, cfg)


@pytest.fixture
def tiny_config_path(tmp_path):
    path = tmp_path / "tiny.conf"
    path.write_text(TINY_CONFIG)
    return str(path)
