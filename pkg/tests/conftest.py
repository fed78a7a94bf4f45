import numpy as np
import pytest

from hemix import kernel as K
from hemix.data import SyntheticSpec, generate_batch, toy_schema
from hemix.model import HeMix, ModelConfig, TrainingConfig


@pytest.fixture(autouse=True)
def _float64():
    K.set_default_dtype(np.float64)
    yield
    K.set_default_dtype(np.float64)


def tiny_spec(seed=0, **kw):
    return SyntheticSpec(n_users=7, n_items=12, n_categories=4, n_segments=3, n_train=24, n_test=8,
                         mean_global_len=3, mean_rt_len=1, seed=seed, **kw)


def tiny_schema(spec=None, global_max_len=5, realtime_max_len=2):
    return toy_schema(spec or tiny_spec(), global_max_len=global_max_len, realtime_max_len=realtime_max_len,
                      id_dim=3, side_dim=2)


def tiny_config(seed=0, **kw):
    """The gradient-check scale: N_NS=2, d_T=8, d=8, M=2, d_r=3, L=2, L_G=5, L_R=2."""
    base = dict(n_ns_tokens=2, token_dim=8, attn_dim=8, mix_heads=2, low_rank=3, n_blocks=2,
                ns_hidden=[12], head_hidden=[4])
    base.update(kw)
    return ModelConfig(schema=tiny_schema(), training=TrainingConfig(batch_size=4, learning_rate=1e-2, seed=seed),
                       **base)


def tiny_batch(n=8, seed=0):
    spec = tiny_spec(seed=seed)
    spec.schema = tiny_schema(spec)
    return generate_batch(spec, n=n)


@pytest.fixture
def toy_model():
    return HeMix(tiny_config())


@pytest.fixture
def toy_batch():
    return tiny_batch()


# acceptance criteria report one line each; printed after the run regardless of capture
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
