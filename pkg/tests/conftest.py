import dataclasses

import pytest

from leakbench.config import load_config

TINY_INI = """
[experiment]
seeds = 0, 1, 2
n_train = 32
n_val = 32
n_test = 32
data_seed = 5

[ssl]
epochs = 1
batch_size = 16

[downstream]
epochs = 2
batch_size = 16

[probe]
per_site = 16

[sweep]
grid = 0.0, 0.5
epochs = 1

[model]
image_size = 16
channels = 4, 8
feature_dim = 16
proj_hidden = 16
proj_dim = 8
adv_hidden = 8

[site.0]
name = nih
prevalence = 0.3
[site.1]
name = chexpert
prevalence = 0.3
[site.2]
name = rsna
prevalence = 0.3
"""


@pytest.fixture
def tiny_ini():
    return TINY_INI


@pytest.fixture
def tiny_cfg():
    return load_config(text=TINY_INI)


def replace(cfg, **kw):
    return dataclasses.replace(cfg, **kw)


_ACCEPTANCE = {}


def record_acceptance(criterion, ok, detail):
    """Remember one acceptance line; the lines are printed after the test run."""
    _ACCEPTANCE[criterion] = f"criterion {criterion:>2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[k])
