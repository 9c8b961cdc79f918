import sys

import numpy as np
import pytest

from cnnmap.archs import ArchSpec, expand_layers


def toy_arch(name, table, side, in_channels=1, head_dim=7):
    return ArchSpec(name, tuple(expand_layers(table, in_channels, side, head_dim)), side, head_dim)


TOY_TABLES = {
    "conv-fc": (5, 1, [
        {"kind": "conv", "name": "c1", "out": 2, "kernel": 3},
        {"kind": "fc", "name": "f1", "out": "head"},
    ]),
    "strided-lrn": (7, 3, [
        {"kind": "conv", "name": "c1", "out": 5, "kernel": 3, "stride": 2, "pad": [0, 1, 0, 1]},
        {"kind": "relu"},
        {"kind": "lrn", "size": 3, "kappa": 1.0, "alpha": 0.5, "beta": 0.75},
        {"kind": "maxpool", "kernel": 2, "stride": 2},
        {"kind": "fc", "name": "f1", "out": "head"},
    ]),
    "deeper": (8, 2, [
        {"kind": "conv", "name": "c1", "out": 3, "kernel": 3, "pad": 1},
        {"kind": "relu"},
        {"kind": "maxpool", "kernel": 3, "stride": 2, "pad": [0, 1, 0, 1]},
        {"kind": "conv", "name": "c2", "out": 4, "kernel": 2, "stride": 1},
        {"kind": "relu"},
        {"kind": "fc", "name": "f1", "out": 6},
        {"kind": "relu"},
        {"kind": "dropout", "rate": 0.5},
        {"kind": "fc", "name": "f2", "out": "head"},
    ]),
}


def make_toy(name, in_channels=None):
    side, n, table = TOY_TABLES[name]
    return toy_arch(name, table, side, in_channels or n)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[number])
