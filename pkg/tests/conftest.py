import numpy as np
import pytest

from mustlab import nn
from mustlab.numerics import Rng


@pytest.fixture
def rng():
    return Rng(1234)


def random_net(seed, input_dim=3, arch="bn-5-relu-bn-4-relu-3-softmax", num_domains=2):
    """Random network with non-trivial BN parameters and running stats."""
    r = Rng(seed)
    net = nn.Network.init(nn.parse_arch(arch, input_dim), num_domains, r)
    for name, p in net.params.items():
        if name.endswith("gamma"):
            net.params[name] = 1.0 + 0.3 * r.normal(p.size).reshape(p.shape)
        elif name.endswith("beta") or name.endswith("bias"):
            net.params[name] = 0.3 * r.normal(p.size).reshape(p.shape)
    for name, b in net.buffers.items():
        if name.endswith("mean"):
            net.buffers[name] = 0.5 * r.normal(b.size).reshape(b.shape)
        else:
            net.buffers[name] = 0.5 + r.uniform(b.size).reshape(b.shape)
    return net


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report(capsys):
    def emit(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
