import numpy as np
import pytest
import torch

from texterase.config import ModelConfig


def fd_rel_err(loss_fn, tensor, n_coords=None, eps=1e-5, seed=0):
    """Worst relative error between autograd and central finite differences.

    ``loss_fn`` maps the current graph to a scalar; ``tensor`` must be a
    float64 leaf with requires_grad. When n_coords is given, a random subset
    of coordinates is probed instead of all of them.
    """
    assert tensor.dtype == torch.float64, "finite differences need float64"
    if tensor.grad is not None:
        tensor.grad = None
    loss = loss_fn()
    loss.backward()
    grad = tensor.grad.detach().clone()
    flat = tensor.detach().reshape(-1)
    n = flat.numel()
    if n_coords is None or n_coords >= n:
        coords = range(n)
    else:
        rng = np.random.Generator(np.random.PCG64(seed))
        coords = rng.choice(n, size=n_coords, replace=False)
    worst = 0.0
    gflat = grad.reshape(-1)
    for i in coords:
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
        fd = (up - down) / (2 * eps)
        an = gflat[i].item()
        scale = max(abs(fd), abs(an))
        if scale < 1e-7:
            continue
        worst = max(worst, abs(fd - an) / scale)
    return worst


def tiny_config(block_type="swinv2", input_size=32):
    """Minimal 4-stage config for gradient probes; window 2, tiny channels."""
    return ModelConfig(
        block_type=block_type,
        enc_depths=(1, 1, 1, 1),
        enc_channels=(8, 8, 16, 16),
        enc_heads=(1, 2, 2, 2),
        dec_last_depth=1,
        dec_last_in_channels=4,
        dec_last_out_channels=2,
        dec_last_heads=1,
        window_size=2,
        sra_reduction=8,
        input_size=input_size,
    )


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


_ACCEPTANCE_RESULTS = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1].split("[")[0]
    if report.when == "call" or (report.when == "setup" and report.failed):
        _ACCEPTANCE_RESULTS[name] = report.outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE_RESULTS):
        outcome = _ACCEPTANCE_RESULTS[name]
        flag = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{flag}  {name}")
