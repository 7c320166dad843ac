import numpy as np
import pytest
import torch

from reftok.config import RunConfig


@pytest.fixture
def tiny_cfg():
    """A very small tokenizer config for fast unit tests."""
    return RunConfig().replace(
        model={"enc_dim": 48, "enc_depth": 2, "enc_heads": 4, "dec_dim": 48, "dec_depth": 2, "dec_heads": 4},
        vq={"codebook_size": 16, "code_dim": 8, "split_start": 4, "split_steps": [3, 6], "dead_every": 5},
        train={"batch_size": 2, "steps": 10, "warmup": 2, "lr": 1e-3, "prune_max": 4},
        data={"eval_clips": 4},
        generate={"dim": 32, "depth": 1, "heads": 2, "steps": 5, "batch_size": 4},
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[number] = line
        print("\n" + line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
