import numpy as np
import pytest

from instyle.dit import BranchParams, ModelConfig
from instyle.synth import DatasetConfig, generate

# 64x64 images at patch 16: a 4x4 token grid keeps training tests fast
MICRO = ModelConfig(d_model=8, n_heads=2, n_layers=1, mlp_mult=2, lora_rank=2, patch_size=16,
                    image_hw=64, max_text_len=4, ref_window=3)


@pytest.fixture(scope="session")
def samples():
    return generate(DatasetConfig(n=6, seed=5))


@pytest.fixture(scope="session")
def micro_base(samples):
    # adaLN gates start at zero, so adapters only receive gradient after some base training
    from instyle.training import TrainConfig, run_stage0

    params, _ = run_stage0(MICRO, samples, TrainConfig(steps=5, lr=1e-2, batch=2, accumulation=1))
    return params


def state_equal(a: BranchParams, b: BranchParams) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(np.array_equal(sa[k], sb[k]) for k in sa)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
