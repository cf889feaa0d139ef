import warnings

import pytest
import torch

from dgmrec.config import TrainConfig
from dgmrec.datagen import SyntheticSpec, build_bundle

warnings.filterwarnings("ignore", message="Sparse invariant checks")
torch.set_num_threads(1)


def small_spec(**changes) -> SyntheticSpec:
    base = dict(num_users=60, num_items=40, num_modalities=2, z_dim=4, s_dim=2,
                modality_dims=(12, 8), interactions_per_user=10, noise=0.1, seed=0)
    base.update(changes)
    return SyntheticSpec(**base)


def small_config(**changes) -> TrainConfig:
    base = dict(d=8, k=5, batch_size=256, max_epochs=3, patience=5, gen_interval=1, lr=5e-3, q_lr=1e-2,
                eval_ks=(10, 20))
    base.update(changes)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def small_bundle():
    return build_bundle(small_spec())


ACCEPTANCE_LINES: dict[int, str] = {}


def report_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
