import os

import pytest
import torch

from icetrack.config import from_dict
from icetrack.simulator import generate_dataset

torch.set_num_threads(max(1, min(4, len(os.sched_getaffinity(0)))))

SMALL_SCENE = {
    "fan": {"angular_span": 60.0, "max_depth": 40.0, "image_width": 32, "image_height": 32},
    "motion": {"n_frames": 8, "drift_range_deg_s": [40.0, 100.0]},
}


def small_config(**splits):
    splits = splits or {"train": {"count": 6, "seed_start": 0}, "val": {"count": 2, "seed_start": 1000}, "test": {"count": 3, "seed_start": 2000}}
    return from_dict({
        "scene": SMALL_SCENE,
        "splits": splits,
        "model": {"n_frames": 3, "input_size": 32, "patch_size": 8, "embed_dim": 16, "n_layers": 1, "n_heads": 2, "mlp_ratio": 2.0, "encoder_channels": 4},
        "train": {"epochs": 2, "batch_size": 4, "lr": 1e-3},
    })


@pytest.fixture(scope="session")
def small_cfg():
    return small_config()


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, small_cfg):
    root = tmp_path_factory.mktemp("small_ds")
    generate_dataset(small_cfg, seed=11, out=root)
    return root


# -- acceptance criteria summary ---------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    entry = _CRITERIA.setdefault(marker.args[0], {"ok": True, "details": [], "failed": []})
    if not rep.passed:
        entry["ok"] = False
        entry["failed"].append(item.name)
    if rep.when == "call":
        entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if e['ok'] else 'FAIL'}")
        for d in e["details"]:
            terminalreporter.write_line(f"    {d}")
        for name in e["failed"]:
            terminalreporter.write_line(f"    failed: {name}")
