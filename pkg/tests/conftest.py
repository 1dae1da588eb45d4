import pytest
import yaml

TINY = {
    "dataset": {"pdps_per_scenario": 4, "realizations_per_pdp": 12, "heldout_pdps_per_scenario": 2},
    "model": {"feature_channels": 4, "extractor_hidden": 3, "cin_hidden": 2, "tam_hidden": 2,
              "backbone_hidden_layers": 1, "backbone_channels": 4, "backbone_kernel": 3},
    "train": {"batch_size": 8, "episodes_per_epoch": 16, "epochs": 1, "n_support": 2,
              "switchnet_subnets": 2, "switchnet_samples_per_scenario": 200},
    "experiment": {"snr_grid_db": [10.0, 20.0], "n_support_grid": [0, 1, 2], "eval_samples": 6,
                   "seeds": [0], "switchnet_online_steps": 5, "classifier_epochs": 1},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
