import copy

import pytest

TINY = {
    "dataset": {"format": "synthetic", "classes": 4, "dim": 8, "n": 80, "test_size": 40},
    "encoder": {"input_dim": 8, "hidden_dims": [8], "projection_dims": [8, 4], "groups": 2},
    "partition": {"num_clients": 40, "samples_per_client": 2, "alpha": 0.0},
    "server_optimizer": {"kind": "adam", "lr": 1e-2, "schedule": "cosine"},
    "clients_per_round": 4,
    "rounds": 6,
    "checkpoint_every": 0.5,
    "probe_every": 0.5,
    "probes": [
        {"protocol": "linear", "labeled_fraction": 0.25, "steps": 20},
        {"protocol": "finetune", "labeled_fraction": 0.25, "steps": 5},
    ],
}


@pytest.fixture
def tiny_raw(tmp_path):
    raw = copy.deepcopy(TINY)
    raw["output_dir"] = str(tmp_path / "run")
    return raw


def pytest_configure(config):
    config.acceptance_lines = {}


@pytest.fixture
def acceptance(request):
    """``record(number, title, ok, detail)`` prints and collects one verdict line."""
    def record(number, title, ok, detail=""):
        line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {title}"
        if detail:
            line += f": {detail}"
        request.config.acceptance_lines[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
