import json

import pytest

from cimquant.artifacts import load_dataset, load_model
from cimquant.fixtures import write_fixtures


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    """Bundled fixtures written once per session: trained toy CNN, data, config."""
    out = tmp_path_factory.mktemp("fixtures")
    write_fixtures(out, seed=0)
    return out


@pytest.fixture(scope="session")
def toy(fixture_dir):
    cfg = json.loads((fixture_dir / "config.json").read_text())
    model = load_model(fixture_dir / cfg["model"])
    train = load_dataset(fixture_dir / "train_inputs.cimt", fixture_dir / "train_labels.cimt", cfg["num_classes"])
    evals = load_dataset(fixture_dir / "eval_inputs.cimt", fixture_dir / "eval_labels.cimt", cfg["num_classes"])
    return model, train, evals


@pytest.fixture(scope="session")
def pipeline_run(fixture_dir, tmp_path_factory):
    """One full pipeline run on the bundled fixtures; returns its output directory."""
    from cimquant.cli import main

    out = tmp_path_factory.mktemp("run") / "a"
    assert main(["pipeline", "--config", str(fixture_dir / "config.json"), "--out", str(out)]) == 0
    return out


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
