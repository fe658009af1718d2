"""Shared fixtures: CI-profile pipeline runs reused across the acceptance suite.

Set ``UPESI_ACCEPTANCE_CACHE`` to a directory to keep run directories between
sessions; a run whose manifest records every requested stage is reused.
"""

import json
import os
import time
from pathlib import Path

import pytest

from upesi.config import RunConfig
from upesi.pipeline import STAGES, Run

CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[CRITERIA] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(CRITERIA, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in lines:
        terminalreporter.write_line(f"{status:<5} {name}: {detail}")


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for the end-of-session summary."""
    def record(name, passed, detail, status=None):
        request.config.stash[CRITERIA].append((name, status or ("PASS" if passed else "FAIL"), detail))
        return passed
    return record


def _run_dir(tmp_path_factory, name):
    cache = os.environ.get("UPESI_ACCEPTANCE_CACHE")
    if cache:
        d = Path(cache) / name
        d.mkdir(parents=True, exist_ok=True)
        return d
    return tmp_path_factory.mktemp(name)


def _done(run):
    if not run.manifest_path.exists():
        return set()
    m = json.loads(run.manifest_path.read_text())
    if m.get("config_hash") != run.config.hash():
        return set()
    return {s for s, rec in m["stages"].items() if rec.get("status") == "complete"}


def run_profile(tmp_path_factory, name, env_kind, profile="ci", stages=STAGES, seed=0):
    """Run (or resume) the named run directory up to the given stages."""
    run = Run(RunConfig.build(env_kind, profile, seed=seed), _run_dir(tmp_path_factory, name))
    done = _done(run)
    for stage in stages:
        if stage in done:
            continue
        t0 = time.time()
        run.run_stage(stage)
        print(f"[{name}] {stage} {time.time() - t0:.0f} s", flush=True)
    return run


@pytest.fixture(scope="session")
def ci_pendulum(tmp_path_factory):
    return run_profile(tmp_path_factory, "ci_pendulum", "pendulum")


@pytest.fixture(scope="session")
def ci_pendulum_repeat(tmp_path_factory):
    return run_profile(tmp_path_factory, "ci_pendulum_repeat", "pendulum")


@pytest.fixture(scope="session")
def ci_chain(tmp_path_factory):
    return run_profile(tmp_path_factory, "ci_chain", "chain", stages=("collect", "train-dynamics"))


@pytest.fixture(scope="session")
def full_pendulum_model(tmp_path_factory):
    """Full-profile data and dynamics model (minutes); later stages extend the same directory."""
    return run_profile(tmp_path_factory, "full_pendulum", "pendulum", "full", stages=("collect", "train-dynamics"))


@pytest.fixture(scope="session")
def full_pendulum_bo(full_pendulum_model, tmp_path_factory):
    return run_profile(tmp_path_factory, "full_pendulum", "pendulum", "full", stages=STAGES[:2] + ("fit-embedding",))


@pytest.fixture(scope="session")
def full_pendulum(full_pendulum_model, tmp_path_factory):
    return run_profile(tmp_path_factory, "full_pendulum", "pendulum", "full")
