"""Shared fixtures: phantom datasets and trained models, built once per session."""
from __future__ import annotations

import time
from dataclasses import replace

import numpy as np
import pytest

from lusgate.dataset import frames_for, load_manifest
from lusgate.diagnosis import crossval_run
from lusgate.phantom import PhantomConfig, dataset_recipes, generate_dataset, generate_frame
from lusgate.qa import QA_BIN_HYPER, QA_ND_HYPER, QAModels, train_qa_bin, train_qa_nd
from lusgate.seeding import derive_seed

# Site B mirrors the QA training site: positive patients only.
SITE_B = PhantomConfig(n_patients_positive=22, n_patients_control=0, seed=11)
# Site A mirrors the diagnosis site: 10 positive, 12 control patients.
SITE_A = PhantomConfig(seed=7)
SEED = 3

ACCEPTANCE: dict[int, tuple[bool, str]] = {}
TIMINGS: dict[str, float] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {k}: {detail}")


@pytest.fixture(scope="session")
def site_b_samples():
    return [generate_frame(r) for r in dataset_recipes(SITE_B, "B")]


@pytest.fixture(scope="session")
def qa_models(site_b_samples):
    t = time.perf_counter()
    qa_bin = train_qa_bin(site_b_samples, replace(QA_BIN_HYPER, seed=derive_seed(SEED, "qa-bin")))
    TIMINGS["qa_bin"] = time.perf_counter() - t
    t = time.perf_counter()
    sufficient = [s for s in site_b_samples if s[1].sufficient]
    nd = train_qa_nd(sufficient, replace(QA_ND_HYPER, seed=derive_seed(SEED, "qa-nd")))
    TIMINGS["qa_nd"] = time.perf_counter() - t
    return QAModels.from_models(qa_bin, nd)


@pytest.fixture(scope="session")
def site_a_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("siteA")
    generate_dataset(SITE_A, out, site="A")
    return load_manifest(out / "manifest.tsv")


@pytest.fixture(scope="session")
def site_a_samples(site_a_manifest):
    return frames_for(site_a_manifest, site_a_manifest.patients)


@pytest.fixture(scope="session")
def crossval(site_a_manifest):
    t = time.perf_counter()
    split, results = crossval_run(site_a_manifest, k=5, seed=SEED)
    TIMINGS["crossval"] = time.perf_counter() - t
    return split, results


@pytest.fixture
def rng():
    return np.random.default_rng(0)
