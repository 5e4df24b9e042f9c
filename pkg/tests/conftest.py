"""Shared fixtures, plus a session-wide monitor of softmax normalization.

Every ``softmax_rows`` output and every softmax-mode prediction produced
anywhere in the run is checked; the session fails if any row misses 1 by
more than ``NORM_TOL``.
"""

from __future__ import annotations

import numpy as np
import pytest

from dhce import layers, model
from dhce import numkit as nk
from dhce.ehr import SynthConfig, generate_synthetic, random_rules
from dhce.events import HashingEncoder

NORM_TOL = 1e-12


class NormMonitor:
    def __init__(self):
        self.attention_rows = 0
        self.softmax_predictions = 0
        self.worst = 0.0

    def record(self, data: np.ndarray, kind: str) -> None:
        if data.size == 0:
            return
        dev = float(np.max(np.abs(data.sum(axis=1) - 1.0)))
        self.worst = max(self.worst, dev)
        if kind == "attention":
            self.attention_rows += data.shape[0]
        else:
            self.softmax_predictions += data.shape[0]


MONITOR = NormMonitor()


def pytest_configure(config):
    softmax_rows = nk.softmax_rows
    fuse_predict = layers.fuse_predict

    def monitored_softmax(t):
        out = softmax_rows(t)
        MONITOR.record(out.data, "attention")
        return out

    def monitored_fuse(o_v, o_e, params, output_activation="softmax", eps_clip=1e-12):
        gate, fused, y = fuse_predict(o_v, o_e, params, output_activation, eps_clip)
        if output_activation == "softmax":
            MONITOR.record(y.data, "prediction")
        return gate, fused, y

    nk.softmax_rows = monitored_softmax
    layers.fuse_predict = monitored_fuse
    model.fuse_predict = monitored_fuse


def pytest_sessionfinish(session, exitstatus):
    if MONITOR.worst > NORM_TOL and session.exitstatus == 0:
        session.exitstatus = 1


def pytest_terminal_summary(terminalreporter):
    import sys

    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.pytest_acceptance_lines():
            terminalreporter.write_line(line)
    status = "PASS" if MONITOR.worst <= NORM_TOL else "FAIL"
    terminalreporter.write_line(
        f"normalization monitor: {status} {MONITOR.attention_rows} softmax rows and "
        f"{MONITOR.softmax_predictions} softmax predictions, max |sum - 1| = {MONITOR.worst:.3e}"
    )


@pytest.fixture(scope="session")
def small_data():
    cfg = SynthConfig(n_patients=12, vocab_size=20, visits_per_patient=(2, 5), codes_per_visit=(2, 4),
                      rules=random_rules(20, 5, 0.9, seed=3), seed=3)
    return generate_synthetic(cfg)


@pytest.fixture(scope="session")
def encoder():
    return HashingEncoder(dim=16, seed=0)
