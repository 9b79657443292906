import os

import numpy as np
from hypothesis import HealthCheck, settings

from bppolab.data import OfflineDataset

settings.register_profile("default", deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def discrete_dataset(episodes, final="timeout", meta=None):
    """Dataset from a list of episodes, each a list of (s, a, r, s') tuples."""
    rows = []
    for e, ep in enumerate(episodes):
        for t, (s, a, r, s2) in enumerate(ep):
            last = t == len(ep) - 1
            rows.append((s, a, r, s2, last and final == "done", last and final == "timeout", e, t))
    S, A, R, S2, D, T, E, ts = zip(*rows)
    md = {"format_version": 1, "discrete": True, "env": "test", "seed": 0, "gamma": None,
          "behavior": "test", "created": "0"}
    md.update(meta or {})
    return OfflineDataset(np.array(S), np.array(A), np.array(R, dtype=float), np.array(S2),
                          np.array(D), np.array(T), np.array(E), np.array(ts), md)


# acceptance criteria report: tests record one verdict each, printed after the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
