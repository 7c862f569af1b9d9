import logging

import pytest

from cdsr.data import Interaction, SynthSpec, UserHistory, build_histories, chronological_split, generate_synthetic


def make_history(user, spec, start_ts=0, target_start=1):
    """``spec`` is a list of (domain, item, feedback) triples in time order."""
    events = [Interaction(user, item, dom, fb, start_ts + t, seq_no=t) for t, (dom, item, fb) in enumerate(spec)]
    return UserHistory.from_events(user, events, target_start=target_start)


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("cdsr").setLevel(logging.ERROR)
    yield


@pytest.fixture(scope="session")
def planted_split():
    spec = SynthSpec(n_users=60, items_a=30, items_b=30, min_len=8, max_len=14, planted=True, switch_prob=0.3)
    histories = build_histories(generate_synthetic(spec, seed=3))
    return chronological_split(histories, domain_sizes=(30, 30))


# one line per acceptance criterion, printed after the run
ACCEPTANCE = []


def record_criterion(number, title, passed, detail=""):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}  {detail}".rstrip()
    ACCEPTANCE.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE, key=lambda x: str(x[0])):
            terminalreporter.write_line(line)
