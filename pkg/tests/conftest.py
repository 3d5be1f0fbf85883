import numpy as np
import pytest

from spectra.scenario import ScenarioConfig, generate

# One pass/fail line per acceptance criterion, printed in the terminal
# summary regardless of capture settings.
_ACCEPTANCE: dict = {}


def record_acceptance(number: int, description: str, passed: bool, detail: str = ""):
    _ACCEPTANCE[number] = (description, passed, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        description, passed, detail = _ACCEPTANCE[number]
        status = "PASS" if passed else "FAIL"
        line = f"criterion {number:2d}: {status}  {description}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_scenario():
    """The 10-AP / 23-device drop used throughout the comparison tests."""
    cfg = ScenarioConfig(ap_count=10, device_count=23, area_side=500.0,
                         rng_seed=0, strongest_m=4, mean_arrival_rate=1.0)
    scn = generate(cfg)
    nbhd = scn.neighborhoods()
    return scn, nbhd


@pytest.fixture(scope="session")
def medium_scenario():
    """30 APs / 46 devices on 600x600 m with 3-AP serving sets."""
    cfg = ScenarioConfig(ap_count=30, device_count=46, area_side=600.0,
                         rng_seed=3, strongest_m=3, mean_arrival_rate=1.0)
    scn = generate(cfg)
    nbhd = scn.neighborhoods()
    return scn, nbhd
