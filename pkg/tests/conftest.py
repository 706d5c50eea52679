"""Collects acceptance-criterion outcomes and prints one line per criterion."""
import pytest

_OUTCOMES: dict[str, str] = {}
_DETAILS: dict[str, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    for key, value in item.user_properties:
        if key == "detail":
            _DETAILS[name] = value
    if report.failed:
        _OUTCOMES[name] = "FAIL"
    elif report.when == "call" and report.passed:
        _OUTCOMES.setdefault(name, "PASS")
    elif report.skipped:
        _OUTCOMES.setdefault(name, "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _OUTCOMES.items():
        detail = f"  [{_DETAILS[name]}]" if name in _DETAILS else ""
        terminalreporter.write_line(f"{outcome}  {name}{detail}")


# ---------------------------------------------------------------------------
# a seconds-scale configuration for pipeline, ablation and CLI tests
# ---------------------------------------------------------------------------
TINY_OVERRIDES = {
    "scene_frames": 12, "scene_train_frames": 8, "scene_size": 16, "scene_focal": 27.5,
    "scene_ref_samples": 32, "audio_steps": 20, "audio_k": 2, "field_steps": 10,
    "inpaint_steps": 10, "render_feature_size": 8, "render_n_coarse": 8, "render_n_fine": 8,
    "ablate_ks": (1, 2), "ablate_k_steps": 10, "jitter_draws": 3, "jitter_frames": 2,
}


def tiny_assignments():
    """TINY_OVERRIDES as command-line --set arguments."""
    out = []
    for key, value in TINY_OVERRIDES.items():
        text = ",".join(map(str, value)) if isinstance(value, tuple) else str(value)
        out += ["--set", f"{key}={text}"]
    return out


@pytest.fixture(scope="session")
def tiny_cfg():
    from pir.config import DEFAULTS, with_overrides

    return with_overrides(DEFAULTS, **TINY_OVERRIDES)


@pytest.fixture(scope="session")
def tiny_workspace(tiny_cfg, tmp_path_factory):
    """A fully trained tiny workspace; tests must not modify it."""
    from pir.pipeline import Workspace, train_all

    ws = Workspace(tmp_path_factory.mktemp("tiny") / "ws")
    train_all(tiny_cfg, ws)
    return ws
