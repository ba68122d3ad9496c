import functools

import pytest

from sonomesh.config import PipelineConfig, SceneSection
from sonomesh.pipeline import form_body_image, simulate


@functools.lru_cache(maxsize=None)
def body_image(pose_id, snr_db=20.0):
    """Cropped, focused image of a simulated pose and its scene-frame joints."""
    cfg = PipelineConfig.body(scene=SceneSection(pose_id=pose_id, snr_db=snr_db))
    m, bg, _, gt = simulate(cfg)
    img, _ = form_body_image(m, bg, cfg.imaging)
    return img, gt


@pytest.fixture(scope="session")
def body():
    return body_image


# -- acceptance summary ---------------------------------------------------------------------

_CRITERIA = {}  # number -> [title, detail, outcome]


@pytest.fixture
def criterion(request):
    """``criterion(n, title)`` registers a criterion; call ``.detail(text)`` to annotate it."""

    class Entry:
        def __init__(self, n, title):
            self.n = n
            _CRITERIA[n] = [title, "", None]
            request.node.criterion_id = n

        def detail(self, text):
            _CRITERIA[self.n][1] = text

    return Entry


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    n = getattr(item, "criterion_id", None)
    if n is None or n not in _CRITERIA:
        return
    if rep.failed:
        _CRITERIA[n][2] = "FAIL"
    elif rep.when == "call" and _CRITERIA[n][2] is None:
        _CRITERIA[n][2] = "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, detail, outcome = _CRITERIA[n]
        line = f"[{outcome or 'FAIL'}] criterion {n:2d}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
