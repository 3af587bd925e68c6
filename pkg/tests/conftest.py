import pytest

from gradcases import tiny_model_config
from tevit.config import from_dict


def small_run(**optim):
    """The tiny test model on fixed 5-frame clips, with a usable learning rate."""
    d = tiny_model_config().to_dict()
    d["optim"].update({"base_lr": 0.016, "batch_size": 1, "epochs": 2, "backbone_lr_mult": 1.0,
                       "decay_fractions": []})
    d["optim"].update(optim)
    d["data"].update(min_frames=5, max_frames=5)
    d["link"].update(clip_len=5, stride=5)
    return from_dict(d, env={})


@pytest.fixture
def run_factory():
    return small_run


ACCEPTANCE: list[tuple[str, bool, str]] = []


def record(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.append((name, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}", flush=True)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
