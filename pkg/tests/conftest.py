import numpy as np
import pytest

from kvnorm.model import ModelConfig, init_weights


def small_config(**kw):
    base = dict(num_layers=2, num_heads=2, d_model=16, d_head=8, d_ff=32, vocab_size=24,
                max_seq_len=64)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def small_model():
    return init_weights(small_config(), seed=7, sigma=0.3)


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-30))


# acceptance criteria register here and are summarised once at the end of the run
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


class Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.notes = number, title, []

    def note(self, text: str) -> None:
        self.notes.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.notes)
        if exc is not None:
            detail = (detail + "; " if detail else "") + f"{exc_type.__name__}: {exc}".splitlines()[0]
        ACCEPTANCE[self.number] = (status, self.title, detail)
        print(f"[{status}] criterion {self.number}: {self.title}" + (f" ({detail})" if detail else ""))
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{status}] {n:2d}. {title}" + (f" | {detail}" if detail else ""))
