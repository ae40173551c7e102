import pytest
import torch

from refocs.data import generate_glyph_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def glyphs():
    return generate_glyph_dataset(12, 20, (16, 16), seed=3)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
