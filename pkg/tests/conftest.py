import numpy as np
import pytest

from popgrid.encoder import EncoderManifest, load_encoder
from popgrid.imagery import MODEL_SIZE, Chip


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion at the end of the run."""
    rows = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            if getattr(report, "when", "call") != "call":
                continue
            if "test_acceptance.py" in report.nodeid:
                name = report.nodeid.split("::")[-1]
                rows.append((name, outcome == "passed"))
    if rows:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name, ok in sorted(rows):
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")


def tiny_manifest(stages=2, width=4, seed=0):
    return EncoderManifest(
        architecture=f"tinyconv-{stages}x{width}",
        repr_dim=width * 2 ** (stages - 1),
        pretraining="scratch",
        seed=seed,
    )


@pytest.fixture
def tiny_encoder():
    return load_encoder(tiny_manifest(stages=2, width=4, seed=0))


@pytest.fixture
def small_encoder():
    # 4 downsampling stages, 64-d representations: big enough to learn blobs
    return load_encoder(tiny_manifest(stages=4, width=8, seed=0))


def model_chip(tile_id: str, rng: np.random.Generator | None = None, value=None) -> Chip:
    """A chip with model pixels only, skipping the resize path."""
    if value is not None:
        pixels = np.full((MODEL_SIZE, MODEL_SIZE, 3), value, dtype=np.float32)
    else:
        pixels = rng.normal(0.0, 1.0, size=(MODEL_SIZE, MODEL_SIZE, 3)).astype(np.float32)
    return Chip(tile_id=tile_id, pixels_model=pixels)
