import sys
import time
from pathlib import Path
from types import SimpleNamespace

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# subcommand order matters: everything after train reads its checkpoint
PIPELINE = ("train", "eval", "bench-flops", "ablate", "oracle-gen", "perturb-grid", "heatmap")


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """Every subcommand at default config, run once per session in-process.

    Returns ``out`` (the output directory) and ``seconds`` (wall time per subcommand).
    """
    from drrl.cli import main

    out = tmp_path_factory.mktemp("default_run")
    seconds = {}
    for cmd in PIPELINE:
        t0 = time.perf_counter()
        assert main([cmd, "--out", str(out)]) == 0, cmd
        seconds[cmd] = time.perf_counter() - t0
    return SimpleNamespace(out=out, seconds=seconds)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
