"""CSV writing with bit-exact float formatting."""
from __future__ import annotations

import io
import math
from pathlib import Path
from typing import Iterable, Sequence


def fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, int):
        return str(x)
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        return "%.17g" % x
    try:
        import numpy as np

        if isinstance(x, np.integer):
            return str(int(x))
        if isinstance(x, np.floating):
            return fmt(float(x))
        if isinstance(x, np.bool_):
            return str(int(x))
    except ImportError:  # pragma: no cover
        pass
    return str(x)


def render(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(fmt(v) for v in row) + "\n")
    return buf.getvalue()


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # newline="" keeps "\n" line endings on every platform
    with open(path, "w", newline="") as fh:
        fh.write(render(header, rows))
    return path


def read_csv(path):
    """Return (header, rows) with every cell left as a string."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        return [], []
    return lines[0].split(","), [ln.split(",") for ln in lines[1:]]


def matrix_to_csv(path, m) -> Path:
    """One matrix row per line, no header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for row in m:
            fh.write(",".join(fmt(float(v)) for v in row) + "\n")
    return path


def matrix_from_csv(path):
    import numpy as np

    rows = [ln.split(",") for ln in Path(path).read_text().splitlines() if ln]
    return np.array([[float(v) for v in r] for r in rows])
