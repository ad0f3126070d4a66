"""CSV output helpers: stable schemas, 17-significant-digit floats."""

import os

__all__ = ["fmt", "write_csv"]


def fmt(value):
    """Render a value for CSV; floats carry 17 significant digits."""
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def write_csv(path, header, rows, comment=None):
    """Write rows under a named header; ``comment`` becomes a leading '#' line."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")
