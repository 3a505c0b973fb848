"""Small output helpers shared by the exporters and the command line."""

import csv
import io
import os
import tempfile


def atomic_write_text(path, text):
    """Write ``text`` to ``path`` via a temporary file and an atomic rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(columns, rows, header_lines=()):
    """Render rows as CSV, optionally preceded by ``# ...`` comment lines."""
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        values = [row[c] for c in columns] if isinstance(row, dict) else list(row)
        writer.writerow([_fmt(v) for v in values])
    return buf.getvalue()


def _fmt(v):
    # repr round-trips floats exactly
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "dtype") and v.shape == ():
        return _fmt(v.item())
    return v
