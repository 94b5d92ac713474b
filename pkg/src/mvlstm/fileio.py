import os
from pathlib import Path


def atomic_write(path, data):
    """Write bytes or text to ``path`` through a temporary file and rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data if isinstance(data, bytes) else data.encode("utf-8"))
    os.replace(tmp, path)
