import contextlib
import json
import logging
import os
import tempfile

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1


@contextlib.contextmanager
def atomic_path(path):
    """Yield a temporary sibling path and rename it onto `path` on success."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    base, ext = os.path.splitext(os.path.basename(path))
    fd, tmp = tempfile.mkstemp(prefix=f".{base}.", suffix=f".tmp{ext}", dir=directory)
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


@contextlib.contextmanager
def atomic_open(path, mode="w"):
    """Open a temporary sibling for writing; rename onto `path` on success."""
    with atomic_path(path) as tmp:
        kwargs = {} if "b" in mode else {"encoding": "utf-8", "newline": ""}
        with open(tmp, mode, **kwargs) as f:
            yield f


def write_manifest(path, stage, params, seed, inputs):
    """Record the resolved parameters, seed and inputs of one run."""
    manifest = {
        "version": MANIFEST_VERSION,
        "stage": stage,
        "seed": seed,
        "params": params,
        "inputs": {k: (None if v is None else [str(x) for x in v] if isinstance(v, (list, tuple)) else str(v))
                   for k, v in inputs.items()},
    }
    with atomic_open(path) as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.debug(f"Wrote manifest {path}")
    return manifest
