import os
import math
import logging
from multiprocessing.pool import ThreadPool
import numpy as np

logger = logging.getLogger(__name__)

# rows per chunk for row-parallel work (E-step, log-likelihood, cluster assignment)
ROW_CHUNK_SIZE = 65536
# GMM_EM_THREADS: caps worker count; 0 or unset means one worker per cpu
THREADS_ENV_VAR = "GMM_EM_THREADS"


## Errors
# every data-dependent failure of the library is a GmmError carrying structured fields
class GmmError(Exception):
    pass


class InvalidSpecError(GmmError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"invalid {field}: {message}")


class DimensionMismatchError(GmmError, ValueError):
    def __init__(self, what, expected, actual):
        self.what = what
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what} mismatch: expected {expected}, got {actual}")


class EmptyComponentError(GmmError):
    def __init__(self, component, context="responsibilities"):
        self.component = component
        super().__init__(f"component {component} is empty ({context} sum to zero)")


class ClusterTooSmallError(GmmError):
    def __init__(self, component, size):
        self.component = component
        self.size = size
        where = "cluster" if component is None else f"cluster {component}"
        super().__init__(f"{where} too small for variance estimation: {size} member(s), need at least 2")


class EmptyBatchError(GmmError):
    def __init__(self, batch, n, batches):
        self.batch = batch
        self.n = n
        self.batches = batches
        super().__init__(f"batch {batch} is empty: {n} samples cannot fill {batches} batches")


class MissingLabelsError(GmmError):
    def __init__(self):
        super().__init__("dataset has no component labels")


class ConvergenceError(GmmError):
    def __init__(self, what):
        self.what = what
        super().__init__(f"{what} did not converge")


class ConfigError(GmmError, ValueError):
    def __init__(self, source, message, location=None):
        self.source = source
        self.location = location
        where = f"{source}" if location is None else f"{source} ({location})"
        super().__init__(f"{where}: {message}")


class DataFormatError(GmmError, ValueError):
    def __init__(self, path, message, line=None):
        self.path = path
        self.line = line
        where = f"{path}" if line is None else f"{path}:{line}"
        super().__init__(f"{where}: {message}")


## Workers
def worker_count():
    raw = os.environ.get(THREADS_ENV_VAR, "0").strip() or "0"
    try:
        requested = int(raw)
    except ValueError:
        raise ConfigError(THREADS_ENV_VAR, f"expected a non-negative integer, got {raw!r}")
    if requested < 0:
        raise ConfigError(THREADS_ENV_VAR, f"expected a non-negative integer, got {requested}")
    if requested == 0:
        return os.cpu_count() or 1
    return requested


# contiguous [start, stop) row ranges covering n rows
def row_chunks(n, chunk_size=ROW_CHUNK_SIZE):
    return [(start, min(start + chunk_size, n)) for start in range(0, n, chunk_size)]


## Input
# fn: callable on a (chunk_rows, ...) slice of rows returning an array with the same leading dimension
# rows: array whose first axis is split into contiguous chunks
## Output
# np.concatenate of fn over chunks, in chunk order (independent of the number of workers)
def map_row_chunks(fn, rows, chunk_size=ROW_CHUNK_SIZE):
    chunks = row_chunks(len(rows), chunk_size)
    if len(chunks) <= 1:
        return fn(rows)
    n_workers = min(worker_count(), len(chunks))
    if n_workers == 1:
        parts = [fn(rows[start:stop]) for start, stop in chunks]
    else:
        with ThreadPool(n_workers) as pool:
            parts = pool.map(lambda bounds: fn(rows[bounds[0]:bounds[1]]), chunks)
    return np.concatenate(parts, axis=0)


def format_float(value):
    # repr gives the shortest string that round-trips; non-finite values become empty cells
    if value is None or not math.isfinite(value):
        return ""
    return repr(float(value))


class ExperimentError(GmmError):
    def __init__(self, experiment, seed, cause):
        self.experiment = experiment
        self.seed = seed
        self.cause = cause
        super().__init__(f"experiment {experiment}, seed {seed}: {cause}")


# fn over items on up to worker_count() threads; results keep the order of items
def map_parallel(fn, items):
    items = list(items)
    n_workers = min(worker_count(), len(items))
    if n_workers <= 1:
        return [fn(item) for item in items]
    with ThreadPool(n_workers) as pool:
        return pool.map(fn, items)
