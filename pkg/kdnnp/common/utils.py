import hashlib
import logging
import numpy as np
import os
import shutil
import timeit

import boltons.fileutils
import colorama
import progressbar

COLOR_MAP = {
    "yellow": colorama.Fore.YELLOW,
    "red": colorama.Fore.RED,
    "green": colorama.Fore.GREEN,
    "blue": colorama.Fore.BLUE,
    "magenta": colorama.Fore.MAGENTA,
    "cyan": colorama.Fore.CYAN,
    "white": colorama.Fore.WHITE
}

logger = logging.getLogger(__name__)


def create_directory(dname, recreate=False):
    """Create the output directory recursively if it doesn't already exist.

    Parameters
    ----------
    dname : str
        Directory to create.

    recreate : bool
        If True, an existing directory is removed first.

    Returns
    -------
    success : bool
        True if the requested directory now exists.
    """
    if recreate and os.path.isdir(dname):
        logger.info(colored("Cleaning path: {}".format(dname)))
        shutil.rmtree(dname)

    boltons.fileutils.mkdir_p(dname)
    return os.path.exists(dname)


def colored(text, color="yellow"):
    """Wrap `text` in a terminal color from COLOR_MAP."""
    return COLOR_MAP[color] + str(text) + colorama.Style.RESET_ALL


def conditional_colored(value, minval, formatstr="{:0.4f}", color="green"):
    val_str = formatstr.format(float(value))
    if value < minval:
        val_str = colored(val_str, color)
    return val_str


def result_colored(result):
    return (colored("Success", "green") if result
            else colored("Failed", "red"))


def file_sha256(path, chunk_size=1 << 20):
    """Hex sha256 digest of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, 'rb') as fh:
        for chunk in iter(lambda: fh.read(chunk_size), b''):
            digest.update(chunk)
    return digest.hexdigest()


def track(iterable, total, enabled=True):
    """Yield from `iterable`, drawing a progress bar over `total` items
    when enabled."""
    if not enabled:
        yield from iterable
        return
    bar = progressbar.ProgressBar(max_value=max(total, 1))
    for count, item in enumerate(iterable, 1):
        yield item
        bar.update(count)
    bar.finish()


def make_rng(seed):
    """A numpy Generator from an integer seed (u64 seeds accepted)."""
    return np.random.default_rng(int(seed))


class TimerHolder(object):
    """Named wall-clock timers for stages and timing trials.

    A stage run twice keeps only its latest interval.
    """
    def __init__(self):
        self.started = {}
        self.elapsed = {}

    def start(self, key):
        self.elapsed.pop(key, None)
        self.started[key] = timeit.default_timer()

    def end(self, key):
        """Stop `key` and return its elapsed seconds."""
        self.elapsed[key] = timeit.default_timer() - self.started.pop(key)
        return self.elapsed[key]

    def get(self, key):
        """Elapsed seconds of a stopped timer; None if unknown or running."""
        return self.elapsed.get(key)
