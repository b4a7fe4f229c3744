import hashlib
import numpy as np
import os
import pytest

import kdnnp.common.utils as utils


def test_create_directory(workspace):
    dname = os.path.join(workspace, "oh_hello")
    assert not os.path.exists(dname)
    assert utils.create_directory(dname)
    assert utils.create_directory(dname)


def test_create_directory_recreate(workspace):
    dname = os.path.join(workspace, "run")
    utils.create_directory(dname)
    open(os.path.join(dname, "stale.txt"), 'w').close()
    assert utils.create_directory(dname, recreate=True)
    assert os.listdir(dname) == []


def test_colored():
    text = utils.colored("hello", "red")
    assert "hello" in text
    assert text != "hello"


def test_conditional_colored():
    assert utils.conditional_colored(2.0, 1.0) == "2.0000"
    assert utils.conditional_colored(0.5, 1.0) != "0.5000"
    assert "0.5000" in utils.conditional_colored(0.5, 1.0)


def test_file_sha256(workspace):
    path = os.path.join(workspace, "blob.bin")
    with open(path, 'wb') as fh:
        fh.write(b"kdnnp" * 1000)
    assert utils.file_sha256(path, chunk_size=7) == \
        hashlib.sha256(b"kdnnp" * 1000).hexdigest()


def test_make_rng_is_seeded():
    a = utils.make_rng(12).standard_normal(5)
    b = utils.make_rng(12).standard_normal(5)
    c = utils.make_rng(13).standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    # u64 seeds
    utils.make_rng(2 ** 64 - 1).random()


def test_timer_holder():
    timers = utils.TimerHolder()
    timers.start("a")
    assert timers.get("a") is None
    elapsed = timers.end("a")
    assert elapsed >= 0
    assert timers.get("a") == elapsed

    timers.start("a")
    assert timers.get("a") is None
    timers.start(("trial", 1))
    assert timers.end(("trial", 1)) >= 0
    assert timers.get("missing") is None


@pytest.mark.parametrize("enabled", [False, True])
def test_track(enabled):
    assert list(utils.track(iter(range(5)), 5, enabled)) == list(range(5))
    assert list(utils.track([], 0, enabled)) == []
