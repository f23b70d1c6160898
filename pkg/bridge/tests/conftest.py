"""Spawns a real engine process; the bridge only ever talks to its socket."""

import shutil
import subprocess
import sys

import pytest


@pytest.fixture(scope="session")
def engine_port():
    exe = shutil.which("semamatch")
    if exe is None:
        pytest.skip("semamatch engine CLI not installed")
    proc = subprocess.Popen(
        [exe, "serve", "--address", "127.0.0.1:0"],
        stdout=subprocess.PIPE,
        stderr=subprocess.STDOUT,
        text=True,
    )
    line = proc.stdout.readline().strip()
    if not line.startswith("listening on"):
        proc.terminate()
        raise RuntimeError(f"unexpected engine banner: {line!r}")
    port = int(line.rsplit(":", 1)[1])
    yield port
    proc.terminate()
    try:
        proc.wait(timeout=5)
    except subprocess.TimeoutExpired:
        proc.kill()
