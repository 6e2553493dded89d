"""Discovery and invocation of external adapter executables.

Adapters are looked up by name in the directories listed (os.pathsep separated)
in ``FLOWSYNTH_ADAPTER_PATH``. An adapter for a diffusion generator is named
``flowsynth-gen-<name>``; one for a flow estimator ``flowsynth-flow-<name>``.
Files ending in ``.py`` are run with the current interpreter.
"""
import os
import subprocess
import sys
from pathlib import Path

ADAPTER_PATH_ENV = "FLOWSYNTH_ADAPTER_PATH"


def adapter_dirs():
    raw = os.environ.get(ADAPTER_PATH_ENV, "")
    return [Path(p) for p in raw.split(os.pathsep) if p]


def find_adapter(prefix, name):
    """Return the command list for adapter ``<prefix>-<name>``, or None."""
    stem = f"{prefix}-{name}"
    for d in adapter_dirs():
        for candidate in (d / stem, d / f"{stem}.py"):
            if candidate.is_file():
                if candidate.suffix == ".py":
                    return [sys.executable, str(candidate)]
                if os.access(candidate, os.X_OK):
                    return [str(candidate)]
    return None


def run_adapter(command, args, timeout=None):
    """Run an adapter; returns the CompletedProcess (never raises on exit status)."""
    return subprocess.run(
        [*command, *map(str, args)],
        capture_output=True,
        text=True,
        timeout=timeout,
    )
