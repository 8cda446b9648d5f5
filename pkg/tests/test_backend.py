import os
import subprocess
import sys

import pytest

from bevsplat import backend


def test_thread_count(monkeypatch):
    monkeypatch.delenv("BEVSPLAT_THREADS", raising=False)
    assert backend.thread_count(3) == 3
    assert backend.thread_count(0) == 1
    assert backend.thread_count() == (os.cpu_count() or 1)
    monkeypatch.setenv("BEVSPLAT_THREADS", "5")
    assert backend.thread_count() == 5


def test_unknown_backend():
    with pytest.raises(ValueError):
        backend.get_kernels("fortran")
    assert backend.get_kernels("python") is backend.BACKENDS["python"]


def test_env_forces_fallback():
    env = dict(os.environ, BEVSPLAT_BACKEND="python")
    code = "from bevsplat import backend; print(backend.BACKEND_NAME)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_compiled_core_built():
    # the package is expected to ship with its extension; the fallback is for broken builds
    assert backend.BACKEND_NAME == "cython"


def test_backend_benchmark_script(tmp_path):
    script = os.path.join(os.path.dirname(__file__), "..", "benchmarks", "bench_backends.py")
    out = tmp_path / "rows.json"
    res = subprocess.run(
        [sys.executable, script, "--n", "200", "--resolution", "32", "--channels", "2", "--reps", "1", "--json", str(out)],
        capture_output=True,
        text=True,
    )
    assert res.returncode == 0, res.stderr
    assert "python_fwd_ms" in res.stdout and out.exists()
