import io
import wave

import numpy as np
import pytest


def write_raw_wav(path, data, sample_rate=16000, channels=1, width=2):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(width)
        wf.setframerate(sample_rate)
        wf.writeframes(data)


def roundtrip(write_fn, read_fn, obj):
    """Serialize, parse and serialize again; returns (parsed, bytes1, bytes2)."""
    buf = io.BytesIO()
    write_fn(obj, buf)
    first = buf.getvalue()
    parsed = read_fn(io.BytesIO(first))
    buf2 = io.BytesIO()
    write_fn(parsed, buf2)
    return parsed, first, buf2.getvalue()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance verdicts: tests/test_acceptance.py records one line per
# criterion here; they are printed after the run even when output is captured.
ACCEPTANCE = {}


def record_criterion(number, title, passed, detail):
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
