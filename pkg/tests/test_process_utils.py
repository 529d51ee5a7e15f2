import threading

import pytest

from utils.process_utils import THREADS_ENV, ProcessUtils


def test_results_keep_input_order():
    assert ProcessUtils.fan_out(lambda x: x * x, range(20), max_workers=4) == [x * x for x in range(20)]


def test_serial_for_single_worker():
    seen = []
    ProcessUtils.fan_out(lambda x: seen.append(threading.get_ident()), range(5), max_workers=1)
    assert set(seen) == {threading.get_ident()}


def test_first_error_propagates():
    def boom(x):
        if x == 3:
            raise KeyError(x)
        return x

    with pytest.raises(KeyError):
        ProcessUtils.fan_out(boom, range(6), max_workers=3)


@pytest.mark.parametrize('value', ['', 'many'])
def test_thread_limit_fallback(monkeypatch, value):
    monkeypatch.setattr('psutil.cpu_count', lambda logical=True: 6)
    monkeypatch.setenv(THREADS_ENV, value)
    assert ProcessUtils.thread_limit() == 6


def test_thread_limit_bounds(monkeypatch):
    monkeypatch.setattr('psutil.cpu_count', lambda logical=True: 6)
    monkeypatch.setenv(THREADS_ENV, '2')
    assert ProcessUtils.thread_limit() == 2
    monkeypatch.setenv(THREADS_ENV, '64')
    assert ProcessUtils.thread_limit() == 6
    monkeypatch.setenv(THREADS_ENV, '0')
    assert ProcessUtils.thread_limit() == 1
