import hashlib
from dataclasses import asdict
from pathlib import Path

import pytest

_VERDICTS: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    """Record one acceptance line: ``verdict(name, passed, detail)``."""

    def record(name: str, passed: bool, detail: str):
        _VERDICTS[name] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_VERDICTS, key=lambda n: int(n.split()[0][1:])):
        ok, detail = _VERDICTS[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def _source_digest() -> str:
    import mepd

    h = hashlib.sha256()
    for f in sorted(Path(mepd.__file__).parent.glob("*.py")):
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def trained_table(request):
    """Train (or reuse a cached copy of) a parameter table.

    The cache key covers the training configuration, the SNR grid and the
    package sources, so any code change forces a retrain.
    """
    from mepd.learn import load_table, save_table, train_table

    cache = getattr(request.config, "cache", None)
    memo = {}

    def get(base, snrs):
        key = hashlib.sha256(repr((asdict(base), list(snrs), _source_digest())).encode()).hexdigest()[:20]
        if key in memo:
            return memo[key]
        if cache is not None:
            path = Path(cache.mkdir("mepd-tables")) / f"{key}.txt"
            if path.exists():
                memo[key] = load_table(path)
                return memo[key]
        table, _ = train_table(base, snrs)
        if cache is not None:
            save_table(table, path)
        memo[key] = table
        return table

    return get
