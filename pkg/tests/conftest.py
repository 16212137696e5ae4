import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ssmn import datagen, factors

settings.register_profile("ssmn", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ssmn")


@pytest.fixture(scope="session")
def tiny_dataset():
    """Six categories of three images; 3/1/2 category split."""
    return datagen.generate_dataset(6, 3, 10, (0.5, 1 / 6, 1 / 3), seed=5)


@pytest.fixture(scope="session")
def prepared_pair(tiny_dataset):
    src, tgt = tiny_dataset.pair_list("train")[0]
    return factors.prepare_image(src), factors.prepare_image(tgt), datagen.gold_matching(src, tgt)


@pytest.fixture
def small_params(prepared_pair):
    src, tgt, _ = prepared_pair
    vocab = factors.PartNameTable(src.names[:6])
    return factors.FactorParams.initialize(factors.ModelSpec(), vocab, seed=1)


def random_pair(rng, k, size=8):
    """Synthetic PreparedImage pair with small random patches."""
    def image(tag):
        names = [datagen.VOCABULARY[i] for i in rng.choice(len(datagen.VOCABULARY), k, replace=False)]
        return factors.PreparedImage(tag, "c", names, rng.uniform(0.1, 0.9, size=(k, 2)),
                                     rng.uniform(size=(k, size, size)), rng.uniform(size=(k, size, size)))
    return image("s"), image("t")


# --- acceptance summary ----------------------------------------------------------------

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        detail = dict(item.user_properties).get("detail", "")
        if call.excinfo is None:
            status = "PASS"
        elif call.excinfo.errisinstance(pytest.skip.Exception):
            status = "SKIP"
        else:
            status = "FAIL"
            detail = detail or call.excinfo.exconly().splitlines()[0][:160]
        _criteria[n] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, status, detail = _criteria[n]
        terminalreporter.write_line(f"criterion {n:>2} {status}  {title}" + (f"  [{detail}]" if detail else ""))
