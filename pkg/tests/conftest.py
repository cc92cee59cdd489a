import pytest

from proxytune import data as D
from proxytune.models import MlpClassifier, ModelHandle, Role
from proxytune.proxy import ProxyTriple


def frozen(model, role):
    return ModelHandle.frozen(model, role)


def make_triple(widths=(3, 5, 4), seed=0, same_frozen=False):
    tuned = MlpClassifier(list(widths), seed=seed)
    small = MlpClassifier(list(widths), seed=seed + 1)
    large = small if same_frozen else MlpClassifier([widths[0], 12, 12, widths[-1]], seed=seed + 2)
    return ProxyTriple(tuned, frozen(small, Role.FROZEN_SMALL), frozen(large, Role.FROZEN_LARGE))


@pytest.fixture
def triple():
    return make_triple()


@pytest.fixture(scope="session")
def blobs():
    broad, train, test = D.gen_blobs_shifted(0, 3, 3, 20, 1.5)
    st = D.Standardizer.fit(broad)
    return st(broad), st(train), st(test)


# -- acceptance summary ------------------------------------------------------

_VERDICTS: dict[str, str] = {}


def record_verdict(name: str, line: str) -> None:
    _VERDICTS[name] = line


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_VERDICTS, key=lambda k: int(k.split()[1])):
        terminalreporter.write_line(_VERDICTS[name])
