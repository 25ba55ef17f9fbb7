import numpy as np
import pytest

from prefixgen.model import ModelConfig, PrefixLM
from prefixgen.smiles import build_vocab, tokenize


def tiny_model(seed=0, d=16, n_heads=2, n_layers=2, max_len=32):
    vocab = build_vocab([tokenize(s) for s in ["CCO", "c1ccccc1N", "C(=O)Cl", "CC#N", "C1CC1Br"]])
    cfg = ModelConfig(len(vocab), d=d, n_heads=n_heads, n_layers=n_layers, max_len=max_len, seed=seed,
                      pocket_d_f=8, pocket_d_e=8, pocket_c_v=2, pocket_layers=1)
    return PrefixLM(cfg, vocab)


@pytest.fixture
def model():
    return tiny_model()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one summary line per acceptance criterion, printed after the run
_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    marker = "test_acceptance.py::test_criterion_"
    if marker not in report.nodeid:
        return
    if report.when != "call" and not report.failed:
        return
    num = int(report.nodeid.split(marker)[1].split("_")[0])
    detail = dict(report.user_properties).get("detail", "")
    status = "PASS" if report.passed else "FAIL"
    if _ACCEPTANCE.get(num, ("PASS",))[0] == "PASS":
        _ACCEPTANCE[num] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        status, detail = _ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {status}  {detail}")
