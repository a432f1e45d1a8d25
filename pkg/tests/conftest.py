import numpy as np
import pytest

from reward_lens.engine import (
    PreferencePair,
    TransformerConfig,
    build_planted_model,
    build_seeded_model,
    full_vocab_size,
)

_acceptance: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "_acceptance", None)
    if marker is None:
        return
    number, title = marker
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        # a criterion may span several tests; any failure fails the criterion
        previous = _acceptance.get(number, (title, "PASS"))[1]
        status = "PASS" if report.passed and previous == "PASS" else "FAIL"
        _acceptance[number] = (title, status)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    m = item.get_closest_marker("acceptance")
    if m is not None:
        outcome.get_result()._acceptance = tuple(m.args)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        title, status = _acceptance[number]
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {title}")


# -- shared models ----------------------------------------------------------

VOCAB = full_vocab_size()


def seeded(n_layers=2, d_model=16, n_heads=2, seed=0, **kw):
    cfg = TransformerConfig(n_layers=n_layers, d_model=d_model, n_heads=n_heads,
                            vocab_size=kw.pop("vocab_size", VOCAB), **kw)
    return build_seeded_model(cfg, seed=seed)


def planted(n_layers=3, d_model=48, layer=1, trigger="a", component="mlp", gain=5.0, **kw):
    cfg = TransformerConfig(n_layers=n_layers, d_model=d_model, n_heads=4, vocab_size=kw.pop("vocab_size", 40))
    return build_planted_model(cfg, layer=layer, trigger_token=trigger, component=component, gain=gain, **kw)


@pytest.fixture(scope="session")
def small_model():
    return seeded()


@pytest.fixture(scope="session")
def model_l4():
    return seeded(n_layers=4, d_model=32, n_heads=4, seed=1)


@pytest.fixture(scope="session")
def planted_mlp():
    return planted()


@pytest.fixture
def pair():
    return PreferencePair("what is the capital of france", "paris is the capital", "the sky is blue")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def synthetic_dictionary(seed, d=32, F=48, k=3, N=20000, bias_scale=0.1):
    """Ground-truth unit dictionary and samples that each mix k of its rows with weights in [0.5, 1.5]."""
    rng = np.random.default_rng(seed)
    D = rng.normal(size=(F, d))
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    b = rng.normal(scale=bias_scale, size=d)
    idx = np.argsort(rng.random((N, F)), axis=1)[:, :k]
    coef = np.zeros((N, F))
    np.put_along_axis(coef, idx, rng.uniform(0.5, 1.5, size=(N, k)), axis=1)
    return D, coef @ D + b


def recovered_fraction(D, W_dec, cutoff=0.9):
    """Share of ground-truth rows whose best decoder match has |cosine| above the cutoff."""
    Dn = D / np.linalg.norm(D, axis=1, keepdims=True)
    Wn = W_dec / np.linalg.norm(W_dec, axis=1, keepdims=True)
    return float((np.abs(Dn @ Wn.T).max(axis=1) > cutoff).mean())
