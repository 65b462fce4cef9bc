import re

import numpy as np
import pytest

from relcl.corpus import SentenceRecord, encode_bio


def fd_gradient(f, x, eps=1e-5):
    """Central differences of scalar f(x) written independently of the package helpers."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += eps
        down[idx] -= eps
        g[idx] = (f(up) - f(down)) / (2 * eps)
    return g


def make_record(rid, words, spans, relations, cls=True):
    """Record from plain words and inclusive (start, end, type) spans over those words."""
    off = 1 if cls else 0
    tokens = (["[CLS]"] if cls else []) + list(words)
    spans = [(s + off, e + off, t) for s, e, t in spans]
    rels = [(d + off, a + off) for d, a in relations]
    return SentenceRecord(rid, tokens, encode_bio(spans, len(tokens)), sorted(rels)).validate()


@pytest.fixture
def naproxen_record():
    # "two cases of pseudoporphyria caused by naproxen and oxaprozin"
    words = ["two", "cases", "of", "pseudoporphyria", "caused", "by", "naproxen", "and", "oxaprozin"]
    return make_record("ade-0", words, [(3, 3, "AE"), (6, 6, "DRUG"), (8, 8, "DRUG")], [(6, 3), (8, 3)])


ACCEPTANCE_RESULTS = []


def record_criterion(number, ok, detail):
    """Remember one acceptance outcome; all are printed in the terminal summary."""
    ACCEPTANCE_RESULTS.append((number, bool(ok), detail))
    return ok


def pytest_terminal_summary(terminalreporter):
    rows = [(n, "PASS" if ok else "FAIL", detail) for n, ok, detail in ACCEPTANCE_RESULTS]
    for rep in terminalreporter.stats.get("skipped", []):
        m = re.search(r"test_criterion_(\d+)", rep.nodeid)
        if m:
            reason = rep.longrepr[2] if isinstance(rep.longrepr, tuple) else str(rep.longrepr)
            rows.append((int(m.group(1)), "SKIP", reason.removeprefix("Skipped: ")))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, detail in sorted(rows, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number}: {status}  {detail}")
