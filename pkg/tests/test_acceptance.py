"""Release gate: every acceptance criterion at its stated tolerance.

Each criterion prints its own pass/fail line via the suite runner; here
pytest drives them one by one so a single red criterion is visible
without aborting the rest. The heavy directional criteria dominate the
runtime (a few minutes total).
"""

import pytest

from dpfedsim.acceptance import CRITERIA


@pytest.mark.parametrize(
    "number,title,fn",
    [pytest.param(n, t, f, id=f"criterion-{n:02d}") for n, t, f in sorted(CRITERIA)],
)
def test_criterion(number, title, fn, tmp_path):
    passed, details = fn(tmp_path)
    print(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title} - {details}")
    assert passed, f"criterion {number} ({title}): {details}"
