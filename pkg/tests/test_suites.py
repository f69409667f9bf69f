import pytest

from desklm import suites
from desklm.errors import BundleError


@pytest.mark.parametrize("name", sorted(suites.SUITES))
def test_suite_passes(name):
    kw = {}
    if name == "lora-equivalence":
        kw = {"n_models": 1, "n_adapters": 2, "n_prompts": 5}
    if name == "compression":
        kw = {"n_prompts": 30}
    if name == "graph-passes":
        kw = {"n_feeds": 3}
    report = suites.run_suite(name, seed=0, **kw)
    assert report.passed(), report.flags
    assert report.schema == 1
    for rec in report.metrics.values():
        assert "source" in rec  # every metric carries provenance


def test_unknown_suite_rejected():
    with pytest.raises(BundleError):
        suites.run_suite("nope")


def test_report_json_is_stable(tmp_path):
    a = suites.run_suite("ctg-latency", seed=1)
    b = suites.run_suite("ctg-latency", seed=1)
    da, db = a.to_dict(), b.to_dict()
    da.pop("wall_clock_s"), db.pop("wall_clock_s")
    assert da == db
