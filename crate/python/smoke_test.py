"""Smoke test for the `seqop` extension module.

Imports an installed `seqop` if there is one (e.g. after `maturin develop`
in crates/py); otherwise loads the shared library cargo left in target/.
Run with `python python/smoke_test.py` or under pytest.
"""

import importlib.util
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load():
    try:
        import seqop

        return seqop
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libseqop.so"
        if lib.exists():
            break
    else:
        sys.exit("no libseqop.so; run `cargo build -p seqop-py` first")
    # The loader wants the module name as the file stem.
    tmp = pathlib.Path(tempfile.mkdtemp())
    shutil.copy(lib, tmp / "seqop.so")
    spec = importlib.util.spec_from_file_location("seqop", tmp / "seqop.so")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


seqop = load()


def test_ema_modes_agree():
    r = seqop.ema_equivalence(256, trials=10)
    assert r["max_deviation"] < 1e-10, r
    assert r["trials"] == 10


def test_receptive_field():
    assert seqop.receptive_field(3, 3, 2) == 9
    assert seqop.receptive_field(17, 8, 4) == 9361
    assert seqop.minimal_dilation_factor(3, 4, 64) == 3


def test_bad_config_raises():
    try:
        seqop.receptive_field(0, 2, 2)
    except ValueError:
        return
    raise AssertionError("expected ValueError")


def test_gradcheck_ema():
    cases = seqop.gradcheck("ema")
    assert len(cases) == 3
    assert all(c["passed"] for c in cases), cases


def test_recall_samples():
    for tokens, target in seqop.recall_samples(9, 10, count=5, seed=1):
        assert len(tokens) == 9
        query = tokens[-1]
        assert query < 5 <= target < 10
        pairs = dict(zip(tokens[0::2], tokens[1::2]))
        assert pairs[query] == target


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
            print("ok", name)
