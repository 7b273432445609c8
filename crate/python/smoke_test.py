"""Smoke test for the `minisan` Python module.

Build and install first:
    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/minisan-*.whl
then run:  python python/smoke_test.py
"""

from pathlib import Path

import minisan

CORPUS = Path(__file__).resolve().parent.parent / "corpus"

OVERFLOW = """
fn main {
entry:
  %p = call malloc(10)
  %q = gep %p, [12 x 1]
  %v = load i8, %q
  ret %v
}
"""


def main():
    r = minisan.run(OVERFLOW)
    assert r.exit_code == 1, r
    assert r.status == "aborted"
    [rep] = r.reports
    assert rep.kind == "heap-buffer-overflow" and rep.access == "r" and rep.size == 1
    assert r.stats["slow_checks_executed"] == 1

    slow = minisan.run(OVERFLOW, mode="slow-only")
    assert [x.kind for x in slow.reports] == [rep.kind]
    assert slow.stats["fast_checks_executed"] == 0

    p = minisan.Program.from_file(str(CORPUS / "elimination.ir"))
    statuses = [s.rsplit("status=", 1)[1] for s in p.sites]
    assert statuses == ["eliminated:unsat", "eliminated:unsat", "eliminated:loop", "eliminated:loop"], statuses
    assert p.active_sites == 0
    assert minisan.Program.from_file(str(CORPUS / "elimination.ir"), opt={"unsat": False}).active_sites == 2

    two = minisan.Program(
        (CORPUS / "scenarios" / "recover_two_stores.ir").read_text(), recover=True
    ).run()
    assert len(two.reports) == 2, two

    s = minisan.corpus(str(CORPUS / "juliet"))
    assert s["total"]["detected"] == s["total"]["buggy"]
    assert s["total"]["false_positive"] == 0

    d = minisan.diff((CORPUS / "scenarios" / "straddle.ir").read_text())
    assert "class=known:straddle" in d, d

    sh = minisan.ShadowMemory(64)
    sh.poison(0, 64)
    sh.unpoison(8, 5)
    assert sh.get(8) == 5
    assert sh.check(8, 4) is None
    assert sh.check(10, 4) == 13

    assert minisan.fast_check(0x89898989, 4)
    assert not minisan.fast_check(0x89898988, 4)
    assert minisan.generate(7) == minisan.generate(7)

    try:
        minisan.run("fn main { e: %y = add %x, 1 \n ret }")
    except ValueError as e:
        assert "undefined register" in str(e)
    else:
        raise AssertionError("invalid program accepted")

    print("python smoke test ok")


if __name__ == "__main__":
    main()
