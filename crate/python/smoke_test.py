"""Smoke test for the textvid extension module.

Build first with `cargo build --release -p textvid-py`, then run
`python3 python/smoke_test.py`. The script copies the built library next to
a temporary import path, so no packaging tool is needed.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libtextvid.so"
        if lib.exists():
            break
    else:
        sys.exit("libtextvid.so not found; run `cargo build --release -p textvid-py`")
    tmp = Path(tempfile.mkdtemp())
    shutil.copy(lib, tmp / "textvid.so")
    sys.path.insert(0, str(tmp))
    import textvid

    return textvid


def main():
    tv = load_module()

    assert abs(tv.nce_loss([[0.3] * 5], [2]) - math.log(5)) < 1e-12
    assert tv.symmetric_loss([[4.2]]) == 0.0
    try:
        tv.nce_loss([[1.0, 2.0]], [2])
    except ValueError:
        pass
    else:
        raise AssertionError("out-of-range label accepted")

    hits = tv.retrieve_tokens([[1.0, 0.0]], ["a", "b", "c"], [[0.5, 0.0], [1.0, 0.0], [1.0, 0.0]], 2)
    assert [w for w, _ in hits[0]] == ["b", "c"], hits

    assert [tv.credit("oil", ["oil"] * m + ["x"] * (5 - m)) for m in (0, 1, 2, 5)] == [0.0, 0.5, 1.0, 1.0]
    assert round(tv.recall_metrics([1, 7])[3], 2) == 66.67

    with tempfile.TemporaryDirectory() as d:
        d = Path(d)
        tv.write_synthetic(str(d / "data"), "train_samples = 32\ntest_samples = 8\nvocab_size = 40\nanswers = 8\n")
        assert (d / "data" / "train.jsonl").exists()
        code = tv.run_cli(["train", "--profile", "desk", "--epochs", "1", "--variant", "CONTI_MULTI",
                           "--data", str(d / "data"), "--out", str(d / "train"), "--log", "warn"])
        assert code == 0, code
        model = tv.Model.load(str(d / "train" / "checkpoint"))
        assert model.variant == "CONTI_MULTI"
        emb = model.encode_answers(["salt", "oil"])
        assert len(emb) == 2 and len(emb[0]) == model.embedding_dim
        assert tv.run_cli(["eval"]) == 2

    print("textvid python smoke test passed")


if __name__ == "__main__":
    main()
