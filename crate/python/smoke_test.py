"""Smoke test for the clearhug Python extension.

Build and run from the repository root:

    cargo build --release -p clearhug-py --features extension-module
    cp target/release/libclearhug_py.so python/clearhug.so
    python3 python/smoke_test.py

or install with `pip install ./crates/py` (maturin) and run the script.
"""

import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import clearhug  # noqa: E402


def pos_beat(n, lead, beat):
    return 12 + lead * n + beat


def main():
    print("clearhug", clearhug.__version__)

    n = 2
    p = pos_beat(n, 1, 0)
    got = clearhug.allow_set(p, n, [p], "clear")
    want = sorted([pos_beat(n, i, 0) for i in range(12)] + [1])
    assert got == want, (got, want)
    assert clearhug.allow_set(p, n, [], "clear") == [1, p, p + 1]
    assert clearhug.allow_set(p, n, [p], "no-ic-iv") == [p]

    masked = clearhug.sample_masked(15, 0.8, 0)
    assert len(masked) == 144
    m = clearhug.mask_matrix(15, masked, "clear", "decoder", "paper-literal")
    pairs = sum(sum(row) for row in m)
    assert pairs == 2640, pairs
    full = clearhug.mask_matrix(15, masked, "full")
    assert sum(sum(row) for row in full) == 192 * 192

    assert clearhug.roc_auc([0.1, 0.4, 0.35, 0.8], [False, False, True, True]) == 0.75
    macro, per_class, excluded = clearhug.macro_auc(
        [[0.9, 0.1], [0.2, 0.8], [0.7, 0.3]],
        [[True, False], [False, False], [True, False]],
        ["A", "B"],
    )
    assert macro == 1.0 and excluded == ["B"], (macro, per_class, excluded)

    rec = clearhug.synth_record(7, 0)
    assert len(rec.leads) == 12 and rec.sample_rate == 100
    peaks = clearhug.detect_r_peaks(rec.leads, rec.sample_rate)
    matched = sum(any(abs(a - b) <= 3 for b in peaks) for a in rec.peaks)
    assert matched >= len(rec.peaks) - 1, (rec.peaks, peaks)

    with tempfile.TemporaryDirectory() as d:
        assert clearhug.run_cli(["synth", "--n", "30", "--seed", "2", "--out", f"{d}/syn"]) == 0
        assert clearhug.run_cli([
            "tokenize", "--manifest", f"{d}/syn/manifest.json",
            "--n-beats", "3", "--beat-len", "8", "--out", f"{d}/tok",
        ]) == 0
        assert clearhug.run_cli([
            "pretrain", "--preset", "toy", "--epochs", "2", "--warmup-epochs", "1",
            "--train", f"{d}/tok/train.chtk", "--val", f"{d}/tok/val.chtk", "--out", f"{d}/pt",
        ]) == 0
        variant, policy, epoch, n_params = clearhug.checkpoint_info(f"{d}/pt/final.chck")
        assert (variant, policy, epoch) == ("clear", "paper-literal", 2) and n_params > 0
        assert clearhug.run_cli(["probe", "--out", d]) == 1

    try:
        clearhug.allow_set(0, 2, [], "sideways")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown variant accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
