"""Smoke test for the noisyrefine_py extension.

Build and run from the workspace root:

    cargo build -p noisyrefine-py --features extension-module --release
    cp target/release/libnoisyrefine_py.so crates/py/python/noisyrefine_py.so
    python3 crates/py/python/smoke_test.py
"""

import math
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import noisyrefine_py as nr


def check(cond, what):
    if not cond:
        raise AssertionError(what)
    print(f"ok  {what}")


def main():
    train = nr.generate_blobs("train", train_size=600, test_size=200)
    check(len(train) == 600 and train.num_classes == 3, "blobs dataset shape")
    check(train.shape == (8, 8, 3), "image shape is (8, 8, 3)")

    noisy, ledger = nr.inject_idn(train, 0.3, seed=7)
    flips = sum(a != b for a, b in zip(noisy.clean_labels, noisy.noisy_labels))
    check(flips == sum(ledger.flipped), "ledger matches the label tracks")
    check(abs(ledger.realized_rate - 0.3) < 0.02, f"realized rate {ledger.realized_rate:.4f}")
    again, _ = nr.inject_idn(train, 0.3, seed=7)
    check(again.noisy_labels == noisy.noisy_labels, "noise is deterministic per seed")
    stats = nr.noise_statistics(noisy, ledger)
    check(abs(stats["overall_rate"] - ledger.realized_rate) < 1e-12, "noise statistics agree")

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ledger.tsv"
        ledger.write_tsv(path)
        check(nr.FlipLedger.read_tsv(path).flipped == ledger.flipped, "ledger round-trips through TSV")

    pixels, shape = nr.augment(train.image(0), train.shape, seed=1)
    check(shape == train.shape and len(pixels) == 8 * 8 * 3, "augmented view keeps the shape")
    same, _ = nr.augment(train.image(0), train.shape, seed=1)
    check(same == pixels, "augmentation is deterministic per seed")

    for k in (2, 10, 100):
        ce = nr.cross_entropy([0.0] * k, 0)
        check(abs(ce - math.log(k)) < 1e-9, f"uniform cross-entropy is ln {k}")

    views = [[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]
    loss = nr.nt_xent_loss(views, temperature=0.5)
    check(math.isfinite(loss) and loss > 0, f"NT-Xent on aligned pairs {loss:.4f}")

    sel = nr.consensus([[0.5, 1.0, 0.2, 3.0], [0.1, 0.1, 0.9, 0.1]], threshold=1.0)
    check(sel == [0, 2], "consensus is the per-stage intersection")

    try:
        nr.inject_idn(train, 0.9, seed=1)
    except ValueError as e:
        check("target_rate" in str(e), "impossible noise rate is rejected")
    else:
        raise AssertionError("rate above 1 - 1/K accepted")

    cfg = nr.RunConfig.from_toml(
        """
seed = 3
output_dir = "unused"
iterations = 1
[dataset.blobs]
train_size = 120
test_size = 60
[model]
preset = "mlp"
[contrastive]
epochs = 2
batch_size = 32
[train]
warmup_epochs = 2
batch_size = 32
[[stage_plan.schedule]]
iteration_epochs = 3
stage_epochs = [1, 3]
"""
    )
    check(nr.RunConfig.from_toml(cfg.to_toml()).to_toml() == cfg.to_toml(), "config round-trips")
    out = nr.run_pipeline(cfg)
    check(0.0 <= out["test_accuracy"] <= 1.0, f"pipeline test accuracy {out['test_accuracy']:.3f}")
    check(len(out["consensus_sizes"]) == 1, "one refinement iteration ran")
    check(nr.run_pipeline(cfg)["final_labels"] == out["final_labels"], "pipeline is deterministic")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
