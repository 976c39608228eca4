"""The command-line workflow end to end: write a run spec, train, evaluate a
checkpoint against a saved dataset blob, and query prediction uncertainty.

The training run is kept deliberately short (~10 s) to showcase the file
outputs; see 03_synthetic_rank_recovery.py for a budget that actually
collapses ranks.  Everything lands in ./demo_run/.
"""

import json
from pathlib import Path

from tensorard import cli

out = Path("demo_run")
out.mkdir(exist_ok=True)

spec = {
    "model": {
        "classes": 10,
        "layers": [
            {"type": "tensorized_linear", "format": "cp", "row_dims": [28, 28],
             "col_dims": [10], "max_rank": 10, "activation": "identity"}
        ],
    },
    "data": {
        "kind": "synthetic", "format": "cp", "row_dims": [28, 28],
        "col_dims": [10], "true_rank": 5, "num_samples": 1024,
        "test_samples": 256, "seed": 101,
    },
    "train": {
        "epochs": 120, "batch_size": 128, "learning_rate": 4.88e-4,
        "rank_step": 0.1, "prune_threshold": 1e-2, "seed": 0,
        "hyper_prior": {"kind": "log_uniform"},
    },
    "output_dir": str(out / "run"),
}
spec_path = out / "spec.json"
spec_path.write_text(json.dumps(spec, indent=2))

print("== tensorard train ==")
assert cli.main(["train", "--spec", str(spec_path)]) == 0

print("\n== tensorard synth-gen (save the dataset as a blob) ==")
assert cli.main(["synth-gen", "--spec", str(spec_path), "--out", str(out / "data")]) == 0

print("\n== tensorard eval ==")
assert cli.main([
    "eval",
    "--checkpoint", str(out / "run" / "checkpoint_final.npz"),
    "--data", str(out / "data_test"),
]) == 0

print("\n== tensorard predict ==")
probe = out / "probe.json"
probe.write_text(json.dumps([0.5] * 784))
assert cli.main([
    "predict",
    "--checkpoint", str(out / "run" / "checkpoint_final.npz"),
    "--input", str(probe),
    "--samples", "64",
    "--out", str(out / "prediction.json"),
]) == 0
print(f"wrote {out/'prediction.json'}")

metrics_head = (out / "run" / "metrics.csv").read_text().splitlines()
print("\nmetrics.csv columns:", metrics_head[0])
print("last epoch row:   ", metrics_head[-1])
