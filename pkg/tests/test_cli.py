import json

import numpy as np
import pytest

from tensorard import cli


def synthetic_runspec(out_dir, seed=0, prior=None, epochs=6):
    return {
        "model": {
            "classes": 3,
            "layers": [
                {
                    "type": "tensorized_linear",
                    "format": "cp",
                    "row_dims": [4],
                    "col_dims": [3],
                    "max_rank": 3,
                    "activation": "identity",
                }
            ],
        },
        "data": {
            "kind": "synthetic",
            "format": "cp",
            "row_dims": [4],
            "col_dims": [3],
            "true_rank": 1,
            "num_samples": 96,
            "test_samples": 32,
            "seed": 11,
        },
        "train": {
            "epochs": epochs,
            "batch_size": 32,
            "learning_rate": 2e-3,
            "rank_step": 0.1,
            "prune_threshold": 1e-8,
            "seed": seed,
            "hyper_prior": prior or {"kind": "log_uniform"},
        },
        "output_dir": str(out_dir),
    }


def write_spec(tmp_path, spec, name="spec.json"):
    path = tmp_path / name
    path.write_text(json.dumps(spec))
    return path


class TestValidation:
    def test_unknown_key_rejected(self, tmp_path, capsys):
        spec = synthetic_runspec(tmp_path / "out")
        spec["unknown_field"] = 1
        rc = cli.main(["train", "--spec", str(write_spec(tmp_path, spec))])
        assert rc == 2
        assert "unknown_field" in capsys.readouterr().err

    def test_missing_dataset_field_named(self, tmp_path, capsys):
        spec = synthetic_runspec(tmp_path / "out")
        del spec["data"]["num_samples"]
        rc = cli.main(["train", "--spec", str(write_spec(tmp_path, spec))])
        assert rc == 2
        err = capsys.readouterr().err
        assert "data" in err and "num_samples" in err

    def test_bad_hyper_prior_rejected(self, tmp_path, capsys):
        spec = synthetic_runspec(tmp_path / "out", prior={"kind": "half_cauchy"})
        rc = cli.main(["train", "--spec", str(write_spec(tmp_path, spec))])
        assert rc == 2
        assert "scale" in capsys.readouterr().err

    def test_missing_spec_file(self, tmp_path, capsys):
        rc = cli.main(["train", "--spec", str(tmp_path / "nope.json")])
        assert rc == 2


class TestTrainCommand:
    def test_writes_outputs_and_exits_zero(self, tmp_path, capsys):
        out = tmp_path / "run"
        spec_path = write_spec(tmp_path, synthetic_runspec(out))
        rc = cli.main(["train", "--spec", str(spec_path)])
        assert rc == 0
        for name in ("report.json", "metrics.csv", "ranks.json",
                     "checkpoint_last.npz", "checkpoint_final.npz"):
            assert (out / name).exists(), name
        header = (out / "metrics.csv").read_text().splitlines()[0].split(",")
        assert header[:7] == ["epoch", "loss", "nll", "kl", "beta", "train_acc", "test_acc"]
        assert header[7].startswith("rank_")
        ranks = json.loads((out / "ranks.json").read_text())
        assert ranks["layers"][0]["kind"] == "cp"

    def test_rerun_identical_metrics_and_ranks(self, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        spec_a = write_spec(tmp_path, synthetic_runspec(out_a), "a.json")
        spec_b = write_spec(tmp_path, synthetic_runspec(out_b), "b.json")
        assert cli.main(["--deterministic", "train", "--spec", str(spec_a)]) == 0
        assert cli.main(["--deterministic", "train", "--spec", str(spec_b)]) == 0
        assert (out_a / "metrics.csv").read_bytes() == (out_b / "metrics.csv").read_bytes()
        assert (out_a / "ranks.json").read_bytes() == (out_b / "ranks.json").read_bytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergent_training_exits_three(self, tmp_path, capsys):
        spec = synthetic_runspec(tmp_path / "d")
        spec["train"]["learning_rate"] = 1e18  # drives the loss non-finite
        spec["train"]["epochs"] = 5
        rc = cli.main(["train", "--spec", str(write_spec(tmp_path, spec))])
        assert rc == 3
        assert "aborted" in capsys.readouterr().err


class TestEvalCommand:
    def test_eval_prints_counts(self, tmp_path, capsys):
        out = tmp_path / "run"
        spec = synthetic_runspec(out)
        spec_path = write_spec(tmp_path, spec)
        assert cli.main(["train", "--spec", str(spec_path)]) == 0
        assert cli.main(["synth-gen", "--spec", str(spec_path), "--out",
                         str(tmp_path / "blob")]) == 0
        capsys.readouterr()
        rc = cli.main([
            "eval",
            "--checkpoint", str(out / "checkpoint_final.npz"),
            "--data", str(tmp_path / "blob"),
        ])
        assert rc == 0
        text = capsys.readouterr().out
        assert "accuracy" in text
        assert "compression ratio" in text

    def test_eval_without_data_exits_two(self, tmp_path, capsys):
        out = tmp_path / "run"
        spec_path = write_spec(tmp_path, synthetic_runspec(out))
        assert cli.main(["train", "--spec", str(spec_path)]) == 0
        rc = cli.main(["eval", "--checkpoint", str(out / "checkpoint_final.npz")])
        assert rc == 2


class TestPredictCommand:
    def _trained_checkpoint(self, tmp_path):
        out = tmp_path / "run"
        spec_path = write_spec(tmp_path, synthetic_runspec(out))
        assert cli.main(["train", "--spec", str(spec_path)]) == 0
        return out / "checkpoint_final.npz"

    def test_zero_std_checkpoint_gives_zero_stds(self, tmp_path, capsys):
        from tensorard import checkpoint

        ck = self._trained_checkpoint(tmp_path)
        net = checkpoint.load_network(ck)
        for f in net.layers[0].weight.factors:
            f.std[...] = 0.0
        net.layers[0].bias.std[...] = 0.0
        frozen = tmp_path / "frozen.npz"
        checkpoint.save_network(net, frozen)
        inp = tmp_path / "x.json"
        inp.write_text(json.dumps([0.1, -0.2, 0.3, 0.4]))
        capsys.readouterr()
        rc = cli.main(["predict", "--checkpoint", str(frozen), "--input", str(inp),
                       "--samples", "16"])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert all(s == 0.0 for s in payload["std"])
        assert abs(sum(payload["mean"]) - 1.0) < 1e-9

    def test_fixed_seed_identical_json(self, tmp_path, capsys):
        ck = self._trained_checkpoint(tmp_path)
        inp = tmp_path / "x.json"
        inp.write_text(json.dumps([0.5, 0.5, -0.5, 0.1]))
        outputs = []
        for _ in range(2):
            capsys.readouterr()
            rc = cli.main(["predict", "--checkpoint", str(ck), "--input", str(inp),
                           "--samples", "20", "--seed", "4"])
            assert rc == 0
            outputs.append(capsys.readouterr().out)
        assert outputs[0] == outputs[1]

    def test_sample_count_validated(self, tmp_path, capsys):
        ck = self._trained_checkpoint(tmp_path)
        inp = tmp_path / "x.json"
        inp.write_text(json.dumps([0.0, 0.0, 0.0, 0.0]))
        rc = cli.main(["predict", "--checkpoint", str(ck), "--input", str(inp),
                       "--samples", "1"])
        assert rc == 2


class TestSynthGen:
    def test_writes_blob_pair(self, tmp_path, capsys):
        spec_path = write_spec(tmp_path, synthetic_runspec(tmp_path / "o"))
        rc = cli.main(["synth-gen", "--spec", str(spec_path), "--out",
                       str(tmp_path / "ds")])
        assert rc == 0
        assert (tmp_path / "ds.json").exists()
        assert (tmp_path / "ds.bin").exists()
        assert (tmp_path / "ds_test.json").exists()
        from tensorard import datasets

        ds = datasets.load_dataset(tmp_path / "ds")
        assert len(ds) == 96

    def test_rejects_non_synthetic_spec(self, tmp_path, capsys):
        spec = synthetic_runspec(tmp_path / "o")
        spec["data"] = {"kind": "mnist", "train_images": "a", "train_labels": "b"}
        spec_path = write_spec(tmp_path, spec)
        rc = cli.main(["synth-gen", "--spec", str(spec_path), "--out",
                       str(tmp_path / "ds")])
        assert rc == 2
