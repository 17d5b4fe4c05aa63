"""CLI runtime: subcommands, exit codes, artifact provenance, reproducibility."""

import json
from pathlib import Path

import pytest

from duothink.cli import main


def _config(tmp_path: Path, **overrides) -> Path:
    cfg = {
        "seed": 11,
        "out_dir": str(tmp_path / "out"),
        "generator": {"n_layers": 2, "n_heads": 2, "d_model": 32, "d_ff": 64,
                      "vocab_size": 47, "max_len": 64},
        "reasoner": {"n_layers": 1, "n_heads": 2, "d_model": 16, "d_ff": 32,
                     "vocab_size": 47, "max_len": 64},
        "fusion": {"lambda": 0.5, "region": "global"},
        "train": {"learning_rate": 0.002, "batch_size": 4, "steps": 30,
                  "eval_every": 15, "eval_samples": 8},
        "decode": {"max_steps": 20, "mode": "greedy"},
        "corpus": {"n_users": 10, "samples_per_user": 3, "seed": 4,
                   "history_pairs": 1},
        "bench": {"n_prompts": 2, "warmup": 1, "max_steps": 10},
        "sweep": {"lambdas": [0.0, 0.5], "n_eval": 4},
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_unknown_subcommand_exits_2(tmp_path, capsys):
    assert main(["frobnicate", "--config", "x"]) == 2


def test_unknown_flag_exits_2(tmp_path):
    assert main(["train", "--config", "x", "--bogus"]) == 2


def test_unknown_config_key_exits_3(tmp_path, capsys):
    path = _config(tmp_path)
    raw = json.loads(path.read_text())
    raw["training"] = {"oops": 1}
    path.write_text(json.dumps(raw))
    assert main(["gen-data", "--config", str(path)]) == 3
    err = capsys.readouterr().err
    assert err.startswith("error: validation:") and "\n" not in err.strip()


def test_missing_config_file_exits_3(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 3


def test_gen_data_writes_dataset_and_manifest(tmp_path, capsys):
    path = _config(tmp_path)
    assert main(["gen-data", "--config", str(path)]) == 0
    out = tmp_path / "out"
    dataset = out / "dataset.jsonl"
    manifest = json.loads((out / "dataset.jsonl.manifest.json").read_text())
    assert dataset.exists()
    assert len(manifest["corpus_hash"]) == 64
    assert manifest["config_hash"]
    assert manifest["vocab_size"] <= 512


def test_full_cli_pipeline(tmp_path, capsys):
    path = _config(tmp_path)
    out = tmp_path / "out"
    assert main(["gen-data", "--config", str(path)]) == 0
    assert main(["train", "--config", str(path)]) == 0
    assert (out / "checkpoint.dt").exists()
    metrics = (out / "metrics.csv").read_text()
    assert metrics.splitlines()[0] == "step,train_loss,heldout_loss,tokens_per_sec,forwards_per_step"
    assert "# config_hash=" in metrics

    assert main(["decode", "--config", str(path)]) == 0
    transcript = (out / "decode.txt").read_text().splitlines()
    assert all(tok.isdigit() for tok in transcript[0].split())
    assert transcript[1]  # detokenized text line
    assert transcript[2].startswith("# config_hash=")

    assert main(["eval", "--config", str(path)]) == 0
    seg = (out / "segments.csv").read_text()
    assert seg.splitlines()[0].startswith("system,metric,seg1,seg2,seg3,seg4,overall")

    assert main(["dump-latents", "--config", str(path)]) == 0
    latents = (out / "latents.csv").read_text().splitlines()
    assert latents[0].split(",")[:3] == ["user_id", "sample_id", "position"]

    assert main(["grad-check", "--config", _grad_config(tmp_path)]) == 0


def _grad_config(tmp_path):
    path = _config(tmp_path, generator={"n_layers": 1, "n_heads": 2, "d_model": 8,
                                        "d_ff": 12, "vocab_size": 15, "max_len": 12},
                   reasoner={"n_layers": 1, "n_heads": 1, "d_model": 4,
                             "d_ff": 8, "vocab_size": 15, "max_len": 12})
    grad_path = tmp_path / "grad_config.json"
    grad_path.write_text(path.read_text())
    return str(grad_path)


def test_out_dir_env_override(tmp_path, monkeypatch):
    path = _config(tmp_path)
    override = tmp_path / "elsewhere"
    monkeypatch.setenv("DUOTHINK_OUT", str(override))
    assert main(["gen-data", "--config", str(path)]) == 0
    assert (override / "dataset.jsonl").exists()
    assert not (tmp_path / "out").exists()


def test_bench_csv_header_exact(tmp_path):
    path = _config(tmp_path,
                   generator={"n_layers": 2, "n_heads": 2, "d_model": 32, "d_ff": 64,
                              "vocab_size": 47, "max_len": 64},
                   bench={"n_prompts": 2, "warmup": 1, "max_steps": 8})
    assert main(["bench", "--config", str(path)]) == 0
    lines = (tmp_path / "out" / "bench.csv").read_text().splitlines()
    assert lines[0] == "policy,params_G,params_R,N1,N2,C_G_us,C_R_us,ell_G_us,ell_R_us,total_ms"
    assert [ln.split(",")[0] for ln in lines[1:4]] == ["sft", "flythinker_staggered",
                                                       "sequential_latent"]


def test_full_run_reproducibility(tmp_path):
    """Identical config + seed => identical artifacts, wall-clock columns aside."""
    path = _config(tmp_path, train={"learning_rate": 0.002, "batch_size": 2,
                                    "steps": 10, "eval_every": 5, "eval_samples": 4})
    out = tmp_path / "out"
    runs = []
    for name in ("r1", "r2"):
        assert main(["gen-data", "--config", str(path)]) == 0
        assert main(["train", "--config", str(path)]) == 0
        assert main(["decode", "--config", str(path)]) == 0
        snap = tmp_path / name
        snap.mkdir()
        for f in out.iterdir():
            (snap / f.name).write_bytes(f.read_bytes())
        runs.append(snap)

    a, b = runs
    assert (a / "dataset.jsonl").read_bytes() == (b / "dataset.jsonl").read_bytes()
    assert (a / "decode.txt").read_bytes() == (b / "decode.txt").read_bytes()

    def stable_metrics(p):
        rows = []
        for ln in (p / "metrics.csv").read_text().splitlines():
            if ln.startswith("#") or ln.startswith("step,"):
                rows.append(ln)
                continue
            cols = ln.split(",")
            rows.append(",".join(cols[:3] + cols[4:]))  # drop tokens_per_sec
        return rows

    assert stable_metrics(a) == stable_metrics(b)
    assert (a / "checkpoint.dt").read_bytes() == (b / "checkpoint.dt").read_bytes()
