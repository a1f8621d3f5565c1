"""Command-line behavior: verbs, config handling, exit codes."""

import json
import wave

import numpy as np

from bnnkws.cli import main

SMALL_SYNTH = {
    "pretrain_per_class": 30,
    "pool_per_class": 40,
    "test_per_class": 15,
}


def write_config(tmp_path, **overrides):
    cfg = {
        "feature_source": "synthetic",
        "synthetic": SMALL_SYNTH,
        "algorithms": ["tinyol"],
        "new_classes": ["one"],
        "sample_budget": 128,
        "seeds": [0],
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def make_dataset(root, per_class=40):
    from bnnkws.dataset_streams import COMMAND_WORDS, NUMERIC_WORDS

    for keyword in COMMAND_WORDS + NUMERIC_WORDS + ("marvin",):
        d = root / keyword
        d.mkdir(parents=True)
        for i in range(per_class):
            with wave.open(str(d / f"{i}.wav"), "wb") as w:
                w.setnchannels(1)
                w.setsampwidth(2)
                w.setframerate(16000)
                w.writeframes(np.zeros(400, np.int16).tobytes())
    noise = root / "_background_noise_"
    noise.mkdir()
    with wave.open(str(noise / "hum.wav"), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(16000)
        w.writeframes(np.zeros(48000, np.int16).tobytes())


def test_flops_verb(capsys, tmp_path):
    assert main(["flops", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "363" in out and "479" in out
    assert (tmp_path / "flops.csv").read_text().startswith("method,")
    assert "444" in (tmp_path / "flops.txt").read_text()


def test_run_verb_and_determinism(tmp_path):
    cfg = write_config(tmp_path)
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert main(["run", "--config", str(cfg), "--out", str(out1)]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(out2)]) == 0
    assert (out1 / "report.csv").read_bytes() == (out2 / "report.csv").read_bytes()
    assert (out1 / "report.json").read_bytes() == (out2 / "report.json").read_bytes()
    header = (out1 / "report.csv").read_text().splitlines()[0]
    assert header == (
        "algorithm,scenario,k_new,budget,seed,acc_old,acc_new,acc_all,backprop_flops"
    )


def test_flag_overrides_config(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "r"
    assert (
        main(
            ["run", "--config", str(cfg), "--out", str(out),
             "--algorithms", "cwr", "--budget", "64", "--format", "json"]
        )
        == 0
    )
    payload = json.loads((out / "report.json").read_text())
    algs = {row["algorithm"] for row in payload["rows"]}
    assert algs == {"cwr"}
    assert all(row["budget"] == 64 for row in payload["rows"])
    assert not (out / "report.csv").exists()


def test_report_conversion(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "r"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    conv = tmp_path / "conv"
    assert (
        main(["report", "--input", str(out / "report.json"), "--out", str(conv)]) == 0
    )
    assert (conv / "report.csv").read_bytes() == (out / "report.csv").read_bytes()


def test_pretrain_head_then_run(tmp_path):
    cfg = write_config(tmp_path)
    head = tmp_path / "head.clhd"
    cache = tmp_path / "features.npz"
    assert (
        main(
            ["pretrain-head", "--config", str(cfg), "--head-out", str(head),
             "--cache-out", str(cache)]
        )
        == 0
    )
    assert head.exists() and cache.exists()
    out = tmp_path / "r"
    assert (
        main(
            ["run", "--config", str(cfg), "--head", str(head),
             "--feature-source", "cache", "--cache", str(cache),
             "--out", str(out)]
        )
        == 0
    )
    payload = json.loads((out / "report.json").read_text())
    assert payload["rows"]


def test_index_and_split_verbs(tmp_path, capsys):
    root = tmp_path / "gsc"
    make_dataset(root)
    listing = tmp_path / "index.tsv"
    assert main(["index", "--dataset-root", str(root), "--out", str(listing)]) == 0
    out = capsys.readouterr().out
    assert "silence" in out and "unknown" in out
    assert listing.read_text().count("\n") > 100

    manifest = tmp_path / "splits.tsv"
    assert main(["split", "--dataset-root", str(root), "--out", str(manifest)]) == 0
    from bnnkws.dataset_streams import load_manifest

    splits = load_manifest(manifest)
    assert splits.test and splits.pretrain and splits.cl_pool


def test_exit_code_config_error(tmp_path):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 1
    assert main(["run", "--budget", "not-a-number"]) == 1
    assert main(["nonsense-verb"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad)]) == 1
    cfg = write_config(tmp_path, algorithms=["no-such-algorithm"])
    assert main(["run", "--config", str(cfg)]) == 1


def test_exit_code_data_error(tmp_path):
    assert main(["index", "--dataset-root", str(tmp_path / "missing")]) == 2
    cfg = write_config(tmp_path, sample_budget=10_000_000)
    assert main(["run", "--config", str(cfg)]) == 2


def test_exit_code_numeric_error(tmp_path):
    from bnnkws.harness import SyntheticFeatures, SyntheticSpec, save_feature_cache

    source = SyntheticFeatures(SyntheticSpec(**SMALL_SYNTH))
    source.pool_features[3] = np.nan
    cache = tmp_path / "poisoned.npz"
    save_feature_cache(source, cache)
    cfg = write_config(
        tmp_path, feature_source="cache", cache_path=str(cache), sample_budget=None
    )
    assert main(["run", "--config", str(cfg)]) == 3


def test_module_entry_point(tmp_path):
    import subprocess
    import sys

    proc = subprocess.run(
        [sys.executable, "-m", "bnnkws", "flops"],
        capture_output=True, text=True, timeout=120,
    )
    assert proc.returncode == 0
    assert "363" in proc.stdout
