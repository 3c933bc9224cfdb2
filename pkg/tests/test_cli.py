import json

import pytest

from swagstore.cli import main


def _json_lines(text):
    return [json.loads(line) for line in text.strip().splitlines()]


def test_size(capsys):
    assert main(["size", "--params", "2800000", "--rank", "600", "--width", "4"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["bytes"] == 6_720_000_000 and out["gib"] == 6.258


def test_size_overflow_is_data_error(capsys):
    assert main(["size", "--params", str(2**40), "--rank", str(2**30), "--width", "8"]) == 2
    assert "SizeRangeError" in capsys.readouterr().err


def test_usage_errors():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["size", "--params", "x", "--rank", "1"])
    assert info.value.code == 1


def test_train_then_eval(tmp_path, capsys):
    out = tmp_path / "run"
    args = ["train", "--synthetic", "--synthetic-samples", "300", "--layers", "784-8-10", "--epochs", "2",
            "--minibatch-size", "20", "--minibatches-per-epoch", "30", "--burn-in", "10",
            "--max-columns", "8", "--out", str(out)]
    assert main(args) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["rank"] == 8 and info["n_params"] == 784 * 8 + 8 + 8 * 10 + 10
    assert (out / "posterior.swag").exists()

    assert main(["eval", "--model-dir", str(out), "--synthetic", "--synthetic-samples", "300",
                 "--samples", "5"]) == 0
    point, bma = _json_lines(capsys.readouterr().out)
    assert point["source"] == "point" and bma["source"] == "swag_bma" and bma["S"] == 5
    for rec in (point, bma):
        assert 0 <= rec["accuracy"] <= 1 and rec["nll"] > 0 and 0 <= rec["ece"] <= 1


def test_eval_missing_model_dir(tmp_path):
    assert main(["eval", "--model-dir", str(tmp_path / "nope")]) == 1


def test_eval_corrupt_posterior_is_data_error(tmp_path, capsys):
    out = tmp_path / "run"
    main(["train", "--synthetic", "--synthetic-samples", "100", "--layers", "784-4-10",
          "--minibatches-per-epoch", "5", "--max-columns", "3", "--out", str(out)])
    blob = bytearray((out / "posterior.swag").read_bytes())
    blob[-1] ^= 0xFF
    (out / "posterior.swag").write_bytes(bytes(blob))
    capsys.readouterr()
    assert main(["eval", "--model-dir", str(out), "--synthetic-samples", "100"]) == 2
    assert "CorruptionError" in capsys.readouterr().err


def test_bench_run_and_summarize(tmp_path, capsys):
    config = tmp_path / "exp.toml"
    config.write_text(
        'repetitions = 1\nmodel = [784, 4, 10]\nsynthetic_samples = 100\n'
        "[train]\nepochs = 1\nminibatch_size = 10\nminibatches_per_epoch = 10\n"
        "[swag]\nmax_columns = 5\n"
        '[[backends]]\nkind = "in_memory"\nsimulate_latency = true\n'
        '[[backends]]\nkind = "simulated_pmem"\nalloc_penalty = 0.0\n'
    )
    out = tmp_path / "results"
    assert main(["bench", "run", "--config", str(config), "--output-dir", str(out)]) == 0
    written = capsys.readouterr().out.split()
    assert {p.split("/")[-1] for p in written} == {"records.csv", "results.json", "summary.json"}
    assert main(["bench", "summarize", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert [r["backend"] for r in summary["rows"]] == ["in_memory", "fsdax"]
    assert summary["rows"][1]["ratio_sim"] == pytest.approx(3.0, rel=0.05)


def test_bench_summarize_empty_dir(tmp_path):
    assert main(["bench", "summarize", str(tmp_path)]) == 3


def test_bench_layout(capsys):
    assert main(["bench", "layout", "--rows", "64", "--cols", "8",
                 "--backend", "tiered:cache_capacity_bytes=1024,block_size_bytes=64"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["row"]["transfers"] == 64 * 16 and report["col"]["transfers"] == 16
