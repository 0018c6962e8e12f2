import json

import numpy as np
import pytest
import tomli

from mqnet import tensor as T
from mqnet.cli import EXIT_GRADCHECK, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from mqnet.model import load_checkpoint


@pytest.fixture(scope="module")
def data16(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_data")
    assert main(["gen-data", "--n", "12", "--size", "16", "--difficulty", "easy", "--out", str(out)]) == EXIT_OK
    return out / "manifest.jsonl"


def _train(manifest, out, *extra):
    return main(["train", "--profile", "tiny", "--manifest", str(manifest), "--batch-size", "4",
                 "--lr", "1e-3", "--out", str(out), *extra])


@pytest.fixture(scope="module")
def trained(data16, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert _train(data16, out, "--epochs", "2") == EXIT_OK
    return out


def test_gen_data_is_deterministic(tmp_path, capsys):
    for d in ("a", "b"):
        assert main(["gen-data", "--n", "6", "--size", "16", "--out", str(tmp_path / d)]) == EXIT_OK
    assert "train=" in capsys.readouterr().out
    for name in ("manifest.jsonl", "corpus.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["train", "--lr", "fast"], ["eval"],
                                  ["train", "--profile", "tiny"],
                                  ["train", "--profile", "tiny", "--manifest", "m", "--set", "model.nope=1"],
                                  ["gradcheck", "--only", "no_such_op"]])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == EXIT_USAGE


def test_runtime_error_exits_2(tmp_path):
    assert _train(tmp_path / "missing.jsonl", tmp_path / "run") == EXIT_RUNTIME


def test_train_outputs(trained):
    rows = (trained / "loss.csv").read_text().splitlines()
    assert rows[0] == "step,epoch,loss"
    steps = [int(r.split(",")[0]) for r in rows[1:]]
    assert steps == list(range(len(steps))) and steps
    cfg = tomli.loads((trained / "config.toml").read_text())
    assert cfg["optim"]["batch_size"] == 4 and cfg["optim"]["epochs"] == 2
    assert (trained / "checkpoints" / "final" / "config.json").exists()
    assert (trained / "vocab.txt").exists()


def test_resume_is_bit_identical(data16, trained, tmp_path):
    full = (trained / "loss.csv").read_text().splitlines()
    n_steps = len(full) - 1
    half = n_steps // 2
    part = tmp_path / "part"
    assert _train(data16, part, "--epochs", "2", "--steps", str(half), "--checkpoint-every", str(half)) == EXIT_OK
    ckpt = part / "checkpoints" / f"step_{half:06d}"
    assert ckpt.exists()
    assert main(["train", "--resume", str(ckpt), "--out", str(part)]) == EXIT_OK
    assert (part / "loss.csv").read_text().splitlines() == full
    a, _, _ = load_checkpoint(trained / "checkpoints" / "final")
    b, man, _ = load_checkpoint(part / "checkpoints" / "final")
    assert man["step"] == n_steps
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data), na


def test_overfit_flag(data16, tmp_path):
    out = tmp_path / "of"
    assert _train(data16, out, "--overfit", "1", "--steps", "5") == EXIT_OK
    assert len((out / "loss.csv").read_text().splitlines()) == 6


def test_eval_ground_truth_is_perfect(data16, tmp_path, capsys):
    js = tmp_path / "gt.json"
    assert main(["eval", "--profile", "tiny", "--manifest", str(data16), "--ground-truth",
                 "--json", str(js)]) == EXIT_OK
    report = json.loads(js.read_text())
    assert all(report[k] == 1.0 for k in ("oIoU", "mIoU", "P50", "P70", "P90"))
    assert "mIoU" in capsys.readouterr().out


def test_eval_checkpoint_dumps(data16, trained, tmp_path, capsys):
    dump = tmp_path / "dump"
    js = tmp_path / "r.json"
    assert main(["eval", "--checkpoint", str(trained / "checkpoints" / "final"), "--per-category",
                 "--dump-masks", str(dump), "--json", str(js)]) == EXIT_OK
    report = json.loads(js.read_text())
    assert 0.0 <= report["mIoU"] <= 1.0 and report["per_category_mIoU"]
    index = json.loads((dump / "index.json").read_text())
    assert index and all((dump / e["mask"]).exists() for e in index)
    heat = index[0]["heatmaps"]
    assert {h["stage"] for h in heat} == {1, 2, 3, 4}
    assert all((dump / h["path"]).read_bytes().startswith(b"P5") for h in heat)
    assert (dump / index[0]["mask"]).read_bytes().startswith(b"P5")


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--no-model", "--only", "add", "gelu"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "2/2 passed" in out


def test_gradcheck_command_flags_injected_bug(monkeypatch, capsys):
    real = T.matmul

    def buggy(a, b):
        out = real(a, b)
        return T._result(out.data, (a, b), lambda g: tuple(-x for x in out._backward(g)), "matmul")

    monkeypatch.setattr(T, "matmul", buggy)
    assert main(["gradcheck", "--no-model", "--only", "matmul", "add"]) == EXIT_GRADCHECK
    lines = capsys.readouterr().out.splitlines()
    assert any(line.startswith("matmul") and "FAIL" in line for line in lines)
    assert any(line.startswith("add") and line.endswith("ok") for line in lines)


def test_ablate_command(data16, tmp_path, capsys):
    js = tmp_path / "ab.json"
    assert main(["ablate", "--profile", "tiny", "--manifest", str(data16), "--epochs", "1",
                 "--batch-size", "4", "--seeds", "0", "--json", str(js)]) == EXIT_OK
    names = [r["name"] for r in json.loads(js.read_text())["rows"]]
    assert names == ["vision-only", "w/ lqv", "w/ lqv + vql"]
    assert main(["eval", "--ablate", "--profile", "tiny", "--manifest", str(data16), "--epochs", "1",
                 "--batch-size", "4", "--seeds", "0"]) == EXIT_OK


def test_threads_env_does_not_change_results(data16, monkeypatch):
    from mqnet.data import load_manifest
    one = list(load_manifest(data16, 16, "train"))
    monkeypatch.setenv("MQNET_THREADS", "3")
    three = list(load_manifest(data16, 16, "train"))
    assert all(np.array_equal(a.image, b.image) and a.title == b.title for a, b in zip(one, three))
