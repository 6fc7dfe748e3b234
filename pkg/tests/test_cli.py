import csv
import subprocess
import sys

import pytest

from ffvit.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def parse_kv(line):
    return dict(tok.split("=", 1) for tok in line.split())


def test_params_base(capsys):
    code, out, _ = run(capsys, "params", "--preset", "base")
    kv = parse_kv(out.strip())
    assert code == 0
    assert int(kv["params"]) == 61_956_724
    assert int(kv["reference"]) == 62_000_000
    assert abs(float(kv["delta_pct"])) < 2.0


def test_params_from_config_file(tmp_path, capsys):
    cfg = tmp_path / "m.cfg"
    cfg.write_text("preset=reduced\n")
    code, out, _ = run(capsys, "params", "--config", str(cfg))
    assert code == 0 and parse_kv(out)["params"] == "12756"


def test_bench_writes_csv(tmp_path, capsys):
    path = tmp_path / "bench.csv"
    code, out, _ = run(capsys, "bench", "--variant", "attention_baseline",
                       "--seq-lens", "128,256,512,1024", "--repetitions", "3", "--csv", str(path))
    assert code == 0
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == 4 and [int(r["N"]) for r in rows] == [128, 256, 512, 1024]
    assert len({r["alpha"] for r in rows}) == 1
    assert out == path.read_text()


def test_validation_failure_exits_one(capsys):
    code, _, err = run(capsys, "bench", "--variant", "ff_fixed_hidden", "--seq-lens", "256,128")
    assert code == 1
    assert err.startswith("error:") and err.count("\n") == 1


def test_unknown_flag_exits_two():
    proc = subprocess.run([sys.executable, "-m", "ffvit", "params", "--bogus"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_train_then_eval(tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--synthetic", "--out", str(tmp_path), "--epochs", "1",
                       "--seed", "3", "--lr", "0.003", "--batch-size", "16")
    assert code == 0
    last = parse_kv(out.strip().splitlines()[-1])
    assert last["epoch"] == "1"
    code, out, _ = run(capsys, "eval", "--ckpt", str(tmp_path / "last.ffvt"), "--synthetic")
    kv = parse_kv(out)
    assert code == 0 and float(kv["top1"]) == pytest.approx(float(last["eval_top1"]), abs=1e-4)


def test_eval_missing_checkpoint(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--ckpt", str(tmp_path / "none.ffvt"), "--synthetic")
    assert code == 1 and err.startswith("error:")


def test_gradcheck_threshold_controls_exit(capsys):
    code, out, _ = run(capsys, "gradcheck", "--geometry", "reduced", "--max-elements", "3",
                       "--threshold", "1e-30")
    assert code == 1 and parse_kv(out)["status"] == "fail"
