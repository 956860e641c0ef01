import csv
import hashlib
import subprocess
import sys

import pytest

from advembed import neuralkey as nk
from advembed.cli import main

KEYGEN = ["keygen", "--classes", "4", "--seed", "5"]
TINY = ["--classes", "4", "--per-class", "20", "--epochs", "1", "--models", "2", "--images", "4",
        "--trials", "4", "--messages", "4", "--bits", "16", "--max-k", "2", "--restarts", "1",
        "--iters", "4", "--seed", "2"]


def digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(directory.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def key_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("key") / "model.advk"
    assert main(KEYGEN + ["--out", str(path)]) == 0
    return path


def test_keygen_writes_loadable_key(key_path, capsys, tmp_path):
    model = nk.load_key(key_path)
    assert model.num_classes == 4 and model.train_accuracy >= 0.9
    again = tmp_path / "again.advk"
    assert main(KEYGEN + ["--out", str(again)]) == 0
    out = capsys.readouterr().out
    assert f"fingerprint {model.fingerprint}" in out
    assert again.read_bytes() == key_path.read_bytes()


def test_keygen_zero_epochs(tmp_path):
    assert main(["keygen", "--classes", "3", "--per-class", "5", "--epochs", "0",
                 "--out", str(tmp_path / "k.advk")]) == 0
    assert nk.load_key(tmp_path / "k.advk").num_classes == 3


@pytest.mark.parametrize("argv, code", [
    (["keygen", "--dataset", "/no/such/place", "--out", "x"], 3),
    (["keygen", "--arch", "huge", "--out", "x"], 2),
    (["keygen", "--epochs", "-1", "--out", "x"], 2),
    (["keygen"], 2),
    (["bogus"], 2),
    ([], 2),
])
def test_error_exit_codes(argv, code, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == code


def test_embed_extract_round_trip(key_path, tmp_path, capsys):
    out = tmp_path / "stego"
    assert main(["embed", "--key", str(key_path), "--message", "a1b2c3d4e5", "--covers", "synth",
                 "--seed", "3", "--out", str(out)]) == 0
    # 40 bits in base 4 needs 20 single-digit images
    names = sorted(p.name for p in out.iterdir())
    assert names[-1] == "stego_00019.png" and "manifest.json" in names and len(names) == 21
    printed = capsys.readouterr().out
    assert "chunk 19: ok" in printed and "SSIM loss" in printed

    recovered = tmp_path / "msg.bin"
    assert main(["extract", "--key", str(key_path), "--stego", str(out),
                 "--out", str(recovered)]) == 0
    assert recovered.read_bytes() == bytes.fromhex("a1b2c3d4e5")


def test_embed_message_from_file(key_path, tmp_path):
    msg = tmp_path / "m.txt"
    msg.write_bytes(b"hi")
    assert main(["embed", "--key", str(key_path), "--message", str(msg), "--covers", "synth",
                 "--k", "2", "--out", str(tmp_path / "s")]) == 0
    assert main(["extract", "--key", str(key_path), "--stego", str(tmp_path / "s"),
                 "--out", str(tmp_path / "back")]) == 0
    assert (tmp_path / "back").read_bytes() == b"hi"


def test_extract_with_wrong_key(key_path, tmp_path):
    other = tmp_path / "other.advk"
    assert main(["keygen", "--classes", "4", "--per-class", "10", "--epochs", "0", "--seed", "9",
                 "--out", str(other)]) == 0
    assert main(["embed", "--key", str(key_path), "--message", "ffee", "--covers", "synth",
                 "--out", str(tmp_path / "s")]) == 0
    # a foreign key still yields digits; it just reads the wrong ones (or overflows)
    code = main(["extract", "--key", str(other), "--stego", str(tmp_path / "s"),
                 "--out", str(tmp_path / "m")])
    assert code in (0, 5)
    if code == 0:
        assert (tmp_path / "m").read_bytes() != bytes.fromhex("ffee")


@pytest.mark.parametrize("change, code", [
    ({"--k": "5"}, 2),
    ({"--epsilon": "-1"}, 2),
    ({"--message": "xyz"}, 2),
    ({"--covers": "/no/such/dir"}, 3),
])
def test_embed_errors(key_path, tmp_path, change, code):
    opts = {"--key": str(key_path), "--message": "00", "--covers": "synth",
            "--out": str(tmp_path / "s"), **change}
    assert main(["embed"] + [x for pair in opts.items() for x in pair]) == code


def test_embed_attack_failure_exits_4(key_path, tmp_path, capsys):
    argv = ["embed", "--key", str(key_path), "--message", "0102", "--covers", "synth",
            "--k", "4", "--epsilon", "0.001", "--epsilon-step", "0.0001", "--restarts", "1",
            "--iters", "1", "--out", str(tmp_path / "s")]
    assert main(argv) == 4
    assert "FAILED" in capsys.readouterr().out
    assert not (tmp_path / "s").exists()


def test_bad_key_file(tmp_path):
    junk = tmp_path / "junk.advk"
    junk.write_bytes(b"nope")
    assert main(["extract", "--key", str(junk), "--stego", str(tmp_path),
                 "--out", str(tmp_path / "m")]) == 2


def test_extract_missing_manifest(key_path, tmp_path):
    assert main(["extract", "--key", str(key_path), "--stego", str(tmp_path),
                 "--out", str(tmp_path / "m")]) == 5


def test_embed_is_deterministic(key_path, tmp_path):
    runs = []
    for name in ("a", "b"):
        argv = ["embed", "--key", str(key_path), "--message", "c0ffee", "--covers", "synth",
                "--k", "2", "--seed", "11", "--out", str(tmp_path / name)]
        assert main(argv) == 0
        runs.append(digest(tmp_path / name))
    assert runs[0] == runs[1] and len(runs[0]) > 1


@pytest.mark.parametrize("name, table", [("rq1", "rq1_ssim"), ("rq4", "rq4_recovery"),
                                         ("rq5", "rq5_density")])
def test_experiment_tiny_settings(name, table, tmp_path):
    assert main(["experiment", name, "--out", str(tmp_path)] + TINY) == 0
    with open(tmp_path / f"{table}.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert len(rows) > 1 and all(len(r) == len(rows[0]) for r in rows)
    assert (tmp_path / f"{table}.dat").exists()


def test_experiment_rejects_bad_settings(tmp_path):
    assert main(["experiment", "rq3", "--out", str(tmp_path), "--models", "0"]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "advembed", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0 and "keygen" in proc.stdout
