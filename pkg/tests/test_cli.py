import csv
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from xpfl import cli
from xpfl import explain as X
from xpfl import models as M

TINY = """\
[data]
n_train = 60
n_test = 30
n_classes = 4

[partition]
clients = 2
eta = 0.5
gamma = 0.25
seed = 3

[rounds]
rounds = 2

[model]
dim = 16
heads = 2
enc_layers = 1

[run]
schemes = xpfl,supervised,local,fedavg
checkpoint_every = 1
recon_images = 3

[explain]
rounds = 2
tsne_iters = 30
tsne_points = 20
"""


def write_cfg(tmp_path, text=TINY, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def run(tmp_path, out, *extra, text=TINY):
    cfg = write_cfg(tmp_path, text)
    return cli.main(["run", "--config", str(cfg), "--set", f"run.out={out}", *extra])


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    t0 = time.perf_counter()
    code = run(tmp, tmp / "out")
    return tmp / "out", code, time.perf_counter() - t0


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_smoke_run_writes_artifacts(tiny_run):
    out, code, secs = tiny_run
    assert code == 0 and secs < 60
    for rel in ("config.ini", "partition.json", "rounds.csv", "rounds.jsonl", "accuracy.svg",
                "recon.csv", "recon-xpfl.svg", "data/train-images.idx", "data/test-labels.idx",
                "checkpoints/xpfl/round-002/global.ckpt", "checkpoints/xpfl/round-001/client-1-pre.ckpt",
                "checkpoints/xpfl/gae-client-0.ckpt", "explain/xpfl/round-002/client-0-tree.json",
                "explain/xpfl/round-002/client-1-embedding-post.svg"):
        assert (out / rel).is_file(), rel
    rows = read_csv(out / "rounds.csv")
    assert rows[0] == cli.ROUNDS_HEADER
    assert len(rows) == 1 + 4 * 2 * 2
    for r in rows[1:]:
        for cell in r[3:7]:
            float(cell)


def test_repeat_and_parallel_runs_are_byte_identical(tiny_run, tmp_path):
    out, _, _ = tiny_run
    ref = (out / "rounds.csv").read_bytes()
    assert run(tmp_path, tmp_path / "again") == 0
    assert (tmp_path / "again" / "rounds.csv").read_bytes() == ref
    assert run(tmp_path, tmp_path / "par", "--set", "run.workers=2") == 0
    assert (tmp_path / "par" / "rounds.csv").read_bytes() == ref


def test_unknown_key_is_a_usage_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "[rounds]\nbogus = 1\n")
    assert cli.main(["run", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "rounds.bogus" in err and ":2:" in err


def test_bad_values_are_usage_errors(tmp_path):
    cfg = write_cfg(tmp_path, "[rounds]\ntau = abc\n")
    assert cli.main(["run", "--config", str(cfg)]) == 2
    assert cli.main(["run", "--set", "rounds.tau=-1"]) == 2
    assert cli.main(["run", "--set", "nonsense"]) == 2
    assert cli.main(["frobnicate"]) == 2


def test_env_seed_overrides_config(tmp_path):
    cfg = write_cfg(tmp_path)
    assert cli.load_config(cfg, env={})["partition"]["seed"] == 3
    assert cli.load_config(cfg, env={"XPFL_SEED": "11"})["partition"]["seed"] == 11


def test_compare_joins_cell_for_cell(tiny_run, tmp_path):
    out, _, _ = tiny_run
    other = tmp_path / "other"
    assert run(tmp_path, other, "--set", "run.schemes=xpfl", "--set", "partition.seed=4") == 0
    assert cli.main(["compare", str(out), str(other), "--out", str(tmp_path / "cmp")]) == 0
    table = read_csv(tmp_path / "cmp" / "comparison.csv")
    header, body = table[0], table[1:]
    assert len(body) == 2 and len(header) == 1 + 4 + 1
    for d in (out, other):
        for r in read_csv(d / "rounds.csv")[1:]:
            col = header.index(f"{d.name}:{r[1]}")
            assert body[int(r[0]) - 1][col] == r[5]
    assert (tmp_path / "cmp" / "comparison.svg").is_file()


def test_compare_single_run_matches_source(tiny_run, tmp_path):
    out, _, _ = tiny_run
    assert cli.main(["compare", str(out), "--out", str(tmp_path)]) == 0
    table = read_csv(tmp_path / "comparison.csv")
    src = {(r[1], r[0]): r[5] for r in read_csv(out / "rounds.csv")[1:]}
    for row in table[1:]:
        for name, cell in zip(table[0][1:], row[1:]):
            assert cell == src[(name.split(":")[1], row[0])]


def test_compare_schema_mismatch(tmp_path):
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "rounds.csv").write_text("round,acc\n1,0.5\n")
    assert cli.main(["compare", str(tmp_path / "bad"), "--out", str(tmp_path / "o")]) == 2


def explain(out, dest, *extra):
    ck = out / "checkpoints" / "xpfl"
    return cli.main(["explain", "--checkpoint", str(ck / "round-001" / "client-0.ckpt"), "--data", str(out / "data"),
                     "--out", str(dest), "--tsne-iters", "30", "--tsne-points", "20", *extra])


def test_explain_identical_checkpoints_zero_aggregation_term(tiny_run, tmp_path):
    out, _, _ = tiny_run
    same = out / "checkpoints" / "xpfl" / "round-001" / "client-0.ckpt"
    assert explain(out, tmp_path, "--post-checkpoint", str(same)) == 0
    rep = json.loads((tmp_path / "qox.json").read_text())
    assert rep["aggregation_term"] == 0.0
    assert rep["kl_pre"] == rep["kl_post"]


def test_explain_report_is_self_consistent(tiny_run, tmp_path):
    out, _, _ = tiny_run
    post = out / "checkpoints" / "xpfl" / "round-002" / "client-0.ckpt"
    assert explain(out, tmp_path, "--post-checkpoint", str(post), "--client", "0", "--chi", "0.7") == 0
    rep = json.loads((tmp_path / "qox.json").read_text())
    again = X.qox(rep["fidelity"], rep["n_samples"], rep["model_size"], rep["kl_pre"], rep["kl_post"], rep["n_test"], rep["chi"])
    assert again.value == rep["qox"]
    assert again.decision_term + again.aggregation_term == pytest.approx(rep["qox"], abs=1e-15)
    params = M.load_checkpoint(post)
    assert rep["model_size"] == sum(v.size for v in params.values())
    for name in ("tree.json", "tree.txt", "embedding.csv", "embedding-pre.svg", "embedding-post.svg"):
        assert (tmp_path / name).is_file(), name


def test_explain_missing_test_set(tiny_run, tmp_path):
    out, _, _ = tiny_run
    data = tmp_path / "d"
    data.mkdir()
    for f in ("train-images.idx", "train-labels.idx"):
        (data / f).write_bytes((out / "data" / f).read_bytes())
    ck = out / "checkpoints" / "xpfl" / "round-001" / "client-0.ckpt"
    code = cli.main(["explain", "--checkpoint", str(ck), "--post-checkpoint", str(ck),
                     "--data", str(data), "--out", str(tmp_path / "o")])
    assert code == 2


def test_explain_layout_mismatch(tiny_run, tmp_path):
    out, _, _ = tiny_run
    params = M.load_checkpoint(out / "checkpoints" / "xpfl" / "round-001" / "client-0.ckpt")
    params["fc.w"] = np.zeros((params["fc.w"].shape[0], 7))
    params["fc.b"] = np.zeros(7)
    M.save_checkpoint(tmp_path / "other.ckpt", params)
    assert explain(out, tmp_path / "o", "--post-checkpoint", str(tmp_path / "other.ckpt")) == 2


def test_console_script_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "xpfl.cli", "run", "--set", "rounds.bogus=1"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "rounds.bogus" in proc.stderr
