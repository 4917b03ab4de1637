import hashlib
import json
import os

import numpy as np
import pytest

from descsel.cli import main
from descsel.episodic import EvalReport

GEN = ["gen-synth", "--classes", "4", "--dim", "8", "--grid", "2x2",
       "--signal-fraction", "0.5", "--separation", "4.0", "--noise", "1.0",
       "--seed", "7", "--samples-per-class", "6"]
EPI = ["--n-way", "3", "--k-shot", "1", "--queries-per-class", "4"]


def tree_digest(root):
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            h.update(os.path.relpath(path, root).encode())
            h.update(open(path, "rb").read())
    return h.hexdigest()


@pytest.fixture()
def data_dir(tmp_path):
    out = str(tmp_path / "data")
    assert main(GEN + ["--out", out]) == 0
    return out


@pytest.fixture()
def run_dir(tmp_path, data_dir):
    out = str(tmp_path / "run")
    code = main(["train", "--data", data_dir, "--seed", "3", "--epochs", "1",
                 "--episodes-per-epoch", "6", "--out", out] + EPI)
    assert code == 0
    return out


def ckpt(run_dir):
    return os.path.join(run_dir, "checkpoint.json")


# -- gen-synth ---------------------------------------------------------------


def test_gen_synth_layout_and_masks(tmp_path):
    out = str(tmp_path / "d")
    args = GEN.copy()
    args[args.index("--grid") + 1] = "6x6"
    args[args.index("--signal-fraction") + 1] = "0.3"
    assert main(args + ["--out", out]) == 0
    names = json.load(open(os.path.join(out, "classes.json")))
    assert names == [f"class_{c:03d}" for c in range(4)]
    for name in names:
        files = sorted(os.listdir(os.path.join(out, name)))
        assert files == [f"{i:04d}.tds" for i in range(6)]
    masks = json.load(open(os.path.join(out, "masks.json")))
    assert len(masks) == 24
    for key, mask in masks.items():
        assert len(mask) == 36
        assert sum(mask) == 10  # floor(0.3 * 36) flagged positions


def test_gen_synth_reruns_bit_identical(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(GEN + ["--out", a]) == 0
    assert main(GEN + ["--out", b]) == 0
    assert tree_digest(a) == tree_digest(b)


def test_gen_synth_refuses_overwrite_without_force(tmp_path, data_dir, capsys):
    assert main(GEN + ["--out", data_dir]) == 2
    assert data_dir in capsys.readouterr().err
    assert main(GEN + ["--out", data_dir, "--force"]) == 0


# -- train ---------------------------------------------------------------------


def test_train_outputs(run_dir):
    assert sorted(os.listdir(run_dir)) == ["checkpoint.json", "loss.csv",
                                           "resolved.toml"]
    lines = open(os.path.join(run_dir, "loss.csv")).read().splitlines()
    assert lines[0] == "epoch,episode,loss"
    assert len(lines) == 7
    first = lines[1].split(",")
    assert first[0] == "0" and first[1] == "0"
    float(first[2])  # parses


def test_train_rerun_bit_identical(tmp_path, data_dir, run_dir):
    again = str(tmp_path / "run2")
    assert main(["train", "--data", data_dir, "--seed", "3", "--epochs", "1",
                 "--episodes-per-epoch", "6", "--out", again] + EPI) == 0
    for name in ("checkpoint.json", "loss.csv"):
        a = open(os.path.join(run_dir, name), "rb").read()
        b = open(os.path.join(again, name), "rb").read()
        assert a == b, name


def test_train_zero_epochs_checkpoint_is_init(tmp_path, data_dir):
    a, b = str(tmp_path / "z1"), str(tmp_path / "z2")
    for out in (a, b):
        assert main(["train", "--data", data_dir, "--seed", "3", "--epochs", "0",
                     "--episodes-per-epoch", "6", "--out", out] + EPI) == 0
    assert open(ckpt(a), "rb").read() == open(ckpt(b), "rb").read()
    lines = open(os.path.join(a, "loss.csv")).read().splitlines()
    assert lines == ["epoch,episode,loss"]


def test_train_resolved_config_reproduces_run(tmp_path, data_dir, run_dir):
    out = str(tmp_path / "run3")
    code = main(["train", "--config", os.path.join(run_dir, "resolved.toml"),
                 "--out", out])
    assert code == 0
    assert open(ckpt(run_dir), "rb").read() == open(ckpt(out), "rb").read()


def test_train_requires_seed(data_dir, tmp_path, capsys):
    code = main(["train", "--data", data_dir, "--out", str(tmp_path / "x")] + EPI)
    assert code == 2
    assert "seed" in capsys.readouterr().err


def test_train_unknown_config_key_is_data_error(tmp_path, data_dir, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[model]\nbanana = 1\n")
    assert main(["train", "--config", str(cfg), "--data", data_dir,
                 "--seed", "1", "--out", str(tmp_path / "x")] + EPI) == 2


# -- eval ------------------------------------------------------------------------


def test_eval_stdout_contract(data_dir, run_dir, capsys):
    code = main(["eval", "--checkpoint", ckpt(run_dir), "--data", data_dir,
                 "--seed", "11", "--episodes", "8"] + EPI)
    assert code == 0
    line = capsys.readouterr().out.strip()
    import re
    m = re.fullmatch(r"acc=(0\.\d{4}|1\.0000)±(\d\.\d{4}) n=8", line)
    assert m, line


def test_eval_json_csv_round_trip(tmp_path, data_dir, run_dir, capsys):
    jout = str(tmp_path / "r.json")
    cout = str(tmp_path / "r.csv")
    assert main(["eval", "--checkpoint", ckpt(run_dir), "--data", data_dir,
                 "--seed", "11", "--episodes", "8", "--json-out", jout,
                 "--csv-out", cout] + EPI) == 0
    stdout = capsys.readouterr().out.strip()
    rep = EvalReport.from_dict(json.load(open(jout)))
    assert f"acc={rep.mean_accuracy:.4f}" in stdout
    assert rep.n_episodes == 8
    rows = open(cout).read().splitlines()
    assert rows[0] == "episode,accuracy"
    assert len(rows) == 9
    accs = [float(r.split(",")[1]) for r in rows[1:]]
    assert accs == list(rep.per_episode)


def test_eval_parallel_outputs_bit_identical(tmp_path, data_dir, run_dir):
    outs = []
    for workers in ("1", "3"):
        j = str(tmp_path / f"w{workers}.json")
        assert main(["eval", "--checkpoint", ckpt(run_dir), "--data", data_dir,
                     "--seed", "11", "--episodes", "8", "--workers", workers,
                     "--json-out", j] + EPI) == 0
        outs.append(open(j, "rb").read())
    assert outs[0] == outs[1]


def test_eval_dim_mismatch_is_data_error(tmp_path, run_dir, capsys):
    other = str(tmp_path / "other")
    args = GEN.copy()
    args[args.index("--dim") + 1] = "5"
    assert main(args + ["--out", other]) == 0
    code = main(["eval", "--checkpoint", ckpt(run_dir), "--data", other,
                 "--seed", "1", "--episodes", "2"] + EPI)
    assert code == 2
    err = capsys.readouterr().err
    assert "8" in err and "5" in err


def test_eval_missing_dataset_names_path(run_dir, capsys):
    code = main(["eval", "--checkpoint", ckpt(run_dir), "--data",
                 "/no/such/dataset", "--seed", "1", "--episodes", "2"] + EPI)
    assert code == 2
    assert "/no/such/dataset" in capsys.readouterr().err


def test_eval_strategy_override_changes_numbers(data_dir, run_dir, capsys):
    base = ["eval", "--checkpoint", ckpt(run_dir), "--data", data_dir,
            "--seed", "11", "--episodes", "8"] + EPI
    assert main(base) == 0
    adaptive_line = capsys.readouterr().out.strip()
    assert main(base + ["--strategy", "top_tau:1"]) == 0
    tau_line = capsys.readouterr().out.strip()
    assert adaptive_line != tau_line


def test_redundant_flags_warn_but_run(data_dir, run_dir, capsys):
    code = main(["eval", "--checkpoint", ckpt(run_dir), "--data", data_dir,
                 "--seed", "1", "--episodes", "2", "--strategy", "all",
                 "--no-query-selection"] + EPI)
    assert code == 0
    captured = capsys.readouterr()
    assert "warning" in captured.err
    assert captured.out.startswith("acc=")


# -- ablate ------------------------------------------------------------------------


def test_ablate_table_and_json(tmp_path, data_dir, run_dir, capsys):
    jout = str(tmp_path / "ab.json")
    assert main(["ablate", "--checkpoint", ckpt(run_dir), "--data", data_dir,
                 "--seed", "2", "--episodes", "4", "--json-out", jout] + EPI) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split() == ["support", "query", "accuracy", "ci95",
                              "support_kept", "query_kept"]
    assert len(out) == 5
    rows = json.load(open(jout))["rows"]
    assert [(r["support_selection"], r["query_selection"]) for r in rows] == \
        [(False, False), (False, True), (True, False), (True, True)]
    for r in rows:
        EvalReport.from_dict({k: r[k] for k in
                              ("n_episodes", "mean_accuracy", "ci95_halfwidth",
                               "per_episode", "selection_stats")})


def test_ablate_rerun_bit_identical(tmp_path, data_dir, run_dir):
    outs = []
    for name in ("x.json", "y.json"):
        j = str(tmp_path / name)
        assert main(["ablate", "--checkpoint", ckpt(run_dir), "--data", data_dir,
                     "--seed", "2", "--episodes", "4", "--json-out", j,
                     "--workers", "2"] + EPI) == 0
        outs.append(open(j, "rb").read())
    assert outs[0] == outs[1]


# -- gradcheck -----------------------------------------------------------------------


def test_gradcheck_passes_on_default_model(capsys):
    assert main(["gradcheck", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert "max rel err" in out


def test_gradcheck_sabotage_negative_control(capsys):
    assert main(["gradcheck", "--seed", "0", "--_sabotage"]) == 3
    assert "FAILED" in capsys.readouterr().err


# -- usage errors -----------------------------------------------------------------------


def test_usage_errors_exit_one(capsys):
    assert main(["no-such-command"]) == 1
    assert main([]) == 1
    assert main(["eval", "--data", "x"]) == 1        # --checkpoint required
    assert main(["gen-synth", "--classes", "4"]) == 1  # many required flags missing
    assert main(GEN + ["--out", "x", "--grid", "6by6"]) == 1
