import json
import os
import subprocess
import sys

import numpy as np
import pytest

from basenas import cells, params as P
from basenas import runio
from basenas.cli import build_net, run_command
from basenas.config import validate
from basenas.derive import Genotype

BASE = {
    "seed": 1,
    "corpus": {"classes": 8, "per_class": 10, "size": 16},
    "tasks": {"n_classes": 2, "resolutions": [16]},
    "supernet": {"cells": 2, "channels": 4, "heads": {"16": 1}},
    "variational": {"tau0": 5.0, "tau_min": 0.5, "tau_decay": 0.08, "beta": 0.001},
    "meta": {"epochs": 2, "tasks_per_epoch": 2, "inner_steps": 1, "inner_lr": 0.05,
             "arch_lr": 0.5, "meta_lr": 1.0, "batch_size": 8},
    "derive": {"tasks": 2},
    "full": {"cells": 3, "channels": 4, "epochs": 1, "lr": 0.05},
    "fast_adapt": {"epochs": 1},
    "pca": {"k": 1},
    "fewshot": {"n_way": 2, "k_shot": 1, "query_per_way": 2, "search_iterations": 1,
                "eval_iterations": 1, "eval_episodes": 3, "derive_episodes": 1,
                "inner_lr": 0.05, "meta_lr": 0.01, "cells": 2, "channels": 4},
}


def _config(tmp_path, name="c.json", **over):
    cfg = json.loads(json.dumps(BASE))
    for k, v in over.items():
        if isinstance(v, dict):
            cfg.setdefault(k, {}).update(v)
        else:
            cfg[k] = v
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def _run(capsys, *argv):
    code = run_command(list(argv))
    return code, capsys.readouterr().err


def test_usage_and_config_errors(tmp_path, capsys):
    code, err = _run(capsys)
    assert code == 2 and "error[usage]" in err
    code, err = _run(capsys, "fly", "--config", "x")
    assert code == 2
    code, err = _run(capsys, "meta-train", "--config", str(tmp_path / "none.json"))
    assert code == 2 and err.startswith("basenas: error[config]:")
    assert len(err.strip().splitlines()) == 1
    bad = _config(tmp_path, colour="blue")
    code, err = _run(capsys, "meta-train", "--config", bad)
    assert code == 2 and "colour" in err
    cfg = json.loads(json.dumps(BASE))
    del cfg["meta"]["inner_lr"]
    (tmp_path / "m.json").write_text(json.dumps(cfg))
    code, err = _run(capsys, "meta-train", "--config", str(tmp_path / "m.json"))
    assert code == 2 and "inner_lr" in err


def test_runtime_error_exit_code(tmp_path, capsys):
    cfg = _config(tmp_path, out=str(tmp_path / "o"))
    (tmp_path / "junk.bmc").write_bytes(b"NOPE" + b"\0" * 100)
    code, err = _run(capsys, "adapt", "--config", cfg, "--checkpoint",
                     str(tmp_path / "junk.bmc"))
    assert code == 1 and "error[CorruptHeader]" in err


def test_zero_epochs_checkpoint_is_init(tmp_path, capsys):
    out = tmp_path / "o"
    cfg = _config(tmp_path, out=str(out))
    assert _run(capsys, "meta-train", "--config", cfg, "--epochs", "0")[0] == 0
    ck = runio.checkpoint_load(out / "checkpoint.bmc")
    full = validate(json.loads(open(cfg).read()))
    assert ck.epoch == 0 and ck.seed == 1
    assert P.bitwise_equal(ck.params, cells.init_params(build_net(full), 1))


def test_resume_equals_uninterrupted(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    ca = _config(tmp_path, "a.json", out=str(a))
    cb = _config(tmp_path, "b.json", out=str(b))
    assert _run(capsys, "meta-train", "--config", ca)[0] == 0
    assert _run(capsys, "meta-train", "--config", cb, "--epochs", "1")[0] == 0
    assert _run(capsys, "meta-train", "--config", cb, "--resume",
                str(b / "checkpoint.bmc"))[0] == 0
    assert (a / "checkpoint.bmc").read_bytes() == (b / "checkpoint.bmc").read_bytes()
    assert (a / "metrics.csv").read_text() == (b / "metrics.csv").read_text()
    assert len(runio.read_csv(a / "metrics.csv")) == 2
    # a different configuration cannot resume this checkpoint
    cc = _config(tmp_path, "c.json", out=str(tmp_path / "c"), meta={"inner_lr": 0.07})
    code, err = _run(capsys, "meta-train", "--config", cc, "--resume",
                     str(b / "checkpoint.bmc"))
    assert code == 2 and "different configuration" in err


def test_manifest_is_reproducible(tmp_path, capsys):
    ms = []
    for name in ("r1", "r2"):
        cfg = _config(tmp_path, f"{name}.json", out=str(tmp_path / name))
        assert _run(capsys, "meta-train", "--config", cfg, "--epochs", "1")[0] == 0
        ms.append(json.loads((tmp_path / name / "manifest.json").read_text()))
    assert ms[0]["files"] == ms[1]["files"]
    assert "timings.json" in ms[0]["volatile"]
    assert set(ms[0]["files"]) == {"checkpoint.bmc", "metrics.csv"}
    header = (tmp_path / "r1" / "metrics.csv").read_text().splitlines()[0]
    assert "wall_seconds" not in header


def test_adapt_then_derive_equals_in_process(tmp_path, capsys):
    out = tmp_path / "o"
    cfg = _config(tmp_path, out=str(out))
    assert _run(capsys, "meta-train", "--config", cfg, "--epochs", "1")[0] == 0
    ck = str(out / "checkpoint.bmc")
    staged = _config(tmp_path, "s.json", out=str(tmp_path / "staged"))
    assert _run(capsys, "adapt", "--config", staged, "--checkpoint", ck)[0] == 0
    assert _run(capsys, "derive", "--config", staged, "--checkpoint", ck, "--adapted",
                str(tmp_path / "staged" / "adapted"))[0] == 0
    direct = _config(tmp_path, "d.json", out=str(tmp_path / "direct"))
    assert _run(capsys, "derive", "--config", direct, "--checkpoint", ck)[0] == 0
    for f in ("genotype.txt", "probs.csv"):
        assert (tmp_path / "staged" / f).read_bytes() == (tmp_path / "direct" / f).read_bytes()
    Genotype.from_text((tmp_path / "direct" / "genotype.txt").read_text())
    rows = runio.read_csv(tmp_path / "staged" / "adapt.csv")
    assert len(rows) == 2 and all(0 <= float(r["pool_mass"]) <= 1 for r in rows)


def test_downstream_commands(tmp_path, capsys):
    out = tmp_path / "o"
    cfg = _config(tmp_path, out=str(out))
    assert _run(capsys, "meta-train", "--config", cfg, "--epochs", "1")[0] == 0
    ck = str(out / "checkpoint.bmc")
    assert _run(capsys, "adapt", "--config", cfg, "--checkpoint", ck)[0] == 0
    assert _run(capsys, "pca-export", "--config", cfg, "--adapted", str(out))[0] == 0
    assert len(runio.read_csv(out / "pca.csv")) == 2
    assert _run(capsys, "train-full", "--config", cfg, "--genotype",
                "uniform:skip_connect")[0] == 0
    trace = runio.read_csv(out / "trace.csv")
    assert [int(r["epoch"]) for r in trace] == [0, 1]
    assert json.loads((out / "full.json").read_text())["param_count"] > 0
    code, err = _run(capsys, "train-full", "--config", cfg, "--genotype", "uniform:conv_9x9")
    assert code != 0
    assert _run(capsys, "fast-adapt", "--config", cfg, "--checkpoint", ck)[0] == 0
    rows = runio.read_csv(out / "fast_adapt.csv")
    assert list(rows[0]) == ["epoch", "full", "frozen_arch", "scratch"] and len(rows) == 2


def test_fewshot_commands(tmp_path, capsys):
    out = tmp_path / "o"
    cfg = _config(tmp_path, out=str(out))
    assert _run(capsys, "fewshot-search", "--config", cfg)[0] == 0
    split = json.loads((out / "split.json").read_text())
    assert not set(split["train"]) & set(split["test"])
    assert _run(capsys, "fewshot-eval", "--config", cfg, "--genotype",
                str(out / "genotype.txt"))[0] == 0
    row = runio.read_csv(out / "fewshot_eval.csv")[0]
    assert int(row["episodes"]) == 3 and 0 <= float(row["mean_accuracy"]) <= 1


def test_console_script_exit_code(tmp_path):
    r = subprocess.run([sys.executable, "-m", "basenas.cli"], capture_output=True, text=True)
    assert r.returncode == 2 and "usage" in r.stderr
    env = dict(os.environ, BASENAS_OUT=str(tmp_path / "env"))
    cfg = _config(tmp_path, out=str(tmp_path / "ignored"))
    r = subprocess.run([sys.executable, "-m", "basenas.cli", "meta-train", "--config", cfg,
                        "--epochs", "0"], capture_output=True, text=True, env=env)
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "env" / "checkpoint.bmc").exists()
    assert not (tmp_path / "ignored").exists()
