from __future__ import annotations

import hashlib
import warnings

import numpy as np
import pytest

from copd.cli import main
from copd.metrics import read_metrics
from copd.policy import Policy, load_checkpoint, save_checkpoint
from copd.tasks import VOCAB, oracle_policy

CONFIG = """
schema_version: 1
run_id: cli
seed: 0
branches:
  - {id: sum, domain: modsum}
  - {id: par, domain: parity}
schedule: {mode: coevolve, cycles: 1, s_rl: 2, s_opd: 2}
grpo: {group_size: 4, batch_size: 4}
metrics: {k: 5, probe_prompts: 2}
pilot: {teacher_steps: 3, student_steps: 2, distill_steps: 2, temperatures: [0.5, 1.0, 2.0],
        drift_interval: 2, drift_measurements: 2}
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(CONFIG)
    return path


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_train_writes_merged_checkpoint(config, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out", str(out)]) == 0
    assert (out / "merged.ckpt").exists() and (out / "sum" / "cycle1.ckpt").exists()
    assert read_metrics(out / "metrics.jsonl")
    assert "final" in capsys.readouterr().out


def test_train_is_reproducible_by_digest(config, tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--config", str(config), "--out", str(tmp_path / name)]) == 0
    assert digest(tmp_path / "a" / "metrics.jsonl") == digest(tmp_path / "b" / "metrics.jsonl")
    assert digest(tmp_path / "a" / "merged.ckpt") == digest(tmp_path / "b" / "merged.ckpt")


def test_seed_override_changes_the_run(config, tmp_path):
    main(["train", "--config", str(config), "--out", str(tmp_path / "a")])
    main(["train", "--config", str(config), "--out", str(tmp_path / "b"), "--seed", "7"])
    assert digest(tmp_path / "a" / "merged.ckpt") != digest(tmp_path / "b" / "merged.ckpt")
    assert "seed: 7" in (tmp_path / "b" / "config.yaml").read_text()


def test_dry_run_prints_plan_without_compute(config, tmp_path, capsys):
    out = tmp_path / "dry"
    assert main(["train", "--config", str(config), "--out", str(out), "--dry-run"]) == 0
    text = capsys.readouterr().out
    assert '"updates"' in text and "s_rl: 2" in text
    assert not out.exists()


def test_invalid_config_exits_two_before_compute(config, tmp_path, capsys):
    config.write_text(CONFIG.replace("grpo: {group_size: 4", "grpo: {eps_low: 1.5, group_size: 4"))
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "x")]) == 2
    assert "grpo.eps_low" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_missing_config_exits_two(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.yaml")]) == 2


def test_runtime_failure_exits_three(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"garbage")
    assert main(["eval", "--checkpoint", str(tmp_path / "bad.ckpt"), "--domains", "parity"]) == 3


def test_eval_oracle_and_zero_policy(tmp_path, capsys):
    save_checkpoint(oracle_policy(["parity"]), tmp_path / "o.ckpt")
    save_checkpoint(Policy.zeros(VOCAB, 5), tmp_path / "z.ckpt")
    assert main(["eval", "--checkpoint", str(tmp_path / "o.ckpt"), "--domains", "parity"]) == 0
    first = capsys.readouterr().out
    assert "parity\t1.0000\t64" in first
    main(["eval", "--checkpoint", str(tmp_path / "o.ckpt"), "--domains", "parity"])
    assert capsys.readouterr().out == first
    assert main(["eval", "--checkpoint", str(tmp_path / "z.ckpt"), "--domains", "modsum"]) == 0
    assert "modsum\t0.0000" in capsys.readouterr().out


def test_eval_unknown_domain_exits_two(tmp_path):
    save_checkpoint(Policy.zeros(VOCAB, 5), tmp_path / "z.ckpt")
    assert main(["eval", "--checkpoint", str(tmp_path / "z.ckpt"), "--domains", "sorting"]) == 2


def test_merge_command(tmp_path):
    a = Policy.zeros(VOCAB, 5)
    b = Policy(np.full(a.shape, 2.0), VOCAB, 5)
    save_checkpoint(a, tmp_path / "a.ckpt")
    save_checkpoint(b, tmp_path / "b.ckpt")
    args = ["merge", "--checkpoints", str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")]
    assert main(args + ["--out", str(tmp_path / "m.ckpt")]) == 0
    assert np.all(load_checkpoint(tmp_path / "m.ckpt").params == 1.0)
    assert main(args + ["--weights", "0", "1", "--out", str(tmp_path / "w.ckpt")]) == 0
    assert (tmp_path / "w.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert main(args + ["--weights", "1", "--out", str(tmp_path / "x.ckpt")]) == 2
    assert main(args) == 2


def test_plot_data_empty_file_gives_header_only(tmp_path, capsys):
    (tmp_path / "m.jsonl").write_text("")
    assert main(["plot-data", "--metrics", str(tmp_path / "m.jsonl"), "--figure", "drift"]) == 0
    assert capsys.readouterr().out == "branch\tstep\tseries\tvalue\n"


def test_plot_data_unknown_figure_lists_valid_ids(tmp_path, capsys):
    (tmp_path / "m.jsonl").write_text("")
    assert main(["plot-data", "--metrics", str(tmp_path / "m.jsonl"), "--figure", "fig9"]) == 2
    assert "overlap-timeseries" in capsys.readouterr().err


def test_pilot_drift_command_and_plot(config, tmp_path, capsys):
    out = tmp_path / "drift"
    assert main(["pilot-drift", "--config", str(config), "--out", str(out)]) == 0
    assert "overlap drop" in capsys.readouterr().out
    assert main(["plot-data", "--metrics", str(out / "drift.jsonl"), "--figure", "drift",
                 "--out", str(out / "drift.tsv")]) == 0
    lines = (out / "drift.tsv").read_text().splitlines()
    # 2 branches x 3 measurements (including step 0) x 2 series
    assert len(lines) == 1 + 12
    assert {tuple(line.split("\t")[::2]) for line in lines[1:]} == {
        (b, s) for b in ("sum", "par") for s in ("overlap", "sym_kl")}


def test_pilot_overlap_command(config, tmp_path, capsys):
    out = tmp_path / "og"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # tiny runs may give too few overlap levels
        code = main(["pilot-overlap", "--config", str(config), "--out", str(out)])
    assert code == 0
    text = capsys.readouterr().out
    assert text.count("\nT") == 3 and "control" in text and "spearman" in text
    tsv = tmp_path / "og.tsv"
    main(["plot-data", "--metrics", str(out / "overlap_gain.jsonl"), "--figure", "overlap-gain", "--out", str(tsv)])
    assert len(tsv.read_text().splitlines()) == 1 + 4


def test_rhythm_sweep_command(config, tmp_path, capsys):
    out = tmp_path / "sweep"
    assert main(["rhythm-sweep", "--config", str(config), "--out", str(out), "--ratios", "1:1", "3:1"]) == 0
    assert "best merged accuracy" in capsys.readouterr().out
    main(["plot-data", "--metrics", str(out / "sweep.jsonl"), "--figure", "rhythm-sweep",
          "--out", str(tmp_path / "s.tsv")])
    assert len((tmp_path / "s.tsv").read_text().splitlines()) == 1 + 2
