"""Benchmark CLI: config handling, exit codes, persistence, determinism."""

import os

import numpy as np
import pytest

from ssmbench.bench import (
    ConfigError,
    build_report,
    load_config,
    load_run_result,
    render_csv,
    render_markdown,
    run_benchmark,
    save_run_result,
)
from ssmbench.cli import main
from ssmbench.encoders import EncoderSpec, save_checkpoint
from ssmbench.stats import RunResult

MINI_CONFIG = """
[dataset]
source = "synthetic"
num_per_class = 6
classes = 3
image_size = 16
seed = 3

[train]
epochs_max = 2
learning_rate = 3e-3
batch_size = 4
patience = 5
optimizer = "adam"

[benchmark]
n_seeds = {n_seeds}
base_seed = 100
out_dir = "{out_dir}"
workers = 1

[[encoder]]
id = "toy-cnn"
kind = "toy_cnn"
patch_size = 8
embed_dim = 4

[[encoder]]
id = "vim-tiny"
kind = "vim"
patch_size = 8
embed_dim = 8
depth = 1
d_state = 2
"""


def write_mini_config(tmp_path, n_seeds=3, name="config.toml", **overrides):
    out_dir = str(tmp_path / "out")
    text = MINI_CONFIG.format(n_seeds=n_seeds, out_dir=out_dir)
    for old, new in overrides.items():
        text = text.replace(old, new)
    path = tmp_path / name
    path.write_text(text)
    return str(path), out_dir


def test_load_config_parses_roster(tmp_path):
    path, _ = write_mini_config(tmp_path)
    config = load_config(path)
    assert [e.encoder_id for e in config.roster] == ["toy-cnn", "vim-tiny"]
    assert config.roster[1].spec.kind == "vim"
    assert config.fold_seeds() == [100, 101, 102]


def test_load_config_errors(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("not [valid toml")
    with pytest.raises(ConfigError, match="TOML"):
        load_config(str(bad))
    nosource = tmp_path / "nosource.toml"
    nosource.write_text("[dataset]\nimage_size = 16\n")
    with pytest.raises(ConfigError, match="source"):
        load_config(str(nosource))


def test_cmd_train_writes_checkpoint(tmp_path, capsys):
    path, out_dir = write_mini_config(tmp_path, n_seeds=1)
    code = main(["train", "--config", path, "--encoder", "toy-cnn",
                 "--seed", "100"])
    assert code == 0
    assert os.path.exists(os.path.join(out_dir, "toy-cnn-fold0.ckpt"))
    assert os.path.exists(os.path.join(out_dir, "toy-cnn-fold0.result"))
    history = open(os.path.join(out_dir, "toy-cnn-fold0.history")).read()
    assert history.startswith("epoch\ttrain_loss\tval_accuracy")


def test_cmd_train_unknown_encoder_lists_roster(tmp_path, capsys):
    path, _ = write_mini_config(tmp_path, n_seeds=1)
    code = main(["train", "--config", path, "--encoder", "resnet50",
                 "--seed", "100"])
    assert code == 2
    err = capsys.readouterr().err
    assert "toy-cnn" in err and "vim-tiny" in err


def test_cmd_train_divergence_exit_code(tmp_path):
    path, _ = write_mini_config(
        tmp_path, n_seeds=1,
        **{"learning_rate = 3e-3": "learning_rate = 1e6",
           'optimizer = "adam"': 'optimizer = "sgd"',
           "epochs_max = 2": "epochs_max = 20"})
    code = main(["train", "--config", path, "--encoder", "vim-tiny",
                 "--seed", "100"])
    assert code == 3


def test_cmd_benchmark_file_roster_and_determinism(tmp_path, capsys):
    path, out_dir = write_mini_config(tmp_path)
    assert main(["benchmark", "--config", path]) == 0
    results = [f for f in os.listdir(out_dir) if f.endswith(".result")]
    assert len(results) == 6  # 2 encoders x 3 seeds
    report1 = open(os.path.join(out_dir, "report.md")).read()
    assert "| Encoder Type | Encoder | # Params | AUC | ACC |" in report1

    blobs1 = {f: open(os.path.join(out_dir, f), "rb").read()
              for f in sorted(os.listdir(out_dir))}
    out2 = str(tmp_path / "out2")
    assert main(["benchmark", "--config", path, "--out", out2]) == 0
    blobs2 = {f: open(os.path.join(out2, f), "rb").read()
              for f in sorted(os.listdir(out2))}
    assert blobs1 == blobs2


def test_cmd_benchmark_resumes_after_partial_failure(tmp_path, monkeypatch):
    path, out_dir = write_mini_config(tmp_path, n_seeds=2)
    import ssmbench.bench as bench_mod

    real_job = bench_mod._run_job
    calls = []

    def flaky_job(config_path, encoder_id, fold, out):
        if len(calls) == 2:
            calls.append("boom")
            raise RuntimeError("simulated crash")
        calls.append((encoder_id, fold))
        return real_job(config_path, encoder_id, fold, out)

    monkeypatch.setattr(bench_mod, "_run_job", flaky_job)
    with pytest.raises(RuntimeError, match="simulated"):
        run_benchmark(path)
    assert os.path.exists(os.path.join(out_dir, "state.json"))

    monkeypatch.setattr(bench_mod, "_run_job", real_job)
    run_benchmark(path)
    assert not os.path.exists(os.path.join(out_dir, "state.json"))
    assert len([f for f in os.listdir(out_dir) if f.endswith(".result")]) == 4


def test_cmd_benchmark_workers_match_serial(tmp_path):
    path, out_dir = write_mini_config(tmp_path, n_seeds=1)
    assert main(["benchmark", "--config", path]) == 0
    out2 = str(tmp_path / "out-pool")
    assert main(["benchmark", "--config", path, "--out", out2,
                 "--workers", "2"]) == 0
    for f in sorted(os.listdir(out_dir)):
        a = open(os.path.join(out_dir, f), "rb").read()
        b = open(os.path.join(out2, f), "rb").read()
        assert a == b, f


def test_run_result_roundtrip(tmp_path):
    scores = np.array([[0.7, 0.2, 0.1], [0.1, 0.6, 0.3]])
    rr = RunResult(encoder_id="enc", seed=5, fold=1, labels=[0, 2],
                   predicted=[0, 1], scores=scores)
    path = tmp_path / "x.result"
    save_run_result(str(path), rr)
    text = path.read_text()
    assert text.splitlines()[0] == "encoder: enc"
    assert "\t" in text.splitlines()[3]
    back = load_run_result(str(path))
    assert back.encoder_id == "enc" and back.fold == 1 and back.seed == 5
    np.testing.assert_array_equal(back.scores, scores)
    assert back.labels == [0, 2] and back.predicted == [0, 1]


def _write_constructed_results(out_dir, n=20, folds=1):
    """Always-right vs always-wrong encoder pair on identical samples."""
    os.makedirs(out_dir, exist_ok=True)
    for fold in range(folds):
        labels = [i % 2 for i in range(n)]
        right = np.array([[0.9, 0.1] if l == 0 else [0.1, 0.9]
                          for l in labels])
        wrong = np.array([[0.1, 0.9] if l == 0 else [0.9, 0.1]
                          for l in labels])
        for enc, scores in (("always-right", right), ("always-wrong", wrong)):
            rr = RunResult(encoder_id=enc, seed=fold, fold=fold,
                           labels=labels,
                           predicted=list(np.argmax(scores, axis=1)),
                           scores=scores)
            save_run_result(os.path.join(out_dir, f"{enc}-fold{fold}.result"),
                            rr)


def test_cmd_compare_constructed_pair_yields_verdict(tmp_path, capsys):
    out = str(tmp_path / "cmp")
    _write_constructed_results(out)
    assert main(["compare", out]) == 0
    text = capsys.readouterr().out
    assert "always-right outperforms always-wrong" in text
    assert os.path.exists(os.path.join(out, "significance.txt"))


def test_cmd_compare_identical_results_no_verdicts(tmp_path, capsys):
    out = str(tmp_path / "cmp2")
    os.makedirs(out)
    labels = [0, 1] * 10
    scores = np.array([[0.8, 0.2] if l == 0 else [0.3, 0.7] for l in labels])
    for enc in ("copy-a", "copy-b"):
        rr = RunResult(encoder_id=enc, seed=0, fold=0, labels=labels,
                       predicted=list(np.argmax(scores, axis=1)),
                       scores=scores)
        save_run_result(os.path.join(out, f"{enc}-fold0.result"), rr)
    assert main(["compare", out]) == 0
    text = capsys.readouterr().out
    assert "no significant differences" in text
    assert "1.0000" in text


def test_cmd_compare_alpha_monotonicity(tmp_path, capsys):
    out = str(tmp_path / "cmp3")
    _write_constructed_results(out, n=6)

    def verdicts_at(alpha):
        assert main(["compare", out, "--alpha", str(alpha)]) == 0
        text = capsys.readouterr().out
        return {ln for ln in text.splitlines() if "outperforms" in ln}

    loose = verdicts_at(0.05)
    tight = verdicts_at(0.01)
    assert tight <= loose


def test_cmd_compare_misaligned_folds_exit_2(tmp_path, capsys):
    out = str(tmp_path / "cmp4")
    os.makedirs(out)
    labels = [0, 1, 0, 1]
    scores = np.array([[0.8, 0.2], [0.2, 0.8], [0.8, 0.2], [0.2, 0.8]])
    preds = list(np.argmax(scores, axis=1))
    save_run_result(os.path.join(out, "a-fold0.result"),
                    RunResult("a", 0, 0, labels, preds, scores))
    save_run_result(os.path.join(out, "b-fold1.result"),
                    RunResult("b", 1, 1, labels, preds, scores))
    assert main(["compare", out]) == 2


def test_cmd_compare_rejects_hash_mismatch(tmp_path, capsys):
    path, out_dir = write_mini_config(tmp_path, n_seeds=1)
    assert main(["benchmark", "--config", path]) == 0
    with open(os.path.join(out_dir, "config.toml"), "a") as fh:
        fh.write("\n# tampered\n")
    assert main(["compare", out_dir]) == 2
    assert "hash" in capsys.readouterr().err


def test_cmd_report_markdown_and_csv(tmp_path, capsys):
    path, out_dir = write_mini_config(tmp_path, n_seeds=1)
    assert main(["benchmark", "--config", path]) == 0
    assert main(["report", out_dir]) == 0
    md = capsys.readouterr().out
    header_idx = md.splitlines().index(
        "| Encoder Type | Encoder | # Params | AUC | ACC |")
    assert header_idx > 0
    assert main(["report", out_dir, "--format", "csv"]) == 0
    csv_text = capsys.readouterr().out
    assert csv_text.splitlines()[0] == "Encoder Type,Encoder,# Params,AUC,ACC"
    assert len(csv_text.splitlines()) == 3  # header + 2 encoders
    assert os.path.exists(os.path.join(out_dir, "report.csv"))


def test_cmd_report_empty_dir_exit_2(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["report", str(empty)]) == 2


def test_report_parameter_count_of_head_checkpoint(tmp_path):
    # a 10->3 linear head with bias counts 33 parameters
    from ssmbench.encoders import load_checkpoint

    spec = EncoderSpec(kind="toy_cnn", embed_dim=4, image_size=16,
                       patch_size=8)
    named = {"head.w": np.zeros((10, 3)), "head.b": np.zeros(3)}
    path = tmp_path / "head.ckpt"
    save_checkpoint(str(path), spec, named)
    _, arrays = load_checkpoint(str(path))
    count = sum(int(np.prod(a.shape)) if a.ndim else 1
                for a in arrays.values())
    assert count == 33


def test_report_values_scaled_0_100(tmp_path):
    path, out_dir = write_mini_config(tmp_path, n_seeds=1)
    assert main(["benchmark", "--config", path]) == 0
    report = build_report(out_dir)
    for row in report.rows:
        assert 0.0 <= row.auc.mean <= 1.0  # stored as fractions
    md = render_markdown(report)
    header = "| Encoder Type | Encoder | # Params | AUC | ACC |"
    data_rows = [ln for ln in md.splitlines()
                 if ln.startswith("| ") and ln != header]
    assert len(data_rows) == len(report.rows)
    for ln in data_rows:
        auc_cell = ln.split("|")[4].strip()
        value = float(auc_cell.split(" ±")[0])
        assert 0.0 <= value <= 100.0
    csv_text = render_csv(report)
    assert csv_text.count("\n") == len(report.rows) + 1


DIRECTORY_CONFIG = """
[dataset]
source = "busi"
path = "{data_root}"
image_size = 16

[train]
epochs_max = 2
learning_rate = 3e-3
batch_size = 4
patience = 5
optimizer = "adam"

[benchmark]
n_seeds = 1
base_seed = 100
out_dir = "{out_dir}"

[[encoder]]
id = "toy-cnn"
kind = "toy_cnn"
patch_size = 8
embed_dim = 4
num_classes = 3
"""


def _pgm_tree(tmp_path, per_class=5):
    rng = np.random.default_rng(70)
    root = tmp_path / "busi"
    for cls in ("benign", "malignant", "normal"):
        d = root / cls
        d.mkdir(parents=True)
        for i in range(per_class):
            arr = rng.integers(0, 256, size=(20, 14), dtype=np.uint8)
            data = b"P5\n14 20\n255\n" + arr.tobytes()
            (d / f"{i:02d}.pgm").write_bytes(data)
    return str(root)


def test_benchmark_on_directory_dataset(tmp_path, capsys):
    data_root = _pgm_tree(tmp_path)
    out_dir = str(tmp_path / "out-dir")
    cfg = tmp_path / "dir.toml"
    cfg.write_text(DIRECTORY_CONFIG.format(data_root=data_root,
                                           out_dir=out_dir))
    assert main(["benchmark", "--config", str(cfg)]) == 0
    report_text = open(os.path.join(out_dir, "report.md")).read()
    # single-encoder run: exactly one data row under the header
    rows = [ln for ln in report_text.splitlines()
            if ln.startswith("| ") and "Encoder Type" not in ln]
    assert len(rows) == 1
    assert rows[0].startswith("| CNN | toy-cnn |")


def test_compare_output_is_idempotent(tmp_path, capsys):
    out = str(tmp_path / "cmpidem")
    _write_constructed_results(out, n=12)
    assert main(["compare", out]) == 0
    first = open(os.path.join(out, "significance.txt")).read()
    assert main(["compare", out]) == 0
    second = open(os.path.join(out, "significance.txt")).read()
    assert first == second
