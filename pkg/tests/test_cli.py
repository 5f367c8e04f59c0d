import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from adaptconv import cli
from adaptconv.config import RunConfig
from adaptconv.net import count_parameters
from adaptconv.train import make_net
from adaptconv.data import generate

TINY_CLS = ["--preset", "desk-cls",
            "--set", "widths=[8, 8]", "--set", "kernel_hidden=6", "--set", "agg_width=16",
            "--set", "head_widths=[8]", "--set", "k=8", "--set", "batch_size=6",
            "--set", "dataset.samples_per_class=8", "--set", "dataset.points=64",
            "--set", "dataset.split=[0.75, 0.25]",
            "--set", "protocol.dropout_levels=[64, 48, 32, 16]"]

TINY_SEG = ["--preset", "desk-ablation",
            "--set", "widths=[8, 8, 8]", "--set", "kernel_hidden=6", "--set", "k=4",
            "--set", "pool_after=[0]", "--set", "decoder_widths=[8]", "--set", "batch_size=3",
            "--set", "dataset.samples_per_class=4", "--set", "dataset.points=32",
            "--set", "protocol.seeds=[0, 1]"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def files(directory):
    out = {}
    for root, _, names in os.walk(directory):
        for name in names:
            path = os.path.join(root, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, directory)] = fh.read()
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("train", *TINY_CLS, "--epochs", 1, "--set", "k=5", "--out", out) == 0
    return out


# train

def test_train_writes_one_row_log(trained):
    rows = read_csv(trained / "train_log.csv")
    assert rows[0] == ["epoch", "lr", "loss", "oa"]
    assert len(rows) == 2
    assert (trained / "checkpoint.acps").is_file()
    metrics = json.loads((trained / "metrics.json").read_text())
    assert 0.0 <= metrics["overall_accuracy"] <= 1.0


def test_override_is_recorded(trained):
    resolved = RunConfig.load(trained / "resolved-config.json")
    assert resolved.k == 5 and resolved.epochs == 1


def test_rerun_from_resolved_config_is_bit_exact(trained, tmp_path):
    assert run("train", "--config", trained / "resolved-config.json", "--out", tmp_path) == 0
    assert files(tmp_path) == files(trained)


def test_same_seed_twice_gives_identical_logs(tmp_path):
    for name in ("a", "b"):
        assert run("train", *TINY_CLS, "--epochs", 2, "--seed", 3, "--out", tmp_path / name) == 0
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == \
        (tmp_path / "b" / "train_log.csv").read_bytes()


def test_train_on_generated_directory(tmp_path):
    assert run("gen", *TINY_CLS, "--out", tmp_path / "g") == 0
    assert (tmp_path / "g" / "data" / "manifest.json").is_file()
    assert run("train", *TINY_CLS, "--epochs", 1, "--data", tmp_path / "g" / "data",
               "--out", tmp_path / "t") == 0


def test_invalid_config_exits_2(tmp_path, capsys):
    assert run("train", *TINY_CLS, "--set", "k=0", "--out", tmp_path) == 2
    assert "k must be positive" in capsys.readouterr().err
    assert run("train", "--config", tmp_path / "missing.json", "--out", tmp_path) == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert run("train", "--config", tmp_path / "bad.json", "--out", tmp_path) == 2
    assert run("train", *TINY_CLS, "--set", "nosuchkey=1", "--out", tmp_path) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_exits_1(tmp_path, capsys):
    assert run("train", *TINY_CLS, "--epochs", 1, "--set", "lr_max=1e300",
               "--set", "lr_min=1e300", "--out", tmp_path) == 1
    assert "non-finite" in capsys.readouterr().err


# checkpoint consumers

def test_eval_reports_metrics(trained, tmp_path):
    assert run("eval", "--checkpoint", trained, "--out", tmp_path) == 0
    assert json.loads((tmp_path / "metrics.json").read_text()) == \
        json.loads((trained / "metrics.json").read_text())


def test_missing_checkpoint_exits_2(tmp_path):
    for cmd in ("eval", "robustness", "featmap"):
        assert run(cmd, "--checkpoint", tmp_path / "nowhere", "--out", tmp_path) == 2


def test_robustness_csv_one_row_per_level(trained, tmp_path):
    assert run("robustness", "--checkpoint", trained, "--out", tmp_path / "a") == 0
    drop = read_csv(tmp_path / "a" / "robustness_dropout.csv")
    noise = read_csv(tmp_path / "a" / "robustness_noise.csv")
    assert drop[0] == noise[0] == ["mode", "level", "oa"]
    assert [r[1] for r in drop[1:]] == ["64", "48", "32", "16"]
    assert [float(r[1]) for r in noise[1:]] == [0.0, 0.01, 0.02, 0.05, 0.1]
    assert run("robustness", "--checkpoint", trained, "--out", tmp_path / "b") == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")


def test_robustness_level_below_k_exits_2(trained, tmp_path):
    assert run("robustness", "--checkpoint", trained, "--mode", "dropout",
               "--set", "protocol.dropout_levels=[64, 2]", "--out", tmp_path) == 2


def test_featmap_target_row_is_zero(trained, tmp_path):
    assert run("featmap", "--checkpoint", trained, "--set", "protocol.featmap_target=7",
               "--set", "protocol.featmap_layer=1", "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "featmap.csv")
    assert rows[0] == ["index", "x", "y", "z", "distance"]
    assert len(rows) == 65
    assert float(rows[8][4]) == 0.0
    assert all(float(r[4]) >= 0 for r in rows[1:])


def test_featmap_bad_layer_exits_2(trained, tmp_path):
    assert run("featmap", "--checkpoint", trained, "--set", "protocol.featmap_layer=9",
               "--out", tmp_path) == 2


def test_model_info_total_matches_count(tmp_path):
    assert run("model-info", *TINY_CLS, "--out", tmp_path) == 0
    last = (tmp_path / "model_info.txt").read_text().strip().splitlines()[-1].split()
    cfg = RunConfig.load(tmp_path / "resolved-config.json")
    net = make_net(cfg, generate(cfg.dataset))
    assert last == ["total", str(count_parameters(net))]


# gradcheck

@pytest.fixture(scope="module")
def gradcheck_report(tmp_path_factory):
    out = tmp_path_factory.mktemp("gc")
    code = run("gradcheck", "--out", out)
    return code, (out / "gradcheck.txt").read_text()


def test_gradcheck_clean_exit(gradcheck_report):
    code, report = gradcheck_report
    assert code == 0
    assert "FAIL" not in report


def test_gradcheck_covers_all_variants(gradcheck_report):
    _, report = gradcheck_report
    for variant in ("spatial", "feature", "normal", "initial"):
        assert f"adaptconv[{variant}]" in report


def test_gradcheck_fault_injection_names_op(tmp_path, capsys):
    assert run("gradcheck", "--inject-fault", "edge_inner_product") == 1
    err = capsys.readouterr().err
    assert "edge_inner_product" in err and "relative error" in err


# ablation

@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    out = tmp_path_factory.mktemp("abl")
    assert run("ablate", *TINY_SEG, "--epochs", 1, "--out", out) == 0
    return out


def test_ablation_table_shape(ablation):
    rows = read_csv(ablation / "ablation.csv")
    assert rows[0] == ["method", "mcIoU_seed0", "mIoU_seed0", "mcIoU_seed1", "mIoU_seed1",
                       "mcIoU_mean", "mIoU_mean"]
    assert [r[0] for r in rows[1:]] == list(cli.ABLATIONS)
    assert len(os.listdir(ablation / "configs")) == 7 * 2


def test_ablation_mean_column_is_seed_mean(ablation):
    for row in read_csv(ablation / "ablation.csv")[1:]:
        vals = [float(v) for v in row[1:5]]
        assert float(row[5]) == pytest.approx(np.mean(vals[0::2]), abs=1e-15)
        assert float(row[6]) == pytest.approx(np.mean(vals[1::2]), abs=1e-15)


def test_graphconv_row_differs_only_in_layer_kinds(ablation):
    def load(method):
        return json.loads((ablation / "configs" / f"{method}-seed0.json").read_text())
    adapt, graph = load("AdaptConv"), load("GraphConv")
    diff = {k for k in adapt if adapt[k] != graph[k]}
    assert diff == {"layer_kinds"}
    assert adapt["layer_kinds"] == ["adapt", "adapt", "graph"]
    assert graph["layer_kinds"] == ["graph", "graph", "graph"]
    feature = load("Feature")
    assert {k for k in adapt if adapt[k] != feature[k]} == {"variant"}


def test_ablation_rerun_is_bit_exact(ablation, tmp_path):
    assert run("ablate", "--config", ablation / "resolved-config.json", "--out", tmp_path) == 0
    assert files(tmp_path) == files(ablation)


def test_ablation_needs_segmentation(tmp_path):
    assert run("ablate", *TINY_CLS, "--out", tmp_path) == 2


# entry point

def test_console_entry_usage_error(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "adaptconv.cli", "train"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "--out" in proc.stderr
