import csv
import shutil

import numpy as np
import pytest
from PIL import Image

from semtrack import cli
from semtrack.adapters import init_adapters
from semtrack.config import load_run_config
from semtrack.data import generate_episode
from semtrack.pipeline import save_checkpoint
from semtrack.pretrain import base_model

CONFIG = """\
[encoder]
image_size = 64
patch_size = 8
embed_dim = 16
num_blocks = 1
num_heads = 2
memory_layers = 1
decoder_blocks = 1

[base]
steps = 0

[trainer]
epochs = 1
learning_rate = 1e-3

[data]
samples_per_episode = 6

[eval]
targets_per_episode = 1
episodes_per_class = 2
"""


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    mp = pytest.MonkeyPatch()
    mp.setenv("SEMTRACK_CACHE", str(root / "cache"))
    mp.delenv(cli.OUTPUT_ROOT_ENV, raising=False)
    (root / "run.ini").write_text(CONFIG)
    assert cli.main(["gen-data", "--config", str(root / "run.ini"), "--out", str(root / "data"),
                     "--folds", "2", "--episodes-per-class", "2"]) == 0
    yield root
    mp.undo()


def run(ws, *argv):
    verb, rest = argv[0], list(argv[1:])
    return cli.main([verb, "--config", str(ws / "run.ini"), *rest])


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_gen_data_layout(ws):
    fold = ws / "data" / "fold_0"
    manifest = (fold / "manifest").read_text()
    assert "fold_id = 0" in manifest and "episodes_per_class = 2" in manifest
    train = {p.name for p in (fold / "train").iterdir()}
    test = {p.name for p in (fold / "test").iterdir()}
    assert len(train) == len(test) == 9 and not train & test
    assert sorted(p.name for p in (fold / "test" / sorted(test)[0]).iterdir()) == ["ep_000", "ep_001"]


@pytest.mark.parametrize("folds", ["0", "9"])
def test_gen_data_rejects_bad_fold_count(ws, tmp_path, folds, capsys):
    assert run(ws, "gen-data", "--out", str(tmp_path / "d"), "--folds", folds) == 2
    assert "--folds" in capsys.readouterr().err


def test_gen_data_same_seed_is_byte_identical(ws, tmp_path):
    for name in ("a", "b"):
        assert run(ws, "gen-data", "--out", str(tmp_path / name), "--folds", "1",
                   "--episodes-per-class", "1", "--seed", "4") == 0
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b and len(files_a) > 18
    assert all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files_a)


def test_output_root_env_resolves_relative_paths(ws, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
    assert cli.resolve("x/y") == tmp_path / "x" / "y"
    assert cli.resolve("/abs") == cli.Path("/abs")
    assert run(ws, "gen-data", "--out", "rel", "--folds", "1", "--episodes-per-class", "1") == 0
    assert (tmp_path / "rel" / "fold_0" / "manifest").is_file()


@pytest.fixture(scope="module")
def trained(ws):
    ckpts = []
    for name in ("a", "b"):
        assert run(ws, "train", "--data", str(ws / "data"), "--fold", "0",
                   "--out-checkpoint", str(ws / f"ckpt_{name}.safetensors"), "--seed", "3") == 0
        ckpts.append(ws / f"ckpt_{name}.safetensors")
    return ckpts


def test_train_reports_adapter_parameters_and_is_deterministic(ws, trained, capsys):
    assert run(ws, "train", "--data", str(ws / "data"), "--fold", "0",
               "--out-checkpoint", str(ws / "ckpt_c.safetensors"), "--seed", "3") == 0
    out = capsys.readouterr().out
    # one adapted block, W_down and W_up of 16 x 8 each
    assert "trainable parameters: 256" in out
    assert trained[0].read_bytes() == trained[1].read_bytes() == (ws / "ckpt_c.safetensors").read_bytes()
    rows = read_csv(trained[0].with_suffix(".loss.csv"))
    assert rows[0] == ["step", "total", "bce", "dice"] and len(rows) > 1
    fold = cli.read_fold(ws / "data", 0)
    audited = trained[0].with_suffix(".classes.txt").read_text().split()
    assert set(audited) <= set(fold.train_classes)


def test_fold_leakage_is_caught(ws, tmp_path):
    fold = cli.read_fold(ws / "data", 0)
    with pytest.raises(AssertionError):
        cli.class_guard(fold.train_classes, [])(fold.test_classes[0])
    shutil.copytree(ws / "data", tmp_path / "data")
    leak = tmp_path / "data" / "fold_0" / "train" / fold.test_classes[0] / "ep_000"
    shutil.copytree(ws / "data" / "fold_0" / "test" / fold.test_classes[0] / "ep_000", leak)
    assert run(ws, "train", "--data", str(tmp_path / "data"), "--fold", "0",
               "--out-checkpoint", str(tmp_path / "c.safetensors")) == 1


def eval_miou(ws, out, *extra):
    assert run(ws, "eval", "--data", str(ws / "data"), "--fold", "0", "--out", str(out), *extra) == 0
    return float(read_csv(out / "summary.csv")[1][-1])


@pytest.mark.parametrize("shots", ["1", "5"])
def test_eval_shots_and_outputs(ws, trained, tmp_path, shots):
    eval_miou(ws, tmp_path, "--checkpoint", str(trained[0]), "--shots", shots)
    rows = read_csv(tmp_path / "per_class.csv")
    assert rows[0] == ["class", "iou"] and len(rows) == 10
    assert read_csv(tmp_path / "summary.csv")[0] == ["fold", "shots", "prompt", "seed", "miou"]


def test_zero_init_checkpoint_equals_frozen(ws, tmp_path):
    cfg = load_run_config(ws / "run.ini")
    model = base_model(cfg.encoder, cfg.base)
    save_checkpoint(init_adapters(cfg.encoder), tmp_path / "zero.safetensors", model.fingerprint(), 0)
    frozen = eval_miou(ws, tmp_path / "f")
    zero = eval_miou(ws, tmp_path / "z", "--checkpoint", str(tmp_path / "zero.safetensors"))
    assert zero == frozen


def test_permuting_references_changes_nothing(ws, trained, tmp_path):
    a = eval_miou(ws, tmp_path / "a", "--checkpoint", str(trained[0]), "--shots", "3")
    b = eval_miou(ws, tmp_path / "b", "--checkpoint", str(trained[0]), "--shots", "3", "--permute-refs")
    assert a == b


def test_eval_rejects_mismatched_checkpoint(ws, tmp_path):
    save_checkpoint(init_adapters(load_run_config(None).encoder), tmp_path / "other.safetensors", "0" * 16, 0)
    assert run(ws, "eval", "--data", str(ws / "data"), "--fold", "0", "--out", str(tmp_path),
               "--checkpoint", str(tmp_path / "other.safetensors")) == 1


@pytest.fixture(scope="module")
def annotate_dirs(ws):
    refs, targets = ws / "refs", ws / "targets"
    refs.mkdir()
    targets.mkdir()
    for c in ("disk-flat", "bar-noise"):
        s = generate_episode(c, 1, 0).samples[0]
        Image.fromarray(s.image).save(refs / f"{c}.png")
        Image.fromarray(s.mask * 255).save(refs / f"{c}_mask.png")
    for i in range(5):
        Image.fromarray(generate_episode("disk-flat", 1, 10 + i).samples[0].image).save(targets / f"t{i}.png")
    return refs, targets


def test_annotate_cache_on_and_off_agree(ws, trained, annotate_dirs, capsys):
    refs, targets = annotate_dirs
    for mode in ("on", "off"):
        assert run(ws, "annotate", "--checkpoint", str(trained[0]), "--refs", str(refs),
                   "--targets", str(targets), "--out", str(ws / f"ann_{mode}"), "--cache", mode) == 0
    assert "images/sec" in capsys.readouterr().out
    on = sorted((ws / "ann_on").iterdir())
    assert len(on) == 5 * 2 and on[0].name == "t0__bar-noise.png"
    for p in on:
        assert np.array_equal(np.asarray(Image.open(p)), np.asarray(Image.open(ws / "ann_off" / p.name)))


def test_annotate_needs_targets(ws, annotate_dirs, tmp_path):
    refs, _ = annotate_dirs
    (tmp_path / "empty").mkdir()
    assert run(ws, "annotate", "--refs", str(refs), "--targets", str(tmp_path / "empty"),
               "--out", str(tmp_path / "o")) == 1


def test_analyze_modes_need_a_checkpoint(ws, tmp_path):
    for mode in ("pca-sweep", "probe", "pca-rgb"):
        assert run(ws, "analyze", "--data", str(ws / "data"), "--mode", mode, "--out", str(tmp_path)) == 2


def test_analyze_pca_sweep_and_rgb(ws, trained, tmp_path):
    for mode in ("pca-sweep", "pca-rgb"):
        assert run(ws, "analyze", "--data", str(ws / "data"), "--mode", mode, "--checkpoint", str(trained[0]),
                   "--out", str(tmp_path)) == 0
    rows = read_csv(tmp_path / "pca_sweep.csv")
    assert rows[0] == ["n_components", "frozen", "adapted"]
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 4, 8, 16]
    assert Image.open(tmp_path / "pca_rgb_adapted.png").size == (4 * 64, 64)


def test_analyze_ablation_table(ws, tmp_path):
    assert run(ws, "analyze", "--data", str(ws / "data"), "--mode", "ablation", "--dims", "4",
               "--out", str(tmp_path / "ab")) == 0
    rows = read_csv(tmp_path / "ab" / "ablation.csv")
    assert rows[0] == ["variant", "kind", "bottleneck_dim", "J", "miou"]
    assert [r[0] for r in rows[1:]] == ["frozen", "adapter_j1", "full_loss", "dim_4"]
    assert rows[2][3] == "1" and rows[3][3] == "2"
    assert float(rows[1][4]) == pytest.approx(eval_miou(ws, tmp_path / "e"), abs=1e-6)


def test_parser_usage_errors(ws):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--fold", "0"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["eval", "--fold", "0", "--shots", "0"])
    assert exc.value.code == 2
