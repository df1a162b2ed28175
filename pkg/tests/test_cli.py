import csv
import json

import numpy as np
import pytest

from bindesc import cli
from bindesc import model as M
from bindesc.data import archive as A
from bindesc.data import scene as S


def run(*argv):
    return cli.main([str(a) for a in argv])


# --- config files -------------------------------------------------------------

def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("# training\nvariant = didymos_pm\nepochs = 30  # short\nbatch-pairs=256\n"
                   "no_resume = yes\narchive = a.dpat\nout = run\n")
    args = cli.parse_args(["train", "--config", str(cfg), "--epochs", "5"])
    assert (args.variant, args.epochs, args.batch_pairs, args.no_resume) == ("didymos_pm", 5, 256,
                                                                             True)
    assert args.archive == "a.dpat"          # required option supplied by the file


def test_config_lists_and_errors(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("out = x.dpat\nmodes = planar, heightfield\n")
    assert cli.parse_args(["gen-data", "--config", str(cfg)]).modes == ["planar", "heightfield"]
    for body in ("bogus = 1\n", "variant = resnet\n", "no_resume = maybe\n", "just words\n"):
        cfg.write_text("archive = a\nout = b\n" + body)
        with pytest.raises(cli.ConfigError):
            cli.parse_args(["train", "--config", str(cfg)])


def test_defaults_mirror_training_setup():
    args = cli.parse_args(["train", "--archive", "a", "--out", "b"])
    assert (args.epochs, args.batch_pairs, args.lr) == (200, 512, 0.01)
    with pytest.raises(SystemExit):
        cli.parse_args(["extract", "--image", "a", "--out", "b", "--budget", "700"])


# --- provenance ---------------------------------------------------------------

def test_git_checksum_known_value():
    # `git hash-object` of an empty file and of "hello\n"
    assert cli.git_checksum(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"
    assert cli.git_checksum(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_json_checksum_detects_tampering(tmp_path):
    args = cli.parse_args(["count-ops", "--variant", "hynet_ref", "--out", str(tmp_path / "o.json")])
    assert args.func(args) == 0
    p = tmp_path / "o.json"
    assert cli.verify_json(p)
    doc = json.loads(p.read_text())
    assert doc["run_config"]["variant"] == ["hynet_ref"]
    doc["hynet_ref"]["flops"] += 1
    p.write_text(json.dumps(doc))
    assert not cli.verify_json(p)


# --- count-ops / bench ---------------------------------------------------------

def test_count_ops(tmp_path, capsys):
    assert run("count-ops", "--out", tmp_path / "ops.json") == 0
    doc = json.loads((tmp_path / "ops.json").read_text())
    assert doc["hynet_ref"]["mflops_equiv"] == pytest.approx(39.67, rel=0.05)
    d = doc["didymos"]
    assert d["binary_mflops_equiv"] == pytest.approx(d["bops"] / 64 / 1e6)
    assert d["mflops_equiv"] == pytest.approx(d["float_mflops"] + d["binary_mflops_equiv"])
    assert "MBOPs / 64" in capsys.readouterr().out


def test_bench_csv_schema(tmp_path):
    out = tmp_path / "b.csv"
    assert run("bench-kernels", "--shapes", "8x8x128x128", "4x4x64x32", "--reps", 3, "--batch", 4,
               "--out", out) == 0
    rows = list(csv.DictReader(open(out)))
    assert [(r["shape"], r["precision"]) for r in rows] == [
        ("8x8x128x128", "float"), ("8x8x128x128", "binary"),
        ("4x4x64x32", "float"), ("4x4x64x32", "binary")]
    assert all(float(r["median_s"]) > 0 for r in rows)
    assert (tmp_path / "b.csv.manifest.json").exists()
    with pytest.raises(cli.ConfigError):
        cli.parse_shape("8x8x128")


# --- extract / match ---------------------------------------------------------

@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    S.save_scene(S.synth_scene(4, "planar", S.SceneConfig(size=256)), d)
    return d


@pytest.mark.parametrize("variant", ["didymos", "didymos_pm"])
def test_self_match_precision(tmp_path, scene_dir, variant):
    img = scene_dir / "view000.pgm"
    for name in ("a", "b"):
        assert run("extract", "--image", img, "--variant", variant, "--budget", 500,
                   "--out", tmp_path / f"{name}.npz") == 0
    kps, desc, metric = cli.load_descriptors(tmp_path / "a.npz")
    assert 50 < len(kps) <= 500
    if variant == "didymos_pm":
        assert metric == "hamming"
        with np.load(tmp_path / "a.npz") as z:
            assert z["packed"].shape == (len(kps), 32)
    assert run("match", "--a", tmp_path / "a.npz", "--b", tmp_path / "b.npz", "--scene", scene_dir,
               "--views", 0, 0, "--out", tmp_path / "m.json") == 0
    doc = json.loads((tmp_path / "m.json").read_text())
    assert cli.verify_json(tmp_path / "m.json")
    assert doc["aggregate"]["precision"] >= 0.99


def test_match_rejects_mixed_kinds(tmp_path, scene_dir):
    img = scene_dir / "view001.pgm"
    run("extract", "--image", img, "--variant", "didymos", "--budget", 500, "--out", tmp_path / "f.npz")
    run("extract", "--image", img, "--variant", "didymos_pm", "--budget", 500,
        "--out", tmp_path / "b.npz")
    assert run("match", "--a", tmp_path / "f.npz", "--b", tmp_path / "b.npz",
               "--out", tmp_path / "m.json") == 2


# --- gen-data / train / export / eval ----------------------------------------------

@pytest.fixture(scope="module")
def tiny_archive(tmp_path_factory):
    d = tmp_path_factory.mktemp("gen")
    rc = run("gen-data", "--out", d / "a.dpat", "--scenes", 2, "--image-size", 160,
             "--test-fraction", 0.5)
    assert rc == 0
    return d / "a.dpat"


def test_gen_data_deterministic(tmp_path, capsys):
    argv = ("gen-data", "--out", tmp_path / "b.dpat", "--scenes", 2, "--image-size", 160,
            "--test-fraction", 0.5)
    run(*argv)
    first = A.archive_checksum(tmp_path / "b.dpat")
    run(*argv)
    out = capsys.readouterr().out
    assert "rejected_3px=" in out and "rejected_scale=" in out and "rejected_perspective=" in out
    assert A.archive_checksum(tmp_path / "b.dpat") == first
    man = json.loads((tmp_path / "b.dpat.manifest.json").read_text())
    assert man["checksum"] == cli.git_checksum((tmp_path / "b.dpat").read_bytes())


def test_train_export_eval(tmp_path, tiny_archive):
    ar = A.archive_read(tiny_archive)
    n_train = len(ar.split_indices("train"))
    assert n_train >= 16
    bp = min(32, n_train)
    run_dir = tmp_path / "run"
    assert run("train", "--archive", tiny_archive, "--out", run_dir, "--variant", "didymos_pm",
               "--epochs", 1, "--batch-pairs", bp, "--plot") == 0
    assert (run_dir / "loss.png").stat().st_size > 0
    assert (run_dir / "last.ckpt.manifest.json").exists()
    assert run("export", "--checkpoint", run_dir / "last.ckpt", "--out", tmp_path / "m.pk") == 0
    packed = M.load_model(tmp_path / "m.pk")
    net = M.load_model(run_dir / "last.ckpt")
    x = ar.pair_patches(np.arange(8))[0]
    np.testing.assert_array_equal(packed.describe(x).words, net.describe(x).words)
    if len(ar.split_indices("test")) >= 20:
        assert run("eval", "--model", tmp_path / "m.pk", "--archive", tiny_archive,
                   "--out", tmp_path / "e.json", "--plot") == 0
        doc = json.loads((tmp_path / "e.json").read_text())
        assert 0 <= doc["fpr95"] <= 1 and doc["metric"] == "hamming"
        assert (tmp_path / "e.png").exists()


def test_eval_stereo_table(tmp_path):
    out = tmp_path / "s.json"
    assert run("eval", "--mode", "stereo", "--scenes", 1, "--image-size", 192, "--budget", 500,
               "--out", out, "--plot") == 0
    doc = json.loads(out.read_text())
    assert set(doc["table"]) == {"#matches", "P", "R", "A", "AUC@5", "AUC@10", "AUC@20"}
    assert doc["aggregate"]["pairs"] == len(doc["pairs"]) > 0
    assert (tmp_path / "s.png").exists()


def test_missing_input_is_reported(tmp_path, capsys):
    assert run("train", "--archive", tmp_path / "nope.dpat", "--out", tmp_path / "r") == 2
    assert "error" in capsys.readouterr().err
