import csv
import json
import shutil
import subprocess

import numpy as np
import pytest

from jdcodec import __version__
from jdcodec.cli import main, shipped_config
from jdcodec.dataset import Manifest, synthetic_scene
from jdcodec.imaging import ImageF32, load_image, save_image
from jdcodec.kvconfig import load_kv


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-synthetic", str(root / "pairs"), "--scenes", "3", "--size", "64", "--noise", "0.002,0.0002", "--noise", "0.04,0.004", "--seed", "1"]) == 0
    assert main(["make-synthetic", str(root / "clean"), "--scenes", "3", "--size", "64", "--clean-only", "--seed", "2", "--prefix", "c"]) == 0
    assert main(["score-pairs", str(root / "pairs" / "manifest.jsonl"), "--crop-size", "32"]) == 0
    cfg = root / "train.cfg"
    cfg.write_text("mode = JDC-Cn(0.5)\nlambda_schedule = 256:30, 64:10\nlr = 0.003\ncrop_size = 32\nhidden_channels = 6\nlatent_channels = 4\n")
    out = root / "model"
    code = main(["train", "--config", str(cfg), "--pairs", str(root / "pairs" / "manifest.jsonl"), "--clean", str(root / "clean" / "manifest.jsonl"), "--out", str(out)])
    assert code == 0
    return root


def test_version_and_help(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0 and __version__ in capsys.readouterr().out
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_console_script_is_installed():
    exe = shutil.which("jdc")
    assert exe is not None
    res = subprocess.run([exe, "count-macs"], capture_output=True, text=True, check=True)
    assert "encoder total" in res.stdout


def test_shipped_configs_parse():
    for name in ("codec_full.cfg", "unet_reference.cfg", "desk_train.cfg"):
        assert load_kv(shipped_config(name))
    assert load_kv(shipped_config("codec_full.cfg"))["hidden_channels"] == 192


def test_count_macs_reference(capsys):
    code, out, _ = run(capsys, "count-macs", "--reference", "unet_reference.cfg")
    assert code == 0
    enc = float(next(ln for ln in out.splitlines() if ln.startswith("encoder total")).split()[-1])
    ref = float(next(ln for ln in out.splitlines() if ln.startswith("reference denoiser")).split()[-1])
    assert enc == pytest.approx(92.8, rel=0.05)
    assert ref == pytest.approx(812, rel=0.2)
    assert "approximate" in out


def test_generated_data(workspace):
    m = Manifest.load(workspace / "pairs" / "manifest.jsonl")
    assert len(m.pairs) == 6 and all(r.crop_scores for r in m.pairs)
    assert len(Manifest.load(workspace / "clean" / "manifest.jsonl").records) == 3


def test_filter(workspace, capsys, tmp_path):
    code, out, _ = run(capsys, "filter", workspace / "pairs" / "manifest.jsonl", "--tau", "0.0", "--out", tmp_path / "crops.jsonl")
    assert code == 0 and out.startswith("tau=0:")
    rows = [json.loads(ln) for ln in (tmp_path / "crops.jsonl").read_text().splitlines()]
    assert rows and all(r["msssim"] >= 0.3 for r in rows)
    code, out, _ = run(capsys, "filter", workspace / "pairs" / "manifest.jsonl", "--tau", "0.999")
    assert code == 0 and ": 0 crops" in out


def test_train_outputs(workspace):
    out = workspace / "model"
    assert (out / "model_lambda256.jdcm").exists() and (out / "model_lambda64.jdcm").exists()
    assert len((out / "train_log.csv").read_text().splitlines()) == 41


def test_compress_decompress(workspace, capsys, tmp_path):
    model = workspace / "model" / "model_lambda64.jdcm"
    img = ImageF32(synthetic_scene(np.random.default_rng(3), 64).data[:, :50, :])
    save_image(img, tmp_path / "in.ppm")
    code, out, _ = run(capsys, "compress", "--model", model, tmp_path / "in.ppm", tmp_path / "x.jdc")
    assert code == 0 and out.strip().endswith("bpp")
    rate = float(out.split(":")[1].split()[0])
    assert rate == pytest.approx(8 * (tmp_path / "x.jdc").stat().st_size / (50 * 64), rel=1e-5)
    code, out, _ = run(capsys, "decompress", "--model", model, tmp_path / "x.jdc", tmp_path / "out.ppm")
    assert code == 0 and "64x50" in out
    assert load_image(tmp_path / "out.ppm").data.shape == (3, 50, 64)


def test_decode_errors_exit_4(workspace, capsys, tmp_path):
    model = workspace / "model" / "model_lambda64.jdcm"
    other = workspace / "model" / "model_lambda256.jdcm"
    save_image(synthetic_scene(np.random.default_rng(4), 32), tmp_path / "in.ppm")
    run(capsys, "compress", "--model", model, tmp_path / "in.ppm", tmp_path / "x.jdc")
    code, _, err = run(capsys, "decompress", "--model", other, tmp_path / "x.jdc", tmp_path / "out.ppm")
    assert code == 4 and "model" in err
    assert not (tmp_path / "out.ppm").exists()
    data = (tmp_path / "x.jdc").read_bytes()
    (tmp_path / "cut.jdc").write_bytes(data[: len(data) // 2])
    code, _, _ = run(capsys, "decompress", "--model", model, tmp_path / "cut.jdc", tmp_path / "out.ppm")
    assert code == 4


def test_data_errors_exit_3(workspace, capsys, tmp_path):
    model = workspace / "model" / "model_lambda64.jdcm"
    code, _, err = run(capsys, "compress", "--model", model, tmp_path / "missing.ppm", tmp_path / "x.jdc")
    assert code == 3 and err.startswith("error:")
    (tmp_path / "junk.jdcm").write_bytes(b"nope")
    code, _, _ = run(capsys, "compress", "--model", tmp_path / "junk.jdcm", tmp_path / "missing.ppm", tmp_path / "x.jdc")
    assert code == 3
    m = Manifest.load(workspace / "pairs" / "manifest.jsonl")
    bare = Manifest(workspace / "pairs", [type(r)(r.scene_id, r.clean_path, r.noisy_path, r.iso, r.kind) for r in m.records])
    bare.save(workspace / "pairs" / "bare.jsonl")
    code, _, err = run(capsys, "filter", workspace / "pairs" / "bare.jsonl", "--tau", "0.5")
    assert code == 3 and "score-pairs" in err


def test_train_usage_and_pool_errors(workspace, capsys, tmp_path):
    (tmp_path / "bad.cfg").write_text("mode JDC-N\n")
    code, _, err = run(capsys, "train", "--config", tmp_path / "bad.cfg", "--out", tmp_path / "o")
    assert code == 2 and "line 1" in err
    code, _, err = run(capsys, "train", "--config", "desk_train.cfg", "--mode", "CompressionOnly", "--out", tmp_path / "o")
    assert code == 3 and "clean" in err


def test_eval_and_buckets(workspace, capsys, tmp_path):
    model = workspace / "model" / "model_lambda64.jdcm"
    code, out, _ = run(capsys, "eval", "--model", model, "--manifest", workspace / "pairs" / "manifest.jsonl", "--csv", tmp_path / "e.csv")
    assert code == 0
    header, row = out.strip().splitlines()
    assert header == "codec,lambda,bpp,msssim,psnr,bucket,input_msssim"
    assert row.startswith("JDC-Cn(0.5),64,") and row.split(",")[5] == "all"
    code, out, err = run(capsys, "eval", "--model", model, "--manifest", workspace / "pairs" / "manifest.jsonl", "--bucket", "1,1")
    assert code == 0 and "empty" in err and len(out.strip().splitlines()) == 1


def test_rd_curve_outputs(workspace, capsys, tmp_path):
    models = [workspace / "model" / f"model_lambda{lam}.jdcm" for lam in (256, 64)]
    code, out, _ = run(
        capsys, "rd-curve", *models, "--manifest", workspace / "pairs" / "manifest.jsonl", "--bucket", "0,1", "--external", "pil-jpeg", "--qualities", "20,80", "--out", tmp_path / "rd"
    )
    assert code == 0
    with open(tmp_path / "rd.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["codec"] for r in rows] == ["JDC-Cn(0.5)"] * 2 + ["pil-jpeg"] * 2
    assert (tmp_path / "rd.dat").read_text().startswith("# JDC-Cn(0.5)")
    png = (tmp_path / "rd.png").read_bytes()
    assert png[:8] == b"\x89PNG\r\n\x1a\n"


def test_rd_curve_skips_missing_tools(workspace, capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("PATH", "")
    code, _, err = run(
        capsys, "rd-curve", workspace / "model" / "model_lambda64.jdcm", "--manifest", workspace / "clean" / "manifest.jsonl", "--external", "jxl", "--out", tmp_path / "rd", "--no-plot"
    )
    assert code == 0 and "jxl" in err and not (tmp_path / "rd.png").exists()


def test_external_subcommand(workspace, capsys, monkeypatch):
    code, out, _ = run(capsys, "external", "--codec", "pil-jpeg", "--qualities", "30,60", "--manifest", workspace / "clean" / "manifest.jsonl")
    assert code == 0 and len(out.strip().splitlines()) == 3
    monkeypatch.setenv("PATH", "")
    code, out, _ = run(capsys, "external", "--codec", "bpg", "--manifest", workspace / "clean" / "manifest.jsonl")
    assert code == 0 and "skipped" in out


def test_resume_from_cli(workspace, capsys, tmp_path):
    cfg = workspace / "train.cfg"
    args = ["train", "--config", cfg, "--pairs", workspace / "pairs" / "manifest.jsonl", "--clean", workspace / "clean" / "manifest.jsonl"]
    code, out, _ = run(capsys, *args, "--out", tmp_path / "r", "--resume", workspace / "model" / "model_lambda256.jdcm")
    assert code == 0 and out.strip().endswith("model_lambda64.jdcm")
    assert (tmp_path / "r" / "model_lambda64.jdcm").read_bytes() == (workspace / "model" / "model_lambda64.jdcm").read_bytes()
