"""Command-line interface: subcommands, formats, exit codes, determinism."""

import subprocess
import sys

import numpy as np
import pytest

from fatkit.data import read_ppm
from fatkit.tps import write_points


def run_cli(*argv, env=None):
    import os

    full_env = dict(os.environ)
    if env:
        full_env.update(env)
    return subprocess.run(
        [sys.executable, "-m", "fatkit.cli", *map(str, argv)],
        capture_output=True, text=True, env=full_env,
    )


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    result = run_cli("synth", "--out", out, "--count", 6, "--size", 48, "--seed", 5)
    assert result.returncode == 0, result.stderr
    return out


# -- synth --------------------------------------------------------------------------


def test_synth_creates_triples_and_manifest(corpus):
    files = sorted(p.name for p in corpus.iterdir())
    assert "manifest.txt" in files
    for stem in ("0000", "0005"):
        for ext in (".ppm", ".lm", ".pgm"):
            assert f"{stem}{ext}" in files
    assert len((corpus / "manifest.txt").read_text().strip().splitlines()) == 6


def test_synth_missing_out_is_usage_error():
    result = run_cli("synth", "--count", 4)
    assert result.returncode == 1


def test_unknown_flag_is_usage_error():
    result = run_cli("synth", "--out", "/tmp/x", "--count", 4, "--frobnicate")
    assert result.returncode == 1


def test_synth_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli("synth", "--out", a, "--count", 4, "--size", 32, "--seed", 9).returncode == 0
    assert run_cli("synth", "--out", b, "--count", 4, "--size", 32, "--seed", 9).returncode == 0
    for name in ("manifest.txt", "0000.ppm", "0003.pgm", "0001.lm"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


# -- pgt ----------------------------------------------------------------------------


def test_pgt_tps_self_pair(corpus, tmp_path):
    out = tmp_path / "self.ppm"
    result = run_cli("pgt", "--source", corpus / "0000.ppm", "--ref", corpus / "0000.ppm",
                     "--mode", "tps", "--out", out)
    assert result.returncode == 0, result.stderr
    src = read_ppm(corpus / "0000.ppm")
    got = read_ppm(out)
    assert np.abs(got - src).max() <= 2.0 / 255.0
    assert (tmp_path / "self.meta").read_text().startswith("mode=tps-color")


def test_pgt_hist_sidecar(corpus, tmp_path):
    out = tmp_path / "h.ppm"
    result = run_cli("pgt", "--source", corpus / "0000.ppm", "--ref", corpus / "0001.ppm",
                     "--mode", "hist", "--out", out)
    assert result.returncode == 0, result.stderr
    assert (tmp_path / "h.meta").read_text().split()[0] == "mode=histogram"


def test_pgt_spatial_part_sidecar(corpus, tmp_path):
    out = tmp_path / "s.ppm"
    result = run_cli("pgt", "--source", corpus / "0000.ppm", "--ref", corpus / "0001.ppm",
                     "--mode", "tps", "--spatial-part", "eyebrows", "--out", out)
    assert result.returncode == 0, result.stderr
    meta = (tmp_path / "s.meta").read_text()
    assert "parts=2,3" in meta


def test_pgt_missing_sample_is_data_error(tmp_path):
    result = run_cli("pgt", "--source", tmp_path / "nope.ppm", "--ref", tmp_path / "nope.ppm",
                     "--mode", "tps", "--out", tmp_path / "o.ppm")
    assert result.returncode == 2


# -- train + transfer -----------------------------------------------------------------


@pytest.fixture(scope="module")
def model(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("model")
    result = run_cli("train", "--data", corpus, "--steps", 3, "--size", 48, "--width", 4,
                     "--seed", 1, "--out", out / "m.fatw", "--log", out / "l.csv")
    assert result.returncode == 0, result.stderr
    return out


def test_train_log_row_count(model):
    lines = (model / "l.csv").read_text().strip().splitlines()
    assert lines[0] == "iter,J_D,J_G,adv,cyc,per,make"
    assert len(lines) == 4


def test_train_same_seed_identical_csv(corpus, tmp_path):
    args = ("train", "--data", corpus, "--steps", 2, "--size", 48, "--width", 4, "--seed", 7)
    assert run_cli(*args, "--out", tmp_path / "a.fatw", "--log", tmp_path / "a.csv").returncode == 0
    assert run_cli(*args, "--out", tmp_path / "b.fatw", "--log", tmp_path / "b.csv").returncode == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.fatw").read_bytes() == (tmp_path / "b.fatw").read_bytes()


def test_train_config_file_overrides_and_rejects_unknown(corpus, tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("steps = 2\nseed = 3\n")
    result = run_cli("train", "--data", corpus, "--steps", 99, "--size", 48, "--width", 4,
                     "--config", cfg, "--out", tmp_path / "m.fatw", "--log", tmp_path / "l.csv")
    assert result.returncode == 0, result.stderr
    assert len((tmp_path / "l.csv").read_text().strip().splitlines()) == 3
    cfg.write_text("stepss = 2\n")
    result = run_cli("train", "--data", corpus, "--size", 48, "--width", 4,
                     "--config", cfg, "--out", tmp_path / "m2.fatw", "--log", tmp_path / "l2.csv")
    assert result.returncode == 2


def test_transfer_output_size_and_determinism(corpus, model, tmp_path):
    args = ("transfer", "--model", model / "m.fatw", "--source", corpus / "0000.ppm",
            "--ref", corpus / "0001.ppm")
    assert run_cli(*args, "--out", tmp_path / "t1.ppm").returncode == 0
    assert run_cli(*args, "--out", tmp_path / "t2.ppm").returncode == 0
    assert (tmp_path / "t1.ppm").read_bytes() == (tmp_path / "t2.ppm").read_bytes()
    assert read_ppm(tmp_path / "t1.ppm").shape == (3, 48, 48)


def test_transfer_size_mismatch_is_data_error(model, tmp_path):
    from fatkit.data import save_sample
    from fatkit.data import synth_face, random_face_params

    sample = synth_face(random_face_params(np.random.default_rng(0), "plain", seed=0), 32)
    save_sample(tmp_path, "small", sample)
    result = run_cli("transfer", "--model", model / "m.fatw", "--source", tmp_path / "small.ppm",
                     "--ref", tmp_path / "small.ppm", "--out", tmp_path / "t.ppm")
    assert result.returncode == 2


def test_transfer_highres_writes_box_size(corpus, model, tmp_path):
    from fatkit.data import write_ppm

    frame = np.random.default_rng(0).uniform(size=(3, 96, 96))
    write_ppm(tmp_path / "frame.ppm", frame)
    result = run_cli("transfer", "--model", model / "m.fatw", "--source", corpus / "0000.ppm",
                     "--ref", corpus / "0001.ppm", "--out", tmp_path / "hi.ppm",
                     "--highres", tmp_path / "frame.ppm", "--box", "16,8,64,64")
    assert result.returncode == 0, result.stderr
    assert read_ppm(tmp_path / "hi.ppm").shape == (3, 64, 64)


# -- warp ---------------------------------------------------------------------------


def test_warp_identity_points(corpus, tmp_path):
    pts = tmp_path / "p.txt"
    write_points(pts, np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]]))
    result = run_cli("warp", "--image", corpus / "0000.ppm", "--src-pts", pts,
                     "--dst-pts", pts, "--out", tmp_path / "w.ppm")
    assert result.returncode == 0, result.stderr
    src = read_ppm(corpus / "0000.ppm")
    assert np.abs(read_ppm(tmp_path / "w.ppm") - src).max() <= 1.0 / 255.0 + 1e-9


def test_warp_translation_shifts_image(corpus, tmp_path):
    # moving all control points by one pixel (2/48 normalized) shifts content
    src_pts = np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]])
    shift = np.array([2.0 / 48.0, 0.0])
    write_points(tmp_path / "s.txt", src_pts)
    write_points(tmp_path / "d.txt", src_pts + shift)
    result = run_cli("warp", "--image", corpus / "0000.ppm", "--src-pts", tmp_path / "s.txt",
                     "--dst-pts", tmp_path / "d.txt", "--out", tmp_path / "w.ppm")
    assert result.returncode == 0, result.stderr
    src = read_ppm(corpus / "0000.ppm")
    out = read_ppm(tmp_path / "w.ppm")
    np.testing.assert_allclose(out[:, :, 1:], src[:, :, :-1], atol=1.5 / 255.0)


def test_warp_count_mismatch_exit_2(corpus, tmp_path):
    write_points(tmp_path / "s.txt", np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]]))
    write_points(tmp_path / "d.txt", np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5]]))
    result = run_cli("warp", "--image", corpus / "0000.ppm", "--src-pts", tmp_path / "s.txt",
                     "--dst-pts", tmp_path / "d.txt", "--out", tmp_path / "w.ppm")
    assert result.returncode == 2


def test_warp_degenerate_exit_3(corpus, tmp_path):
    line = np.stack([np.linspace(-0.5, 0.5, 4), np.linspace(-0.5, 0.5, 4)], axis=1)
    write_points(tmp_path / "s.txt", np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]]))
    write_points(tmp_path / "d.txt", line)
    result = run_cli("warp", "--image", corpus / "0000.ppm", "--src-pts", tmp_path / "s.txt",
                     "--dst-pts", tmp_path / "d.txt", "--out", tmp_path / "w.ppm")
    assert result.returncode == 3


# -- bench --------------------------------------------------------------------------


def test_bench_output_format_and_csv(tmp_path):
    result = run_cli("bench", "--size", 32, "--heads", 2, "--iters", 5,
                     "--csv", tmp_path / "b.csv")
    assert result.returncode == 0, result.stderr
    lines = result.stdout.strip().splitlines()
    assert lines[0].startswith("fat_ms=") and lines[1].startswith("sequential_ms=")
    csv = (tmp_path / "b.csv").read_text().strip().splitlines()
    assert csv[0] == "kind,mean_ms"
    assert csv[1].startswith("fat,") and csv[2].startswith("sequential,")


def test_thread_cap_env_does_not_change_results(tmp_path):
    a = run_cli("synth", "--out", tmp_path / "a", "--count", 2, "--size", 32, "--seed", 4,
                env={"FAT_THREADS": "1"})
    b = run_cli("synth", "--out", tmp_path / "b", "--count", 2, "--size", 32, "--seed", 4)
    assert a.returncode == 0 and b.returncode == 0
    assert (tmp_path / "a/0000.ppm").read_bytes() == (tmp_path / "b/0000.ppm").read_bytes()
