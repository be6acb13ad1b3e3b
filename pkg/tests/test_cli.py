"""End-to-end CLI: exit codes, determinism, artifact layout."""
import hashlib
import json
import os

import pytest
import torch

from atlasgs.cli import main
from atlasgs.plyio import read_gaussians

DATAGEN_ARGS = ["--shapes", "2", "--classes", "sphere,torus", "--points", "96",
                "--teacher", "24", "--image-size", "16", "--seed", "7"]
VAE_OVERRIDES = ["--set", "n=4", "--set", "d=16", "--set", "d0=4", "--set", "m=8",
                 "--set", "alpha=2", "--set", "views=2", "--set", "image_size=16",
                 "--set", "image_patch=8", "--set", "heads=2", "--set", "point_count=96",
                 "--set", "enc_point_blocks=1", "--set", "enc_self_blocks=1",
                 "--set", "center_blocks=1", "--set", "feature_blocks=1"]


def tree_digest(root) -> str:
    h = hashlib.sha256()
    for base, dirs, files in sorted(os.walk(root)):
        dirs.sort()
        for name in sorted(files):
            path = os.path.join(base, name)
            h.update(os.path.relpath(path, root).encode())
            h.update(open(path, "rb").read())
    return h.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["datagen", "--out", str(root)] + DATAGEN_ARGS) == 0
    return root


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("run")
    code = main(["train-vae", "--data", str(dataset), "--out", str(out),
                 "--steps1", "4", "--steps2", "2", "--lr", "1e-3", "--seed", "3"]
                + VAE_OVERRIDES)
    assert code == 0
    code = main(["train-ldm", "--data", str(dataset), "--vae", str(out / "vae.atlg"),
                 "--out", str(out), "--steps", "5", "--width", "16", "--blocks", "1",
                 "--seed", "3"])
    assert code == 0
    return out


class TestDatagen:
    def test_creates_expected_directories(self, dataset):
        dirs = sorted(p for p in os.listdir(dataset) if os.path.isdir(dataset / p))
        assert dirs == ["sphere_000", "sphere_001", "torus_000", "torus_001"]
        for d in dirs:
            assert (dataset / d / "points.ply").exists()
            assert (dataset / d / "cameras.json").exists()
            assert (dataset / d / "meta.json").exists()
            assert (dataset / d / "views" / "rgb_0.ppm").exists()

    def test_byte_identical_reruns(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["datagen", "--out", str(a)] + DATAGEN_ARGS) == 0
        assert main(["datagen", "--out", str(b)] + DATAGEN_ARGS) == 0
        assert tree_digest(a) == tree_digest(b)

    def test_zero_shapes_is_usage_error(self, tmp_path, capsys):
        code = main(["datagen", "--out", str(tmp_path / "x"), "--shapes", "0"])
        assert code == 1

    def test_unknown_class_is_data_error(self, tmp_path):
        code = main(["datagen", "--out", str(tmp_path / "x"), "--classes", "cube"])
        assert code == 2


class TestUsage:
    def test_no_command(self):
        assert main([]) == 1

    def test_unknown_flag(self):
        assert main(["datagen", "--nope"]) == 1

    def test_help_exits_zero(self):
        assert main(["--help"]) == 0

    def test_env_seed_override(self, tmp_path, monkeypatch):
        args = ["--shapes", "1", "--classes", "sphere", "--points", "64",
                "--teacher", "16", "--image-size", "16"]
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["datagen", "--out", str(a), "--seed", "9"] + args) == 0
        monkeypatch.setenv("ATLASG_SEED", "9")
        assert main(["datagen", "--out", str(b)] + args) == 0
        assert tree_digest(a) == tree_digest(b)


class TestTrainVae:
    def test_artifacts_written(self, trained):
        assert (trained / "vae.atlg").exists()
        assert (trained / "metrics.csv").exists()
        header = open(trained / "metrics.csv").readline().strip().split(",")
        assert header[:4] == ["epoch", "step", "stage", "lr"]
        assert "psnr_holdout" in header

    def test_stage2_resume_missing_checkpoint(self, dataset, tmp_path):
        code = main(["train-vae", "--data", str(dataset), "--out", str(tmp_path),
                     "--stage", "2", "--steps2", "1",
                     "--resume", str(tmp_path / "absent.atlg")] + VAE_OVERRIDES)
        assert code == 2

    def test_stage2_without_resume_rejected(self, dataset, tmp_path):
        code = main(["train-vae", "--data", str(dataset), "--out", str(tmp_path),
                     "--stage", "2", "--steps2", "1"] + VAE_OVERRIDES)
        assert code == 2

    def test_bad_config_field_rejected(self, dataset, tmp_path):
        code = main(["train-vae", "--data", str(dataset), "--out", str(tmp_path),
                     "--steps1", "1", "--steps2", "0", "--set", "bogus=1"])
        assert code == 2


class TestTrainLdm:
    def test_artifacts_written(self, trained):
        assert (trained / "ldm.atlg").exists()
        assert (trained / "latents.atlg").exists()
        assert (trained / "ldm_metrics.csv").exists()
        rows = open(trained / "ldm_metrics.csv").read().strip().splitlines()
        assert len(rows) - 1 == 5


class TestGenerate:
    def test_ply_and_views(self, trained, tmp_path, capsys):
        out = tmp_path / "gen"
        code = main(["generate", "--vae", str(trained / "vae.atlg"),
                     "--ldm", str(trained / "ldm.atlg"), "--out", str(out),
                     "--count", "2", "--alpha", "2", "--views", "1",
                     "--image-size", "16", "--seed", "11"])
        assert code == 0
        printed = capsys.readouterr().out
        assert "parameters loaded:" in printed
        fields = read_gaussians(out / "sample_0.ply")
        assert fields["mu"].shape == (8 * 4, 3)   # m * alpha^2
        assert (out / "sample_0_view_0.ppm").exists()
        assert (out / "sample_1.ply").exists()

    def test_seeded_bytes_identical(self, trained, tmp_path):
        outs = []
        for name in ("g1", "g2"):
            out = tmp_path / name
            code = main(["generate", "--vae", str(trained / "vae.atlg"),
                         "--ldm", str(trained / "ldm.atlg"), "--out", str(out),
                         "--count", "1", "--alpha", "2", "--views", "0",
                         "--seed", "13"])
            assert code == 0
            outs.append((out / "sample_0.ply").read_bytes())
        assert outs[0] == outs[1]

    def test_parameter_count_invariant_under_alpha(self, trained, tmp_path, capsys):
        counts = []
        for alpha in ("2", "3"):
            out = tmp_path / f"a{alpha}"
            code = main(["generate", "--vae", str(trained / "vae.atlg"),
                         "--ldm", str(trained / "ldm.atlg"), "--out", str(out),
                         "--count", "1", "--alpha", alpha, "--views", "0",
                         "--seed", "5"])
            assert code == 0
            line = [l for l in capsys.readouterr().out.splitlines()
                    if "parameters loaded:" in l][0]
            counts.append(int(line.split(":")[1]))
        assert counts[0] == counts[1]

    def test_missing_checkpoint(self, trained, tmp_path):
        code = main(["generate", "--vae", str(tmp_path / "none.atlg"),
                     "--ldm", str(trained / "ldm.atlg"), "--out", str(tmp_path)])
        assert code == 2

    def test_paper_scale_patch_count_alpha7(self, tmp_path):
        # 2048 patches at alpha=7 decode exactly 100,352 splats, with the
        # loaded parameter count untouched by the choice of alpha
        from atlasgs.vae import VAEConfig, build_vae, save_vae_checkpoint
        from atlasgs.diffusion import EDMConfig, build_denoiser, save_ldm_checkpoint
        cfg = VAEConfig(n=16, d=16, d0=4, m=2048, alpha=7, views=2, image_size=32,
                        image_patch=8, heads=2, enc_point_blocks=1,
                        enc_image_blocks=1, enc_self_blocks=1, image_embed_blocks=1,
                        up_cross_blocks=1, up_self_blocks=1, up_post_blocks=1,
                        center_blocks=1, feature_blocks=1)
        save_vae_checkpoint(tmp_path / "vae.atlg", build_vae(cfg, 0), {"step": 0})
        ldm = build_denoiser(EDMConfig(n=16, d0=4, width=16, blocks=1, heads=2), 0)
        save_ldm_checkpoint(tmp_path / "ldm.atlg", ldm, {"step": 0})
        code = main(["generate", "--vae", str(tmp_path / "vae.atlg"),
                     "--ldm", str(tmp_path / "ldm.atlg"),
                     "--out", str(tmp_path / "g"), "--count", "1", "--alpha", "7",
                     "--views", "0", "--seed", "3"])
        assert code == 0
        header = (tmp_path / "g" / "sample_0.ply").read_bytes().split(b"end_header")[0]
        assert b"element vertex 100352" in header


class TestRenderAndExport:
    def test_render_from_ply(self, trained, dataset, tmp_path):
        gen_dir = tmp_path / "g"
        assert main(["generate", "--vae", str(trained / "vae.atlg"),
                     "--ldm", str(trained / "ldm.atlg"), "--out", str(gen_dir),
                     "--count", "1", "--alpha", "2", "--views", "0",
                     "--seed", "2"]) == 0
        out = tmp_path / "renders"
        code = main(["render", "--ply", str(gen_dir / "sample_0.ply"),
                     "--cameras", str(dataset / "sphere_000" / "cameras.json"),
                     "--out", str(out)])
        assert code == 0
        assert (out / "rgb_0.ppm").exists()
        assert (out / "alpha_0.pgm").exists()
        assert (out / "depth_0.pgm").exists()

    def test_export_ply_from_latents(self, trained, tmp_path):
        out = tmp_path / "exports"
        code = main(["export-ply", "--vae", str(trained / "vae.atlg"),
                     "--latents", str(trained / "latents.atlg"),
                     "--id", "sphere_000", "--alpha", "2", "--out", str(out)])
        assert code == 0
        assert (out / "sphere_000.ply").exists()

    def test_export_unknown_id(self, trained, tmp_path):
        code = main(["export-ply", "--vae", str(trained / "vae.atlg"),
                     "--latents", str(trained / "latents.atlg"),
                     "--id", "nope", "--out", str(tmp_path)])
        assert code == 2


class TestEval:
    def test_eval_writes_csv(self, trained, dataset, tmp_path):
        out = tmp_path / "eval.csv"
        code = main(["eval", "--data", str(dataset), "--vae",
                     str(trained / "vae.atlg"), "--out", str(out)])
        assert code == 0
        rows = open(out).read().strip().splitlines()
        assert rows[0] == "shape_id,psnr_train,psnr_holdout,chamfer_centers"
        assert len(rows) - 1 == 4

    def test_eval_does_not_mutate_dataset(self, trained, dataset, tmp_path):
        before = tree_digest(dataset)
        main(["eval", "--data", str(dataset), "--vae", str(trained / "vae.atlg"),
              "--out", str(tmp_path / "e.csv")])
        assert tree_digest(dataset) == before


class TestCheck:
    def test_check_passes_and_writes_report(self, tmp_path):
        report = tmp_path / "report.json"
        code = main(["check", "--report", str(report), "--seed", "0"])
        assert code == 0
        data = json.loads(report.read_text())
        assert data["pass"] is True
        for entry in data["checks"]:
            assert set(entry) >= {"name", "max_error", "threshold", "pass"}

    def test_injected_error_fails_with_exit_3(self, tmp_path):
        report = tmp_path / "report.json"
        code = main(["check", "--report", str(report), "--inject-error"])
        assert code == 3
        data = json.loads(report.read_text())
        assert data["pass"] is False
