import hashlib
import json
import warnings

import numpy as np
import pytest

from semsplat import io
from semsplat.attention import AttentionCache
from semsplat.cli import main as cli_main
from semsplat.core import ActivationConfig, ClassPalette, GaussianCloud
from semsplat.io import ConfigError, SplatFormatError
from semsplat.synthetic import random_cloud, random_scene


def friendly_cloud(rng, n=50, d_f=4):
    """Random cloud; write/read projects it onto the file-representable set."""
    return random_cloud(rng, n, feature_dim=d_f, scale_range=(0.002, 0.019),
                        opacity_range=(0.05, 0.98))


def assert_clouds_bitwise(a: GaussianCloud, b: GaussianCloud):
    for field in ("positions", "rotations", "scales", "opacities", "sh_coeffs", "features"):
        assert np.array_equal(getattr(a, field), getattr(b, field)), field


class TestSplatRoundTrip:
    def test_projected_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        for i in range(10):
            cloud = friendly_cloud(rng)
            path = tmp_path / f"c{i}.ply"
            io.write_splat(path, cloud)
            projected, _ = io.read_splat(path)
            io.write_splat(path, projected)
            again, _ = io.read_splat(path)
            assert_clouds_bitwise(projected, again)

    def test_file_bytes_idempotent(self, tmp_path):
        rng = np.random.default_rng(1)
        cloud = friendly_cloud(rng)
        p1, p2 = tmp_path / "a.ply", tmp_path / "b.ply"
        io.write_splat(p1, cloud)
        projected, _ = io.read_splat(p1)
        io.write_splat(p2, projected)
        roundtripped, _ = io.read_splat(p2)
        io.write_splat(p1, roundtripped)
        assert p1.read_bytes() == p2.read_bytes()
        assert (tmp_path / "a.feat").read_bytes() == (tmp_path / "b.feat").read_bytes()

    def test_missing_sidecar_warns_with_empty_features(self, tmp_path):
        rng = np.random.default_rng(2)
        cloud = friendly_cloud(rng, d_f=4)
        path = tmp_path / "c.ply"
        io.write_splat(path, cloud)
        path.with_suffix(".feat").unlink()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            loaded, _ = io.read_splat(path)
        assert loaded.feature_dim == 0
        assert any("sidecar" in str(w.message) for w in caught)

    def test_sidecar_count_mismatch(self, tmp_path):
        rng = np.random.default_rng(3)
        cloud = friendly_cloud(rng, n=20, d_f=2)
        path = tmp_path / "c.ply"
        io.write_splat(path, cloud)
        io.write_feature_sidecar(path.with_suffix(".feat"), np.zeros((19, 2), dtype=np.float32))
        with pytest.raises(SplatFormatError, match="sidecar mismatch"):
            io.read_splat(path)

    def test_classifier_block_roundtrip(self, tmp_path):
        rng = np.random.default_rng(4)
        cloud = friendly_cloud(rng, d_f=3)
        weight = rng.standard_normal((28, 3)).astype(np.float32).astype(np.float64)
        bias = rng.standard_normal(28).astype(np.float32).astype(np.float64)
        path = tmp_path / "c.ply"
        io.write_splat(path, cloud, classifier=(weight, bias))
        _, classifier = io.read_splat(path)
        assert classifier is not None
        np.testing.assert_array_equal(classifier[0], weight)
        np.testing.assert_array_equal(classifier[1], bias)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_bytes(b"not a ply file\n")
        with pytest.raises(SplatFormatError, match="malformed header"):
            io.read_splat(path)

    def test_truncated_payload(self, tmp_path):
        rng = np.random.default_rng(5)
        cloud = friendly_cloud(rng, n=10, d_f=0)
        path = tmp_path / "c.ply"
        io.write_splat(path, cloud)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(SplatFormatError, match="truncated"):
            io.read_splat(path)

    def test_linear_fields_exact_for_float32_values(self, tmp_path):
        rng = np.random.default_rng(6)
        cloud = friendly_cloud(rng)
        as32 = GaussianCloud(
            positions=cloud.positions.astype(np.float32),
            rotations=cloud.rotations.astype(np.float32),
            scales=cloud.scales, opacities=cloud.opacities,
            sh_coeffs=cloud.sh_coeffs.astype(np.float32),
            features=cloud.features.astype(np.float32),
        )
        path = tmp_path / "c.ply"
        io.write_splat(path, as32)
        loaded, _ = io.read_splat(path)
        assert np.array_equal(loaded.positions, as32.positions)
        assert np.array_equal(loaded.rotations, as32.rotations)
        assert np.array_equal(loaded.sh_coeffs, as32.sh_coeffs)
        assert np.array_equal(loaded.features, as32.features)


class TestImagesAndLabels:
    def test_black_image(self, tmp_path):
        path = tmp_path / "black.png"
        io.write_image(path, np.zeros((8, 8, 3)))
        assert np.array_equal(io.read_image(path), np.zeros((8, 8, 3)))

    def test_gray_roundtrip_quantized(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 1, (8, 8))
        path = tmp_path / "g.png"
        io.write_image(path, img)
        back = io.read_image(path)
        assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-12

    def test_constant_background_label_map(self, tmp_path):
        labels = np.zeros((8, 8), dtype=np.int64)
        path = tmp_path / "labels.png"
        io.write_label_map(path, labels)
        img = io.read_image(path)
        assert np.array_equal(img, np.zeros((8, 8, 3)))  # Background is black

    def test_label_ids_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 28, (16, 16))
        path = tmp_path / "labels.png"
        io.write_label_map(path, labels)
        back = io.read_label_map(tmp_path / "labels_ids.png")
        assert np.array_equal(back, labels)

    def test_out_of_range_labels_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            io.write_label_map(tmp_path / "bad.png", np.full((4, 4), 28))


class TestSceneConfig:
    def good_config(self):
        return {
            "cameras": [{
                "K": [[50.0, 0.0, 4.0], [0.0, 50.0, 4.0], [0.0, 0.0, 1.0]],
                "R": np.eye(3).tolist(),
                "t": [0.0, 0.0, 2.0],
                "width": 8, "height": 8,
            }],
            "loss": {"lambda_mask": 1.0},
            "render": {"tile_size": 8},
            "activation": {"scale_min": 5e-4},
        }

    def test_parses_good_config(self):
        cfg = io.parse_scene_config(json.dumps(self.good_config()))
        assert len(cfg.cameras) == 1
        assert cfg.render.tile_size == 8
        assert cfg.loss.lambda_mask == 1.0

    def test_unknown_top_level_key(self):
        doc = self.good_config()
        doc["frobnicate"] = 1
        with pytest.raises(ConfigError, match="unknown key 'frobnicate' at top level"):
            io.parse_scene_config(json.dumps(doc))

    def test_unknown_nested_key_with_location(self):
        doc = self.good_config()
        doc["cameras"][0]["fov"] = 60
        with pytest.raises(ConfigError, match=r"cameras\[0\]"):
            io.parse_scene_config(json.dumps(doc))

    def test_unknown_render_key(self):
        doc = self.good_config()
        doc["render"]["antialias"] = True
        with pytest.raises(ConfigError, match="at render"):
            io.parse_scene_config(json.dumps(doc))

    def test_missing_required_camera_field(self):
        doc = self.good_config()
        del doc["cameras"][0]["K"]
        with pytest.raises(ConfigError, match="missing key 'K'"):
            io.parse_scene_config(json.dumps(doc))

    def test_invalid_json(self):
        with pytest.raises(ConfigError, match="invalid JSON"):
            io.parse_scene_config("{nope")

    def test_invalid_camera_matrix(self):
        doc = self.good_config()
        doc["cameras"][0]["R"] = (2 * np.eye(3)).tolist()
        with pytest.raises(ConfigError, match=r"cameras\[0\]"):
            io.parse_scene_config(json.dumps(doc))


class TestCheckpoints:
    def test_transformer_checkpoint_roundtrip(self, tmp_path):
        from semsplat.attention import TransformerConfig, init_transformer

        rng = np.random.default_rng(0)
        cfg = TransformerConfig(dim=32, n_heads=2, n_kv_heads=1, n_blocks=2, ffn_dim=48)
        pw, pb, blocks, bias = init_transformer(cfg, 3, 4, 4, rng)
        path = tmp_path / "ckpt.npz"
        io.save_checkpoint(path, blocks, bias, patch_weight=pw, patch_bias=pb)
        blocks2, bias2, extras = io.load_checkpoint(path)
        assert len(blocks2) == 2
        np.testing.assert_array_equal(blocks2[0].wq, blocks[0].wq)
        np.testing.assert_array_equal(bias2.table, bias.table)
        np.testing.assert_array_equal(extras["patch_weight"], pw)

    def test_attention_cache_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        cache = AttentionCache(grid_h=2, grid_w=2)
        logits = rng.standard_normal((2, 4, 4))
        e = np.exp(logits)
        cache.entries.append(e / e.sum(axis=2, keepdims=True))
        path = tmp_path / "cache.npz"
        io.save_attention_cache(path, cache)
        loaded = io.load_attention_cache(path)
        assert loaded.grid_h == 2
        np.testing.assert_array_equal(loaded.entries[0], cache.entries[0])

    def test_loss_csv(self, tmp_path):
        path = tmp_path / "loss.csv"
        io.write_loss_csv(path, [1.0, 0.5, 0.25])
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,loss"
        assert lines[2].startswith("1,0.5")


class TestCLI:
    def test_render_builtin_deterministic_across_threads_and_tiles(self, tmp_path, capsys):
        hashes = []
        for threads, tile in (("1", 8), ("4", 16), ("max", 32)):
            out = tmp_path / f"r{tile}"
            rc = cli_main(["--threads", threads, "render", "--out", str(out),
                           "--tile-size", str(tile)])
            assert rc == 0
            text = capsys.readouterr().out
            hashes.append([l for l in text.splitlines() if l.startswith("output hash")][0])
        assert len(set(hashes)) == 1

    def test_gradcheck_exit_zero(self, tmp_path, capsys):
        report = tmp_path / "report.json"
        rc = cli_main(["gradcheck", "--seed", "7", "--gaussians", "6", "--out", str(report)])
        assert rc == 0
        payload = json.loads(report.read_text())
        assert payload["passed"] is True
        worst = max(e["max_rel_err"] for scene in payload["scenes"].values()
                    for e in scene.values())
        assert worst <= 1e-3

    def test_metrics_identical_inputs(self, tmp_path, capsys):
        img = np.random.default_rng(0).uniform(0, 1, (16, 16, 3))
        p = tmp_path / "img.png"
        io.write_image(p, img)
        labels = np.random.default_rng(1).integers(0, 28, (16, 16))
        io.write_label_map(tmp_path / "lab.png", labels)
        rc = cli_main(["metrics", "--pred", str(p), "--gt", str(p),
                       "--pred-labels", str(tmp_path / "lab_ids.png"),
                       "--gt-labels", str(tmp_path / "lab_ids.png"),
                       "--out", str(tmp_path / "m.json")])
        assert rc == 0
        report = json.loads((tmp_path / "m.json").read_text())
        assert report["psnr"] == 100.0
        assert report["miou"] == 1.0

    def test_lift_matches_api(self, tmp_path):
        from semsplat.attention import cross_attn_reuse

        rng = np.random.default_rng(2)
        cache = AttentionCache(grid_h=2, grid_w=2)
        logits = rng.standard_normal((2, 4, 4))
        e = np.exp(logits)
        cache.entries.append(e / e.sum(axis=2, keepdims=True))
        io.save_attention_cache(tmp_path / "cache.npz", cache)
        feats = rng.standard_normal((4, 6))
        np.save(tmp_path / "f.npy", feats)
        rc = cli_main(["lift", "--cache", str(tmp_path / "cache.npz"),
                       "--features", str(tmp_path / "f.npy"),
                       "--out", str(tmp_path / "lifted.npy")])
        assert rc == 0
        np.testing.assert_array_equal(np.load(tmp_path / "lifted.npy"),
                                      cross_attn_reuse(cache, feats))

    def test_lift_token_mismatch_exit_one(self, tmp_path, capsys):
        rng = np.random.default_rng(3)
        cache = AttentionCache(grid_h=2, grid_w=2)
        cache.entries.append(np.full((1, 4, 4), 0.25))
        io.save_attention_cache(tmp_path / "cache.npz", cache)
        np.save(tmp_path / "f.npy", rng.standard_normal((5, 3)))
        rc = cli_main(["lift", "--cache", str(tmp_path / "cache.npz"),
                       "--features", str(tmp_path / "f.npy"),
                       "--out", str(tmp_path / "out.npy")])
        assert rc == 1

    def test_unproject_command(self, tmp_path):
        cfg = {
            "cameras": [{
                "K": [[40.0, 0.0, 8.0], [0.0, 40.0, 8.0], [0.0, 0.0, 1.0]],
                "R": np.eye(3).tolist(), "t": [0.0, 0.0, 2.0],
                "width": 16, "height": 16,
            }],
        }
        cfg_path = tmp_path / "scene.json"
        cfg_path.write_text(json.dumps(cfg))
        rng = np.random.default_rng(4)
        depth = rng.uniform(1.0, 2.0, (16, 16))
        np.save(tmp_path / "depth.npy", depth)
        out = tmp_path / "points.ply"
        rc = cli_main(["unproject", "--config", str(cfg_path),
                       "--depth", str(tmp_path / "depth.npy"), "--out", str(out)])
        assert rc == 0
        from semsplat.camera import Camera, unproject

        cam = Camera(K=np.array(cfg["cameras"][0]["K"]), R=np.eye(3),
                     t=np.array([0.0, 0.0, 2.0]), width=16, height=16)
        expected, _ = unproject(cam, depth)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cloud, _ = io.read_splat(out)
        np.testing.assert_allclose(cloud.positions, expected, atol=1e-6)

    def test_bad_config_exit_one(self, tmp_path, capsys):
        cfg_path = tmp_path / "scene.json"
        cfg_path.write_text(json.dumps({"bogus": 1}))
        rc = cli_main(["render", "--config", str(cfg_path), "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "unknown key" in capsys.readouterr().err

    def test_usage_error_exit_two(self):
        with pytest.raises(SystemExit) as exc:
            cli_main(["fit"])  # missing required arguments
        assert exc.value.code == 2

    def test_fit_smoke_writes_outputs(self, tmp_path):
        from semsplat.rasterizer import RenderSettings, render

        rng = np.random.default_rng(5)
        cloud, cam = random_scene(21, count=12, width=16, height=16, feature_dim=0)
        cloud = GaussianCloud(
            positions=cloud.positions, rotations=cloud.rotations,
            scales=np.clip(cloud.scales, 0.002, 0.019), opacities=cloud.opacities,
            sh_coeffs=cloud.sh_coeffs, features=cloud.features)
        target = render(cloud, cam, RenderSettings())
        io.write_image(tmp_path / "target.png", target.color)
        io.write_image(tmp_path / "mask.png", (target.alpha >= 0.5).astype(float))
        io.write_splat(tmp_path / "init.ply", cloud)
        cfg = {
            "cameras": [{
                "K": cam.K.tolist(), "R": cam.R.tolist(), "t": cam.t.tolist(),
                "width": 16, "height": 16,
                "image": "target.png", "mask": "mask.png",
            }],
            "splat": "init.ply",
            "fit": {"steps": 3, "lr": 1e-3},
        }
        (tmp_path / "scene.json").write_text(json.dumps(cfg))
        out = tmp_path / "fit_out"
        rc = cli_main(["fit", "--config", str(tmp_path / "scene.json"), "--out", str(out)])
        assert rc == 0
        assert (out / "fitted.ply").exists()
        lines = (out / "loss.csv").read_text().strip().splitlines()
        assert len(lines) == 4  # header + 3 steps
