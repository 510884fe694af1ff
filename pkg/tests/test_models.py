"""Network builders, the synthesize wrapper, and checkpoint serialization."""

import pytest
import torch

from layergan.losses import r1_penalty
from layergan.models import (
    CHECKPOINT_FORMAT,
    NetConfig,
    build_discriminator,
    build_generators,
    build_segmenter,
    load_checkpoint,
    parameter_checksum,
    parameter_count,
    save_checkpoint,
    synthesize,
)

CFG16 = NetConfig(img_size=16, base_channels=16, z_dim=32, w_dim=32)


def state_dicts_equal(a, b) -> bool:
    if a.keys() != b.keys():
        return False
    return all(torch.equal(a[k], b[k]) for k in a)


class TestNetConfig:
    def test_defaults(self):
        cfg = NetConfig()
        assert (cfg.img_size, cfg.base_channels, cfg.z_dim, cfg.w_dim,
                cfg.mapping_layers) == (32, 64, 64, 64, 2)

    def test_img_size_validation(self):
        for ok in (16, 32, 64):
            NetConfig(img_size=ok)
        for bad in (8, 24, 128):
            with pytest.raises(ValueError):
                NetConfig(img_size=bad)

    def test_dim_validation(self):
        with pytest.raises(ValueError):
            NetConfig(z_dim=0)
        with pytest.raises(ValueError):
            NetConfig(base_channels=0)


class TestGenerators:
    def test_output_shapes_32(self):
        gp = build_generators(NetConfig(img_size=32, base_channels=16, z_dim=64), seed=0)
        z = torch.randn(5, 64, generator=torch.Generator().manual_seed(0))
        assert gp.g_fm(z).shape == (5, 4, 32, 32)
        assert gp.g_b(z).shape == (5, 3, 32, 32)

    def test_output_shapes_16_and_64(self):
        for size in (16, 64):
            cfg = NetConfig(img_size=size, base_channels=8, z_dim=16, w_dim=16)
            gp = build_generators(cfg, seed=1)
            z = torch.randn(2, 16, generator=torch.Generator().manual_seed(1))
            assert gp.g_fm(z).shape == (2, 4, size, size)

    def test_same_seed_identical_parameters(self):
        a = build_generators(CFG16, seed=7)
        b = build_generators(CFG16, seed=7)
        assert state_dicts_equal(a.g_fm.state_dict(), b.g_fm.state_dict())
        assert state_dicts_equal(a.g_b.state_dict(), b.g_b.state_dict())
        c = build_generators(CFG16, seed=8)
        assert not state_dicts_equal(a.g_fm.state_dict(), c.g_fm.state_dict())

    def test_output_ranges(self):
        gp = build_generators(CFG16, seed=2)
        z = torch.randn(16, 32, generator=torch.Generator().manual_seed(3))
        with torch.no_grad():
            t = synthesize(gp, z)
        assert float(t.f.min()) >= -1.0 and float(t.f.max()) <= 1.0
        assert float(t.b.min()) >= -1.0 and float(t.b.max()) <= 1.0
        assert float(t.m.min()) > 0.0 and float(t.m.max()) < 1.0  # logistic output

    def test_synthesize_shapes_and_determinism(self):
        gp = build_generators(CFG16, seed=4)
        z = torch.randn(6, 32, generator=torch.Generator().manual_seed(5))
        t1 = synthesize(gp, z)
        t2 = synthesize(gp, z)
        assert t1.f.shape == (6, 3, 16, 16)
        assert t1.m.shape == (6, 1, 16, 16)
        assert torch.equal(t1.f, t2.f) and torch.equal(t1.b, t2.b) and torch.equal(t1.m, t2.m)

    def test_distinct_latents_distinct_triplets(self):
        gp = build_generators(CFG16, seed=6)
        g = torch.Generator().manual_seed(7)
        z1 = torch.randn(2, 32, generator=g)
        z2 = torch.randn(2, 32, generator=g)
        a, b = synthesize(gp, z1), synthesize(gp, z2)
        assert not torch.equal(a.f, b.f)

    def test_shared_latent_moves_all_layers(self):
        gp = build_generators(CFG16, seed=8)
        g = torch.Generator().manual_seed(9)
        z = torch.randn(4, 32, generator=g)
        dz = torch.randn(4, 32, generator=g)
        a = synthesize(gp, z)
        b = synthesize(gp, z + dz)
        assert not torch.equal(a.f, b.f)
        assert not torch.equal(a.b, b.b)
        assert not torch.equal(a.m, b.m)

    def test_latent_dim_mismatch_raises(self):
        gp = build_generators(CFG16, seed=10)
        with pytest.raises((ValueError, RuntimeError)):
            gp.g_fm(torch.randn(2, 31))


class TestDiscriminator:
    def test_shape_contract(self):
        d = build_discriminator(NetConfig(img_size=32, base_channels=16), seed=0)
        x = torch.randn(7, 3, 32, 32, generator=torch.Generator().manual_seed(0))
        assert d(x).shape == (7,)

    def test_differentiable_finite_r1(self):
        d = build_discriminator(CFG16, seed=1)
        x = torch.randn(4, 3, 16, 16, generator=torch.Generator().manual_seed(1))
        val = r1_penalty(x, d)
        assert torch.isfinite(val)
        assert float(val.detach()) > 0.0

    def test_seed_determinism(self):
        a = build_discriminator(CFG16, seed=3)
        b = build_discriminator(CFG16, seed=3)
        assert parameter_checksum(a) == parameter_checksum(b)
        assert state_dicts_equal(a.state_dict(), b.state_dict())


class TestSegmenter:
    def test_shape_and_range(self):
        net = build_segmenter(base=8, seed=0)
        x = torch.randn(3, 3, 16, 16, generator=torch.Generator().manual_seed(0))
        logits = net(x)
        assert logits.shape == (3, 1, 16, 16)
        probs = net.predict(x)
        assert float(probs.min()) > 0.0 and float(probs.max()) < 1.0

    def test_overfits_eight_pairs(self, tiny_manifest):
        """Sanity: a UNet can memorize 8 (image, mask) pairs to high IoU."""
        from layergan.data import load_split
        from layergan.evaluation import seg_metrics

        images, masks = load_split(tiny_manifest, "train")
        images, masks = images[:8], masks[:8]
        net = build_segmenter(base=16, seed=1)
        opt = torch.optim.Adam(net.parameters(), lr=2e-3, betas=(0.9, 0.99))
        bce = torch.nn.BCEWithLogitsLoss()
        for _ in range(500):
            opt.zero_grad()
            loss = bce(net(images), masks)
            loss.backward()
            opt.step()
        net.eval()
        with torch.no_grad():
            metrics = seg_metrics(net.predict(images), masks)
        assert metrics.iou >= 0.95


class TestParameterUtils:
    def test_count_positive_and_stable(self):
        gp = build_generators(CFG16, seed=0)
        n = parameter_count(gp.g_fm)
        assert n > 0
        assert parameter_count(build_generators(CFG16, seed=5).g_fm) == n

    def test_checksum_sensitive_to_values(self):
        d = build_discriminator(CFG16, seed=0)
        before = parameter_checksum(d)
        with torch.no_grad():
            next(d.parameters()).add_(1.0)
        assert parameter_checksum(d) != before


class TestCheckpointIO:
    def test_round_trip(self, tmp_path):
        gp = build_generators(CFG16, seed=0)
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, {"gens_fm": gp.g_fm.state_dict(), "images_shown": 42})
        payload = load_checkpoint(path)
        assert payload["images_shown"] == 42
        assert payload["format_version"] == CHECKPOINT_FORMAT
        assert state_dicts_equal(payload["gens_fm"], gp.g_fm.state_dict())

    def test_same_payload_same_bytes(self, tmp_path):
        # same basename: the zip container embeds the archive name
        gp = build_generators(CFG16, seed=1)
        (tmp_path / "x").mkdir()
        (tmp_path / "y").mkdir()
        a, b = tmp_path / "x" / "ckpt.pt", tmp_path / "y" / "ckpt.pt"
        save_checkpoint(a, {"sd": gp.g_fm.state_dict(), "step": 3})
        save_checkpoint(b, {"sd": gp.g_fm.state_dict(), "step": 3})
        assert a.read_bytes() == b.read_bytes()

    def test_version_mismatch_rejected(self, tmp_path):
        path = tmp_path / "old.pt"
        torch.save({"format_version": "layergan-ckpt-0", "x": 1}, path)
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_missing_version_rejected(self, tmp_path):
        path = tmp_path / "raw.pt"
        torch.save({"x": 1}, path)
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_no_stray_temp_file(self, tmp_path):
        path = tmp_path / "c.pt"
        save_checkpoint(path, {"x": torch.ones(2)})
        assert [p.name for p in tmp_path.iterdir()] == ["c.pt"]
