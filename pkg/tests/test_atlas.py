"""Patch decoding: weight function oracles, UV sampling, count/param contracts."""
import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from atlasgs.atlas import (AtlasDecoder, Gaussians, Patch, PatchSet,
                           PositionalEncoder, bilinear_corner_weights,
                           count_parameters, decode_atlas, export_ply,
                           import_ply, sample_uv_grid, sample_uv_random)
from atlasgs.gradcheck import check_gradient, check_module_gradient
from atlasgs.nn import MLP
from atlasgs.util import DataError, precision

from conftest import gen


def zero_mlp_(mlp: MLP) -> MLP:
    with torch.no_grad():
        for layer in mlp.layers:
            layer.weight.zero_()
            layer.bias.zero_()
    return mlp


class TestPositionalEncoder:
    def test_zero_mlp_gives_zero_vector(self):
        enc = PositionalEncoder(2, 8, gen(0))
        zero_mlp_(enc.mlp)
        out = enc(torch.rand(5, 2, generator=gen(1)))
        assert torch.equal(out, torch.zeros(5, 8))

    def test_raw_encoding_at_origin(self):
        enc = PositionalEncoder(2, 8, gen(2), freq_count=4)
        raw = enc.raw(torch.zeros(2))
        expected = torch.tensor([0.0, 1.0] * 8)  # (sin 0, cos 0) per (coord, freq)
        assert torch.equal(raw, expected)

    def test_raw_uses_octave_frequencies(self):
        enc = PositionalEncoder(1, 4, gen(3), freq_count=3)
        p = torch.tensor([0.25])
        raw = enc.raw(p)
        for k in range(3):
            angle = math.pi * (2.0 ** k) * 0.25
            assert float(raw[2 * k]) == pytest.approx(math.sin(angle), abs=1e-6)
            assert float(raw[2 * k + 1]) == pytest.approx(math.cos(angle), abs=1e-6)

    def test_gradients(self):
        with precision("float64"):
            enc = PositionalEncoder(2, 6, gen(4))
            p = torch.rand(2, generator=gen(5), dtype=torch.float64,
                           requires_grad=True)
            err = check_gradient(lambda: enc(p).square().sum(), [p])
            assert err <= 1e-4
            err = check_module_gradient(enc, lambda: enc(p).square().sum())
            assert err <= 1e-4


class TestCornerWeights:
    def test_uniform_when_everything_zero(self):
        dec = AtlasDecoder(8, gen(0))
        zero_mlp_(dec.geom_encoder.mlp)
        w = dec.corner_weights(torch.rand(2, generator=gen(1)), torch.zeros(4, 8))
        assert torch.allclose(w, torch.full((4,), 0.25), atol=1e-7)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10 ** 6))
    def test_sums_to_one_and_positive(self, seed):
        with precision("float64"):
            dec = AtlasDecoder(8, gen(seed))
            q = torch.rand(2, generator=gen(seed + 1), dtype=torch.float64)
            feats = torch.randn(4, 8, generator=gen(seed + 2), dtype=torch.float64)
            w = dec.corner_weights(q, feats).detach()
            assert bool((w > 0).all())
            assert float(w.sum()) == pytest.approx(1.0, abs=1e-12)

    def test_matches_exp_normalize_formula(self):
        with precision("float64"):
            dec = AtlasDecoder(8, gen(7))
            q = torch.rand(2, generator=gen(8), dtype=torch.float64)
            feats = torch.randn(4, 8, generator=gen(9), dtype=torch.float64)
            w = dec.corner_weights(q, feats)
            enc_q = dec.geom_encoder(q).detach()
            enc_u = dec.geom_encoder(dec._corners(torch.float64)).detach()
            raw = torch.tensor([
                math.exp(float(enc_q @ (feats[k] + enc_u[k])) / math.sqrt(8))
                for k in range(4)
            ], dtype=torch.float64)
            assert torch.allclose(w, raw / raw.sum(), atol=1e-12)

    def test_softmax_shift_invariance(self):
        with precision("float64"):
            dec = AtlasDecoder(8, gen(10))
            q = torch.rand(2, generator=gen(11), dtype=torch.float64)
            feats = torch.randn(4, 8, generator=gen(12), dtype=torch.float64)
            logits = dec.corner_logits(q, feats, dec.geom_encoder)
            for t in (-3.0, 0.7, 12.0):
                shifted = torch.softmax(logits + t, dim=-1)
                assert torch.allclose(torch.softmax(logits, dim=-1), shifted,
                                      atol=1e-12)

    def test_bilinear_mode(self):
        dec = AtlasDecoder(8, gen(13), weight_mode="bilinear")
        q = torch.tensor([0.25, 0.75])
        w = dec.corner_weights(q, torch.randn(4, 8, generator=gen(14)))
        expected = torch.tensor([0.75 * 0.25, 0.25 * 0.25, 0.25 * 0.75, 0.75 * 0.75])
        assert torch.allclose(w, expected, atol=1e-7)
        assert float(w.sum()) == pytest.approx(1.0, abs=1e-6)
        corners = torch.tensor([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        assert torch.allclose(bilinear_corner_weights(corners), torch.eye(4), atol=1e-7)

    def test_nonfinite_features_rejected(self):
        dec = AtlasDecoder(8, gen(15))
        bad = torch.full((4, 8), float("inf"))
        from atlasgs.util import NonFiniteError
        with pytest.raises(NonFiniteError):
            dec.corner_weights(torch.rand(2), bad)

    def test_gradients(self):
        with precision("float64"):
            dec = AtlasDecoder(8, gen(16))
            q = torch.rand(2, generator=gen(17), dtype=torch.float64,
                           requires_grad=True)
            feats = torch.randn(4, 8, generator=gen(18), dtype=torch.float64,
                                requires_grad=True)

            def scalar():
                return (dec.corner_weights(q, feats)
                        * torch.arange(1.0, 5.0, dtype=torch.float64)).sum()

            assert check_gradient(scalar, [q, feats]) <= 1e-4


class TestDecodePosition:
    def test_zero_head_returns_center(self):
        dec = AtlasDecoder(8, gen(0))
        zero_mlp_(dec.position_head)
        center = torch.tensor([0.3, -0.2, 0.9])
        mu = dec.decode_position(torch.rand(2, generator=gen(1)), center,
                                 torch.randn(4, 8, generator=gen(2)))
        assert torch.equal(mu, center)

    def test_center_additivity(self):
        with precision("float64"):
            dec = AtlasDecoder(8, gen(3))
            q = torch.rand(2, generator=gen(4), dtype=torch.float64)
            feats = torch.randn(4, 8, generator=gen(5), dtype=torch.float64)
            x = torch.tensor([0.1, 0.2, 0.3], dtype=torch.float64)
            shift = torch.tensor([0.4, -0.6, 0.25], dtype=torch.float64)
            a = dec.decode_position(q, x, feats)
            b = dec.decode_position(q, x + shift, feats)
            assert torch.allclose(b - a, shift, atol=1e-12)

    def test_matches_composed_oracle(self):
        with precision("float64"):
            dec = AtlasDecoder(8, gen(6))
            q = torch.rand(2, generator=gen(7), dtype=torch.float64)
            feats = torch.randn(4, 8, generator=gen(8), dtype=torch.float64)
            center = torch.randn(3, generator=gen(9), dtype=torch.float64)
            w = dec.corner_weights(q, feats).detach()
            blended = sum(float(w[k]) * feats[k] for k in range(4))
            expected = dec.position_head(blended) + center
            assert torch.allclose(dec.decode_position(q, center, feats), expected,
                                  atol=1e-12)

    def test_gradients(self):
        with precision("float64"):
            dec = AtlasDecoder(8, gen(10))
            q = torch.rand(2, generator=gen(11), dtype=torch.float64,
                           requires_grad=True)
            center = torch.randn(3, generator=gen(12), dtype=torch.float64,
                                 requires_grad=True)
            feats = torch.randn(4, 8, generator=gen(13), dtype=torch.float64,
                                requires_grad=True)
            err = check_gradient(
                lambda: dec.decode_position(q, center, feats).square().sum(),
                [q, center, feats])
            assert err <= 1e-4


class TestDecodeAttributes:
    def test_zero_head_identity_activations(self):
        dec = AtlasDecoder(8, gen(0))
        zero_mlp_(dec.attribute_head)
        scale, quat, opacity, color = dec.decode_attributes(
            torch.rand(2, generator=gen(1)), torch.randn(4, 8, generator=gen(2)))
        assert torch.allclose(scale, torch.ones(3))
        assert torch.allclose(quat, torch.tensor([1.0, 0.0, 0.0, 0.0]))
        assert float(opacity.detach()) == pytest.approx(0.5)
        assert torch.allclose(color, torch.full((3,), 0.5))

    def test_activation_ranges_forced(self):
        dec = AtlasDecoder(8, gen(3))
        for seed in range(5):
            app = torch.randn(4, 8, generator=gen(40 + seed)) * 5
            scale, quat, opacity, color = dec.decode_attributes(
                torch.rand(2, generator=gen(50 + seed)), app)
            assert bool((scale >= 1e-6).all()) and bool((scale <= 1.0).all())
            assert float(torch.linalg.vector_norm(quat.detach())) == pytest.approx(1.0, abs=1e-6)
            assert 0.0 <= float(opacity.detach()) <= 1.0
            assert bool(((color >= 0) & (color <= 1)).all())

    def test_matches_composed_oracle(self):
        with precision("float64"):
            dec = AtlasDecoder(8, gen(4))
            q = torch.rand(2, generator=gen(5), dtype=torch.float64)
            app = torch.randn(4, 8, generator=gen(6), dtype=torch.float64)
            w = dec.corner_weights(q, app, branch="app").detach()
            pre = dec.attribute_head(sum(float(w[k]) * app[k] for k in range(4)))
            scale, quat, opacity, color = dec.decode_attributes(q, app)
            assert torch.allclose(scale, pre[0:3].exp().clamp(1e-6, 1.0), atol=1e-12)
            raw_q = pre[3:7] + torch.tensor([1.0, 0, 0, 0], dtype=torch.float64)
            assert torch.allclose(quat, raw_q / raw_q.norm(), atol=1e-12)
            assert float(opacity.detach()) == pytest.approx(
                float(pre[7].sigmoid().detach()), abs=1e-12)
            assert torch.allclose(color, pre[8:11].sigmoid(), atol=1e-12)

    def test_gradients(self):
        with precision("float64"):
            dec = AtlasDecoder(8, gen(7))
            q = torch.rand(2, generator=gen(8), dtype=torch.float64,
                           requires_grad=True)
            app = torch.randn(4, 8, generator=gen(9), dtype=torch.float64,
                              requires_grad=True)

            def scalar():
                scale, quat, opacity, color = dec.decode_attributes(q, app)
                return scale.sum() + quat.sum() + opacity + color.sum()

            assert check_gradient(scalar, [q, app]) <= 1e-4


class TestUVSampling:
    def test_grid_alpha_one(self):
        assert sample_uv_grid(1).tolist() == [[0.5, 0.5]]

    def test_grid_alpha_two_row_major(self):
        expected = [[0.25, 0.25], [0.25, 0.75], [0.75, 0.25], [0.75, 0.75]]
        assert sample_uv_grid(2).tolist() == expected

    def test_grid_zero_rejected(self):
        with pytest.raises(DataError):
            sample_uv_grid(0)

    def test_grid_counts(self):
        for alpha in (2, 4, 7):
            assert sample_uv_grid(alpha).shape == (alpha * alpha, 2)

    def test_random_seeded_deterministic(self):
        a = sample_uv_random(32, gen(5))
        b = sample_uv_random(32, gen(5))
        assert torch.equal(a, b)

    def test_random_mean_near_half(self):
        pts = sample_uv_random(10_000, gen(6))
        mean = pts.mean(dim=0)
        assert float((mean - 0.5).abs().max()) <= 0.02

    def test_random_single_point_in_square(self):
        p = sample_uv_random(1, gen(7))
        assert p.shape == (1, 2)
        assert bool(((p >= 0) & (p <= 1)).all())


def random_patch_set(seed: int, m: int, d: int = 8) -> PatchSet:
    g = gen(seed)
    return PatchSet(centers=torch.randn(m, 3, generator=g) * 0.5,
                    geom=torch.randn(m, 4, d, generator=g),
                    app=torch.randn(m, 4, d, generator=g))


class TestDecodeAtlas:
    def test_count_and_patch_major_order(self):
        dec = AtlasDecoder(8, gen(0))
        pset = random_patch_set(1, m=2)
        uv = sample_uv_random(3, gen(2))
        out = decode_atlas(pset, dec, uv)
        assert len(out) == 6
        for i in range(2):
            single = decode_atlas(
                PatchSet(centers=pset.centers[i:i + 1], geom=pset.geom[i:i + 1],
                         app=pset.app[i:i + 1]), dec, uv)
            assert torch.allclose(out.mu[3 * i:3 * i + 3], single.mu, atol=1e-6)

    def test_parameter_count_independent_of_sample_count(self):
        dec = AtlasDecoder(8, gen(3))
        pset = random_patch_set(4, m=4)
        before = count_parameters(dec)
        state_before = {k: v.clone() for k, v in dec.state_dict().items()}
        decode_atlas(pset, dec, sample_uv_grid(2))
        decode_atlas(pset, dec, sample_uv_grid(7))
        assert count_parameters(dec) == before
        for k, v in dec.state_dict().items():
            assert torch.equal(v, state_before[k])

    def test_grid_decode_equals_pointwise_concat(self):
        dec = AtlasDecoder(8, gen(5))
        pset = random_patch_set(6, m=3)
        grid = sample_uv_grid(2)
        whole = decode_atlas(pset, dec, grid)
        parts = [decode_atlas(pset, dec, grid[j:j + 1]) for j in range(4)]
        for patch in range(3):
            for j in range(4):
                assert torch.allclose(whole.mu[patch * 4 + j],
                                      parts[j].mu[patch], atol=1e-6)

    def test_decoded_gaussians_satisfy_invariants(self):
        dec = AtlasDecoder(8, gen(6))
        out = decode_atlas(random_patch_set(7, m=5), dec, sample_uv_grid(3))
        out.validate()
        out[0].validate()

    def test_per_patch_uv(self):
        dec = AtlasDecoder(8, gen(8))
        pset = random_patch_set(9, m=4)
        uv = torch.rand(4, 5, 2, generator=gen(10))
        assert len(decode_atlas(pset, dec, uv)) == 20

    def test_empty_uv_rejected(self):
        dec = AtlasDecoder(8, gen(11))
        with pytest.raises(DataError):
            decode_atlas(random_patch_set(12, m=2), dec, torch.zeros(0, 2))

    def test_list_of_patches_accepted(self):
        dec = AtlasDecoder(8, gen(13))
        patches = [Patch(center=torch.randn(3, generator=gen(30 + i)),
                         geom=torch.randn(4, 8, generator=gen(40 + i)),
                         app=torch.randn(4, 8, generator=gen(50 + i)))
                   for i in range(3)]
        assert len(decode_atlas(patches, dec, sample_uv_grid(2))) == 12

    def test_empty_patch_list_rejected(self):
        dec = AtlasDecoder(8, gen(14))
        with pytest.raises(DataError):
            decode_atlas([], dec, sample_uv_grid(1))


class TestSplatPly:
    def test_roundtrip(self, tmp_path):
        dec = AtlasDecoder(8, gen(0))
        out = decode_atlas(random_patch_set(1, m=2), dec, sample_uv_grid(2))
        path = tmp_path / "splats.ply"
        export_ply(path, out)
        back = import_ply(path)
        assert len(back) == len(out)
        for field in ("mu", "scale", "rot", "opacity", "color"):
            a, b = getattr(out, field), getattr(back, field)
            assert torch.allclose(a, b, atol=1e-6)

    def test_header_properties(self, tmp_path):
        dec = AtlasDecoder(8, gen(1))
        out = decode_atlas(random_patch_set(2, m=2), dec, sample_uv_grid(3))
        path = tmp_path / "splats.ply"
        export_ply(path, out)
        header = path.read_bytes().split(b"end_header")[0].decode()
        assert "element vertex 18" in header
        for prop in ("x", "scale_0", "rot_3", "opacity", "blue"):
            assert f"property float {prop}" in header
