"""Point-set losses: brute-force and factorial oracles, FPS, KL."""
import itertools
import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from atlasgs.geometry import (PointCloud, chamfer, emd_approx, emd_exact,
                              farthest_point_sampling, kl_diag_gaussian)
from atlasgs.plyio import read_point_cloud, write_point_cloud
from atlasgs.util import DataError, precision

from conftest import gen


def brute_chamfer(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """O(n m) double-loop squared-nearest-neighbor evaluation."""
    def one_way(a, b):
        mins = []
        for i in range(a.shape[0]):
            best = None
            for j in range(b.shape[0]):
                diff = a[i] - b[j]
                d2 = float((diff * diff).sum())
                best = d2 if best is None else min(best, d2)
            mins.append(best)
        return torch.tensor(mins, dtype=a.dtype).mean()

    return one_way(p, q) + one_way(q, p)


def brute_emd(p: torch.Tensor, q: torch.Tensor) -> float:
    """Exhaustive minimum over all bijections (factorial; n <= 7)."""
    n = p.shape[0]
    dist = torch.cdist(p.double(), q.double())
    best = math.inf
    for perm in itertools.permutations(range(n)):
        cost = float(sum(dist[i, perm[i]] for i in range(n))) / n
        best = min(best, cost)
    return best


def brute_fps(points: torch.Tensor, k: int) -> list[int]:
    """Greedy max-min selection enumerated step by step."""
    chosen = [0]
    for _ in range(k - 1):
        best_idx, best_dist = None, -1.0
        for i in range(points.shape[0]):
            if i in chosen:
                continue
            dmin = min(float(((points[i] - points[j]) ** 2).sum()) for j in chosen)
            if dmin > best_dist:
                best_idx, best_dist = i, dmin
        chosen.append(best_idx)
    return chosen


class TestChamfer:
    def test_identical_sets_zero(self):
        p = torch.randn(10, 3, generator=gen(0))
        assert float(chamfer(p, p.clone())) == 0.0

    def test_single_pair(self):
        p = torch.tensor([[0.0, 0.0, 0.0]])
        q = torch.tensor([[1.0, 0.0, 0.0]])
        assert float(chamfer(p, q)) == pytest.approx(2.0, abs=1e-7)

    def test_matches_brute_force(self):
        with precision("float64"):
            p = torch.randn(32, 3, generator=gen(1), dtype=torch.float64)
            q = torch.randn(32, 3, generator=gen(2), dtype=torch.float64)
            assert float(chamfer(p, q)) == pytest.approx(float(brute_chamfer(p, q)),
                                                         abs=1e-12)

    def test_unsquared_mode(self):
        p = torch.tensor([[0.0, 0.0, 0.0]])
        q = torch.tensor([[3.0, 4.0, 0.0]])
        assert float(chamfer(p, q, squared=False)) == pytest.approx(10.0, abs=1e-5)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10 ** 6), n=st.integers(1, 12), m=st.integers(1, 12))
    def test_symmetric_and_nonnegative(self, seed, n, m):
        p = torch.randn(n, 3, generator=gen(seed))
        q = torch.randn(m, 3, generator=gen(seed + 1))
        forward = float(chamfer(p, q))
        assert forward >= 0.0
        assert forward == pytest.approx(float(chamfer(q, p)), rel=1e-6)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            chamfer(torch.zeros(0, 3), torch.zeros(3, 3))

    def test_accepts_point_clouds(self):
        pc = PointCloud(points=torch.randn(5, 3, generator=gen(3)))
        assert float(chamfer(pc, pc)) == 0.0


class TestEmdExact:
    def test_identity(self):
        p = torch.randn(8, 3, generator=gen(0))
        assert emd_exact(p, p.clone()) == pytest.approx(0.0, abs=1e-12)

    def test_swapped_pair(self):
        p = torch.tensor([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        q = torch.tensor([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        assert emd_exact(p, q) == pytest.approx(0.0, abs=1e-12)

    def test_matches_factorial_brute_force(self):
        for seed in range(5):
            p = torch.randn(6, 3, generator=gen(10 + seed))
            q = torch.randn(6, 3, generator=gen(20 + seed))
            assert emd_exact(p, q) == pytest.approx(brute_emd(p, q), abs=1e-12)

    def test_size_mismatch(self):
        with pytest.raises(DataError):
            emd_exact(torch.randn(4, 3), torch.randn(5, 3))


class TestEmdApprox:
    def test_identity_near_zero(self):
        p = torch.randn(16, 3, generator=gen(0))
        assert float(emd_approx(p, p.clone())) <= 1e-9

    def test_within_five_percent_of_hungarian(self):
        for seed in range(10):
            p = torch.randn(16, 3, generator=gen(100 + seed))
            q = torch.randn(16, 3, generator=gen(200 + seed))
            exact = emd_exact(p, q)
            approx = float(emd_approx(p, q))
            assert abs(approx - exact) / exact <= 0.05

    def test_pure_translation(self):
        for t in (0.5, 2.0):
            p = torch.randn(24, 3, generator=gen(7))
            q = p + torch.tensor([t, 0.0, 0.0])
            assert float(emd_approx(p, q)) == pytest.approx(t, rel=0.02)

    def test_differentiable_through_matches(self):
        p = torch.randn(8, 3, generator=gen(8), requires_grad=True)
        q = torch.randn(8, 3, generator=gen(9))
        emd_approx(p, q).backward()
        assert p.grad is not None and torch.isfinite(p.grad).all()

    def test_size_mismatch(self):
        with pytest.raises(DataError):
            emd_approx(torch.randn(4, 3), torch.randn(5, 3))


class TestFPS:
    def test_full_selection_matches_greedy_oracle(self):
        pts = torch.randn(9, 3, generator=gen(0))
        idx = farthest_point_sampling(pts, 9)
        assert idx.tolist() == brute_fps(pts, 9)
        assert sorted(idx.tolist()) == list(range(9))

    def test_square_corners_beat_center(self):
        pts = torch.tensor([
            [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0],
            [0.5, 0.5, 0.0],
        ])
        idx = farthest_point_sampling(pts, 4)
        # greedy enumeration: 0, then (1,1), then the tie (1,0)/(0,1) resolves
        # to the lower index, leaving the center unselected
        assert idx.tolist() == brute_fps(pts, 4) == [0, 2, 1, 3]

    def test_k_one_is_seed_index(self):
        pts = torch.randn(5, 3, generator=gen(1))
        assert farthest_point_sampling(pts, 1).tolist() == [0]

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10 ** 6), n=st.integers(2, 20))
    def test_deterministic_and_duplicate_free(self, seed, n):
        pts = torch.randn(n, 3, generator=gen(seed))
        pts = torch.cat([pts, pts[:1]])  # duplicated point stresses tie handling
        k = min(n, 5)
        a = farthest_point_sampling(pts, k)
        b = farthest_point_sampling(pts, k)
        assert torch.equal(a, b)
        assert len(set(a.tolist())) == k

    def test_k_too_large(self):
        with pytest.raises(DataError):
            farthest_point_sampling(torch.randn(3, 3), 4)


class TestKL:
    def test_standard_normal_zero(self):
        assert float(kl_diag_gaussian(torch.zeros(4, 2), torch.zeros(4, 2))) == 0.0

    def test_unit_mean_scalar(self):
        val = kl_diag_gaussian(torch.ones(1), torch.zeros(1))
        assert float(val) == pytest.approx(0.5, abs=1e-7)

    def test_matches_closed_form(self):
        with precision("float64"):
            mean = torch.randn(5, 3, generator=gen(0), dtype=torch.float64)
            logvar = torch.randn(5, 3, generator=gen(1), dtype=torch.float64)
            total, count = 0.0, 0
            for i in range(5):
                for j in range(3):
                    m, lv = float(mean[i, j]), float(logvar[i, j])
                    total += 0.5 * (math.exp(lv) + m * m - 1.0 - lv)
                    count += 1
            assert float(kl_diag_gaussian(mean, logvar)) == pytest.approx(
                total / count, abs=1e-12)

    def test_nonnegative(self):
        for seed in range(5):
            mean = torch.randn(6, generator=gen(seed))
            logvar = torch.randn(6, generator=gen(seed + 50))
            assert float(kl_diag_gaussian(mean, logvar)) >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            kl_diag_gaussian(torch.zeros(3), torch.zeros(4))


class TestPointCloudPly:
    def test_binary_roundtrip_exact(self, tmp_path):
        pc = PointCloud(points=torch.randn(20, 3, generator=gen(0)),
                        colors=torch.rand(20, 3, generator=gen(1)))
        path = tmp_path / "pc.ply"
        write_point_cloud(path, pc, binary=True)
        back = read_point_cloud(path)
        assert torch.equal(back.points, pc.points)
        assert float((back.colors - pc.colors).abs().max()) <= 0.5 / 255 + 1e-6

    def test_ascii_roundtrip(self, tmp_path):
        pc = PointCloud(points=torch.randn(7, 3, generator=gen(2)))
        path = tmp_path / "pc_ascii.ply"
        write_point_cloud(path, pc, binary=False)
        back = read_point_cloud(path)
        assert torch.allclose(back.points, pc.points)
        assert back.colors is None

    def test_missing_file_named(self, tmp_path):
        with pytest.raises(DataError, match="absent.ply"):
            read_point_cloud(tmp_path / "absent.ply")

    def test_invalid_cloud_rejected(self):
        from atlasgs.util import NonFiniteError
        with pytest.raises(DataError):
            PointCloud(points=torch.zeros(0, 3))
        with pytest.raises(NonFiniteError):
            PointCloud(points=torch.tensor([[0.0, float("nan"), 0.0]]))
