import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from skysense_mini.losses import (
    ProjectionHead,
    cluster_objects,
    loss_align,
    loss_image,
    loss_object,
    loss_pixel,
    pairwise_cl_loss,
    pool_with_assignment,
    principal_directions,
)
from skysense_mini.types import AxisKind, ContractError, FeatureVolume


class IdentityHead(nn.Module):
    def forward(self, x):
        return x


def cl_kwargs(k=4, temp=1.0, center=None):
    return dict(
        student_head=IdentityHead(),
        teacher_head=IdentityHead(),
        student_temp=temp,
        teacher_temp=temp,
        center=torch.zeros(k) if center is None else center,
    )


class TestPairwiseLoss:
    def test_one_hot_teacher_uniform_student_is_log_k(self):
        k = 8
        f_teacher = torch.zeros(1, k)
        f_teacher[0, 3] = 1000.0  # teacher softmax is one-hot at 3
        f_student = torch.zeros(1, k)  # uniform student
        loss = pairwise_cl_loss(f_student, f_teacher, **cl_kwargs(k))
        assert float(loss) == pytest.approx(math.log(k), rel=1e-6)

    def test_invariant_to_constant_student_logit_shift(self):
        torch.manual_seed(0)
        k = 6
        f_s = torch.randn(5, k)
        f_t = torch.randn(5, k)
        a = pairwise_cl_loss(f_s, f_t, **cl_kwargs(k))
        b = pairwise_cl_loss(f_s + 3.7, f_t, **cl_kwargs(k))
        torch.testing.assert_close(a, b, atol=1e-5, rtol=1e-6)

    def test_nonnegative_and_scalar_oracle(self):
        rng = np.random.default_rng(1)
        k = 3
        f_s = torch.as_tensor(rng.standard_normal((2, k)))
        f_t = torch.as_tensor(rng.standard_normal((2, k)))
        center = torch.as_tensor(rng.standard_normal(k))
        loss = pairwise_cl_loss(
            f_s, f_t, student_head=IdentityHead(), teacher_head=IdentityHead(),
            student_temp=0.1, teacher_temp=0.04, center=center,
        )
        # straight-line recomputation
        total = 0.0
        for i in range(2):
            t_logits = (f_t[i].numpy() - center.numpy()) / 0.04
            t_probs = np.exp(t_logits - t_logits.max())
            t_probs /= t_probs.sum()
            s_logits = f_s[i].numpy() / 0.1
            log_z = np.log(np.exp(s_logits - s_logits.max()).sum()) + s_logits.max()
            total += -(t_probs * (s_logits - log_z)).sum()
        assert float(loss) == pytest.approx(total / 2, rel=1e-6)
        assert float(loss) >= 0

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(2)
        k = 5
        head = ProjectionHead(4, 8, k).double()
        teacher_head = ProjectionHead(4, 8, k).double()
        f_s = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        f_t = torch.randn(3, 4, dtype=torch.float64)
        center = torch.zeros(k, dtype=torch.float64)

        def compute(fs):
            return pairwise_cl_loss(
                fs, f_t, student_head=head, teacher_head=teacher_head,
                student_temp=0.1, teacher_temp=0.04, center=center,
            )

        loss = compute(f_s)
        loss.backward()
        eps = 1e-6
        rng = np.random.default_rng(3)
        for _ in range(5):
            i, j = rng.integers(0, 3), rng.integers(0, 4)
            with torch.no_grad():
                fp = f_s.clone(); fp[i, j] += eps
                fm = f_s.clone(); fm[i, j] -= eps
                numeric = (float(compute(fp)) - float(compute(fm))) / (2 * eps)
            assert float(f_s.grad[i, j]) == pytest.approx(numeric, rel=1e-3, abs=1e-9)

    def test_teacher_receives_no_gradient(self):
        k = 4
        f_t = torch.randn(2, k, requires_grad=True)
        f_s = torch.randn(2, k, requires_grad=True)
        loss = pairwise_cl_loss(f_s, f_t, **cl_kwargs(k))
        loss.backward()
        assert f_t.grad is None
        assert f_s.grad is not None

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            pairwise_cl_loss(torch.zeros(2, 3), torch.zeros(3, 3), **cl_kwargs(3))


def make_volume(data) -> FeatureVolume:
    t = torch.as_tensor(data, dtype=torch.float32)
    return FeatureVolume(t, (1, t.shape[0]), AxisKind.PER_MODALITY)


class TestLossPixel:
    def test_identical_views_give_shared_softmax_entropy(self):
        """Same features, identity heads, equal temps, zero center: the loss
        is the entropy of the shared softmax distribution."""
        torch.manual_seed(4)
        data = torch.randn(6, 2, 5)
        vol = FeatureVolume(data, (2, 3), AxisKind.PER_MODALITY)
        idx = np.arange(6)
        loss = loss_pixel(vol, vol, idx, idx, **cl_kwargs(5))
        probs = torch.softmax(data, dim=-1)
        entropy = float((-probs * torch.log(probs)).sum(-1).mean())
        assert float(loss) == pytest.approx(entropy, rel=1e-5)

    def test_site_permutation_invariance(self):
        torch.manual_seed(5)
        a = FeatureVolume(torch.randn(6, 2, 4), (2, 3), AxisKind.PER_MODALITY)
        b = FeatureVolume(torch.randn(6, 2, 4), (2, 3), AxisKind.PER_MODALITY)
        idx = np.arange(6)
        base = loss_pixel(a, b, idx, idx, **cl_kwargs(4))
        perm = np.random.default_rng(0).permutation(6)
        permuted = loss_pixel(a, b, idx[perm], idx[perm], **cl_kwargs(4))
        torch.testing.assert_close(base, permuted, atol=1e-6, rtol=1e-6)

    def test_divisor_counts_included_pairs_only(self):
        torch.manual_seed(6)
        a = FeatureVolume(torch.randn(4, 3, 4), (2, 2), AxisKind.PER_MODALITY)
        b = FeatureVolume(torch.randn(4, 3, 4), (2, 2), AxisKind.PER_MODALITY)
        partial = loss_pixel(a, b, np.array([0, 2]), np.array([1, 3]), **cl_kwargs(4))
        manual = []
        for s_i, t_i in ((0, 1), (2, 3)):
            for t in range(3):
                manual.append(
                    pairwise_cl_loss(a.data[s_i, t][None], b.data[t_i, t][None], **cl_kwargs(4))
                )
        assert float(partial) == pytest.approx(float(torch.stack(manual).mean()), rel=1e-6)

    def test_empty_overlap_is_zero(self):
        a = FeatureVolume(torch.randn(4, 1, 4), (2, 2), AxisKind.PER_MODALITY)
        assert float(loss_pixel(a, a, np.array([], dtype=int), np.array([], dtype=int),
                                **cl_kwargs(4))) == 0.0


class TestClusterObjects:
    def test_principal_directions_match_numpy_svd(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((20, 6))
        dirs = principal_directions(torch.as_tensor(x), 3).numpy()
        centered = x - x.mean(0)
        _, _, vh = np.linalg.svd(centered, full_matrices=False)
        expected = vh[:3]
        for i in range(3):
            e = expected[i]
            e = e * np.sign(e[np.abs(e).argmax()])
            np.testing.assert_allclose(dirs[i], e, atol=1e-8)

    def test_centers_are_normalized_pooling(self):
        rng = np.random.default_rng(8)
        feats = torch.as_tensor(rng.standard_normal((10, 4)).astype(np.float32))
        centers, s, _ = cluster_objects(feats, 3)
        expected = (s / s.sum(0, keepdim=True)).T @ feats
        torch.testing.assert_close(centers, expected)
        # matrix oracle: row k is sum_s S[s,k] f_s / sum_s S[s,k]
        manual = np.stack(
            [
                (s[:, k: k + 1].numpy() * feats.numpy()).sum(0) / s[:, k].numpy().sum()
                for k in range(3)
            ]
        )
        np.testing.assert_allclose(centers.numpy(), manual, rtol=1e-5)

    def test_two_blobs_two_clusters(self):
        rng = np.random.default_rng(9)
        blob_a = rng.standard_normal((16, 3)) * 0.05 + np.array([5.0, 0.0, 0.0])
        blob_b = rng.standard_normal((16, 3)) * 0.05 + np.array([-5.0, 0.0, 0.0])
        feats = torch.as_tensor(np.vstack([blob_a, blob_b]).astype(np.float32))
        centers, s, _ = cluster_objects(feats, 2, n_iters=100)
        # each center lies inside the convex hull of one blob: x-coordinates
        # land near +-5 and the two centers take opposite signs
        xs = sorted(float(c[0]) for c in centers)
        assert xs[0] == pytest.approx(-5.0, abs=0.5)
        assert xs[1] == pytest.approx(5.0, abs=0.5)

    def test_cluster_count_cap(self):
        with pytest.raises(ContractError):
            cluster_objects(torch.randn(3, 4), 5)

    def test_n_c_equals_n_s_near_identity(self):
        # well-separated one-hot-ish features, N_C == N_S, tiny epsilon:
        # the assignment approaches identity/N and centers approach pixels
        feats = torch.eye(4) * 10.0
        anchors = torch.eye(4)
        centers, s, _ = cluster_objects(feats, 4, n_iters=200, epsilon=0.01, anchors=anchors)
        perm = s.argmax(dim=1).numpy()
        assert sorted(perm.tolist()) == [0, 1, 2, 3]
        torch.testing.assert_close(centers[perm], feats, atol=0.2, rtol=0)


class TestLossObject:
    def test_identical_views_entropy_constant(self):
        torch.manual_seed(10)
        data = torch.randn(8, 1, 5)
        vol = FeatureVolume(data, (2, 4), AxisKind.PER_MODALITY)
        idx = np.arange(8)
        loss = loss_object(vol, vol, idx, idx, n_clusters=3, **cl_kwargs(5))
        # teacher and student centers coincide, so the loss equals the
        # entropy of the centers' shared softmax
        with torch.no_grad():
            centers, s, _ = cluster_objects(data[:, 0, :], 3)
        probs = torch.softmax(centers, dim=-1)
        entropy = float((-probs * torch.log(probs)).sum(-1).mean())
        assert float(loss) == pytest.approx(entropy, rel=1e-5)

    def test_single_cluster_equals_overlap_mean_pair(self):
        torch.manual_seed(11)
        a = FeatureVolume(torch.randn(6, 1, 4), (2, 3), AxisKind.PER_MODALITY)
        b = FeatureVolume(torch.randn(6, 1, 4), (2, 3), AxisKind.PER_MODALITY)
        idx = np.arange(6)
        loss = loss_object(a, b, idx, idx, n_clusters=1, **cl_kwargs(4))
        # with one cluster the uniform assignment pools to the plain mean
        pooled = pairwise_cl_loss(
            a.data[:, 0, :].mean(0, keepdim=True),
            b.data[:, 0, :].mean(0, keepdim=True),
            **cl_kwargs(4),
        )
        assert float(loss) == pytest.approx(float(pooled), rel=1e-5)

    def test_teacher_assignment_transported_to_student(self):
        torch.manual_seed(12)
        a = FeatureVolume(torch.randn(6, 2, 4), (2, 3), AxisKind.PER_MODALITY)
        b = FeatureVolume(torch.randn(6, 2, 4), (2, 3), AxisKind.PER_MODALITY)
        idx_s = np.array([0, 1, 2, 3])
        idx_t = np.array([2, 3, 4, 5])
        loss = loss_object(a, b, idx_s, idx_t, n_clusters=2, **cl_kwargs(4))
        manual = []
        for t in range(2):
            f_t = b.data[idx_t, t]
            centers_t, s, _ = cluster_objects(f_t, 2)
            centers_s = pool_with_assignment(a.data[idx_s, t], s)
            manual.append(pairwise_cl_loss(centers_s, centers_t, **cl_kwargs(4)))
        assert float(loss) == pytest.approx(float(torch.stack(manual).mean()), rel=1e-5)


class TestLossImage:
    def test_constant_maps_match_pairwise_on_the_constant(self):
        const_s = torch.full((5, 2, 4), 0.3)
        const_t = torch.full((5, 2, 4), -0.2)
        a = FeatureVolume(const_s, (1, 5), AxisKind.PER_MODALITY)
        b = FeatureVolume(const_t, (1, 5), AxisKind.PER_MODALITY)
        loss = loss_image(a, b, **cl_kwargs(4))
        direct = pairwise_cl_loss(const_s[0], const_t[0], **cl_kwargs(4))
        assert float(loss) == pytest.approx(float(direct), rel=1e-6)

    def test_pooling_matches_direct_summation(self):
        torch.manual_seed(13)
        data = torch.randn(7, 3, 4)
        vol = FeatureVolume(data, (1, 7), AxisKind.PER_MODALITY)
        manual_pool = data.sum(dim=0) / 7
        torch.testing.assert_close(vol.data.mean(dim=0), manual_pool)

    def test_divisor_is_t(self):
        torch.manual_seed(14)
        a = FeatureVolume(torch.randn(4, 3, 4), (2, 2), AxisKind.PER_MODALITY)
        b = FeatureVolume(torch.randn(4, 3, 4), (2, 2), AxisKind.PER_MODALITY)
        loss = loss_image(a, b, **cl_kwargs(4))
        per_slice = [
            pairwise_cl_loss(a.data.mean(0)[t][None], b.data.mean(0)[t][None], **cl_kwargs(4))
            for t in range(3)
        ]
        assert float(loss) == pytest.approx(float(torch.stack(per_slice).mean()), rel=1e-6)

    def test_local_crops_average_in(self):
        torch.manual_seed(15)
        a = FeatureVolume(torch.randn(4, 2, 4), (2, 2), AxisKind.PER_MODALITY)
        b = FeatureVolume(torch.randn(4, 2, 4), (2, 2), AxisKind.PER_MODALITY)
        local = torch.randn(4)
        loss = loss_image(a, b, extra_student=[local], **cl_kwargs(4))
        globals_term = [
            pairwise_cl_loss(a.data.mean(0)[t][None], b.data.mean(0)[t][None], **cl_kwargs(4))
            for t in range(2)
        ]
        local_term = pairwise_cl_loss(
            local[None], b.data.mean(0).mean(0, keepdim=True), **cl_kwargs(4)
        )
        expected = (sum(map(float, globals_term)) + float(local_term)) / 3
        assert float(loss) == pytest.approx(expected, rel=1e-5)


class TestLossAlign:
    def test_batch_of_one_is_zero(self):
        z = {m: torch.randn(1, 8) for m in ("HR", "Ms", "SAR")}
        assert float(loss_align(z, temperature=0.1)) == pytest.approx(0.0, abs=1e-7)

    def test_batch_of_two_matches_scalar_oracle(self):
        rng = np.random.default_rng(16)
        z = {
            "HR": torch.as_tensor(rng.standard_normal((2, 4))),
            "Ms": torch.as_tensor(rng.standard_normal((2, 4))),
            "SAR": torch.as_tensor(rng.standard_normal((2, 4))),
        }
        tau = 0.25
        loss = loss_align(z, temperature=tau)

        def nce(a, b):
            a = a / np.linalg.norm(a, axis=1, keepdims=True)
            b = b / np.linalg.norm(b, axis=1, keepdims=True)
            logits = a @ b.T / tau
            total = 0.0
            for i in range(2):
                row = logits[i]
                total += -(row[i] - np.log(np.exp(row - row.max()).sum()) - row.max())
            return total / 2

        expected = 0.0
        mods = ["HR", "Ms", "SAR"]
        for i in mods:
            for j in mods:
                if i != j:
                    expected += nce(z[i].numpy(), z[j].numpy())
        assert float(loss) == pytest.approx(expected, rel=1e-6)

    def test_six_ordered_terms(self):
        # zeroing one direction changes the sum: ordered pairs are distinct
        torch.manual_seed(17)
        z = {m: torch.randn(3, 4, dtype=torch.float64) for m in ("HR", "Ms", "SAR")}
        full = loss_align(z, temperature=0.1)
        two_mods = loss_align({k: z[k] for k in ("HR", "Ms")}, temperature=0.1)
        assert float(two_mods) < float(full)
