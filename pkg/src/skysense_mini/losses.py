"""Contrastive losses.

The per-pair loss is teacher-student cross-entropy over projected logits:
the teacher's centered, sharpened softmax is the (stop-gradient) target
for the student's log-softmax. Pixel-, object- and image-level losses
reduce that pair loss over different groupings of a feature volume;
cross-modal alignment is an in-batch InfoNCE between modality embeddings.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geo import sinkhorn_assign
from .types import ContractError, FeatureVolume


class ProjectionHead(nn.Module):
    """2-layer MLP mapping backbone features to K contrastive logits."""

    def __init__(self, dim: int, hidden: int, out: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


def pairwise_cl_loss(
    f_student: torch.Tensor,
    f_teacher: torch.Tensor,
    student_head: nn.Module,
    teacher_head: nn.Module,
    student_temp: float,
    teacher_temp: float,
    center: torch.Tensor,
) -> torch.Tensor:
    """Mean cross-entropy between teacher targets and student predictions.

    Accepts [..., d] feature stacks; pairs are matched along the leading
    axes. The teacher side is detached: it contributes targets only.
    """
    if f_student.shape != f_teacher.shape:
        raise ContractError(
            f"pair shape mismatch: {tuple(f_student.shape)} vs {tuple(f_teacher.shape)}"
        )
    s_logits = student_head(f_student) / student_temp
    with torch.no_grad():
        t_logits = (teacher_head(f_teacher) - center) / teacher_temp
        t_probs = torch.softmax(t_logits, dim=-1)
    loss = -(t_probs * torch.log_softmax(s_logits, dim=-1)).sum(dim=-1)
    return loss.mean()


def loss_pixel(
    vol_student: FeatureVolume,
    vol_teacher: FeatureVolume,
    idx_student,
    idx_teacher,
    **cl_kwargs,
) -> torch.Tensor:
    """Mean pair loss over corresponding spatial sites and all time slices.

    Sites outside the view overlap are excluded; the divisor is the
    number of included (site, slice) pairs. An empty overlap contributes
    a zero loss.
    """
    if len(idx_student) == 0:
        return torch.zeros((), dtype=vol_student.data.dtype)
    if vol_student.n_slices != vol_teacher.n_slices:
        raise ContractError(
            f"slice count mismatch: {vol_student.n_slices} vs {vol_teacher.n_slices}"
        )
    f_s = vol_student.data[idx_student]  # [n_overlap, T, d]
    f_t = vol_teacher.data[idx_teacher]
    return pairwise_cl_loss(f_s, f_t, **cl_kwargs)


def principal_directions(features: torch.Tensor, n_components: int) -> torch.Tensor:
    """Top principal directions of [N, d] features, deterministically signed.

    Parameter-free anchors for object clustering: each direction's sign is
    fixed so its largest-magnitude coordinate is positive.
    """
    centered = features - features.mean(dim=0, keepdim=True)
    # eigenvectors of the d x d covariance = right singular vectors,
    # cheaper than an SVD of the [N, d] matrix for small d
    cov = centered.T @ centered
    _, vecs = torch.linalg.eigh(cov)
    dirs = vecs.flip(-1).T[:n_components]  # descending variance, [n_components, d]
    idx = dirs.abs().argmax(dim=-1)
    signs = torch.sign(dirs.gather(-1, idx.unsqueeze(-1))).squeeze(-1)
    signs = torch.where(signs == 0, torch.ones_like(signs), signs)
    return dirs * signs.unsqueeze(-1)


def cluster_objects(
    features: torch.Tensor,
    n_clusters: int,
    n_iters: int = 3,
    epsilon: float = 0.05,
    anchors: torch.Tensor | None = None,
):
    """Balanced soft clustering of [N_S, d] site features.

    Anchors default to the features' top principal directions; the
    transport assignment against them comes from the same Sinkhorn-Knopp
    routine used for geo-context prototypes. Centers are the
    assignment-weighted feature means (columns of S renormalized to 1).

    Returns (centers [N_C, d], assignment S [N_S, N_C], anchors).
    """
    n_sites = features.shape[0]
    if n_clusters > n_sites:
        raise ContractError(f"n_clusters {n_clusters} exceeds site count {n_sites}")
    if anchors is None:
        anchors = principal_directions(features, n_clusters)
    sims = F.normalize(features, dim=-1) @ F.normalize(anchors, dim=-1).T
    s = sinkhorn_assign(sims, n_iters=n_iters, epsilon=epsilon).assignment
    centers = pool_with_assignment(features, s)
    return centers, s, anchors


def pool_with_assignment(features: torch.Tensor, assignment: torch.Tensor) -> torch.Tensor:
    """Weighted cluster means: (S / colsum)^T F, one row per cluster."""
    weights = assignment / assignment.sum(dim=0, keepdim=True)
    return weights.T @ features


def loss_object(
    vol_student: FeatureVolume,
    vol_teacher: FeatureVolume,
    idx_student,
    idx_teacher,
    n_clusters: int,
    sinkhorn_iters: int = 3,
    sinkhorn_epsilon: float = 0.05,
    **cl_kwargs,
) -> torch.Tensor:
    """Mean pair loss over cluster centers and time slices.

    The assignment is computed on the teacher's overlap features (no
    gradient) and reused to pool the student's corresponding sites, so
    cluster k denotes the same pixel group on both branches.
    """
    n_overlap = len(idx_student)
    if n_overlap == 0:
        return torch.zeros((), dtype=vol_student.data.dtype)
    n_c = min(n_clusters, n_overlap)
    t = vol_student.n_slices
    if t != vol_teacher.n_slices:
        raise ContractError(f"slice count mismatch: {t} vs {vol_teacher.n_slices}")
    losses = []
    for ti in range(t):
        f_t = vol_teacher.data[idx_teacher, ti]  # [n_overlap, d]
        f_s = vol_student.data[idx_student, ti]
        with torch.no_grad():
            centers_t, s, _ = cluster_objects(
                f_t, n_c, n_iters=sinkhorn_iters, epsilon=sinkhorn_epsilon
            )
        centers_s = pool_with_assignment(f_s, s)
        losses.append(pairwise_cl_loss(centers_s, centers_t, **cl_kwargs))
    return torch.stack(losses).mean()


def loss_image(
    vol_student: FeatureVolume,
    vol_teacher: FeatureVolume,
    extra_student: list[torch.Tensor] | None = None,
    **cl_kwargs,
) -> torch.Tensor:
    """Mean pair loss over per-slice spatial average poolings.

    extra_student carries additional student-side image features (local
    multi-crops); each is paired with the teacher's time-averaged image
    feature and averaged in with the per-slice terms.
    """
    img_s = vol_student.data.mean(dim=0)  # [T, d]
    img_t = vol_teacher.data.mean(dim=0)
    terms = [pairwise_cl_loss(img_s, img_t, **cl_kwargs)]
    weights = [img_s.shape[0]]
    for f_local in extra_student or []:
        target = img_t.mean(dim=0, keepdim=True)
        terms.append(pairwise_cl_loss(f_local.unsqueeze(0), target, **cl_kwargs))
        weights.append(1)
    total = sum(w for w in weights)
    return sum(t * (w / total) for t, w in zip(terms, weights))


def loss_align(embeddings: dict[str, torch.Tensor], temperature: float) -> torch.Tensor:
    """Cross-modal in-batch InfoNCE, summed over ordered modality pairs.

    embeddings maps modality -> [B, d] image-pooled projected features of
    the same B samples. For each ordered pair (i, j), i != j, sample b's
    modality-i embedding must pick out sample b's modality-j embedding
    among the batch. With B == 1 there are no negatives and the loss is 0.
    """
    names = list(embeddings.keys())
    if not names:
        return torch.zeros(())
    some = embeddings[names[0]]
    b = some.shape[0]
    labels = torch.arange(b, device=some.device)
    z = {m: F.normalize(e, dim=-1) for m, e in embeddings.items()}
    total = torch.zeros((), dtype=some.dtype, device=some.device)
    for i in names:
        for j in names:
            if i == j:
                continue
            logits = z[i] @ z[j].T / temperature
            total = total + F.cross_entropy(logits, labels)
    return total
