"""Differentiable renderer: pose, pinhole projection, SH shading, soft rasterization.

The rasterizer is a soft per-pixel blend: for each pixel the top-K nearest
candidate triangles (by interpolated depth) get a coverage weight
sigmoid(d/tau) of the signed pixel distance d to the triangle boundary,
windowed to exactly zero outside a narrow band so the candidate search can
be confined to dilated bounding boxes without introducing discontinuities.
Blending is a depth softmax against a background term whose mass is the
product of the candidates' non-coverages, which preserves silhouette
gradients. Gradients flow to 2D vertices, depths and vertex colors, and
through the full render() composition to every face coefficient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .face_model import FaceCoefficients, MorphableModel, instantiate_mesh

SH_C0 = 0.28209479177387814  # 1/(2 sqrt(pi))
_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
          1.0925484305920792, 0.5462742152960396)


class NearPlaneError(RuntimeError):
    """A vertex landed at or behind the camera near plane."""


@dataclass
class CameraIntrinsics:
    """Pinhole camera: u = f*x/z + cx, v = f*y/z + cy, pixel centers on integers."""

    focal_length: float
    principal_point: tuple
    image_size: tuple  # (H, W)

    def validate(self) -> None:
        h, w = self.image_size
        cx, cy = self.principal_point
        if self.focal_length <= 0:
            raise ValueError("focal length must be positive")
        if not (0 <= cx <= w - 1 and 0 <= cy <= h - 1):
            raise ValueError("principal point must lie inside the image")


def default_camera(image_size, focal: Optional[float] = None) -> CameraIntrinsics:
    """Camera whose default focal (1.2*W) makes a unit head at z~4.2 span ~60% of frame."""
    h, w = image_size
    f = 1.2 * w if focal is None else focal
    return CameraIntrinsics(f, ((w - 1) / 2.0, (h - 1) / 2.0), (h, w))


@dataclass
class RasterSettings:
    """Knobs of the soft rasterizer; tau defaults to 1e-4 * W**2 pixels."""

    tau: Optional[float] = None
    top_k: Optional[int] = 4
    background: float = 0.5
    depth_temp: float = 0.05
    band_sigmas: float = 8.0
    ramp_width: float = 1.0
    depth_fill: float = 100.0
    near: float = 1e-2

    def resolved_tau(self, width: int) -> float:
        return 1e-4 * width * width if self.tau is None else self.tau


@dataclass
class RenderOutput:
    image: torch.Tensor       # (H, W, 3) in [0, 1]
    mask: torch.Tensor        # (H, W) in [0, 1]
    landmarks2d: torch.Tensor  # (68, 2) pixels
    depth: torch.Tensor       # (H, W)


def euler_to_rotation(rot: torch.Tensor) -> torch.Tensor:
    """Intrinsic X-Y-Z Euler angles (radians) to a rotation matrix M = Rz @ Ry @ Rx."""
    rx, ry, rz = rot[..., 0], rot[..., 1], rot[..., 2]
    cx, sx = torch.cos(rx), torch.sin(rx)
    cy, sy = torch.cos(ry), torch.sin(ry)
    cz, sz = torch.cos(rz), torch.sin(rz)
    row0 = torch.stack([cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx], -1)
    row1 = torch.stack([sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx], -1)
    row2 = torch.stack([-sy, cy * sx, cy * cx], -1)
    return torch.stack([row0, row1, row2], dim=-2)


def pose_vertices(vertices: torch.Tensor, rot: torch.Tensor,
                  trans: torch.Tensor) -> torch.Tensor:
    return vertices @ euler_to_rotation(rot).transpose(-1, -2) + trans


def pinhole(posed: torch.Tensor, cam: CameraIntrinsics, near: float = 1e-2):
    """Project camera-space points; returns ((V,2) pixels, (V,) depths)."""
    z = posed[..., 2]
    zc = z.clamp_min(near)
    cx, cy = cam.principal_point
    u = cam.focal_length * posed[..., 0] / zc + cx
    v = cam.focal_length * posed[..., 1] / zc + cy
    return torch.stack([u, v], dim=-1), z


def project(vertices: torch.Tensor, rot: torch.Tensor, trans: torch.Tensor,
            cam: CameraIntrinsics, near: float = 1e-2, strict: bool = True):
    """Rotate+translate then pinhole-project. strict raises NearPlaneError on
    vertices at/behind the near plane; otherwise such vertices are reported
    with their raw (non-positive) depth and dropped later by the rasterizer."""
    posed = pose_vertices(vertices, rot, trans)
    if strict and bool((posed[..., 2] <= near).any()):
        raise NearPlaneError(f"vertex depth <= near plane ({near})")
    return pinhole(posed, cam, near)


def sh_basis(normals: torch.Tensor) -> torch.Tensor:
    """Real spherical harmonics Y_0..Y_8 (bands 0-2) of unit directions, (V,9)."""
    x, y, z = normals[..., 0], normals[..., 1], normals[..., 2]
    return torch.stack([
        torch.full_like(x, SH_C0),
        _SH_C1 * y, _SH_C1 * z, _SH_C1 * x,
        _SH_C2[0] * x * y, _SH_C2[1] * y * z,
        _SH_C2[2] * (3.0 * z * z - 1.0),
        _SH_C2[3] * x * z, _SH_C2[4] * (x * x - y * y),
    ], dim=-1)


def sh_shade(normals: torch.Tensor, albedo: torch.Tensor, gamma: torch.Tensor,
             check_unit: bool = False) -> torch.Tensor:
    """Per-vertex shaded color albedo * sum_k gamma_k Y_k(n), clamped to [0,1]."""
    if check_unit:
        norms = normals.norm(dim=-1)
        if bool((norms - 1.0).abs().max() > 1e-3):
            raise ValueError("normals must be unit length within 1e-3")
    irr = sh_basis(normals) @ gamma
    return (albedo * irr.unsqueeze(-1)).clamp(0.0, 1.0)


def vertex_normals(vertices: torch.Tensor, triangles: torch.Tensor) -> torch.Tensor:
    """Area-weighted average of face normals per vertex, renormalized."""
    tri = torch.as_tensor(triangles, dtype=torch.long)
    p = vertices[tri]
    fn = torch.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], dim=-1)
    vn = torch.zeros_like(vertices)
    vn = vn.index_add(0, tri.reshape(-1), fn.repeat_interleave(3, dim=0))
    return vn / (vn.norm(dim=-1, keepdim=True) + 1e-12)


def _cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _edge_dist_sq(p, a, b):
    """Squared distance from points p to segments (a, b)."""
    ab = b - a
    ap = p - a
    t = ((ap * ab).sum(-1) / ((ab * ab).sum(-1) + 1e-12)).clamp(0.0, 1.0)
    d = ap - t.unsqueeze(-1) * ab
    return (d * d).sum(-1)


def rasterize_soft(vertices2d: torch.Tensor, depths: torch.Tensor,
                   triangles: torch.Tensor, colors: torch.Tensor,
                   image_size, settings: Optional[RasterSettings] = None):
    """Soft-rasterize; returns (image (H,W,3), mask (H,W), depth (H,W)).

    Triangles with any vertex at/behind the near plane or with (near-)zero
    area contribute nothing. Output is composited over a constant background.
    """
    st = settings or RasterSettings()
    h, w = image_size
    dtype = vertices2d.dtype
    tau = st.resolved_tau(w)
    band = st.band_sigmas * tau + st.ramp_width
    tri = torch.as_tensor(triangles, dtype=torch.long)
    if tri.numel() == 0:
        raise ValueError("triangle list is empty")

    txy = vertices2d[tri]                      # (T,3,2)
    tz = depths[tri]                           # (T,3)
    area2 = _cross2(txy[:, 1] - txy[:, 0], txy[:, 2] - txy[:, 0])
    valid = (area2.abs() > 1e-10) & (tz > st.near).all(dim=1)

    bg = torch.as_tensor(st.background, dtype=dtype)
    bg = bg.expand(3) if bg.ndim == 0 else bg
    npix = h * w
    empty_img = torch.ones(npix, 3, dtype=dtype) * bg
    if not bool(valid.any()):
        return (empty_img.view(h, w, 3), torch.zeros(h, w, dtype=dtype),
                torch.full((h, w), st.depth_fill, dtype=dtype))

    # candidate (triangle, pixel) pairs from bounding boxes dilated by the band
    with torch.no_grad():
        dil = math.ceil(band) + 1
        x0 = (txy[..., 0].min(1).values - dil).floor().clamp(0, w - 1).long()
        x1 = (txy[..., 0].max(1).values + dil).ceil().clamp(0, w - 1).long()
        y0 = (txy[..., 1].min(1).values - dil).floor().clamp(0, h - 1).long()
        y1 = (txy[..., 1].max(1).values + dil).ceil().clamp(0, h - 1).long()
        # triangles fully outside the frame produce empty boxes via clamping
        outside = (txy[..., 0].max(1).values < -dil) | (txy[..., 0].min(1).values > w - 1 + dil) \
            | (txy[..., 1].max(1).values < -dil) | (txy[..., 1].min(1).values > h - 1 + dil)
        nx = torch.where(valid & ~outside, x1 - x0 + 1, torch.zeros_like(x0))
        ny = torch.where(valid & ~outside, y1 - y0 + 1, torch.zeros_like(y0))
        counts = nx * ny
        total = int(counts.sum())
        if total == 0:
            return (empty_img.view(h, w, 3), torch.zeros(h, w, dtype=dtype),
                    torch.full((h, w), st.depth_fill, dtype=dtype))
        pid_tri = torch.repeat_interleave(torch.arange(len(tri)), counts)
        start = torch.cumsum(counts, 0) - counts
        k = torch.arange(total) - start[pid_tri]
        px = x0[pid_tri] + k % nx[pid_tri]
        py = y0[pid_tri] + k // nx[pid_tri]
        pix = py * w + px

    p = torch.stack([px.to(dtype), py.to(dtype)], dim=-1)
    a, b, c = txy[pid_tri, 0], txy[pid_tri, 1], txy[pid_tri, 2]
    a2 = area2[pid_tri]
    e0 = _cross2(b - a, p - a)
    e1 = _cross2(c - b, p - b)
    e2 = _cross2(a - c, p - c)
    s = torch.sign(a2)
    inside = (e0 * s >= 0) & (e1 * s >= 0) & (e2 * s >= 0)
    # barycentric color (unclamped -> smooth extrapolation inside the band,
    # then clamped to the valid color range); depth interpolation clamps the
    # barycentrics so barely-covering candidates report a boundary depth
    # instead of an arbitrary plane extrapolation
    w_a, w_b, w_c = e1 / a2, e2 / a2, e0 / a2
    bary = torch.stack([w_a, w_b, w_c], dim=-1)
    bary_cl = bary.clamp(0.0, 1.0)
    bary_cl = bary_cl / (bary_cl.sum(-1, keepdim=True) + 1e-12)
    z_pair = (bary_cl * tz[pid_tri]).sum(-1)
    col = colors[tri]
    c_pair = (bary.unsqueeze(-1) * col[pid_tri]).sum(-2).clamp(0.0, 1.0)

    q = torch.minimum(torch.minimum(_edge_dist_sq(p, a, b), _edge_dist_sq(p, b, c)),
                      _edge_dist_sq(p, c, a))
    dist = torch.sqrt(q.clamp_min(1e-16))
    d = torch.where(inside, dist, -dist)
    cover = torch.sigmoid(d / tau) * ((d + band) / st.ramp_width).clamp(0.0, 1.0)
    cover = cover.clamp(max=1.0 - 1e-7)

    keep = cover > 0
    cover, z_pair, c_pair, pix = cover[keep], z_pair[keep], c_pair[keep], pix[keep]
    if cover.numel() == 0:
        return (empty_img.view(h, w, 3), torch.zeros(h, w, dtype=dtype),
                torch.full((h, w), st.depth_fill, dtype=dtype))

    def _group_sort(key):
        # lexicographic stable sort by (pixel, key); returns perm and the
        # per-element index of its pixel-segment start
        ord1 = torch.argsort(key, stable=True)
        ord2 = torch.argsort(pix[ord1], stable=True)
        perm = ord1[ord2]
        pk = pix[perm]
        idx = torch.arange(len(pk))
        fresh = torch.ones_like(pk, dtype=torch.bool)
        fresh[1:] = pk[1:] != pk[:-1]
        seg_start = torch.cummax(torch.where(fresh, idx, torch.zeros_like(idx)), 0).values
        return perm, seg_start

    # per-pixel nearest depth, then blend contribution per candidate
    perm, seg_start = _group_sort(z_pair.detach())
    cover, z_pair, c_pair, pix = cover[perm], z_pair[perm], c_pair[perm], pix[perm]
    z_min = z_pair[seg_start]
    nearness = torch.exp((z_min - z_pair) / st.depth_temp)
    score = cover * nearness

    if st.top_k is not None:
        # keep the K strongest contributors per pixel; selection by raw depth
        # would favor barely-covering band candidates over the visible surface
        perm, seg_start = _group_sort(-score.detach())
        rank = torch.arange(len(pix)) - seg_start
        sel = perm[rank < st.top_k]
        cover, z_pair, c_pair, pix, score = \
            cover[sel], z_pair[sel], c_pair[sel], pix[sel], score[sel]

    zeros = torch.zeros(npix, dtype=dtype)
    sum_score = zeros.index_add(0, pix, score)
    num_col = torch.zeros(npix, 3, dtype=dtype).index_add(0, pix, score.unsqueeze(-1) * c_pair)
    num_z = zeros.index_add(0, pix, score * z_pair)
    log_miss = zeros.index_add(0, pix, torch.log1p(-cover))
    bg_mass = torch.exp(log_miss)

    denom = sum_score + bg_mass
    image = (num_col + bg_mass.unsqueeze(-1) * bg) / denom.unsqueeze(-1)
    mask = sum_score / denom
    depth = (num_z + bg_mass * st.depth_fill) / denom
    return image.view(h, w, 3), mask.view(h, w), depth.view(h, w)


def render(model: MorphableModel, c: FaceCoefficients, cam: CameraIntrinsics,
           settings: Optional[RasterSettings] = None, strict: bool = False) -> RenderOutput:
    """Full composition: blend mesh, pose, shade, project, soft-rasterize.

    landmarks2d are the projected landmark vertices (no occlusion test).
    """
    st = settings or RasterSettings()
    vertices, albedo = instantiate_mesh(model, c)
    posed = pose_vertices(vertices, c.rot, c.trans)
    if strict and bool((posed[..., 2] <= st.near).any()):
        raise NearPlaneError(f"vertex depth <= near plane ({st.near})")
    normals = vertex_normals(posed, model.triangles)
    shaded = sh_shade(normals, albedo, c.gamma)
    xy, z = pinhole(posed, cam, near=st.near)
    image, mask, depth = rasterize_soft(xy, z, model.triangles, shaded,
                                        cam.image_size, st)
    lmk = xy[torch.from_numpy(model.landmark_idx)]
    return RenderOutput(image=image, mask=mask, landmarks2d=lmk, depth=depth)


def project_landmarks(model: MorphableModel, c: FaceCoefficients,
                      cam: CameraIntrinsics, near: float = 1e-2) -> torch.Tensor:
    """Rasterizer-free 68x2 landmark projection (the mesh-side half of the
    landmark loss)."""
    vertices, _ = instantiate_mesh(model, c)
    lm = vertices[torch.from_numpy(model.landmark_idx)]
    xy, _ = project(lm, c.rot, c.trans, cam, near=near, strict=False)
    return xy
