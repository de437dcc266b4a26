"""Parametric 3D face model: a small linear morphable head and its coefficients.

The model is a deformed-sphere head with nose/eye/mouth features, exact
left-right mirror symmetry, 68 landmarks in the usual iBUG ordering, and
smooth random orthonormal identity/expression/texture bases. Everything is
generated procedurally from a seed; no scan data is involved.

Conventions: model units are roughly head radii. The head looks along -z
(toward a camera placed at the origin looking down +z), "up" is -y so that
projected images come out upright with image y growing downward.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import ConvexHull

MAGIC = b"BMFM1"
NUM_LANDMARKS = 68

# iBUG-68 left/right mirror permutation (0-indexed).
LANDMARK_MIRROR_PERM = np.array(
    [16, 15, 14, 13, 12, 11, 10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0,
     26, 25, 24, 23, 22, 21, 20, 19, 18, 17,
     27, 28, 29, 30,
     35, 34, 33, 32, 31,
     45, 44, 43, 42, 47, 46,
     39, 38, 37, 36, 41, 40,
     54, 53, 52, 51, 50, 49, 48, 59, 58, 57, 56, 55,
     64, 63, 62, 61, 60, 67, 66, 65], dtype=np.int64)


class ModelError(ValueError):
    """Configuration or consistency error in the morphable model."""


@dataclass
class MorphableModel:
    """Linear face model: mean geometry/albedo plus orthonormal deformation bases.

    Shapes: mean_shape/mean_texture (V,3); id_basis (V,3,K_alpha);
    exp_basis (V,3,K_delta); tex_basis (V,3,K_beta); triangles (T,3) int;
    landmark_idx (68,) int. Basis columns have unit norm after flattening
    to 3V and are mutually orthogonal.
    """

    mean_shape: np.ndarray
    mean_texture: np.ndarray
    id_basis: np.ndarray
    exp_basis: np.ndarray
    tex_basis: np.ndarray
    triangles: np.ndarray
    landmark_idx: np.ndarray

    @property
    def num_vertices(self) -> int:
        return self.mean_shape.shape[0]

    @property
    def num_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def dims(self) -> "CoeffDims":
        return CoeffDims(self.id_basis.shape[2], self.tex_basis.shape[2],
                         self.exp_basis.shape[2])

    def validate(self) -> None:
        v = self.num_vertices
        if self.triangles.min() < 0 or self.triangles.max() >= v:
            raise ModelError("triangle indices out of range")
        if self.landmark_idx.shape != (NUM_LANDMARKS,):
            raise ModelError("need exactly 68 landmark indices")
        if len(np.unique(self.landmark_idx)) != NUM_LANDMARKS:
            raise ModelError("landmark indices must be distinct")
        if self.landmark_idx.min() < 0 or self.landmark_idx.max() >= v:
            raise ModelError("landmark indices out of range")
        if self.mean_texture.min() < 0.0 or self.mean_texture.max() > 1.0:
            raise ModelError("mean_texture must lie in [0,1]")
        for name in ("id_basis", "exp_basis", "tex_basis"):
            b = getattr(self, name)
            flat = b.reshape(3 * v, b.shape[2])
            norms = np.linalg.norm(flat, axis=0)
            if not np.allclose(norms, 1.0, atol=1e-5):
                raise ModelError(f"{name} columns are not unit norm")

    def reference_normals(self) -> np.ndarray:
        """Area-weighted vertex normals of the mean shape (recomputed, not stored)."""
        from .renderer import vertex_normals
        n = vertex_normals(torch.from_numpy(self.mean_shape.astype(np.float64)),
                           torch.from_numpy(self.triangles))
        return n.numpy()

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        save_model(buf, self)
        return buf.getvalue()


@dataclass
class CoeffDims:
    """Per-group coefficient counts; total includes gamma(9)+rot(3)+trans(3)."""

    k_alpha: int = 16
    k_beta: int = 16
    k_delta: int = 8

    @property
    def total(self) -> int:
        return self.k_alpha + self.k_beta + self.k_delta + 9 + 3 + 3


@dataclass
class FaceCoefficients:
    """Coefficient vector regressed per image: (alpha, beta, delta, gamma, rot, trans).

    Fields are torch tensors and may carry a leading batch dimension.
    Rotation is Euler angles (x,y,z) in radians; gamma are the 9 band-0..2
    spherical-harmonics illumination coefficients.
    """

    alpha: torch.Tensor
    beta: torch.Tensor
    delta: torch.Tensor
    gamma: torch.Tensor
    rot: torch.Tensor
    trans: torch.Tensor

    @property
    def dims(self) -> CoeffDims:
        return CoeffDims(self.alpha.shape[-1], self.beta.shape[-1],
                         self.delta.shape[-1])

    def to_vector(self) -> torch.Tensor:
        return torch.cat([self.alpha, self.beta, self.delta,
                          self.gamma, self.rot, self.trans], dim=-1)

    @staticmethod
    def from_vector(vec: torch.Tensor, dims: CoeffDims) -> "FaceCoefficients":
        if vec.shape[-1] != dims.total:
            raise ModelError(
                f"coefficient vector has {vec.shape[-1]} entries, expected {dims.total}")
        ka, kb, kd = dims.k_alpha, dims.k_beta, dims.k_delta
        parts = torch.split(vec, [ka, kb, kd, 9, 3, 3], dim=-1)
        return FaceCoefficients(*parts)

    @staticmethod
    def zeros(dims: CoeffDims, dtype: torch.dtype = torch.float32) -> "FaceCoefficients":
        return FaceCoefficients.from_vector(torch.zeros(dims.total, dtype=dtype), dims)

    def map(self, fn) -> "FaceCoefficients":
        return FaceCoefficients(*(fn(t) for t in
                                  (self.alpha, self.beta, self.delta,
                                   self.gamma, self.rot, self.trans)))

    def detach(self) -> "FaceCoefficients":
        return self.map(lambda t: t.detach())

    def __getitem__(self, i) -> "FaceCoefficients":
        return self.map(lambda t: t[i])

    def validate(self) -> None:
        vec = self.to_vector()
        if not torch.isfinite(vec).all():
            raise ModelError("coefficients contain non-finite values")
        if (self.rot <= -np.pi).any() or (self.rot > np.pi).any():
            raise ModelError("rotation angles must lie in (-pi, pi]")


def wrap_angle(a: torch.Tensor) -> torch.Tensor:
    """Wrap angles into (-pi, pi]."""
    wrapped = torch.atan2(torch.sin(a), torch.cos(a))
    return torch.where(wrapped <= -np.pi, torch.full_like(wrapped, np.pi), wrapped)


def instantiate_mesh(model: MorphableModel, c: FaceCoefficients):
    """Blend the linear model: returns (vertices (V,3), albedo (V,3) clamped to [0,1]).

    Differentiable w.r.t. alpha/delta (vertices) and beta (albedo, before the
    clamp). Raises ModelError on coefficient/basis dimension mismatch.
    """
    md, cd = model.dims, c.dims
    if (md.k_alpha, md.k_beta, md.k_delta) != (cd.k_alpha, cd.k_beta, cd.k_delta):
        raise ModelError(f"coefficient dims {cd} do not match model dims {md}")
    dtype = c.alpha.dtype
    mean_shape = torch.from_numpy(model.mean_shape).to(dtype)
    mean_tex = torch.from_numpy(model.mean_texture).to(dtype)
    id_b = torch.from_numpy(model.id_basis).to(dtype)
    exp_b = torch.from_numpy(model.exp_basis).to(dtype)
    tex_b = torch.from_numpy(model.tex_basis).to(dtype)
    vertices = mean_shape + torch.einsum("vck,k->vc", id_b, c.alpha) \
        + torch.einsum("vck,k->vc", exp_b, c.delta)
    albedo = (mean_tex + torch.einsum("vck,k->vc", tex_b, c.beta)).clamp(0.0, 1.0)
    return vertices, albedo


# ---------------------------------------------------------------------------
# procedural model synthesis
# ---------------------------------------------------------------------------

def _face_direction(az_deg, el_deg):
    """Unit direction on the head sphere: az>0 is +x (screen right), el>0 is up (-y)."""
    az = np.deg2rad(np.asarray(az_deg, dtype=np.float64))
    el = np.deg2rad(np.asarray(el_deg, dtype=np.float64))
    return np.stack([np.cos(el) * np.sin(az), -np.sin(el),
                     -np.cos(el) * np.cos(az)], axis=-1)


def _landmark_directions() -> np.ndarray:
    """68 target directions laid out like the iBUG landmark scheme."""
    az = np.zeros(NUM_LANDMARKS)
    el = np.zeros(NUM_LANDMARKS)
    # jaw 0..16: arc from the left ear line down to the chin and back up
    for i in range(17):
        t = (i - 8) / 8.0
        az[i] = 72.0 * t
        el[i] = -16.0 - 38.0 * (1.0 - abs(t) ** 1.5)
    # brows 17..26 (left block then right block)
    brow_az = np.array([44.0, 34.0, 24.0, 15.0, 7.0])
    brow_el = np.array([16.0, 21.0, 23.0, 22.0, 19.0])
    az[17:22], el[17:22] = -brow_az, brow_el
    az[22:27], el[22:27] = brow_az[::-1], brow_el[::-1]
    # nose bridge 27..30 and base 31..35
    az[27:31] = 0.0
    el[27:31] = [12.0, 5.0, -2.0, -9.0]
    az[31:36] = [-11.0, -6.0, 0.0, 6.0, 11.0]
    el[31:36] = [-13.0, -14.5, -15.0, -14.5, -13.0]
    # eyes 36..47: hexagons around (+-28, +8); 36/45 outer, 39/42 inner corners
    hex_az = np.array([-9.0, -4.5, 2.5, 7.0, 2.5, -4.5])
    hex_el = np.array([0.0, 3.2, 3.2, 0.0, -3.2, -3.2])
    az[36:42], el[36:42] = -28.0 + hex_az, 8.0 + hex_el
    az[42:48] = 28.0 + np.array([-7.0, -2.5, 4.5, 9.0, 4.5, -2.5])
    el[42:48] = 8.0 + np.array([0.0, 3.2, 3.2, 0.0, -3.2, -3.2])
    # outer mouth 48..59: ellipse around (0, -30)
    ang = np.deg2rad(np.array([180, 150, 115, 90, 65, 30, 0, -30, -65, -90, -115, -150], dtype=np.float64))
    az[48:60] = 14.0 * np.cos(ang)
    el[48:60] = -30.0 + 5.5 * np.sin(ang)
    # inner mouth 60..67
    ang_in = np.deg2rad(np.array([180, 125, 90, 55, 0, -55, -90, -125], dtype=np.float64))
    az[60:68] = 8.0 * np.cos(ang_in)
    el[60:68] = -30.0 + 3.0 * np.sin(ang_in)
    return _face_direction(az, el)


def _radial_profile(d: np.ndarray) -> np.ndarray:
    """Radial head profile over unit directions d (V,3); exactly even in x."""

    def bump(center, width, amp):
        c = center / np.linalg.norm(center)
        ang = np.arccos(np.clip(d @ c, -1.0, 1.0))
        return amp * np.exp(-0.5 * (ang / width) ** 2)

    r = np.ones(len(d))
    r += bump(_face_direction(0.0, -15.0), 0.22, 0.24)        # nose
    r += bump(_face_direction(0.0, -52.0), 0.30, 0.10)        # chin
    r += bump(_face_direction(0.0, 20.0), 0.55, 0.06)         # brow/forehead
    for s in (-1.0, 1.0):
        r -= bump(_face_direction(s * 28.0, 8.0), 0.17, 0.085)   # eye sockets
        r += bump(_face_direction(s * 55.0, -18.0), 0.35, 0.05)  # cheeks
    r -= bump(_face_direction(0.0, -30.0), 0.10, 0.03)        # mouth crease
    return r


def _texture_field(d: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Skin-tone albedo with darker brows/eyes/lips; exactly even in x."""
    tex = np.empty((len(d), 3))
    tex[:] = (0.74, 0.54, 0.44)

    def mask(center, width):
        c = center / np.linalg.norm(center)
        ang = np.arccos(np.clip(d @ c, -1.0, 1.0))
        return np.exp(-0.5 * (ang / width) ** 2)

    lips = mask(_face_direction(0.0, -30.0), 0.13)
    tex += lips[:, None] * np.array([0.02, -0.22, -0.18])
    for s in (-1.0, 1.0):
        eye = mask(_face_direction(s * 28.0, 8.0), 0.08)
        tex -= eye[:, None] * np.array([0.42, 0.32, 0.22])
        brow = mask(_face_direction(s * 25.0, 20.0), 0.10)
        tex -= brow[:, None] * np.array([0.30, 0.28, 0.24])
    # hairline: darken the back/top of the head
    back = mask(-_face_direction(0.0, -35.0), 0.75)
    tex -= back[:, None] * np.array([0.38, 0.33, 0.28])
    # mild smooth mottle, mirrored to keep symmetry exact
    xs = np.abs(d[:, 0:1])
    mottle = 0.05 * np.sin(5.0 * xs + 2.0 * d[:, 1:2]) * np.cos(3.0 * d[:, 2:3])
    tex += mottle * rng.uniform(0.5, 1.0)
    return np.clip(tex, 0.02, 0.98)


def _smooth_orthonormal_basis(d: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """K smooth random displacement fields over directions d, orthonormalized."""
    v = len(d)
    m = 14
    centers = rng.normal(size=(m, 3))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    kern = np.exp(-0.5 * (np.arccos(np.clip(d @ centers.T, -1, 1)) / 0.55) ** 2)
    cols = []
    for _ in range(k):
        w = rng.normal(size=(m, 3))
        cols.append((kern @ w).reshape(3 * v))
    mat = np.stack(cols, axis=1)
    q, r = np.linalg.qr(mat)
    q *= np.sign(np.diag(r))[None, :]    # fix QR sign ambiguity
    return q.reshape(v, 3, k)


def make_synthetic_model(seed: int, num_vertices: int = 512, k_alpha: int = 16,
                         k_beta: int = 16, k_delta: int = 8) -> MorphableModel:
    """Deterministic head-like morphable model.

    The mean mesh is a deformed sphere (nose, eye sockets, chin, cheeks) that
    is exactly mirror-symmetric in x, triangulated watertight via the convex
    hull of its unit directions. Landmarks follow the iBUG-68 layout so
    LANDMARK_MIRROR_PERM applies.
    """
    if num_vertices < NUM_LANDMARKS:
        raise ModelError(f"need at least {NUM_LANDMARKS} vertices, got {num_vertices}")
    if min(k_alpha, k_beta, k_delta) < 1:
        raise ModelError("all basis sizes must be >= 1")
    rng = np.random.default_rng(seed)

    # symmetric point set: ring on the x=0 meridian plus mirrored hemisphere
    # spirals; the ring is densified over the frontal arc so centerline
    # landmarks (nose bridge, chin, lips) each find their own vertex
    el_coarse = np.arange(-180.0, 180.0, 12.0)
    el_fine = np.linspace(-58.0, 16.0, 20)
    el_ring = [e for e in el_coarse if np.abs(el_fine - e).min() > 3.0] + list(el_fine)
    el_ring = np.sort(np.array(el_ring))
    ring = _face_direction(np.zeros_like(el_ring), el_ring)
    n_ring = len(ring)
    if num_vertices < n_ring + 2 * NUM_LANDMARKS:
        raise ModelError(f"need at least {n_ring + 2 * NUM_LANDMARKS} vertices")
    if (num_vertices - n_ring) % 2 != 0:
        extra = _face_direction(np.zeros(1), np.array([174.0]))
        ring = np.concatenate([ring, extra], axis=0)
        n_ring += 1
    n_half = (num_vertices - n_ring) // 2
    golden = np.pi * (3.0 - np.sqrt(5.0))
    i = np.arange(n_half)
    # x in (margin, 1): uniform-area spiral on the open half sphere
    x = (i + 0.5) / n_half
    margin = 0.7 / np.sqrt(num_vertices)
    x = margin + (1.0 - margin - 1e-3) * x
    rad = np.sqrt(1.0 - x * x)
    phi = golden * i
    half = np.stack([x, rad * np.cos(phi), rad * np.sin(phi)], axis=1)
    mirrored = half * np.array([-1.0, 1.0, 1.0])
    directions = np.concatenate([half, mirrored, ring], axis=0)

    hull = ConvexHull(directions)
    triangles = hull.simplices.astype(np.int64)
    # orient all faces outward for a consistent winding
    tri_pts = directions[triangles]
    normals = np.cross(tri_pts[:, 1] - tri_pts[:, 0], tri_pts[:, 2] - tri_pts[:, 0])
    centroids = tri_pts.mean(axis=1)
    flip = (normals * centroids).sum(axis=1) < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]

    radius = _radial_profile(directions)
    verts = directions * radius[:, None]
    verts *= np.array([0.78, 1.0, 0.92])

    # landmarks: nearest vertex per target direction, symmetrized through the
    # vertex mirror map so left/right pairs are exact mirrors
    mirror_map = np.concatenate([np.arange(n_half) + n_half, np.arange(n_half),
                                 2 * n_half + np.arange(n_ring)])
    targets = _landmark_directions()
    perm = LANDMARK_MIRROR_PERM
    landmark_idx = np.full(NUM_LANDMARKS, -1, dtype=np.int64)
    used = set()
    on_ring = np.abs(directions[:, 0]) <= 1e-12

    def nearest(target, centerline):
        order = np.argsort(-(directions @ target))
        for vi in order:
            vi = int(vi)
            if vi in used or on_ring[vi] != centerline:
                continue
            if not centerline and int(mirror_map[vi]) in used:
                continue
            return vi
        raise ModelError("ran out of vertices while placing landmarks")

    for j in range(NUM_LANDMARKS):
        if landmark_idx[j] >= 0:
            continue
        if perm[j] == j:
            vi = nearest(targets[j], centerline=True)
            landmark_idx[j] = vi
            used.add(vi)
        else:
            vi = nearest(targets[j], centerline=False)
            vm = int(mirror_map[vi])
            landmark_idx[j], landmark_idx[perm[j]] = vi, vm
            used.update((vi, vm))

    model = MorphableModel(
        mean_shape=verts.astype(np.float32),
        mean_texture=_texture_field(directions, rng).astype(np.float32),
        id_basis=_smooth_orthonormal_basis(directions, k_alpha, rng).astype(np.float32),
        exp_basis=_smooth_orthonormal_basis(directions, k_delta, rng).astype(np.float32),
        tex_basis=_smooth_orthonormal_basis(directions, k_beta, rng).astype(np.float32),
        triangles=triangles,
        landmark_idx=landmark_idx,
    )
    model.validate()
    return model


# ---------------------------------------------------------------------------
# serialization: magic, little-endian u32 dims, float32 little-endian arrays
# ---------------------------------------------------------------------------

def save_model(fp, model: MorphableModel) -> None:
    """Write the BMFM1 format: magic, u32 dims (V,T,Ka,Kb,Kd), f32 arrays in field order."""
    close = False
    if isinstance(fp, (str, bytes)) or hasattr(fp, "__fspath__"):
        fp, close = open(fp, "wb"), True
    try:
        d = model.dims
        fp.write(MAGIC)
        fp.write(struct.pack("<5I", model.num_vertices, model.num_triangles,
                             d.k_alpha, d.k_beta, d.k_delta))
        for field in (model.mean_shape, model.mean_texture, model.id_basis,
                      model.exp_basis, model.tex_basis, model.triangles,
                      model.landmark_idx):
            fp.write(np.ascontiguousarray(field, dtype="<f4").tobytes())
    finally:
        if close:
            fp.close()


def load_model(fp) -> MorphableModel:
    close = False
    if isinstance(fp, (str, bytes)) or hasattr(fp, "__fspath__"):
        fp, close = open(fp, "rb"), True
    try:
        magic = fp.read(len(MAGIC))
        if magic != MAGIC:
            raise ModelError(f"bad magic {magic!r}, expected {MAGIC!r}")
        v, t, ka, kb, kd = struct.unpack("<5I", fp.read(20))

        def arr(*shape):
            n = int(np.prod(shape))
            raw = np.frombuffer(fp.read(4 * n), dtype="<f4")
            if raw.size != n:
                raise ModelError("truncated model file")
            return raw.reshape(shape).copy()

        model = MorphableModel(
            mean_shape=arr(v, 3), mean_texture=arr(v, 3),
            id_basis=arr(v, 3, ka), exp_basis=arr(v, 3, kd), tex_basis=arr(v, 3, kb),
            triangles=arr(t, 3).astype(np.int64),
            landmark_idx=arr(NUM_LANDMARKS).astype(np.int64),
        )
        return model
    finally:
        if close:
            fp.close()
