"""Parametric blendshape face model, SH shading, pinhole projection and a
hard-coverage differentiable rasterizer.

Conventions
-----------
* Model space is y-up with the face looking down +z (FLAME convention).
* Camera space follows OpenCV: x right, y down, z forward.  The default
  extrinsic rotation is a half turn about x, which maps model space into it.
* Pixel coordinates are continuous; the centre of pixel ``(i, j)`` sits at
  ``(j + 0.5, i + 0.5)``.
* UV coordinates: ``u`` runs along image columns, ``v`` along rows, both in
  ``[0, 1]`` with ``v = 0`` at the top row of a texture.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

N_JOINTS = 3  # root, neck, jaw
JOINT_PARENTS = (-1, 0, 1)

LABEL_OTHER, LABEL_LOWER, LABEL_MOUTH = 0, 1, 2


class ConfigurationError(ValueError):
    """Raised when parameters, assets or files have inconsistent dimensions."""


def _t(x, dtype=None, device=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.get_default_dtype(), device=device)


# ---------------------------------------------------------------------------
# Data types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FaceModelAssets:
    """Immutable model definition: template, bases, skinning and UV atlas."""

    template_vertices: np.ndarray  # V x 3
    faces: np.ndarray  # F x 3
    shape_basis: np.ndarray  # V x 3 x Ns
    expression_basis: np.ndarray  # V x 3 x Ne
    skinning_weights: np.ndarray  # V x J
    joint_regressor: np.ndarray  # J x V
    uv_coords: np.ndarray  # V x 2
    texture_mean: np.ndarray  # V x 3
    texture_basis: np.ndarray  # V x 3 x Nt
    landmark_indices: np.ndarray  # L
    region_labels: np.ndarray | None = None  # Hl x Wl, values in {0, 1, 2}
    jaw_range: tuple[float, float] = (0.0, 0.5)

    def __post_init__(self):
        self.validate()

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def n_expression(self) -> int:
        return self.expression_basis.shape[2]

    @property
    def n_texture(self) -> int:
        return self.texture_basis.shape[2]

    def validate(self):
        V = self.template_vertices.shape[0]
        if self.template_vertices.shape != (V, 3):
            raise ConfigurationError("template_vertices must be V x 3")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ConfigurationError("faces must be F x 3")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= V):
            raise ConfigurationError("face index out of range")
        for name in ("shape_basis", "expression_basis", "texture_basis"):
            arr = getattr(self, name)
            if arr.ndim != 3 or arr.shape[:2] != (V, 3):
                raise ConfigurationError(f"{name} must be V x 3 x N, got {arr.shape}")
        if self.skinning_weights.shape != (V, N_JOINTS):
            raise ConfigurationError("skinning_weights must be V x 3")
        if self.joint_regressor.shape != (N_JOINTS, V):
            raise ConfigurationError("joint_regressor must be 3 x V")
        if self.uv_coords.shape != (V, 2):
            raise ConfigurationError("uv_coords must be V x 2")
        if self.uv_coords.min() < 0 or self.uv_coords.max() > 1:
            raise ConfigurationError("uv_coords must lie in [0, 1]^2")
        if self.texture_mean.shape != (V, 3):
            raise ConfigurationError("texture_mean must be V x 3")
        lm = self.landmark_indices
        if lm.ndim != 1 or (lm.size and (lm.min() < 0 or lm.max() >= V)):
            raise ConfigurationError("invalid landmark_indices")
        if self.region_labels is not None and self.region_labels.ndim != 2:
            raise ConfigurationError("region_labels must be a 2-D label image")

    def save(self, path):
        """Write the assets to an ``.npz`` container with named arrays."""
        arrays = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
                  if f.name not in ("region_labels", "jaw_range")}
        if self.region_labels is not None:
            arrays["region_labels"] = self.region_labels
        arrays["jaw_range"] = np.asarray(self.jaw_range, dtype=np.float64)
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "FaceModelAssets":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"asset file not found: {path}")
        with np.load(path) as data:
            missing = {"template_vertices", "faces", "shape_basis", "expression_basis",
                       "skinning_weights", "joint_regressor", "uv_coords", "texture_mean",
                       "texture_basis", "landmark_indices"} - set(data.files)
            if missing:
                raise ConfigurationError(f"asset file {path} lacks arrays: {sorted(missing)}")
            kw = {k: data[k] for k in data.files if k != "jaw_range"}
            if "jaw_range" in data.files:
                kw["jaw_range"] = tuple(float(x) for x in data["jaw_range"])
        kw["faces"] = kw["faces"].astype(np.int64)
        kw["landmark_indices"] = kw["landmark_indices"].astype(np.int64)
        return cls(**kw)


@dataclass
class Camera:
    """Pinhole camera: intrinsics ``(fx, fy, cx, cy)`` and axis-angle extrinsics."""

    intrinsics: torch.Tensor  # (4,) fx, fy, cx, cy
    rotation: torch.Tensor  # (3,) axis-angle, model -> camera
    translation: torch.Tensor  # (3,)

    @classmethod
    def default(cls, image_size: int, distance: float = 3.0, focal_scale: float = 2.5,
                dtype=torch.float64) -> "Camera":
        f = focal_scale * image_size / 2.0
        c = image_size / 2.0
        return cls(torch.tensor([f, f, c, c], dtype=dtype),
                   torch.tensor([np.pi, 0.0, 0.0], dtype=dtype),
                   torch.tensor([0.0, 0.0, distance], dtype=dtype))

    @property
    def K(self) -> torch.Tensor:
        fx, fy, cx, cy = self.intrinsics
        z, o = torch.zeros_like(fx), torch.ones_like(fx)
        return torch.stack([torch.stack([fx, z, cx]), torch.stack([z, fy, cy]), torch.stack([z, z, o])])

    def cropped(self, box, resolution: int) -> "Camera":
        """Camera whose image plane is the crop ``box`` resampled to ``resolution``."""
        x0, y0, x1, y1 = box
        sx = resolution / (x1 - x0)
        sy = resolution / (y1 - y0)
        fx, fy, cx, cy = self.intrinsics
        intr = torch.stack([fx * sx, fy * sy, (cx - x0) * sx, (cy - y0) * sy])
        return Camera(intr, self.rotation, self.translation)

    def detach(self) -> "Camera":
        return Camera(self.intrinsics.detach().clone(), self.rotation.detach().clone(),
                      self.translation.detach().clone())

    def to(self, dtype) -> "Camera":
        return Camera(self.intrinsics.to(dtype), self.rotation.to(dtype), self.translation.to(dtype))


@dataclass
class FaceParams:
    """Per-frame parametric state.

    ``jaw`` is a single opening angle in radians; ``neck`` and
    ``global_rotation`` are axis-angle vectors.
    """

    shape: torch.Tensor
    expression: torch.Tensor
    jaw: torch.Tensor  # (1,)
    neck: torch.Tensor  # (3,)
    global_rotation: torch.Tensor  # (3,)
    global_translation: torch.Tensor  # (3,)
    texture: torch.Tensor
    lighting: torch.Tensor  # (9,)
    camera: Camera

    POSE_FIELDS = ("jaw", "neck", "global_rotation", "global_translation")
    TENSOR_FIELDS = ("shape", "expression", "jaw", "neck", "global_rotation",
                     "global_translation", "texture", "lighting")

    @classmethod
    def neutral(cls, assets: FaceModelAssets, camera: Camera | None = None,
                image_size: int = 64, dtype=torch.float64) -> "FaceParams":
        lighting = torch.zeros(9, dtype=dtype)
        lighting[0] = 1.0 / SH_C0
        return cls(
            shape=torch.zeros(assets.n_shape, dtype=dtype),
            expression=torch.zeros(assets.n_expression, dtype=dtype),
            jaw=torch.zeros(1, dtype=dtype),
            neck=torch.zeros(3, dtype=dtype),
            global_rotation=torch.zeros(3, dtype=dtype),
            global_translation=torch.zeros(3, dtype=dtype),
            texture=torch.zeros(assets.n_texture, dtype=dtype),
            lighting=lighting,
            camera=camera if camera is not None else Camera.default(image_size, dtype=dtype),
        )

    @property
    def pose(self) -> torch.Tensor:
        return torch.cat([getattr(self, k) for k in self.POSE_FIELDS])

    def replace(self, **kw) -> "FaceParams":
        return dataclasses.replace(self, **kw)

    def detach(self) -> "FaceParams":
        kw = {k: getattr(self, k).detach().clone() for k in self.TENSOR_FIELDS}
        return FaceParams(camera=self.camera.detach(), **kw)

    def to(self, dtype) -> "FaceParams":
        kw = {k: getattr(self, k).to(dtype) for k in self.TENSOR_FIELDS}
        return FaceParams(camera=self.camera.to(dtype), **kw)

    def validate(self, assets: FaceModelAssets | None = None):
        if self.lighting.numel() != 9:
            raise ConfigurationError("lighting must have exactly 9 SH coefficients")
        for k in self.TENSOR_FIELDS:
            if not torch.isfinite(getattr(self, k)).all():
                raise ConfigurationError(f"non-finite values in {k}")
        if assets is not None:
            if self.shape.numel() != assets.n_shape:
                raise ConfigurationError(f"shape has {self.shape.numel()} coefficients, assets expect {assets.n_shape}")
            if self.expression.numel() != assets.n_expression:
                raise ConfigurationError(
                    f"expression has {self.expression.numel()} coefficients, assets expect {assets.n_expression}")
            if self.texture.numel() != assets.n_texture:
                raise ConfigurationError("texture coefficient count mismatch")
            lo, hi = assets.jaw_range
            jaw = float(self.jaw.detach().reshape(-1)[0])
            if not lo - 1e-9 <= jaw <= hi + 1e-9:
                raise ConfigurationError(f"jaw angle {jaw} outside [{lo}, {hi}]")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k).detach().cpu().numpy().tolist() for k in self.TENSOR_FIELDS}
        d["camera"] = {
            "intrinsics": self.camera.intrinsics.detach().cpu().numpy().tolist(),
            "rotation": self.camera.rotation.detach().cpu().numpy().tolist(),
            "translation": self.camera.translation.detach().cpu().numpy().tolist(),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict, dtype=torch.float64) -> "FaceParams":
        cam = d["camera"]
        camera = Camera(*(torch.tensor(cam[k], dtype=dtype) for k in ("intrinsics", "rotation", "translation")))
        return cls(camera=camera, **{k: torch.tensor(d[k], dtype=dtype) for k in cls.TENSOR_FIELDS})


@dataclass
class MeshBundle:
    vertices: torch.Tensor  # V x 3, camera space
    faces: torch.Tensor  # F x 3 long
    normals: torch.Tensor  # V x 3 unit
    uv_coords: torch.Tensor  # V x 2


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def rotation_matrix(axis_angle: torch.Tensor) -> torch.Tensor:
    """Rodrigues rotation via the matrix exponential of the skew matrix."""
    x, y, z = axis_angle.unbind(-1)
    o = torch.zeros_like(x)
    skew = torch.stack([torch.stack([o, -z, y], -1),
                        torch.stack([z, o, -x], -1),
                        torch.stack([-y, x, o], -1)], -2)
    return torch.linalg.matrix_exp(skew)


def _rigid(R: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    top = torch.cat([R, t.reshape(3, 1)], dim=1)
    bottom = torch.tensor([[0.0, 0.0, 0.0, 1.0]], dtype=R.dtype)
    return torch.cat([top, bottom], dim=0)


def joint_transforms(joints: torch.Tensor, params: FaceParams) -> torch.Tensor:
    """World transforms (J x 4 x 4) of the root/neck/jaw chain in model space."""
    dtype = joints.dtype
    jaw = params.jaw.to(dtype).reshape(-1)[0]
    local_rots = [
        rotation_matrix(params.global_rotation.to(dtype)),
        rotation_matrix(params.neck.to(dtype)),
        rotation_matrix(torch.stack([jaw, torch.zeros_like(jaw), torch.zeros_like(jaw)])),
    ]
    world = []
    for k in range(N_JOINTS):
        R = local_rots[k]
        # rotate about the joint's rest location
        local = _rigid(R, joints[k] - R @ joints[k])
        if k == 0:
            local = _rigid(torch.eye(3, dtype=dtype), params.global_translation.to(dtype)) @ local
            world.append(local)
        else:
            world.append(world[JOINT_PARENTS[k]] @ local)
    return torch.stack(world)


def model_vertices(params: FaceParams, assets: FaceModelAssets, dtype=None) -> torch.Tensor:
    """Posed vertices in model space (before the camera extrinsics)."""
    dtype = dtype or params.expression.dtype
    n_s, n_e = params.shape.numel(), params.expression.numel()
    if n_s != assets.n_shape or n_e != assets.n_expression:
        raise ConfigurationError(
            f"parameter dims (shape={n_s}, expression={n_e}) do not match assets "
            f"(shape={assets.n_shape}, expression={assets.n_expression})")
    template = _t(assets.template_vertices, dtype)
    shaped = template + _t(assets.shape_basis, dtype) @ params.shape.to(dtype)
    rest = shaped + _t(assets.expression_basis, dtype) @ params.expression.to(dtype)
    # joints come from the identity shape only, as in FLAME
    joints = _t(assets.joint_regressor, dtype) @ shaped
    G = joint_transforms(joints, params)
    W = _t(assets.skinning_weights, dtype)
    blended = torch.einsum("vj,jab->vab", W, G)
    return torch.einsum("vab,vb->va", blended[:, :3, :3], rest) + blended[:, :3, 3]


def to_camera(points: torch.Tensor, camera: Camera) -> torch.Tensor:
    R = rotation_matrix(camera.rotation.to(points.dtype))
    return points @ R.T + camera.translation.to(points.dtype)


def vertex_normals(vertices: torch.Tensor, faces: torch.Tensor) -> torch.Tensor:
    """Area-weighted unit vertex normals."""
    v0, v1, v2 = (vertices[faces[:, k]] for k in range(3))
    fn = torch.cross(v1 - v0, v2 - v0, dim=-1)
    vn = torch.zeros_like(vertices).index_add(0, faces.reshape(-1), fn.repeat_interleave(3, dim=0))
    norm = vn.norm(dim=-1, keepdim=True)
    return vn / norm.clamp_min(1e-12)


def compute_vertices(params: FaceParams, assets: FaceModelAssets) -> MeshBundle:
    """Evaluate the face model and move the result into camera space."""
    verts = to_camera(model_vertices(params, assets), params.camera)
    faces = torch.as_tensor(assets.faces, dtype=torch.long)
    return MeshBundle(verts, faces, vertex_normals(verts, faces), _t(assets.uv_coords, verts.dtype))


def project(mesh_or_points, camera: Camera | None = None, eps: float = 1e-8):
    """Perspective projection of camera-space points.

    Returns ``(pixels, valid)``; points with ``z <= 0`` are flagged invalid
    rather than raising.  When a :class:`MeshBundle` is given its vertices are
    already in camera space, so only the intrinsics of ``camera`` are used;
    bare points are treated as camera-space as well.
    """
    pts = mesh_or_points.vertices if isinstance(mesh_or_points, MeshBundle) else mesh_or_points
    if camera is None:
        raise ConfigurationError("project needs a camera for its intrinsics")
    fx, fy, cx, cy = camera.intrinsics.to(pts.dtype)
    z = pts[..., 2]
    valid = z > eps
    zs = torch.where(valid, z, torch.ones_like(z))
    u = fx * pts[..., 0] / zs + cx
    v = fy * pts[..., 1] / zs + cy
    return torch.stack([u, v], dim=-1), valid


def project_model_points(points: torch.Tensor, camera: Camera):
    """Apply the extrinsics then project."""
    return project(to_camera(points, camera), camera)


def unproject(pixels: torch.Tensor, camera: Camera) -> torch.Tensor:
    """Unit ray directions (camera space) through the given pixel coordinates."""
    fx, fy, cx, cy = camera.intrinsics.to(pixels.dtype)
    d = torch.stack([(pixels[..., 0] - cx) / fx, (pixels[..., 1] - cy) / fy,
                     torch.ones_like(pixels[..., 0])], dim=-1)
    return d / d.norm(dim=-1, keepdim=True)


# ---------------------------------------------------------------------------
# Shading
# ---------------------------------------------------------------------------

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = 1.0925484305920792
SH_C3 = 0.31539156525252005
SH_C4 = 0.5462742152960396


def sh_basis(normals: torch.Tensor) -> torch.Tensor:
    """Real spherical-harmonic basis up to degree 2 (9 functions)."""
    x, y, z = normals.unbind(-1)
    return torch.stack([
        torch.full_like(x, SH_C0),
        SH_C1 * y, SH_C1 * z, SH_C1 * x,
        SH_C2 * x * y, SH_C2 * y * z, SH_C3 * (3 * z * z - 1),
        SH_C2 * x * z, SH_C4 * (x * x - y * y),
    ], dim=-1)


def shade_sh(normals: torch.Tensor, albedo: torch.Tensor, lighting: torch.Tensor) -> torch.Tensor:
    if lighting.numel() != 9:
        raise ConfigurationError(f"SH lighting needs 9 coefficients, got {lighting.numel()}")
    irradiance = sh_basis(normals) @ lighting.to(normals.dtype)
    return albedo * irradiance[..., None]


def vertex_albedo(params: FaceParams, assets: FaceModelAssets) -> torch.Tensor:
    dtype = params.texture.dtype
    return _t(assets.texture_mean, dtype) + _t(assets.texture_basis, dtype) @ params.texture


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------


@dataclass
class Raster:
    """Rasterizer output; images are ``H x W x D``."""

    image: torch.Tensor
    coverage: torch.Tensor  # H x W bool
    uv: torch.Tensor  # H x W x 2
    face_ids: torch.Tensor  # H x W long, -1 where uncovered
    bary: torch.Tensor  # H x W x 3 perspective-correct barycentrics


def pixel_centers(height: int, width: int, dtype=torch.float64):
    ys, xs = torch.meshgrid(torch.arange(height, dtype=dtype) + 0.5,
                            torch.arange(width, dtype=dtype) + 0.5, indexing="ij")
    return xs, ys


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


@torch.no_grad()
def rasterize_ids(screen: torch.Tensor, depth: torch.Tensor, faces: torch.Tensor,
                  height: int, width: int) -> torch.Tensor:
    """Nearest covering triangle per pixel centre (``-1`` when none).

    Candidate (triangle, pixel) pairs are enumerated from each triangle's
    pixel-centre bounding box, so the cost scales with covered area.
    """
    ids = torch.full((height * width,), -1, dtype=torch.long)
    if faces.numel() == 0:
        return ids.reshape(height, width)
    tri = screen[faces]  # F x 3 x 2
    tz = depth[faces]
    area = _edge(tri[:, 0, 0], tri[:, 0, 1], tri[:, 1, 0], tri[:, 1, 1], tri[:, 2, 0], tri[:, 2, 1])
    keep = (tz > 1e-8).all(1) & (area.abs() > 1e-12)
    lo, hi = tri.min(1).values, tri.max(1).values
    x_lo = torch.ceil(lo[:, 0] - 0.5).clamp(0, width).long()
    x_hi = torch.floor(hi[:, 0] - 0.5).clamp(-1, width - 1).long()
    y_lo = torch.ceil(lo[:, 1] - 0.5).clamp(0, height).long()
    y_hi = torch.floor(hi[:, 1] - 0.5).clamp(-1, height - 1).long()
    nx = (x_hi - x_lo + 1).clamp_min(0)
    ny = (y_hi - y_lo + 1).clamp_min(0)
    count = torch.where(keep, nx * ny, torch.zeros_like(nx))
    total = int(count.sum())
    if total == 0:
        return ids.reshape(height, width)
    face_rep = torch.repeat_interleave(torch.arange(faces.shape[0]), count)
    offsets = torch.cumsum(count, 0) - count
    k = torch.arange(total) - offsets[face_rep]
    nxr = nx[face_rep]
    jx = x_lo[face_rep] + k % nxr
    jy = y_lo[face_rep] + k // nxr
    px = jx.to(screen.dtype) + 0.5
    py = jy.to(screen.dtype) + 0.5
    t = tri[face_rep]
    ar = area[face_rep]
    w0 = _edge(t[:, 1, 0], t[:, 1, 1], t[:, 2, 0], t[:, 2, 1], px, py) / ar
    w1 = _edge(t[:, 2, 0], t[:, 2, 1], t[:, 0, 0], t[:, 0, 1], px, py) / ar
    w2 = 1.0 - w0 - w1
    inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    z = tz[face_rep]
    inv_z = w0 / z[:, 0] + w1 / z[:, 1] + w2 / z[:, 2]
    pz = 1.0 / inv_z.clamp_min(1e-12)
    pix = (jy * width + jx)[inside]
    pz, fr = pz[inside], face_rep[inside]
    best = torch.full((height * width,), float("inf"), dtype=screen.dtype)
    best = best.scatter_reduce(0, pix, pz, reduce="amin")
    win = pz <= best[pix]
    # ties between triangles sharing an edge resolve to the higher face id
    ids = ids.scatter_reduce(0, pix[win], fr[win], reduce="amax")
    return ids.reshape(height, width)


def rasterize(mesh: MeshBundle, camera: Camera, attributes: torch.Tensor | None,
              resolution) -> Raster:
    """Hard-coverage rasterization with perspective-correct interpolation.

    Gradients flow to ``attributes`` everywhere and to vertex positions for
    pixels interior to a triangle; the silhouette is not differentiable.
    """
    height, width = (resolution, resolution) if isinstance(resolution, int) else resolution
    if height <= 0 or width <= 0:
        raise ConfigurationError("resolution must be positive")
    verts = mesh.vertices
    dtype = verts.dtype
    n_attr = 0 if attributes is None else attributes.shape[-1]
    if verts.numel() == 0 or mesh.faces.numel() == 0:
        z = torch.zeros
        return Raster(z(height, width, n_attr, dtype=dtype), z(height, width, dtype=torch.bool),
                      z(height, width, 2, dtype=dtype), torch.full((height, width), -1, dtype=torch.long),
                      z(height, width, 3, dtype=dtype))
    screen, _ = project(verts, camera)
    depth = verts[:, 2]
    ids = rasterize_ids(screen.detach(), depth.detach(), mesh.faces, height, width)
    coverage = ids >= 0
    flat = ids.reshape(-1)
    pix = torch.nonzero(flat >= 0).reshape(-1)
    fsel = mesh.faces[flat[pix]]  # P x 3
    xs, ys = pixel_centers(height, width, dtype)
    px, py = xs.reshape(-1)[pix], ys.reshape(-1)[pix]
    a, b, c = screen[fsel[:, 0]], screen[fsel[:, 1]], screen[fsel[:, 2]]
    area = _edge(a[:, 0], a[:, 1], b[:, 0], b[:, 1], c[:, 0], c[:, 1])
    w0 = _edge(b[:, 0], b[:, 1], c[:, 0], c[:, 1], px, py) / area
    w1 = _edge(c[:, 0], c[:, 1], a[:, 0], a[:, 1], px, py) / area
    w2 = 1.0 - w0 - w1
    z = depth[fsel]
    pw = torch.stack([w0 / z[:, 0], w1 / z[:, 1], w2 / z[:, 2]], dim=-1)
    pw = pw / pw.sum(-1, keepdim=True)

    def scatter(vals_per_vertex: torch.Tensor) -> torch.Tensor:
        d = vals_per_vertex.shape[-1]
        interp = (pw[..., None] * vals_per_vertex[fsel]).sum(1)
        out = torch.zeros(height * width, d, dtype=interp.dtype)
        out = out.index_put((pix,), interp)
        return out.reshape(height, width, d)

    image = scatter(attributes.to(dtype)) if attributes is not None else torch.zeros(height, width, 0, dtype=dtype)
    uv = scatter(mesh.uv_coords.to(dtype))
    bary = torch.zeros(height * width, 3, dtype=dtype).index_put((pix,), pw).reshape(height, width, 3)
    return Raster(image, coverage, uv, ids, bary)


def sample_image_bilinear(image: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of an ``Ht x Wt x D`` image at UVs (texel centres at
    ``(i + 0.5) / size``, clamped to the border)."""
    Ht, Wt = image.shape[:2]
    x = (uv[..., 0] * Wt - 0.5).clamp(0, Wt - 1)
    y = (uv[..., 1] * Ht - 0.5).clamp(0, Ht - 1)
    x0 = x.detach().floor().long().clamp(0, Wt - 1)
    y0 = y.detach().floor().long().clamp(0, Ht - 1)
    x1 = (x0 + 1).clamp(max=Wt - 1)
    y1 = (y0 + 1).clamp(max=Ht - 1)
    fx = (x - x0.to(x.dtype))[..., None]
    fy = (y - y0.to(y.dtype))[..., None]
    img = image.to(uv.dtype) if not image.is_floating_point() else image
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def render(params: FaceParams, assets: FaceModelAssets, resolution, albedo_texture=None,
           background=None):
    """Shade and rasterize the face model.

    Albedo comes from the per-vertex texture model unless ``albedo_texture``
    (``Ht x Wt x 3`` in UV space) is given.  Returns ``(image, raster)`` where
    the image is ``H x W x 3`` and uncovered pixels take ``background``.
    """
    mesh = compute_vertices(params, assets)
    dtype = mesh.vertices.dtype
    if albedo_texture is None:
        attrs = torch.cat([mesh.normals, vertex_albedo(params, assets).to(dtype)], dim=-1)
    else:
        attrs = mesh.normals
    ras = rasterize(mesh, params.camera, attrs, resolution)
    n = ras.image[..., :3]
    n = n / n.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    if albedo_texture is None:
        albedo = ras.image[..., 3:6]
    else:
        albedo = sample_image_bilinear(_t(albedo_texture, dtype), ras.uv)
    color = shade_sh(n, albedo, params.lighting.to(dtype))
    mask = ras.coverage[..., None].to(dtype)
    if background is None:
        bg = torch.zeros_like(color)
    else:
        bg = _t(background, dtype).expand_as(color)
    return color * mask + bg * (1 - mask), ras


def landmarks_2d(params: FaceParams, assets: FaceModelAssets):
    mesh = compute_vertices(params, assets)
    idx = torch.as_tensor(assets.landmark_indices, dtype=torch.long)
    return project(mesh.vertices[idx], params.camera)


# ---------------------------------------------------------------------------
# Synthetic assets
# ---------------------------------------------------------------------------


def _grid_dims(V: int) -> tuple[int, int]:
    rows = max(2, int(np.floor(np.sqrt(V / 2.0))))
    cols = max(2, V // rows)
    while rows * cols > V:
        cols -= 1
    return rows, cols


def _smooth_field(rng, pts, n_terms=4, freq=1.5):
    """Random smooth vector field: sum of a few low-frequency sinusoids."""
    out = np.zeros_like(pts)
    for _ in range(n_terms):
        k = rng.normal(size=3) * freq
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.normal(size=3)
        out += np.sin(pts @ k + phase)[:, None] * amp[None, :]
    return out / n_terms


def _region_label_texture(size: int = 64, mouth_v: float = 0.70) -> np.ndarray:
    labels = np.zeros((size, size), dtype=np.uint8)
    vv, uu = np.meshgrid((np.arange(size) + 0.5) / size, (np.arange(size) + 0.5) / size, indexing="ij")
    lower = (vv > 0.55) & (np.abs(uu - 0.5) < 0.36)
    mouth = ((uu - 0.5) / 0.17) ** 2 + ((vv - mouth_v) / 0.09) ** 2 <= 1.0
    labels[lower] = LABEL_LOWER
    labels[mouth] = LABEL_MOUTH
    return labels


def make_synthetic_assets(seed: int = 0, V: int = 512, Ns: int = 16, Ne: int = 16,
                          Nt: int = 8, n_landmarks: int = 24) -> FaceModelAssets:
    """Procedural low-poly head with a hinged jaw, smooth bases and a UV atlas.

    The surface is a UV grid over the front of an ellipsoid; ``V`` beyond the
    largest grid that fits are placed inside the head and left unconnected.
    """
    if V < 8:
        raise ConfigurationError("synthetic assets need V >= 8")
    rng = np.random.default_rng(seed)
    rows, cols = _grid_dims(V)
    u = np.linspace(0.0, 1.0, cols)
    v = np.linspace(0.0, 1.0, rows)
    uu, vv = np.meshgrid(u, v)  # rows x cols
    az = (uu - 0.5) * 0.85 * np.pi
    el = (0.5 - vv) * 0.8 * np.pi
    a, b, c = 0.75, 1.0, 0.85
    x = a * np.sin(az) * np.cos(el)
    y = b * np.sin(el)
    z = c * np.cos(az) * np.cos(el)
    grid = np.stack([x, y, z], -1).reshape(-1, 3)
    uv = np.stack([uu, vv], -1).reshape(-1, 2)
    n_extra = V - rows * cols
    if n_extra:
        extra = np.zeros((n_extra, 3))
        extra[:, 1] = np.linspace(-0.3, 0.3, n_extra)
        extra[:, 2] = -0.2
        grid = np.concatenate([grid, extra])
        uv = np.concatenate([uv, np.full((n_extra, 2), 0.5)])
    verts = grid

    faces = []
    for r in range(rows - 1):
        for q in range(cols - 1):
            i0 = r * cols + q
            i1, i2, i3 = i0 + 1, i0 + cols, i0 + cols + 1
            # counter-clockwise seen from +z so normals point outward
            faces.append((i0, i2, i1))
            faces.append((i1, i2, i3))
    faces = np.asarray(faces, dtype=np.int64)

    vflat = uv[:, 1]
    uflat = uv[:, 0]
    surface = np.arange(V) < rows * cols

    # skinning: jaw below the mouth line, neck on the lowest rows
    mouth_v = 0.70
    w_jaw = 1.0 / (1.0 + np.exp(-(vflat - (mouth_v - 0.01)) / 0.012))
    w_jaw *= np.clip(1.0 - (np.abs(uflat - 0.5) / 0.5) ** 4, 0.0, 1.0)
    w_jaw[~surface] = 0.0
    w_neck = (1.0 - w_jaw) * np.clip((vflat - 0.85) / 0.15, 0.0, 1.0) * surface
    w_root = 1.0 - w_jaw - w_neck
    weights = np.stack([w_root, w_neck, w_jaw], axis=1)

    def row_mean(v_target, u_targets):
        w = np.zeros(V)
        r = int(round(v_target * (rows - 1)))
        for ut in u_targets:
            q = int(round(ut * (cols - 1)))
            w[r * cols + q] += 1.0
        return w / w.sum()

    # joints: affine combinations of surface points that land inside the head;
    # the jaw hinge sits well behind the chin so opening moves it downward
    reg = np.stack([
        row_mean(0.5, [0.0, 1.0]),
        row_mean(0.95, [0.0, 1.0]),
        2.0 * row_mean(0.62, [0.0, 1.0]) - row_mean(0.62, [0.5]),
    ])

    face_region = np.exp(-((vflat - 0.55) / 0.35) ** 2) * surface
    shape_basis = np.zeros((V, 3, Ns))
    for k in range(Ns):
        fld = _smooth_field(rng, verts, freq=1.2 + 0.1 * k)
        shape_basis[:, :, k] = 0.05 * fld * (0.3 + face_region)[:, None]
    mouth_w = np.exp(-(((uflat - 0.5) / 0.22) ** 2 + ((vflat - mouth_v) / 0.12) ** 2)) * surface
    expr_basis = np.zeros((V, 3, Ne))
    for k in range(Ne):
        fld = _smooth_field(rng, verts, freq=2.0 + 0.2 * k)
        expr_basis[:, :, k] = 0.05 * fld * mouth_w[:, None]
    # the first expression component widens/opens the mouth deterministically
    if Ne:
        expr_basis[:, 0, 0] = 0.05 * np.sign(verts[:, 0]) * mouth_w
        expr_basis[:, 1, 0] = -0.03 * (vflat > mouth_v) * mouth_w

    skin = np.array([0.78, 0.57, 0.47])
    tex_mean = np.tile(skin, (V, 1)) * (0.9 + 0.1 * np.cos(3 * verts[:, :1]))
    lips = np.exp(-(((uflat - 0.5) / 0.16) ** 2 + ((vflat - mouth_v) / 0.035) ** 2))
    tex_mean = tex_mean * (1 - 0.4 * lips[:, None]) + np.array([0.6, 0.15, 0.2]) * 0.4 * lips[:, None]
    tex_basis = np.zeros((V, 3, Nt))
    for k in range(Nt):
        tex_basis[:, :, k] = 0.06 * _smooth_field(rng, verts, freq=1.0 + 0.3 * k)

    lm_rows = np.linspace(0.15, 0.9, 6)
    lm_cols = np.linspace(0.2, 0.8, max(1, n_landmarks // 6))
    lm = []
    for r in lm_rows:
        for q in lm_cols:
            lm.append(int(round(r * (rows - 1))) * cols + int(round(q * (cols - 1))))
    lm = np.array(sorted(set(lm)), dtype=np.int64)

    return FaceModelAssets(
        template_vertices=verts,
        faces=faces,
        shape_basis=shape_basis,
        expression_basis=expr_basis,
        skinning_weights=weights,
        joint_regressor=reg,
        uv_coords=np.clip(uv, 0.0, 1.0),
        texture_mean=np.clip(tex_mean, 0.0, 1.0),
        texture_basis=tex_basis,
        landmark_indices=lm,
        region_labels=_region_label_texture(64, mouth_v),
        jaw_range=(0.0, 0.5),
    )
