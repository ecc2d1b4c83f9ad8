"""A small CPU Gaussian splatter with an orthographic camera.

Primitives are projected to 2D Gaussians, sorted front to back by depth and
alpha-blended. Per-pixel blending weights

    w_k(r) = a_k G_k(r) prod_{j<k} (1 - a_j G_j(r))

are kept as a sparse (pixel, primitive, weight) list so the same weights
drive colour images, per-primitive confidence and uncertainty maps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .scene import covariance, rotation6d_to_matrix

COV_FLOOR = 0.1  # px^2, lower bound on 2D covariance eigenvalues
CUTOFF_SIGMA = 3.0


class Camera(BaseModel):
    """Orthographic camera.

    ``basis`` columns are the camera's right, up and forward axes in world
    coordinates. A world point ``p`` has camera coordinates
    ``c = basis^T (p - origin)``; its pixel is ``center + c[:2] / scale`` with
    ``center = ((W-1)/2, (H-1)/2)`` and depth ``c[2]``. Pixel rows follow +up.
    """

    model_config = ConfigDict(extra="forbid", frozen=True, arbitrary_types_allowed=True)

    basis: tuple[tuple[float, float, float], tuple[float, float, float], tuple[float, float, float]] = (
        (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)
    )
    origin: tuple[float, float, float] = (0.0, 0.0, -5.0)
    width: int = Field(64, ge=8)
    height: int = Field(64, ge=8)
    scale: float = Field(2.8 / 64, gt=0)
    near: float = 0.01
    far: float = 100.0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @field_validator("basis")
    @classmethod
    def _orthonormal(cls, v):
        B = np.asarray(v, dtype=np.float64)
        if not np.allclose(B.T @ B, np.eye(3), atol=1e-9) or np.linalg.det(B) < 0:
            raise ValueError("camera basis must be a rotation matrix")
        return v

    @property
    def B(self) -> np.ndarray:
        return np.asarray(self.basis, dtype=np.float64)

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.width - 1) / 2.0, (self.height - 1) / 2.0])


def orbit_cameras(count: int, spread: float = 0.6, **kwargs) -> list[Camera]:
    """Cameras rotated about the world y axis, all looking at the origin."""
    if count == 1:
        angles = [0.0]
    else:
        angles = np.linspace(-spread / 2, spread / 2, count)
    dist = kwargs.pop("distance", 5.0)
    out = []
    for a in angles:
        c, s = np.cos(a), np.sin(a)
        B = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        origin = -dist * B[:, 2]
        out.append(Camera(basis=tuple(map(tuple, B.tolist())), origin=tuple(origin.tolist()), **kwargs))
    return out


@dataclass
class Projection:
    mean2d: np.ndarray  # (N, 2) pixel coordinates (column, row)
    cov2d: np.ndarray  # (N, 2, 2) px^2
    depth: np.ndarray  # (N,)
    culled: np.ndarray  # (N,) bool


def floor_cov2d(cov: np.ndarray, floor: float = COV_FLOOR) -> np.ndarray:
    """Clamp eigenvalues of symmetric 2x2 matrices from below."""
    w, V = np.linalg.eigh(cov)
    w = np.maximum(w, floor)
    return (V * w[..., None, :]) @ np.swapaxes(V, -1, -2)


def project(positions, rotations, scales, cam: Camera) -> Projection:
    """Orthographic projection of 3D Gaussians to pixel-space 2D Gaussians."""
    P = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    B = cam.B
    c = (P - np.asarray(cam.origin)) @ B
    sigma = covariance(rotations, scales).reshape(-1, 3, 3)
    cam_sigma = B.T @ sigma @ B
    cov2d = floor_cov2d(cam_sigma[:, :2, :2] / cam.scale**2)
    mean2d = cam.center + c[:, :2] / cam.scale
    depth = c[:, 2]
    culled = (depth < cam.near) | (depth > cam.far)
    return Projection(mean2d, cov2d, depth, culled)


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W) accumulated opacity
    pix: np.ndarray  # flat pixel index of each weight entry
    prim: np.ndarray  # primitive index of each weight entry
    w: np.ndarray  # blending weight
    num_primitives: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha.shape

    def weight_sum(self) -> np.ndarray:
        H, W = self.shape
        return np.bincount(self.pix, self.w, minlength=H * W).reshape(H, W)

    def primitive_weights(self) -> np.ndarray:
        """Total weight of each primitive over the image, (N,)."""
        return np.bincount(self.prim, self.w, minlength=self.num_primitives)

    def weight_image(self, k: int) -> np.ndarray:
        H, W = self.shape
        sel = self.prim == k
        return np.bincount(self.pix[sel], self.w[sel], minlength=H * W).reshape(H, W)


def rasterize(positions, rotations, scales, opacities, colors, cam: Camera) -> RenderOutput:
    """Depth-sorted alpha blending of N Gaussians into one image."""
    P = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = P.shape[0]
    opac = np.asarray(opacities, dtype=np.float64).reshape(n)
    cols = np.asarray(colors, dtype=np.float64).reshape(n, 3)
    proj = project(P, rotations, scales, cam)
    H, W = cam.height, cam.width
    trans = np.ones(H * W)
    color = np.zeros((H * W, 3))
    pix_parts, prim_parts, w_parts = [], [], []
    order = np.argsort(proj.depth, kind="stable")
    inv = np.linalg.inv(proj.cov2d)
    for k in order:
        if proj.culled[k] or opac[k] <= 0.0:
            continue
        mu = proj.mean2d[k]
        radius = CUTOFF_SIGMA * np.sqrt(np.linalg.eigvalsh(proj.cov2d[k]).max())
        x0, x1 = max(int(np.ceil(mu[0] - radius)), 0), min(int(np.floor(mu[0] + radius)), W - 1)
        y0, y1 = max(int(np.ceil(mu[1] - radius)), 0), min(int(np.floor(mu[1] + radius)), H - 1)
        if x0 > x1 or y0 > y1:
            continue
        xs, ys = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        d = np.stack([xs.ravel() - mu[0], ys.ravel() - mu[1]], axis=1)
        m2 = np.einsum("ni,ij,nj->n", d, inv[k], d)
        inside = m2 <= CUTOFF_SIGMA**2
        if not inside.any():
            continue
        pix = (ys.ravel() * W + xs.ravel())[inside]
        a = opac[k] * np.exp(-0.5 * m2[inside])
        w = a * trans[pix]
        trans[pix] *= 1.0 - a
        color[pix] += w[:, None] * cols[k]
        keep = w > 0
        pix_parts.append(pix[keep])
        prim_parts.append(np.full(int(keep.sum()), k, dtype=np.int64))
        w_parts.append(w[keep])
    color += trans[:, None] * np.asarray(cam.background)
    cat = lambda parts, dt: np.concatenate(parts) if parts else np.zeros(0, dtype=dt)  # noqa: E731
    return RenderOutput(
        color.reshape(H, W, 3),
        (1.0 - trans).reshape(H, W),
        cat(pix_parts, np.int64),
        cat(prim_parts, np.int64),
        cat(w_parts, np.float64),
        n,
    )


def render(primitives, y, cam: Camera, visible=None) -> RenderOutput:
    """Render primitives deformed by ``y`` (N, 9) for one frame.

    Primitives with ``visible[k] == False`` get zero opacity.
    """
    y = np.asarray(y, dtype=np.float64)
    pos = primitives.positions + y[:, :3]
    R = rotation6d_to_matrix(y[:, 3:])
    opac = primitives.opacities.copy()
    if visible is not None:
        opac = np.where(np.asarray(visible, dtype=bool), opac, 0.0)
    return rasterize(pos, R, primitives.scales, opac, primitives.colors, cam)


def render_scene(scene, frame: int, cam: Camera, deformations=None, respect_visibility: bool = True) -> RenderOutput:
    """Render one frame of a synthetic scene (ground truth unless ``deformations`` given)."""
    y = scene.deformations[:, frame] if deformations is None else np.asarray(deformations)[:, frame]
    vis = scene.visible[:, frame] if respect_visibility else None
    return render(scene.primitives, y, cam, vis)


def confidence(outputs, num_primitives: int | None = None) -> np.ndarray:
    """C_k: each primitive's blending weight summed over all rendered images."""
    outputs = list(outputs)
    if not outputs:
        raise ValueError("need at least one rendered frame")
    n = num_primitives or outputs[0].num_primitives
    C = np.zeros(n)
    for out in outputs:
        C += np.bincount(out.prim, out.w, minlength=n)
    return C


def render_uncertainty(output: RenderOutput, U) -> np.ndarray:
    """Alpha-blended uncertainty map sum_k U_k w_k(r), shape (H, W)."""
    U = np.asarray(U, dtype=np.float64)
    H, W = output.shape
    return np.bincount(output.pix, output.w * U[output.prim], minlength=H * W).reshape(H, W)


uncertainty_map = render_uncertainty


# -- image files --------------------------------------------------------------


def write_ppm(path, color) -> None:
    """8-bit binary PPM (P6) from an (H, W, 3) image in [0, 1]."""
    img = np.asarray(color, dtype=np.float64)
    H, W, _ = img.shape
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, dims, maxval = fh.readline(), fh.readline(), fh.readline()
        if magic.strip() != b"P6":
            raise ValueError("not a binary PPM")
        W, H = map(int, dims.split())
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    return data.reshape(H, W, 3).astype(np.float64) / int(maxval)


def write_pgm16(path, image) -> float:
    """16-bit binary PGM (P5) normalized by the image maximum.

    The maximum is written to a ``<path>.json`` sidecar so values can be
    restored as ``pixel / 65535 * scale``. Returns the scale.
    """
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape
    if np.any(img < 0):
        raise ValueError("uncertainty maps must be non-negative")
    scale = float(img.max()) if img.size else 0.0
    norm = img / scale if scale > 0 else np.zeros_like(img)
    data = np.round(norm * 65535.0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())
    with open(f"{path}.json", "w") as fh:
        json.dump({"scale": scale, "maxval": 65535, "width": W, "height": H}, fh, indent=2, sort_keys=True)
    return scale


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, dims, _ = fh.readline(), fh.readline(), fh.readline()
        if magic.strip() != b"P5":
            raise ValueError("not a binary PGM")
        W, H = map(int, dims.split())
        data = np.frombuffer(fh.read(), dtype=">u2").reshape(H, W)
    with open(f"{path}.json") as fh:
        scale = json.load(fh)["scale"]
    return data.astype(np.float64) / 65535.0 * scale
