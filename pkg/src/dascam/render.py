"""Texture-differentiable software renderer.

Geometry, camera, and lighting are fixed per condition, so rendering is split
into an expensive bake (rasterize once, record per-pixel texel taps) and a
cheap apply (sparse gather of the texture). The gather is linear in the
texture, which makes the gradient an exact scatter of the same weights.

Conventions: z-up world, pitch 0 is horizontal and 90 top-down, texture v=0
at the bottom of the atlas image.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as tc
from .imageproc import dilate


class MeshError(ValueError):
    pass


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class Mesh:
    """Triangle mesh with per-face-corner UVs in [0,1]^2."""

    vertices: np.ndarray   # [V, 3] float64
    faces: np.ndarray      # [F, 3] int32 vertex indices
    face_uvs: np.ndarray   # [F, 3, 2] float64

    @property
    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)


@dataclass(frozen=True)
class TextureAtlas:
    """RGB UV atlas; all channel values in [0,1]."""

    rgb: np.ndarray  # [H, W, 3] float32

    def __post_init__(self):
        arr = np.asarray(self.rgb, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise RenderError(f"texture must be [H,W,3], got {arr.shape}")
        if arr.min() < 0 or arr.max() > 1:
            raise RenderError("texture values outside [0,1]")
        object.__setattr__(self, "rgb", arr)

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass(frozen=True)
class RenderCondition:
    """Camera and lighting parameters for one view."""

    distance: float
    yaw: float            # degrees in [0, 360)
    pitch: float          # degrees in [0, 90]
    light_intensity: float = 1.0
    background_id: int = 0

    def __post_init__(self):
        if self.distance <= 0:
            raise RenderError(f"distance must be positive, got {self.distance}")
        if not 0.0 <= self.pitch <= 90.0:
            raise RenderError(f"pitch must be in [0,90], got {self.pitch}")
        if not 0.0 <= self.yaw < 360.0:
            raise RenderError(f"yaw must be in [0,360), got {self.yaw}")
        if self.light_intensity < 0:
            raise RenderError("light_intensity must be >= 0")

    def key(self) -> str:
        return (f"d{self.distance:g}_y{self.yaw:g}_p{self.pitch:g}"
                f"_l{self.light_intensity:g}_b{self.background_id}")


@dataclass(frozen=True)
class RenderMap:
    """Baked per-pixel texel taps for one condition.

    fg: uint8 [H,W]; idx: int32 [H,W,4] flat texel indices; weight:
    float32 [H,W,4] (>=0, summing to 1 on foreground); shade: float32 [H,W].
    """

    fg: np.ndarray
    idx: np.ndarray
    weight: np.ndarray
    shade: np.ndarray
    atlas_shape: tuple

    @property
    def height(self) -> int:
        return self.fg.shape[0]

    @property
    def width(self) -> int:
        return self.fg.shape[1]


_LIGHT_DIR = np.array([0.45, 0.25, 0.86])
_LIGHT_DIR = _LIGHT_DIR / np.linalg.norm(_LIGHT_DIR)
_FOV_DEG = 40.0
_NEAR = 0.1
_SHADE_FLOOR = 0.2


# ---------------------------------------------------------------------------
# OBJ subset loader (v / vt / f with v/vt references)


def parse_obj(text: str, name: str = "<obj>") -> Mesh:
    verts: list[list[float]] = []
    uvs: list[list[float]] = []
    faces: list[list[int]] = []
    face_uvs: list[list[int]] = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        try:
            if tag == "v":
                if len(parts) != 4:
                    raise ValueError("expected 3 coordinates")
                verts.append([float(p) for p in parts[1:]])
            elif tag == "vt":
                if len(parts) < 3:
                    raise ValueError("expected 2 coordinates")
                u, v = float(parts[1]), float(parts[2])
                if not (0 <= u <= 1 and 0 <= v <= 1):
                    raise ValueError(f"uv ({u}, {v}) outside [0,1]")
                uvs.append([u, v])
            elif tag == "f":
                if len(parts) != 4:
                    raise ValueError("only triangular faces are supported")
                vi, ti = [], []
                for corner in parts[1:]:
                    fields = corner.split("/")
                    if len(fields) < 2 or not fields[1]:
                        raise ValueError(f"corner '{corner}' lacks a vt index")
                    a, b = int(fields[0]), int(fields[1])
                    if a == 0 or b == 0:
                        raise ValueError("obj indices are 1-based; got 0")
                    vi.append(a - 1 if a > 0 else len(verts) + a)
                    ti.append(b - 1 if b > 0 else len(uvs) + b)
                faces.append(vi)
                face_uvs.append(ti)
            # other tags (vn, o, g, s, usemtl, mtllib) are ignored
        except ValueError as exc:
            raise MeshError(f"{name}:{ln}: {exc}") from None

    if not verts or not faces:
        raise MeshError(f"{name}: mesh has no geometry")
    v = np.asarray(verts, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int32)
    fu = np.asarray(face_uvs, dtype=np.int64)
    if f.min() < 0 or f.max() >= len(verts):
        raise MeshError(f"{name}: face vertex index out of range")
    if fu.min() < 0 or fu.max() >= len(uvs):
        raise MeshError(f"{name}: face uv index out of range")
    uv = np.asarray(uvs, dtype=np.float64)[fu]
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    areas = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
    if np.any(areas < 1e-12):
        bad = int(np.argmin(areas))
        raise MeshError(f"{name}: face {bad + 1} is degenerate (zero area)")
    return Mesh(vertices=v, faces=f, face_uvs=uv)


def load_mesh(path) -> Mesh:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_obj(fh.read(), name=str(path))


# ---------------------------------------------------------------------------
# baking


def _camera_basis(cond: RenderCondition, target: np.ndarray):
    pitch = math.radians(cond.pitch)
    yaw = math.radians(cond.yaw)
    offset = np.array([
        math.cos(pitch) * math.cos(yaw),
        math.cos(pitch) * math.sin(yaw),
        math.sin(pitch),
    ])
    eye = target + cond.distance * offset
    fwd = (target - eye) / np.linalg.norm(target - eye)
    up_world = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ up_world) > 0.999:  # top-down: use the yaw direction as up
        up_world = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    right = np.cross(fwd, up_world)
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    return eye, right, up, fwd


def bake_condition(mesh: Mesh, cond: RenderCondition, width: int, height: int,
                   atlas_shape=(256, 256)) -> RenderMap:
    """Rasterize the mesh for one condition and record texture taps.

    Perspective camera orbiting the mesh centroid; z-buffered triangles with
    perspective-correct UVs; per-face Lambertian shade (double-sided) scaled
    by light intensity and clamped to [0.2, 1].
    """
    eye, right, up, fwd = _camera_basis(cond, mesh.centroid)
    cam = np.stack([right, up, -fwd])  # world->camera rows; view looks down -z
    v_cam = (mesh.vertices - eye) @ cam.T
    focal = 1.0 / math.tan(math.radians(_FOV_DEG) / 2)

    depth = np.full((height, width), np.inf)
    fg = np.zeros((height, width), dtype=np.uint8)
    tex_u = np.zeros((height, width))
    tex_v = np.zeros((height, width))
    shade = np.zeros((height, width), dtype=np.float32)

    for fi in range(len(mesh.faces)):
        tri = v_cam[mesh.faces[fi]]
        w_clip = -tri[:, 2]
        if np.any(w_clip <= _NEAR):
            continue
        sx = (tri[:, 0] * focal / w_clip + 1.0) * 0.5 * width
        sy = (1.0 - tri[:, 1] * focal / w_clip) * 0.5 * height

        x0, x1 = int(np.floor(sx.min())), int(np.ceil(sx.max()))
        y0, y1 = int(np.floor(sy.min())), int(np.ceil(sy.max()))
        x0, x1 = max(x0, 0), min(x1, width)
        y0, y1 = max(y0, 0), min(y1, height)
        if x0 >= x1 or y0 >= y1:
            continue

        px = np.arange(x0, x1) + 0.5
        py = np.arange(y0, y1) + 0.5
        gx, gy = np.meshgrid(px, py)
        ax, ay = sx[0], sy[0]
        bx, by = sx[1], sy[1]
        cx, cy = sx[2], sy[2]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(area) < 1e-12:
            continue
        wa = ((bx - gx) * (cy - gy) - (by - gy) * (cx - gx)) / area
        wb = ((cx - gx) * (ay - gy) - (cy - gy) * (ax - gx)) / area
        wc = 1.0 - wa - wb
        inside = (wa >= 0) & (wb >= 0) & (wc >= 0)
        if not inside.any():
            continue

        inv_w = wa / w_clip[0] + wb / w_clip[1] + wc / w_clip[2]
        z = 1.0 / inv_w  # perspective-correct view depth
        uvw = mesh.face_uvs[fi] / w_clip[:, None]
        u = (wa * uvw[0, 0] + wb * uvw[1, 0] + wc * uvw[2, 0]) * z
        vv = (wa * uvw[0, 1] + wb * uvw[1, 1] + wc * uvw[2, 1]) * z

        e1 = mesh.vertices[mesh.faces[fi][1]] - mesh.vertices[mesh.faces[fi][0]]
        e2 = mesh.vertices[mesh.faces[fi][2]] - mesh.vertices[mesh.faces[fi][0]]
        normal = np.cross(e1, e2)
        normal /= np.linalg.norm(normal)
        lambert = abs(float(normal @ _LIGHT_DIR))
        s = float(np.clip(cond.light_intensity * lambert, _SHADE_FLOOR, 1.0))

        sub_depth = depth[y0:y1, x0:x1]
        closer = inside & (z < sub_depth)
        sub_depth[closer] = z[closer]
        fg[y0:y1, x0:x1][closer] = 1
        tex_u[y0:y1, x0:x1][closer] = np.clip(u[closer], 0.0, 1.0)
        tex_v[y0:y1, x0:x1][closer] = np.clip(vv[closer], 0.0, 1.0)
        shade[y0:y1, x0:x1][closer] = s

    return _taps_from_uv(fg, tex_u, tex_v, shade, atlas_shape)


def _taps_from_uv(fg, tex_u, tex_v, shade, atlas_shape) -> RenderMap:
    th, tw = atlas_shape
    tx = tex_u * (tw - 1)
    ty = (1.0 - tex_v) * (th - 1)
    x0 = np.clip(np.floor(tx).astype(np.int64), 0, tw - 1)
    y0 = np.clip(np.floor(ty).astype(np.int64), 0, th - 1)
    x1 = np.minimum(x0 + 1, tw - 1)
    y1 = np.minimum(y0 + 1, th - 1)
    fx, fy = tx - x0, ty - y0
    idx = np.stack([y0 * tw + x0, y0 * tw + x1, y1 * tw + x0, y1 * tw + x1],
                   axis=2).astype(np.int32)
    wgt = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx,
                    fy * (1 - fx), fy * fx], axis=2).astype(np.float32)
    mask = fg.astype(bool)
    idx[~mask] = 0
    wgt[~mask] = 0.0
    shade = np.where(mask, shade, 0.0).astype(np.float32)
    return RenderMap(fg=fg.astype(np.uint8), idx=idx, weight=wgt,
                     shade=shade, atlas_shape=tuple(atlas_shape))


# ---------------------------------------------------------------------------
# rendering


def _check_render_inputs(rmap: RenderMap, tex_hw3: np.ndarray, background):
    th, tw = rmap.atlas_shape
    if tex_hw3.shape != (th, tw, 3):
        raise RenderError(f"texture {tex_hw3.shape} does not match baked atlas "
                          f"shape {(th, tw, 3)}")
    bg = np.asarray(background, dtype=np.float32)
    if bg.shape != (rmap.height, rmap.width, 3):
        raise RenderError(f"background {bg.shape} does not match render size "
                          f"{(rmap.height, rmap.width, 3)}")
    if rmap.idx.max() >= th * tw or rmap.idx.min() < 0:
        raise RenderError("baked texel index outside atlas (bake bug)")
    return bg


def render(rmap: RenderMap, texture: TextureAtlas, background) -> np.ndarray:
    """Apply a baked map to a texture: plain numpy, no tracing."""
    bg = _check_render_inputs(rmap, texture.rgb, background)
    flat = texture.rgb.reshape(-1, 3)
    mask = rmap.fg.astype(bool)
    out = bg.copy()
    taps = flat[rmap.idx[mask]]                       # [P, 4, 3]
    mixed = (taps * rmap.weight[mask][:, :, None]).sum(axis=1)
    out[mask] = mixed * rmap.shade[mask][:, None]
    return out


def render_traced(rmap: RenderMap, texture: tc.Tensor, background) -> tc.Tensor:
    """Differentiable render: gradient scatters through the baked taps."""
    bg = _check_render_inputs(rmap, texture.data, background)
    mask = rmap.fg.astype(bool)
    idx_f = rmap.idx[mask]                            # [P, 4]
    wgt_f = (rmap.weight[mask] * rmap.shade[mask][:, None]).astype(np.float32)
    flat = texture.data.reshape(-1, 3)
    out = bg.copy()
    out[mask] = (flat[idx_f] * wgt_f[:, :, None]).sum(axis=1)

    def vjp(grad):
        dt = np.zeros_like(flat)
        contrib = grad[mask][:, None, :] * wgt_f[:, :, None]  # [P, 4, 3]
        np.add.at(dt, idx_f.ravel(), contrib.reshape(-1, 3))
        return [dt.reshape(texture.data.shape)]

    return tc.custom_op("render", out, [texture], vjp)


# ---------------------------------------------------------------------------
# patch paste and texture-space edge mask


def _region_footprint(region, atlas_w: int, atlas_h: int):
    u0, v0, u1, v1 = (float(r) for r in region)
    if not (0 <= u0 < u1 <= 1 and 0 <= v0 < v1 <= 1):
        raise RenderError(f"region {region} is not a uv-rectangle inside [0,1]^2")
    xs = np.arange(math.ceil(u0 * (atlas_w - 1)),
                   math.floor(u1 * (atlas_w - 1)) + 1)
    ys = np.arange(math.ceil((1 - v1) * (atlas_h - 1)),
                   math.floor((1 - v0) * (atlas_h - 1)) + 1)
    if xs.size == 0 or ys.size == 0:
        raise RenderError(f"region {region} covers no texels of a "
                          f"{atlas_w}x{atlas_h} atlas")
    # normalized position of each footprint texel inside the region
    s = (xs / (atlas_w - 1) - u0) / (u1 - u0)
    t = (1 - ys / (atlas_h - 1) - v0) / (v1 - v0)
    return xs, ys, s, t


def paste_patch(patch: np.ndarray, texture: TextureAtlas, region) -> TextureAtlas:
    """Resample a patch image onto the region's texel footprint."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim == 2:
        patch = np.repeat(patch[:, :, None], 3, axis=2)
    xs, ys, s, t = _region_footprint(region, texture.width, texture.height)
    ph, pw = patch.shape[:2]
    px = s * (pw - 1)
    py = (1 - t) * (ph - 1)
    x0 = np.clip(np.floor(px).astype(np.int64), 0, pw - 1)
    y0 = np.clip(np.floor(py).astype(np.int64), 0, ph - 1)
    x1 = np.minimum(x0 + 1, pw - 1)
    y1 = np.minimum(y0 + 1, ph - 1)
    fx = (px - x0)[None, :, None]
    fy = (py - y0)[:, None, None]
    tl = patch[np.ix_(y0, x0)]
    tr = patch[np.ix_(y0, x1)]
    bl = patch[np.ix_(y1, x0)]
    br = patch[np.ix_(y1, x1)]
    block = ((tl * (1 - fx) + tr * fx) * (1 - fy)
             + (bl * (1 - fx) + br * fx) * fy)
    rgb = texture.rgb.copy()
    rgb[np.ix_(ys, xs)] = np.clip(block, 0.0, 1.0).astype(np.float32)
    return TextureAtlas(rgb=rgb)


def mask_to_texture_space(edge: np.ndarray, atlas_w: int, atlas_h: int,
                          region, dilate_px: int = 0) -> np.ndarray:
    """Project a binary edge patch onto the region's texels (nearest neighbor).

    Returns a uint8 [atlas_h, atlas_w] mask, zero outside the region; the
    optional 1-px dilation is clipped to the region footprint.
    """
    edge = np.asarray(edge)
    if set(np.unique(edge)) - {0, 1}:
        raise RenderError("edge map must be binary")
    xs, ys, s, t = _region_footprint(region, atlas_w, atlas_h)
    eh, ew = edge.shape
    ex = np.clip(np.round(s * (ew - 1)).astype(np.int64), 0, ew - 1)
    ey = np.clip(np.round((1 - t) * (eh - 1)).astype(np.int64), 0, eh - 1)
    block = edge[np.ix_(ey, ex)].astype(np.uint8)
    if dilate_px:
        block = dilate(block, dilate_px)
    mask = np.zeros((atlas_h, atlas_w), dtype=np.uint8)
    mask[np.ix_(ys, xs)] = block
    return mask


# ---------------------------------------------------------------------------
# RenderMap cache (DAST records + JSON sidecar)


def save_render_map(path_prefix, rmap: RenderMap, cond: RenderCondition) -> None:
    tensors = [
        tc.Tensor(rmap.fg.astype(np.float32)),
        tc.Tensor(rmap.idx.astype(np.float32)),
        tc.Tensor(rmap.weight),
        tc.Tensor(rmap.shade),
    ]
    tc.save_tensors(f"{path_prefix}.dast", tensors)
    side = {"condition": asdict(cond), "atlas_shape": list(rmap.atlas_shape)}
    with open(f"{path_prefix}.json", "w", encoding="utf-8") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)


def load_render_map(path_prefix) -> tuple[RenderMap, RenderCondition]:
    fg, idx, wgt, shade = tc.load_tensors(f"{path_prefix}.dast")
    with open(f"{path_prefix}.json", "r", encoding="utf-8") as fh:
        side = json.load(fh)
    rmap = RenderMap(
        fg=fg.data.astype(np.uint8),
        idx=idx.data.astype(np.int32),
        weight=wgt.data.copy(),
        shade=shade.data.copy(),
        atlas_shape=tuple(side["atlas_shape"]),
    )
    return rmap, RenderCondition(**side["condition"])
