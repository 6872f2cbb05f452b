"""Default desk scene: four primitive-composition objects with procedural
textures, a smiley seed patch, and gradient backgrounds.

Meshes are built from quads, each quad getting its own padded cell in the UV
atlas so every face owns a distinct texel neighborhood. Builders are pure
functions of their arguments, so assets regenerate bit-identically.
"""

from __future__ import annotations

import math

import numpy as np

from .render import Mesh, TextureAtlas, parse_obj

ATLAS_SIZE = 256
IMAGE_SIZE = 96
PATCH_SIZE = 64
# uv-rectangle on the atlas where the seed patch lands (car body cells)
DEFAULT_PATCH_REGION = (0.02, 0.52, 0.46, 0.96)

CLASS_NAMES = ("car", "truck", "pod", "pyramid")


# ---------------------------------------------------------------------------
# mesh builders


def _box_quads(cx, cy, cz, sx, sy, sz):
    """Six quads (outward corner order) of an axis-aligned box."""
    x0, x1 = cx - sx / 2, cx + sx / 2
    y0, y1 = cy - sy / 2, cy + sy / 2
    z0, z1 = cz - sz / 2, cz + sz / 2
    return [
        [(x0, y0, z1), (x1, y0, z1), (x1, y1, z1), (x0, y1, z1)],  # top
        [(x0, y1, z0), (x1, y1, z0), (x1, y0, z0), (x0, y0, z0)],  # bottom
        [(x0, y0, z0), (x1, y0, z0), (x1, y0, z1), (x0, y0, z1)],  # south
        [(x1, y1, z0), (x0, y1, z0), (x0, y1, z1), (x1, y1, z1)],  # north
        [(x1, y0, z0), (x1, y1, z0), (x1, y1, z1), (x1, y0, z1)],  # east
        [(x0, y1, z0), (x0, y0, z0), (x0, y0, z1), (x0, y1, z1)],  # west
    ]


def _quads_to_obj(quads, pad=0.02):
    """Emit OBJ text; quad i maps to its own cell in a square UV grid."""
    grid = math.ceil(math.sqrt(len(quads)))
    lines = []
    vt_lines = []
    f_lines = []
    vid = 0
    tid = 0
    for qi, quad in enumerate(quads):
        col, row = qi % grid, qi // grid
        u0 = (col + pad) / grid
        u1 = (col + 1 - pad) / grid
        v0 = (row + pad) / grid
        v1 = (row + 1 - pad) / grid
        for x, y, z in quad:
            lines.append(f"v {x:.6f} {y:.6f} {z:.6f}")
        for u, v in ((u0, v0), (u1, v0), (u1, v1), (u0, v1)):
            vt_lines.append(f"vt {u:.6f} {v:.6f}")
        a, b, c, d = vid + 1, vid + 2, vid + 3, vid + 4
        ta, tb, tcr, td = tid + 1, tid + 2, tid + 3, tid + 4
        f_lines.append(f"f {a}/{ta} {b}/{tb} {c}/{tcr}")
        f_lines.append(f"f {a}/{ta} {c}/{tcr} {d}/{td}")
        vid += 4
        tid += 4
    return "\n".join(lines + vt_lines + f_lines) + "\n"


def _tris_to_obj(tris, pad=0.05):
    grid = math.ceil(math.sqrt(len(tris)))
    lines, vt_lines, f_lines = [], [], []
    vid = tid = 0
    for ti, tri in enumerate(tris):
        col, row = ti % grid, ti // grid
        u0 = (col + pad) / grid
        u1 = (col + 1 - pad) / grid
        v0 = (row + pad) / grid
        v1 = (row + 1 - pad) / grid
        for x, y, z in tri:
            lines.append(f"v {x:.6f} {y:.6f} {z:.6f}")
        for u, v in ((u0, v0), (u1, v0), ((u0 + u1) / 2, v1)):
            vt_lines.append(f"vt {u:.6f} {v:.6f}")
        f_lines.append(f"f {vid + 1}/{tid + 1} {vid + 2}/{tid + 2} "
                       f"{vid + 3}/{tid + 3}")
        vid += 3
        tid += 3
    return "\n".join(lines + vt_lines + f_lines) + "\n"


def car_obj() -> str:
    quads = _box_quads(0.0, 0.0, -0.25, 2.4, 1.1, 0.6)       # body
    quads += _box_quads(-0.25, 0.0, 0.28, 1.25, 0.95, 0.46)  # cabin
    return _quads_to_obj(quads)


def truck_obj() -> str:
    quads = _box_quads(-0.35, 0.0, -0.3, 1.7, 1.1, 0.5)      # bed
    quads += _box_quads(0.85, 0.0, 0.0, 0.75, 1.05, 1.1)     # tall cab
    return _quads_to_obj(quads)


def pod_obj() -> str:
    """Octahedron subdivided once and pushed to a sphere of radius 0.95."""
    r = 0.95
    axes = [np.array(a, dtype=float) for a in
            ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))]
    octa = []
    for z in (4, 5):
        for x in (0, 1):
            for y in (2, 3):
                tri = [axes[x], axes[y], axes[z]]
                octa.append(tri)
    tris = []
    for a, b, c in octa:
        ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
        for tri in ([a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]):
            tris.append([r * v / np.linalg.norm(v) for v in tri])
    return _tris_to_obj(tris)


def pyramid_obj() -> str:
    b, apex_z, base_z = 1.1, 0.85, -0.55
    base = [(-b, -b), (b, -b), (b, b), (-b, b)]
    tris = []
    for i in range(4):
        x0, y0 = base[i]
        x1, y1 = base[(i + 1) % 4]
        tris.append([(x0, y0, base_z), (x1, y1, base_z), (0.0, 0.0, apex_z)])
    tris.append([(-b, -b, base_z), (b, b, base_z), (b, -b, base_z)])
    tris.append([(-b, -b, base_z), (-b, b, base_z), (b, b, base_z)])
    return _tris_to_obj(tris)


_MESH_BUILDERS = {
    "car": car_obj,
    "truck": truck_obj,
    "pod": pod_obj,
    "pyramid": pyramid_obj,
}


def build_mesh(name: str) -> Mesh:
    return parse_obj(_MESH_BUILDERS[name](), name=name)


# ---------------------------------------------------------------------------
# textures, patch, backgrounds


def _coords(size):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return ys / (size - 1), xs / (size - 1)


def base_texture(name: str, size: int = ATLAS_SIZE) -> TextureAtlas:
    """Smooth class-distinct color fields (kept soft to keep renders smooth)."""
    ys, xs = _coords(size)
    if name == "car":
        r = 0.78 + 0.10 * np.sin(2 * math.pi * xs)
        g = 0.16 + 0.06 * ys
        b = 0.14 + 0.05 * np.cos(2 * math.pi * ys)
    elif name == "truck":
        r = 0.15 + 0.08 * ys
        g = 0.30 + 0.10 * np.sin(2 * math.pi * ys)
        b = 0.72 + 0.12 * np.cos(2 * math.pi * xs)
    elif name == "pod":
        rad = np.hypot(xs - 0.5, ys - 0.5)
        r = 0.18 + 0.10 * rad
        g = 0.65 - 0.25 * rad
        b = 0.25 + 0.08 * np.sin(3 * math.pi * xs)
    elif name == "pyramid":
        r = 0.80 - 0.15 * ys
        g = 0.65 - 0.10 * (xs + ys) / 2
        b = 0.35 + 0.05 * xs
    else:
        raise KeyError(name)
    rgb = np.clip(np.stack([r, g, b], axis=2), 0.0, 1.0).astype(np.float32)
    return TextureAtlas(rgb=rgb)


def smiley_patch(size: int = PATCH_SIZE) -> np.ndarray:
    """Soft-edged smiley sticker, the seed content pasted on the car."""
    ys, xs = _coords(size)
    cx = cy = 0.5
    d = np.hypot(xs - cx, ys - cy)

    def soft_disc(dist, radius, softness=0.03):
        return np.clip((radius - dist) / softness, 0.0, 1.0)

    face = soft_disc(d, 0.42)
    eye_l = soft_disc(np.hypot(xs - 0.35, ys - 0.38), 0.06)
    eye_r = soft_disc(np.hypot(xs - 0.65, ys - 0.38), 0.06)
    mouth_d = np.hypot(xs - 0.5, ys - 0.52)
    mouth = soft_disc(mouth_d, 0.25) * (1 - soft_disc(mouth_d, 0.18)) * (ys > 0.58)

    base = np.stack([0.55 + 0.1 * xs, 0.20 + 0.05 * ys, 0.15 + 0.0 * xs], axis=2)
    face_col = np.array([0.95, 0.85, 0.20])
    dark = np.array([0.12, 0.10, 0.08])
    img = base * (1 - face[:, :, None]) + face_col * face[:, :, None]
    ink = np.clip(eye_l + eye_r + mouth, 0, 1)[:, :, None]
    img = img * (1 - ink) + dark * ink
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def background(idx: int, size: int = IMAGE_SIZE) -> np.ndarray:
    """Smooth sky-to-ground gradients; index selects the palette."""
    ys, _ = _coords(size)
    if idx % 2 == 0:
        top = np.array([0.55, 0.70, 0.85])
        bottom = np.array([0.45, 0.48, 0.40])
    else:
        top = np.array([0.75, 0.60, 0.50])
        bottom = np.array([0.35, 0.33, 0.30])
    img = top[None, None, :] * (1 - ys[:, :, None]) + bottom[None, None, :] * ys[:, :, None]
    return img.astype(np.float32)


def default_backgrounds(size: int = IMAGE_SIZE) -> list[np.ndarray]:
    return [background(0, size)]
