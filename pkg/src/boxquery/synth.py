"""Synthetic street-scene stand-in: convex shapes over a background with exact polygons.

Shapes are painted in order, later ones occluding earlier ones. The emitted
polygon of a shape is its visible part, so its vertices are what an annotator
would click. The background is one polygon equal to the image border.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import shapely
from shapely.geometry import Polygon as ShapelyPolygon

from boxquery.clickcost import Polygon, image_clicks
from boxquery.formats import mask_maxval, round6, write_mask, write_polygons, write_ppm

MIN_VISIBLE_AREA = 30.0


@dataclass(frozen=True)
class SceneSpec:
    height: int = 128
    width: int = 128
    classes: int = 5
    shapes_per_image: tuple = (3, 6)
    vertex_range: tuple = (3, 8)
    color_noise: float = 0.08
    instance_jitter: float = 0.03
    radius_range: tuple = (10.0, 30.0)
    class_weights: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least 2 classes (class 0 is background)")
        if self.vertex_range[0] < 3 or self.vertex_range[1] < self.vertex_range[0]:
            raise ValueError("vertex_range must satisfy 3 <= min <= max")
        lo, hi = self.shapes_per_image
        if lo < 0 or hi < lo:
            raise ValueError("shapes_per_image must satisfy 0 <= min <= max")

    def weights(self):
        """Normalized sampling weights of the foreground classes; the default decays by 0.6 per class."""
        k = self.classes - 1
        w = np.asarray(self.class_weights, dtype=np.float64) if self.class_weights else 0.6 ** np.arange(k)
        if len(w) != k or np.any(w < 0) or w.sum() <= 0:
            raise ValueError(f"class_weights needs {k} non-negative entries")
        return w / w.sum()


def class_colors(n_classes):
    """Base colors spread evenly in hue around a mid-gray, moderate saturation."""
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    chroma = 0.22
    # orthonormal basis of the plane orthogonal to the gray axis
    u = np.array([1.0, -1.0, 0.0]) / np.sqrt(2)
    v = np.array([1.0, 1.0, -2.0]) / np.sqrt(6)
    return 0.5 + chroma * (np.cos(angles)[:, None] * u + np.sin(angles)[:, None] * v)


def rasterize(vertices, shape):
    """Even-odd scanline fill; a pixel is inside when its center is."""
    h, w = shape
    v = np.asarray(vertices, dtype=np.float64)
    out = np.zeros(shape, dtype=bool)
    x0, y0 = v[:, 0], v[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    r_lo = max(int(np.floor(y0.min())), 0)
    r_hi = min(int(np.ceil(y0.max())), h - 1)
    for r in range(r_lo, r_hi + 1):
        yc = r + 0.5
        hit = ((y0 <= yc) & (y1 > yc)) | ((y1 <= yc) & (y0 > yc))
        if not hit.any():
            continue
        xs = np.sort(x0[hit] + (yc - y0[hit]) * (x1[hit] - x0[hit]) / (y1[hit] - y0[hit]))
        for xa, xb in zip(xs[0::2], xs[1::2]):
            c0 = max(int(np.ceil(xa - 0.5)), 0)
            c1 = min(int(np.ceil(xb - 0.5)), w)
            if c1 > c0:
                out[r, c0:c1] = True
    return out


def _convex_shape(rng, spec):
    n = int(rng.integers(spec.vertex_range[0], spec.vertex_range[1] + 1))
    rx, ry = rng.uniform(*spec.radius_range, size=2)
    cx = rng.uniform(rx * 0.5, spec.width - rx * 0.5)
    cy = rng.uniform(ry * 0.5, spec.height - ry * 0.5)
    rot = rng.uniform(0, 2 * np.pi)
    # jittered evenly spaced angles keep edges long enough to be annotated
    base = np.arange(n) * 2 * np.pi / n
    angles = base + rng.uniform(-0.3, 0.3, size=n) * (2 * np.pi / n)
    px, py = rx * np.cos(angles), ry * np.sin(angles)
    xs = cx + px * np.cos(rot) - py * np.sin(rot)
    ys = cy + px * np.sin(rot) + py * np.cos(rot)
    poly = ShapelyPolygon(np.c_[np.clip(xs, 0, spec.width), np.clip(ys, 0, spec.height)])
    return poly.convex_hull


def _clean(poly):
    """Exterior ring of a simple polygon without closing duplicate or collinear points."""
    poly = shapely.set_precision(poly, 0.0).simplify(0.0)
    coords = np.asarray(poly.exterior.coords)[:-1]
    return tuple((round6(x), round6(y)) for x, y in coords)


def _place_shapes(rng, spec):
    n_shapes = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
    weights = spec.weights()
    placed = []  # [class, full shape, visible part]
    for _ in range(n_shapes):
        for _attempt in range(20):
            shape = _convex_shape(rng, spec)
            if shape.area < MIN_VISIBLE_AREA:
                continue
            updated = []
            ok = True
            for cls, full, visible in placed:
                rest = visible.difference(shape)
                if rest.is_empty:
                    ok = False
                    break
                if not isinstance(rest, ShapelyPolygon) or len(rest.interiors) or rest.area < MIN_VISIBLE_AREA:
                    ok = False
                    break
                updated.append([cls, full, rest])
            if ok:
                cls = 1 + int(rng.choice(len(weights), p=weights))
                placed = updated + [[cls, shape, shape]]
                break
    return placed


def generate_scene(spec, index):
    """Image (uint8 RGB), ground-truth mask and polygons for scene ``index``.

    Deterministic in ``(spec, index)``.
    """
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.height, spec.width
    image_id = f"{index:05d}"
    mask = np.zeros((h, w), dtype=np.uint8 if spec.classes <= 255 else np.uint16)
    polygons = [Polygon(image_id, 0, ((0.0, 0.0), (float(w), 0.0), (float(w), float(h)), (0.0, float(h))))]
    placed = _place_shapes(rng, spec)

    colors = class_colors(spec.classes)
    img = np.empty((h, w, 3))
    img[:] = colors[0] + rng.normal(0, spec.instance_jitter, 3)
    for cls, full, visible in placed:
        inside = rasterize(np.asarray(full.exterior.coords)[:-1], (h, w))
        mask[inside] = cls
        img[inside] = colors[cls] + rng.normal(0, spec.instance_jitter, 3)
    for cls, full, visible in placed:
        polygons.append(Polygon(image_id, cls, _clean(visible)))
    img += rng.normal(0, spec.color_noise, img.shape)
    image = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    return image, mask, polygons


def _write_split(root, spec, indices):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    all_polys, lines = [], []
    c_p = c_c = 0
    seen = np.zeros(spec.classes, dtype=bool)
    for idx in indices:
        image, mask, polys = generate_scene(spec, idx)
        image_id = polys[0].image_id
        write_ppm(root / "images" / f"{image_id}.ppm", image)
        write_mask(root / "masks" / f"{image_id}.pgm", mask, spec.classes)
        all_polys.extend(polys)
        lines.append(f"images/{image_id}.ppm")
        p, c = image_clicks(polys, mask)
        c_p += p
        c_c += c
        seen[np.unique(mask)] = True
    write_polygons(root / "polygons.jsonl", all_polys)
    (root / "manifest.txt").write_text("".join(line + "\n" for line in lines))
    info = {
        "classes": spec.classes, "height": spec.height, "width": spec.width, "images": len(lines),
        "ignore_id": mask_maxval(spec.classes), "c_p": c_p, "c_c": c_c, "spec": asdict(spec),
    }
    (root / "dataset.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
    return info, seen


def generate_dataset(spec, n_pool, n_val, out_dir):
    """Write pool and validation splits under ``out_dir``; returns both info dicts.

    Pool scenes use indices ``0..`` and validation scenes continue after a gap,
    so the splits never share a scene. If a foreground class is missing from the
    pool, further scene indices are drawn until all classes are covered.
    """
    if n_pool < 1 or n_val < 1:
        raise ValueError("n_pool and n_val must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    indices = list(range(n_pool))
    for _ in range(50):
        seen = np.zeros(spec.classes, dtype=bool)
        for idx in indices:
            seen[np.unique(generate_scene(spec, idx)[1])] = True
        if seen.all():
            break
        indices = [i + n_pool for i in indices]
    else:
        raise RuntimeError("could not cover every class in the pool; increase n_pool")
    pool_info, _ = _write_split(out_dir / "pool", spec, indices)
    val_start = max(indices) + 1_000_000
    val_info, _ = _write_split(out_dir / "val", spec, range(val_start, val_start + n_val))
    return pool_info, val_info
