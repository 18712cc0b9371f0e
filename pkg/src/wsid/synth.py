"""Deterministic synthetic scenes with instance ground truth and weak supervision.

Shape classes (disk, square, triangle) stand in for semantic classes. Each
scene carries its subitizing label, a simulated class-response map and the
pseudo labels derived from it (CRF-refined mask, mask edges, offsets to
component centroids).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy import ndimage

from .crf import CrfParams, cam_to_pseudo_mask

CLASSES = ("disk", "square", "triangle")
CLASS_COLORS = {"disk": (205, 70, 60), "square": (70, 185, 80), "triangle": (80, 100, 215)}
CLASS_EROSION = {"disk": 0, "square": 1, "triangle": 0}
_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class SceneSpec:
    size: int = 64
    n_min: int = 1
    n_max: int = 4
    classes: tuple[str, ...] = CLASSES
    size_min: float = 6.0
    size_max: float = 10.0
    texture: float = 0.3
    color_jitter: float = 25.0
    min_gap: int = 4
    allow_adjacent_same_class: bool = False
    adjacent_gap_max: int = 2

    def __post_init__(self):
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError("need 1 <= n_min <= n_max")
        if any(c not in CLASSES for c in self.classes):
            raise ValueError(f"classes must be drawn from {CLASSES}")
        if self.allow_adjacent_same_class and self.n_max < 2:
            raise ValueError("adjacency stressor needs n_max >= 2")

    @classmethod
    def from_text(cls, text: str) -> "SceneSpec":
        """Parse ``key=value`` lines; tuples are comma separated."""
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in kinds:
                raise ValueError(f"unknown scene spec key {key!r}")
            t = str(kinds[key])
            if "tuple" in t:
                kw[key] = tuple(v.strip() for v in val.split(",") if v.strip())
            elif "bool" in t:
                kw[key] = val.lower() in ("1", "true", "yes", "on")
            elif "float" in t:
                kw[key] = float(val)
            else:
                kw[key] = int(val)
        return cls(**kw)

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name}={','.join(v) if isinstance(v, tuple) else v}")
        return "\n".join(out) + "\n"


STRESSOR = SceneSpec(n_min=2, n_max=4, allow_adjacent_same_class=True)


@dataclass
class PseudoMaps:
    cam: np.ndarray  # [H,W] in [0,1]
    saliency: np.ndarray  # [H,W] bool
    boundary: np.ndarray  # [H,W] {0,1}
    offsets: np.ndarray  # [2,H,W] normalized
    components: np.ndarray  # [H,W] int


@dataclass
class SceneSample:
    seed: int
    image: np.ndarray  # [3,H,W] float in [0,1], quantized to 1/255
    gt_instances: list[np.ndarray]
    class_ids: list[str]
    pseudo: PseudoMaps | None = None
    adjacent_pair: tuple[int, int] | None = None

    @property
    def t_star(self) -> int:
        return len(self.gt_instances)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[1:]

    def label_map(self) -> np.ndarray:
        lab = np.zeros(self.shape, dtype=np.int32)
        for k, m in enumerate(self.gt_instances, start=1):
            lab[m] = k
        return lab


# -- rasterization ------------------------------------------------------------------------
def _shape_mask(kind: str, cx: float, cy: float, r: float, angle: float, n: int) -> np.ndarray:
    ys, xs = np.mgrid[0:n, 0:n].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    if kind == "disk":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        c, s = np.cos(angle), np.sin(angle)
        u, v = c * dx + s * dy, -s * dx + c * dy
        h = r * 0.85
        return (np.abs(u) <= h) & (np.abs(v) <= h)
    if kind == "triangle":
        inside = np.ones((n, n), dtype=bool)
        rr = r * 1.2
        verts = [(cx + rr * np.cos(angle + k * 2 * np.pi / 3), cy + rr * np.sin(angle + k * 2 * np.pi / 3))
                 for k in range(3)]
        for k in range(3):
            (x0, y0), (x1, y1) = verts[k], verts[(k + 1) % 3]
            cross = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
            inside &= cross >= 0
        return inside
    raise ValueError(f"unknown shape class {kind!r}")


def _dilate(mask: np.ndarray, k: int) -> np.ndarray:
    if k <= 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=np.ones((3, 3), bool), iterations=k)


def _background(rng: np.random.Generator, n: int, texture: float) -> np.ndarray:
    base = rng.uniform(35, 85, size=3)
    gy, gx = rng.uniform(-12, 12, size=2)
    ys, xs = np.mgrid[0:n, 0:n] / max(n - 1, 1)
    img = base[:, None, None] + (gy * (ys - 0.5) + gx * (xs - 0.5))[None]
    if texture > 0:
        noise = ndimage.gaussian_filter(rng.normal(0, 1, (3, n, n)), sigma=(0, 1.5, 1.5))
        noise /= max(noise.std(), 1e-9)
        img = img + texture * 12.0 * noise
    return img


def _place(rng, kind, spec, taken, n, fixed=None):
    for _ in range(400):
        r = rng.uniform(spec.size_min, spec.size_max)
        angle = rng.uniform(0, 2 * np.pi)
        m = 2 + r * 1.2
        cx, cy = rng.uniform(m, n - 1 - m, size=2)
        mask = _shape_mask(kind, cx, cy, r, angle, n)
        if mask.sum() < 12:
            continue
        if not (mask & _dilate(taken, spec.min_gap)).any():
            return mask
    return None


def _place_adjacent(rng, kind, spec, anchor, taken, n):
    """A same-class shape 1..adjacent_gap_max px away from ``anchor``."""
    ays, axs = np.nonzero(anchor)
    acx, acy = axs.mean(), ays.mean()
    for _ in range(200):
        gap = int(rng.integers(1, spec.adjacent_gap_max + 1))
        r = rng.uniform(spec.size_min, spec.size_max)
        angle = rng.uniform(0, 2 * np.pi)
        theta = rng.uniform(0, 2 * np.pi)
        near, far = _dilate(anchor, gap), _dilate(anchor, gap + 1)
        others = taken & ~anchor
        for d in np.arange(r * 0.5, r + 3 * spec.size_max, 0.25):
            cx, cy = acx + d * np.cos(theta), acy + d * np.sin(theta)
            mask = _shape_mask(kind, cx, cy, r, angle, n)
            if (mask & near).any():
                continue
            m = 2 + r * 1.2
            if not (m <= cx <= n - 1 - m and m <= cy <= n - 1 - m):
                break
            if (mask & far).any() and mask.sum() >= 12 and not (mask & _dilate(others, spec.min_gap)).any():
                return mask
            break
    return None


def gen_scene(seed: int, spec: SceneSpec = SceneSpec()) -> SceneSample:
    rng = np.random.default_rng([int(seed), 0x5C3E])
    n = spec.size
    for _attempt in range(50):
        count = int(rng.integers(spec.n_min, spec.n_max + 1))
        kinds = [spec.classes[int(rng.integers(len(spec.classes)))] for _ in range(count)]
        taken = np.zeros((n, n), dtype=bool)
        masks: list[np.ndarray] = []
        pair = None
        ok = True
        for i, kind in enumerate(kinds):
            if spec.allow_adjacent_same_class and i == 1:
                kinds[1] = kinds[0]
                mask = _place_adjacent(rng, kinds[0], spec, masks[0], taken, n)
                pair = (0, 1)
            else:
                mask = _place(rng, kind, spec, taken, n)
            if mask is None:
                ok = False
                break
            masks.append(mask)
            taken |= mask
        if ok:
            break
    else:
        raise RuntimeError(f"could not place instances for seed {seed}")

    img = _background(rng, n, spec.texture)
    for kind, mask in zip(kinds, masks):
        color = np.array(CLASS_COLORS[kind]) + rng.uniform(-spec.color_jitter, spec.color_jitter, 3)
        ys, xs = np.nonzero(mask)
        shade = 1.0 + 0.06 * ((xs - xs.mean()) / max(np.ptp(xs), 1) - (ys - ys.mean()) / max(np.ptp(ys), 1))
        img[:, ys, xs] = color[:, None] * shade[None]
    img = img + rng.normal(0, 1.5, img.shape)
    img = np.clip(np.round(img), 0, 255) / 255.0
    return SceneSample(seed=int(seed), image=img, gt_instances=masks, class_ids=list(kinds), adjacent_pair=pair)


# -- weak supervision --------------------------------------------------------------------------
def simulate_cam(sample: SceneSample, blur: float = 1.0, noise: float = 0.05, erosion: dict | int | None = None,
                 seed: int | None = None) -> np.ndarray:
    """Coarse class-response map: eroded instance union, blurred, noised, in [0,1]."""
    rng = np.random.default_rng([sample.seed if seed is None else seed, 0xCA3])
    cam = np.zeros(sample.shape)
    for kind, m in zip(sample.class_ids, sample.gt_instances):
        k = CLASS_EROSION[kind] if erosion is None else (erosion.get(kind, 0) if isinstance(erosion, dict) else erosion)
        e = ndimage.binary_erosion(m, structure=_CROSS, iterations=k) if k > 0 else m
        if not e.any():
            e = m & (ndimage.distance_transform_edt(m) >= ndimage.distance_transform_edt(m).max())
        cam = np.maximum(cam, e.astype(float))
    if blur > 0:
        cam = ndimage.gaussian_filter(cam, blur)
    if noise > 0:
        cam = cam + noise * np.abs(ndimage.gaussian_filter(rng.normal(0, 1, cam.shape), 1.0)) * 2.0
    cam = np.clip(cam, 0.0, None)
    peak = cam.max()
    return cam / peak if peak > 0 else cam


def inner_boundary(labels: np.ndarray) -> np.ndarray:
    """Labelled pixels with a 4-neighbour carrying a different label (incl. background)."""
    lab = np.asarray(labels)
    out = np.zeros(lab.shape, dtype=bool)
    fg = lab > 0
    out[1:] |= fg[1:] & (lab[1:] != lab[:-1])
    out[:-1] |= fg[:-1] & (lab[:-1] != lab[1:])
    out[:, 1:] |= fg[:, 1:] & (lab[:, 1:] != lab[:, :-1])
    out[:, :-1] |= fg[:, :-1] & (lab[:, :-1] != lab[:, 1:])
    return out


def centroid_offsets(labels: np.ndarray) -> np.ndarray:
    """[2,H,W] normalized offsets from each labelled pixel to its region's mass centroid."""
    lab = np.asarray(labels)
    H, W = lab.shape
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    off = np.zeros((2, H, W))
    for k in np.unique(lab[lab > 0]):
        m = lab == k
        cx, cy = xs[m].mean(), ys[m].mean()
        off[0][m] = (cx - xs[m]) / (W / 2.0)
        off[1][m] = (cy - ys[m]) / (H / 2.0)
    return off


def merged_components(mask: np.ndarray, bridge: int = 1) -> np.ndarray:
    """Components of ``mask`` where gaps up to 2*bridge px are bridged."""
    grown = _dilate(mask, bridge)
    lab, _ = ndimage.label(grown, structure=np.ones((3, 3), bool))
    return np.where(mask, lab, 0)


def pseudo_supervision(sample: SceneSample, crf: CrfParams = CrfParams(), cam: np.ndarray | None = None,
                       **cam_kw) -> PseudoMaps:
    cam = simulate_cam(sample, **cam_kw) if cam is None else cam
    sal = cam_to_pseudo_mask(cam, sample.image * 255.0, crf)
    comps = merged_components(sal)
    return PseudoMaps(cam=cam, saliency=sal, boundary=inner_boundary(comps).astype(np.float64),
                      offsets=centroid_offsets(comps), components=comps)


def gt_maps(sample: SceneSample) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ground-truth (S, B, V) maps for oracle-driven fusion."""
    lab = sample.label_map()
    return (lab > 0).astype(np.float64), inner_boundary(lab).astype(np.float64), centroid_offsets(lab)


def make_dataset(seeds, spec: SceneSpec = SceneSpec(), with_pseudo: bool = True) -> list[SceneSample]:
    out = []
    for s in seeds:
        smp = gen_scene(int(s), spec)
        if with_pseudo:
            smp.pseudo = pseudo_supervision(smp)
        out.append(smp)
    return out


def training_data(samples: list[SceneSample], with_edges: bool = True):
    from .boundary import canny_planes
    from .network import TrainingData
    imgs = np.stack([s.image for s in samples])
    return TrainingData(
        images=imgs,
        saliency=np.stack([s.pseudo.saliency.astype(np.float64)[None] for s in samples]),
        boundary=np.stack([s.pseudo.boundary[None] for s in samples]),
        offsets=np.stack([s.pseudo.offsets for s in samples]),
        t_star=np.array([s.t_star for s in samples], dtype=np.float64),
        edges=canny_planes(imgs) if with_edges else None,
    )
