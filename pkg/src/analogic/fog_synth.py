"""Procedural fog testbed.

Layered 2.5-D toy scenes (flat-shaded objects on a ground plane under a sky) with exact
depth, Koschmieder fog rendering, the closed-form gist of that fog, and a
PNG + JSON manifest dataset builder. Source and target domains share scene
geometry statistics but differ in palette and texture.
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image as PILImage

from .gist_core import Gist, ShapeError

log = logging.getLogger(__name__)

MANIFEST_VERSION = "analogic-manifest/1"
NEAR_PLANE = 0.1
FAR_PLANE = 80.0
DEPTH_LEVELS = 65535
TEXTURE_AMPLITUDE = 0.08
PALETTE_ROTATION_DEG = 120.0
CAMERA_HEIGHT = 1.5

SPLITS = ("train", "heldout_oracle")
STYLES = ("source", "target")

# source palette; the target palette is a hue rotation of it
_SKY_TOP = np.array([0.20, 0.40, 0.85])
_SKY_HORIZON = np.array([0.50, 0.68, 0.95])
_GROUND_NEAR = np.array([0.42, 0.26, 0.10])
_GROUND_FAR = np.array([0.45, 0.55, 0.18])
_OBJECT_COLORS = np.array([
    [0.80, 0.20, 0.15],
    [0.15, 0.45, 0.20],
    [0.20, 0.25, 0.60],
    [0.85, 0.75, 0.20],
    [0.10, 0.10, 0.12],
    [0.60, 0.35, 0.55],
])


@dataclass(frozen=True)
class FogParams:
    beta: float  # 1/m
    airlight: tuple = (0.85, 0.85, 0.85)

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"fog beta must be > 0, got {self.beta}")
        if len(self.airlight) != 3 or not all(0.0 <= a <= 1.0 for a in self.airlight):
            raise ValueError(f"airlight must be three values in [0, 1], got {self.airlight}")

    def to_json(self):
        return {"beta": float(self.beta), "airlight": [float(a) for a in self.airlight]}

    @classmethod
    def from_json(cls, d):
        return cls(beta=float(d["beta"]), airlight=tuple(float(a) for a in d["airlight"]))


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    width: int
    height: int
    object_count: int = 4
    style: str = "source"

    def __post_init__(self):
        if self.style not in STYLES:
            raise ValueError(f"style must be one of {STYLES}, got {self.style!r}")
        if self.object_count < 0:
            raise ValueError("object_count must be >= 0")


def _hue_rotation(deg):
    # Rodrigues rotation about the grey axis
    k = np.ones(3) / np.sqrt(3.0)
    th = np.deg2rad(deg)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * (K @ K)


_TARGET_ROT = _hue_rotation(PALETTE_ROTATION_DEG)


def _value_noise(rng, h, w, octaves=3):
    """Perlin-style smooth noise in [-1, 1], three colour channels."""
    out = np.zeros((h, w, 3))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = 2 ** (o + 2)
        gh, gw = cells + 1, 2 * cells + 1
        grid = rng.uniform(-1, 1, size=(gh, gw, 3))
        ys = np.linspace(0, gh - 1, h)
        xs = np.linspace(0, gw - 1, w)
        y0 = np.minimum(np.floor(ys).astype(int), gh - 2)
        x0 = np.minimum(np.floor(xs).astype(int), gw - 2)
        fy = ys - y0
        fx = xs - x0
        # smoothstep fade
        fy = (fy * fy * (3 - 2 * fy))[:, None, None]
        fx = (fx * fx * (3 - 2 * fx))[None, :, None]
        a = grid[y0][:, x0]
        b = grid[y0][:, x0 + 1]
        c = grid[y0 + 1][:, x0]
        d = grid[y0 + 1][:, x0 + 1]
        out += amp * ((a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy)
        total += amp
        amp *= 0.5
    return out / total


def generate_scene(spec: SceneSpec):
    """Render ``(image, depth)`` for a scene; float64, image HxWx3, depth HxW in metres.

    Geometry is drawn from ``spec.seed`` alone, so the two styles of one seed
    show the same layout.
    """
    W, H = int(spec.width), int(spec.height)
    if W <= 0 or H <= 0:
        raise ValueError(f"scene must have positive area, got {W}x{H}")
    geo_rng, tex_rng = [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(2)]

    horizon = H * geo_rng.uniform(0.33, 0.45)
    rows = np.arange(H) + 0.5
    # ground depth follows the pinhole relation d = cam_h * f / (y - horizon)
    focal_px = 3.0 * (H - horizon) / CAMERA_HEIGHT  # bottom row sits near 3 m
    focal = CAMERA_HEIGHT * focal_px
    below = rows > horizon + 0.5
    ground_d = np.full(H, FAR_PLANE)
    ground_d[below] = np.minimum(focal / (rows[below] - horizon), FAR_PLANE)

    depth = np.repeat(ground_d[:, None], W, axis=1)
    image = np.zeros((H, W, 3))

    sky_t = np.clip(rows / max(horizon, 1e-6), 0, 1)[:, None]
    sky = _SKY_TOP * (1 - sky_t) + _SKY_HORIZON * sky_t
    g_t = np.clip((ground_d - 3.0) / 40.0, 0, 1)[:, None]
    ground = _GROUND_NEAR * (1 - g_t) + _GROUND_FAR * g_t
    col = np.where(below[:, None], ground, sky)
    image[:] = col[:, None, :]

    objects = []
    for _ in range(spec.object_count):
        d_o = geo_rng.uniform(4.0, 35.0)
        h_m = geo_rng.uniform(1.5, 5.0)
        w_m = geo_rng.uniform(1.0, 6.0)
        cx = geo_rng.uniform(0, W)
        color = _OBJECT_COLORS[geo_rng.integers(len(_OBJECT_COLORS))]
        shade = geo_rng.uniform(0.8, 1.1)
        ellipse = bool(geo_rng.integers(2))
        objects.append((d_o, h_m, w_m, cx, color * shade, ellipse))

    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    for d_o, h_m, w_m, cx, color, ellipse in sorted(objects, key=lambda o: -o[0]):
        base = horizon + focal / d_o
        hp = h_m * focal_px / d_o
        wp = w_m * focal_px / d_o
        top = base - hp
        if ellipse:
            cy = (base + top) / 2
            mask = ((xx - cx) / (wp / 2)) ** 2 + ((yy - cy) / (hp / 2)) ** 2 <= 1.0
        else:
            mask = (np.abs(xx - cx) <= wp / 2) & (yy >= top) & (yy <= base)
        image[mask] = np.clip(color, 0, 1)
        depth[mask] = d_o

    if spec.style == "target":
        image = image @ _TARGET_ROT.T
        image = image + TEXTURE_AMPLITUDE * _value_noise(tex_rng, H, W)
    image = np.clip(image, 0.0, 1.0)
    depth = np.clip(depth, NEAR_PLANE, FAR_PLANE)
    return image, depth


def _check_depth(depth):
    if not np.all(depth > 0):
        raise ValueError("depth must be strictly positive")


def transmittance(depth, p: FogParams):
    _check_depth(depth)
    return np.exp(-p.beta * np.asarray(depth, dtype=np.float64))


def render_fog(clear, depth, p: FogParams):
    """Koschmieder fog: ``clear * t + airlight * (1 - t)`` with ``t = exp(-beta d)``."""
    clear = np.asarray(clear, dtype=np.float64)
    if clear.shape[:2] != np.shape(depth):
        raise ShapeError(f"image {clear.shape} and depth {np.shape(depth)} disagree")
    t = transmittance(depth, p)[..., None]
    A = np.asarray(p.airlight, dtype=np.float64)
    return clear * t + A * (1 - t)


def oracle_gist(depth, p: FogParams, channels: int = 3) -> Gist:
    """Closed-form gist of the fog model: ``M = t``, ``N = airlight * (1 - t)``."""
    t = transmittance(depth, p)[..., None]
    M = np.repeat(t, channels, axis=-1)
    N = np.asarray(p.airlight, dtype=np.float64)[:channels] * (1 - M)
    return Gist(M, N)


# ---------------------------------------------------------------- storage


def quantize_image(img):
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def dequantize_image(q):
    return q.astype(np.float64) / 255.0


def quantize_depth(depth, far=FAR_PLANE):
    q = (np.clip(depth, NEAR_PLANE, far) - NEAR_PLANE) / (far - NEAR_PLANE) * DEPTH_LEVELS
    return np.round(q).astype(np.uint16)


def dequantize_depth(q, far=FAR_PLANE):
    return NEAR_PLANE + q.astype(np.float64) / DEPTH_LEVELS * (far - NEAR_PLANE)


def save_png(path, img):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        PILImage.fromarray(quantize_image(img)).save(path, optimize=False)
    except OSError as e:
        raise OSError(f"failed to write {path}: {e}") from e


def save_depth_png(path, depth, far=FAR_PLANE):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        PILImage.fromarray(quantize_depth(depth, far)).save(path, optimize=False)
    except OSError as e:
        raise OSError(f"failed to write {path}: {e}") from e


def load_png(path):
    with PILImage.open(path) as im:
        return dequantize_image(np.asarray(im.convert("RGB")))


def load_depth_png(path, far=FAR_PLANE):
    with PILImage.open(path) as im:
        return dequantize_depth(np.asarray(im, dtype=np.uint16), far)


# ---------------------------------------------------------------- dataset


@dataclass
class DatasetConfig:
    out_dir: str
    width: int = 64
    height: int = 32
    source_pairs: int = 256
    target_train: int = 256
    target_heldout: int = 64
    # per 10 m of scene depth; divided by 10 to get 1/m
    beta_range: tuple = (0.8, 1.2)
    airlight_range: tuple = (0.8, 0.9)
    object_count: tuple = (2, 6)
    seed: int = 0
    target_depth_noise: float = 0.0
    workers: int = 1

    def validate(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        for k in ("source_pairs", "target_train", "target_heldout"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        lo, hi = self.beta_range
        if not 0 < lo <= hi:
            raise ValueError(f"beta_range must satisfy 0 < lo <= hi, got {self.beta_range}")
        lo, hi = self.airlight_range
        if not 0 <= lo <= hi <= 1:
            raise ValueError(f"airlight_range must lie in [0, 1], got {self.airlight_range}")
        if self.target_depth_noise < 0:
            raise ValueError("target_depth_noise must be >= 0")


@dataclass
class ManifestEntry:
    id: str
    clear_path: str
    depth_path: str
    style: str
    split: str
    foggy_path: Optional[str] = None
    fog_params: Optional[FogParams] = None

    def to_json(self):
        d = asdict(self)
        d["fog_params"] = self.fog_params.to_json() if self.fog_params else None
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        if d.get("fog_params") is not None:
            d["fog_params"] = FogParams.from_json(d["fog_params"])
        return cls(**d)


@dataclass
class DatasetManifest:
    root: Path
    entries: list
    config: dict = field(default_factory=dict)
    far: float = FAR_PLANE
    version: str = MANIFEST_VERSION

    def select(self, style=None, split=None, paired=None):
        out = []
        for e in self.entries:
            if style is not None and e.style != style:
                continue
            if split is not None and e.split != split:
                continue
            if paired is not None and (e.foggy_path is not None) != paired:
                continue
            out.append(e)
        return out

    @property
    def source_pairs(self):
        return self.select(style="source", split="train", paired=True)

    @property
    def target_train(self):
        return self.select(style="target", split="train")

    @property
    def heldout(self):
        return self.select(style="target", split="heldout_oracle")

    def path(self, rel):
        return self.root / rel

    def load_clear(self, e):
        return load_png(self.path(e.clear_path))

    def load_foggy(self, e):
        if e.foggy_path is None:
            raise ValueError(f"entry {e.id} has no foggy render")
        return load_png(self.path(e.foggy_path))

    def load_depth(self, e):
        return load_depth_png(self.path(e.depth_path), self.far)

    def to_json(self):
        return {
            "version": self.version,
            "config": self.config,
            "depth_quantization": {
                "near": NEAR_PLANE,
                "far": self.far,
                "levels": DEPTH_LEVELS,
                "bits": 16,
                "mapping": "depth = near + q / levels * (far - near)",
            },
            "entries": [e.to_json() for e in self.entries],
        }

    def write(self, path):
        path = Path(path)
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)
            f.write("\n")
        return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path) as f:
        raw = json.load(f)
    if raw.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {raw.get('version')!r}")
    quant = raw.get("depth_quantization", {})
    m = DatasetManifest(
        root=path.parent,
        entries=[ManifestEntry.from_json(e) for e in raw["entries"]],
        config=raw.get("config", {}),
        far=float(quant.get("far", FAR_PLANE)),
    )
    for e in m.entries:
        if e.split not in SPLITS:
            raise ValueError(f"{path}: entry {e.id} has unknown split {e.split!r}")
        for rel in (e.clear_path, e.depth_path, e.foggy_path):
            if rel is not None and not m.path(rel).exists():
                raise FileNotFoundError(f"{path}: entry {e.id} references missing file {m.path(rel)}")
    return m


def _entry_rng(seed, kind, index):
    return np.random.default_rng(np.random.SeedSequence([seed, kind, index]))


_KINDS = {"src": 0, "tgt": 1, "hld": 2}


def _build_entry(cfg: DatasetConfig, prefix: str, index: int):
    root = Path(cfg.out_dir)
    rng = _entry_rng(cfg.seed, _KINDS[prefix], index)
    style = "source" if prefix == "src" else "target"
    split = "heldout_oracle" if prefix == "hld" else "train"
    scene_seed = int(rng.integers(2**63 - 1))
    n_obj = int(rng.integers(cfg.object_count[0], cfg.object_count[1] + 1))
    beta = float(rng.uniform(*cfg.beta_range)) / 10.0
    a = float(rng.uniform(*cfg.airlight_range))
    fog = FogParams(beta=beta, airlight=(a, a, a))

    eid = f"{prefix}-{index:05d}"
    image, depth = generate_scene(SceneSpec(scene_seed, cfg.width, cfg.height, n_obj, style))
    e = ManifestEntry(
        id=eid,
        clear_path=f"clear/{eid}.png",
        depth_path=f"depth/{eid}.png",
        style=style,
        split=split,
    )
    stored_depth = depth
    if style == "target" and cfg.target_depth_noise > 0:
        stored_depth = depth * np.exp(cfg.target_depth_noise * rng.standard_normal(depth.shape))
    save_png(root / e.clear_path, image)
    save_depth_png(root / e.depth_path, stored_depth)

    if prefix in ("src", "hld"):
        # fog is rendered from the stored clear image so the pair is exact up to output rounding
        clear_q = dequantize_image(quantize_image(image))
        depth_q = dequantize_depth(quantize_depth(depth))
        e.foggy_path = f"foggy/{eid}.png"
        e.fog_params = fog
        save_png(root / e.foggy_path, render_fog(clear_q, depth_q, fog))
    return e


def build_dataset(cfg: DatasetConfig) -> DatasetManifest:
    """Generate the toy corpus under ``cfg.out_dir`` and write ``manifest.json``."""
    cfg.validate()
    root = Path(cfg.out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {root}: {e}") from e

    jobs = [("src", i) for i in range(cfg.source_pairs)]
    jobs += [("tgt", i) for i in range(cfg.target_train)]
    jobs += [("hld", i) for i in range(cfg.target_heldout)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            entries = list(ex.map(_build_entry, [cfg] * len(jobs), *zip(*jobs)))
    else:
        entries = [_build_entry(cfg, p, i) for p, i in jobs]

    conf = asdict(cfg)
    conf.pop("out_dir")
    conf.pop("workers")
    manifest = DatasetManifest(root=root, entries=entries, config=conf)
    manifest.write(root / "manifest.json")
    log.info("wrote %d entries to %s", len(entries), root / "manifest.json")
    return manifest
