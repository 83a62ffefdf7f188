"""Synthetic restoration data: rendered scenes, degradations, netpbm I/O, shards.

Every random stream is keyed by an integer list fed to default_rng, so a
(spec, seed) pair pins each byte of a shard: clean image i uses
[seed, 0, i], the degradation pass uses [seed, 1].
"""

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .tensor import read_tensor, write_tensor


class NetpbmError(Exception):
    """Malformed PGM/PPM stream."""


class ShardError(Exception):
    """Malformed dataset shard or sidecar."""


SHARD_FORMAT = "eqreg-shard-v1"


# --- scene synthesis ------------------------------------------------------------


@dataclass(frozen=True)
class SceneSpec:
    """Ranges for the shape compositor; all draws are uniform."""

    size: int = 32
    shapes_min: int = 3
    shapes_max: int = 6
    disc_radius: tuple = (2.0, 6.0)
    bar_length: tuple = (6.0, 16.0)
    bar_width: tuple = (1.0, 3.0)
    intensity: tuple = (0.2, 1.0)

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"size must be >= 1, got {self.size}")
        if not 0 < self.shapes_min <= self.shapes_max:
            raise ValueError(f"bad shape count range [{self.shapes_min}, {self.shapes_max}]")


def sample_shapes(spec, rng):
    """Draw the shape list for one scene; order of draws is part of the format."""
    count = int(rng.integers(spec.shapes_min, spec.shapes_max + 1))
    shapes = []
    for _ in range(count):
        kind = "disc" if rng.integers(0, 2) == 0 else "bar"
        cy = rng.uniform(0, spec.size - 1)
        cx = rng.uniform(0, spec.size - 1)
        if kind == "disc":
            shapes.append({
                "kind": kind, "cy": cy, "cx": cx,
                "radius": rng.uniform(*spec.disc_radius),
                "value": rng.uniform(*spec.intensity),
            })
        else:
            shapes.append({
                "kind": kind, "cy": cy, "cx": cx,
                "length": rng.uniform(*spec.bar_length),
                "width": rng.uniform(*spec.bar_width),
                "angle": rng.uniform(0, 2 * np.pi),
                "value": rng.uniform(*spec.intensity),
            })
    return shapes


def render_scene(spec, shapes):
    """Composite shapes by per-pixel max; returns (1, size, size) float64 in [0, 1]."""
    yy, xx = np.mgrid[0 : spec.size, 0 : spec.size].astype(np.float64)
    img = np.zeros((spec.size, spec.size))
    for s in shapes:
        dy = yy - s["cy"]
        dx = xx - s["cx"]
        if s["kind"] == "disc":
            inside = dy * dy + dx * dx <= s["radius"] ** 2
        else:
            along = dx * np.cos(s["angle"]) + dy * np.sin(s["angle"])
            perp = -dx * np.sin(s["angle"]) + dy * np.cos(s["angle"])
            inside = (np.abs(along) <= s["length"] / 2) & (np.abs(perp) <= s["width"] / 2)
        img = np.maximum(img, np.where(inside, s["value"], 0.0))
    return np.clip(img, 0.0, 1.0)[None]


def generate_clean(spec, seed, count):
    """(count, 1, size, size) float32 stack of rendered scenes."""
    out = np.empty((count, 1, spec.size, spec.size), dtype=np.float32)
    for i in range(count):
        rng = np.random.default_rng([seed, 0, i])
        out[i] = render_scene(spec, sample_shapes(spec, rng)).astype(np.float32)
    return out


# --- degradations ---------------------------------------------------------------


@dataclass(frozen=True)
class GaussianNoise:
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class MaskInpaint:
    """Zero out pixels with probability rate (mask value 0), then add noise."""

    rate: float
    sigma: float = 0.0

    def __post_init__(self):
        if not 0 <= self.rate <= 1:
            raise ValueError(f"rate must be in [0, 1], got {self.rate}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


def degrade(clean, deg, seed):
    """Apply a degradation to a clean stack; returns (degraded, mask or None).

    The mask draw precedes the noise draw, which fixes the stream layout.
    """
    rng = np.random.default_rng([seed, 1])
    clean = np.asarray(clean)
    if isinstance(deg, GaussianNoise):
        noise = rng.normal(0.0, deg.sigma, size=clean.shape)
        return (clean + noise).astype(clean.dtype), None
    if isinstance(deg, MaskInpaint):
        mask = (rng.random(clean.shape) >= deg.rate).astype(clean.dtype)
        noise = rng.normal(0.0, deg.sigma, size=clean.shape)
        return (mask * clean + noise).astype(clean.dtype), mask
    raise TypeError(f"unknown degradation {type(deg).__name__}")


# --- PGM (P5) / PPM (P6) --------------------------------------------------------


def _parse_header_ints(buf, start, want):
    """Scan `want` ASCII integers after position start, honoring # comments.

    Returns (values, offset of first data byte).
    """
    vals = []
    i = start
    n = len(buf)
    while len(vals) < want:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i] == ord("#"):
            while i < n and buf[i] != ord("\n"):
                i += 1
            continue
        j = i
        while j < n and not buf[j : j + 1].isspace():
            j += 1
        if j == i:
            raise NetpbmError("truncated netpbm header")
        token = buf[i:j]
        if not token.isdigit():
            raise NetpbmError(f"expected integer in header, got {token!r}")
        vals.append(int(token))
        i = j
    if i >= n:
        raise NetpbmError("missing whitespace after netpbm header")
    return vals, i + 1  # single whitespace byte separates header from data


def load_image(path):
    """Read a binary PGM/PPM with maxval 255 into a (1, C, H, W) float32 in [0, 1]."""
    with open(path, "rb") as fp:
        buf = fp.read()
    magic = buf[:2]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise NetpbmError(f"unsupported magic {magic!r}, expected P5 or P6")
    (w, h, maxval), off = _parse_header_ints(buf, 2, 3)
    if maxval != 255:
        raise NetpbmError(f"only maxval 255 is supported, got {maxval}")
    need = w * h * channels
    data = buf[off : off + need]
    if len(data) < need:
        raise NetpbmError(f"expected {need} pixel bytes, got {len(data)}")
    img = np.frombuffer(data, dtype=np.uint8).reshape(h, w, channels)
    return (img.transpose(2, 0, 1)[None].astype(np.float32)) / 255.0


def save_image(path, img):
    """Write (C, H, W) or (1, C, H, W) floats as P5/P6, maxval 255.

    Values are clamped to [0, 1] and rounded half away from zero.
    """
    img = np.asarray(img)
    if img.ndim == 4:
        if img.shape[0] != 1:
            raise ValueError(f"can only save a single image, got batch {img.shape[0]}")
        img = img[0]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected (C, H, W) with C in (1, 3), got shape {img.shape}")
    c, h, w = img.shape
    quant = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fp:
        fp.write(b"P5\n" if c == 1 else b"P6\n")
        fp.write(f"{w} {h}\n255\n".encode("ascii"))
        fp.write(np.ascontiguousarray(quant.transpose(1, 2, 0)).tobytes())


# --- shards ---------------------------------------------------------------------


@dataclass
class Dataset:
    """In-memory shard: stacked tensors plus the sidecar metadata."""

    degraded: np.ndarray
    clean: np.ndarray
    mask: np.ndarray | None
    meta: dict

    def __len__(self):
        return self.degraded.shape[0]

    def inputs(self):
        """Network input stack; the mask rides along as an extra channel."""
        if self.mask is None:
            return self.degraded
        return np.concatenate([self.degraded, self.mask], axis=1)


def make_dataset(task, count, seed, spec=None, sigma=0.1, mask_rate=0.3):
    """Render, degrade and wrap a shard for the given task."""
    spec = spec or SceneSpec()
    if task == "denoise":
        deg = GaussianNoise(sigma)
    elif task == "inpaint":
        deg = MaskInpaint(mask_rate, sigma)
    else:
        raise ValueError(f"unknown task {task!r}")
    clean = generate_clean(spec, seed, count)
    degraded, mask = degrade(clean, deg, seed)
    records = ["degraded", "clean"] + (["mask"] if mask is not None else [])
    meta = {
        "format": SHARD_FORMAT,
        "task": task,
        "count": count,
        "channels": 1,
        "size": spec.size,
        "seed": seed,
        "sigma": sigma,
        "mask_rate": mask_rate if task == "inpaint" else None,
        "records": records,
        "scene": asdict(spec),
    }
    return Dataset(degraded, clean, mask, meta)


def write_shard(outdir, dataset):
    """data.eqt1 holds per-sample records in sidecar order; meta.json is sorted."""
    os.makedirs(outdir, exist_ok=True)
    arrays = {"degraded": dataset.degraded, "clean": dataset.clean, "mask": dataset.mask}
    roles = dataset.meta["records"]
    with open(os.path.join(outdir, "data.eqt1"), "wb") as fp:
        for i in range(len(dataset)):
            for role in roles:
                write_tensor(fp, arrays[role][i])
    with open(os.path.join(outdir, "meta.json"), "w", encoding="ascii") as fp:
        json.dump(dataset.meta, fp, sort_keys=True, indent=2)
        fp.write("\n")


def read_shard(indir):
    meta_path = os.path.join(indir, "meta.json")
    try:
        with open(meta_path, "r", encoding="ascii") as fp:
            meta = json.load(fp)
    except json.JSONDecodeError as exc:
        raise ShardError(f"unreadable sidecar {meta_path}: {exc}") from exc
    if meta.get("format") != SHARD_FORMAT:
        raise ShardError(f"unsupported shard format {meta.get('format')!r}")
    try:
        roles = meta["records"]
        count = meta["count"]
        size = meta["size"]
        channels = meta["channels"]
    except KeyError as exc:
        raise ShardError(f"sidecar {meta_path} is missing key {exc}") from exc
    if "degraded" not in roles or "clean" not in roles:
        raise ShardError(f"shard records {roles} lack degraded/clean")
    stacks = {role: [] for role in roles}
    with open(os.path.join(indir, "data.eqt1"), "rb") as fp:
        for _ in range(count):
            for role in roles:
                stacks[role].append(read_tensor(fp))
    shape = (count, channels, size, size)
    out = {}
    for role in roles:
        arr = np.stack(stacks[role]) if count else np.zeros(shape, dtype=np.float32)
        if arr.shape != shape:
            raise ShardError(f"{role} stack shape {arr.shape} does not match sidecar {shape}")
        out[role] = arr
    return Dataset(out["degraded"], out["clean"], out.get("mask"), meta)
