"""Synthetic aligned RGB-T crowd scenes, density maps and on-disk formats.

A scene is a visible (H,W,3) / infrared (H,W,1) pair in [0,1] with point
head annotations and a ground-truth density map whose integral equals the
head count. People show up as dim textured discs in the visible image and
bright Gaussian blobs in the infrared one; both modalities share a smooth
background field so the scenes carry common structure plus complementary
per-modality content.

On disk a sample is a directory with vis.ppm (binary P6), ir.pgm (binary
P5), points.csv and gt_density.fcdm (FCDM magic, u32 LE height/width,
float32 LE row-major payload).
"""

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError

DEFAULT_DENSITY_SIGMA = 4.0  # px at 64x64


@dataclass
class SceneConfig:
    width: int = 64
    height: int = 64
    n_people: int = 20
    person_radius_range: tuple = (2.0, 5.0)
    illumination: float = 0.8
    noise_sigma: float = 0.02
    seed: int = 0

    def validate(self):
        if self.width < 32 or self.height < 32:
            raise ConfigError(f"scene must be at least 32x32, got {self.height}x{self.width}")
        if self.width % 16 or self.height % 16:
            raise ConfigError(f"scene dimensions must be divisible by 16, got {self.height}x{self.width}")
        if self.n_people < 0:
            raise ConfigError(f"n_people must be >= 0, got {self.n_people}")
        lo, hi = self.person_radius_range
        if not (0 < lo <= hi):
            raise ConfigError(f"bad person_radius_range {self.person_radius_range}")
        if not (0.0 <= self.illumination <= 1.0):
            raise ConfigError(f"illumination must be in [0,1], got {self.illumination}")
        if not (0.0 <= self.noise_sigma <= 1.0):
            raise ConfigError(f"noise_sigma must be in [0,1], got {self.noise_sigma}")


@dataclass
class RgbtSample:
    visible: np.ndarray            # (H, W, 3) float64 in [0, 1]
    infrared: np.ndarray           # (H, W, 1) float64 in [0, 1]
    points: np.ndarray             # (N, 2) float64, columns (x, y) in px
    gt_density: np.ndarray = field(default=None)  # (H, W, 1) float64, sums to N

    @property
    def height(self):
        return self.visible.shape[0]

    @property
    def width(self):
        return self.visible.shape[1]

    @property
    def count(self):
        return len(self.points)


def _empty_points():
    return np.zeros((0, 2), dtype=np.float64)


def _smooth_field(rng, height, width, cells=8):
    """Low-frequency random field in [-1, 1] from a bilinearly upsampled grid."""
    grid = rng.uniform(-1.0, 1.0, size=(cells, cells))
    ys = np.linspace(0, cells - 1, height)
    xs = np.linspace(0, cells - 1, width)
    y0 = np.minimum(ys.astype(int), cells - 2)
    x0 = np.minimum(xs.astype(int), cells - 2)
    ty = (ys - y0)[:, None]
    tx = (xs - x0)[None, :]
    a = grid[np.ix_(y0, x0)]
    b = grid[np.ix_(y0, x0 + 1)]
    c = grid[np.ix_(y0 + 1, x0)]
    d = grid[np.ix_(y0 + 1, x0 + 1)]
    return (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * c + tx * d)


def density_from_points(points, height, width, sigma=DEFAULT_DENSITY_SIGMA):
    """Rasterize point annotations into a (height, width) density map.

    Each point contributes a Gaussian kernel truncated at radius 3*sigma
    (and at the image border) then renormalized to unit mass, so the map
    sums to the number of points.
    """
    if sigma <= 0:
        raise DataError(f"sigma must be > 0, got {sigma}")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    density = np.zeros((height, width), dtype=np.float64)
    radius = 3.0 * sigma
    for x, y in points:
        if not (0 <= x < width and 0 <= y < height):
            raise DataError(f"point ({x}, {y}) outside {height}x{width} image")
        i0 = max(int(np.floor(y - radius)), 0)
        i1 = min(int(np.ceil(y + radius)), height - 1)
        j0 = max(int(np.floor(x - radius)), 0)
        j1 = min(int(np.ceil(x + radius)), width - 1)
        ii = np.arange(i0, i1 + 1)[:, None]
        jj = np.arange(j0, j1 + 1)[None, :]
        d2 = (ii - y) ** 2 + (jj - x) ** 2
        kern = np.exp(-d2 / (2.0 * sigma * sigma))
        kern[d2 > radius * radius] = 0.0
        total = kern.sum()
        if total <= 0.0:
            # degenerate tiny sigma: all mass on the nearest pixel
            density[min(int(round(y)), height - 1), min(int(round(x)), width - 1)] += 1.0
            continue
        density[i0:i1 + 1, j0:j1 + 1] += kern / total
    return density


def synth_scene(cfg: SceneConfig) -> RgbtSample:
    """Render one synthetic aligned RGB-T crowd scene, deterministic in cfg."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    h, w, n = cfg.height, cfg.width, cfg.n_people

    shared = _smooth_field(rng, h, w)
    vis_own = _smooth_field(rng, h, w)
    ir_own = _smooth_field(rng, h, w)

    vis = np.empty((h, w, 3))
    base = 0.55 + 0.16 * shared + 0.06 * vis_own
    for ch, gain in enumerate((1.0, 0.96, 0.90)):
        vis[:, :, ch] = cfg.illumination * gain * base
    ir = 0.42 + 0.14 * shared + 0.08 * ir_own

    if n > 0:
        xs = rng.uniform(1.0, w - 1.0, size=n)
        ys = rng.uniform(1.0, h - 1.0, size=n)
        radii = rng.uniform(*cfg.person_radius_range, size=n)
        points = np.column_stack([xs, ys])
    else:
        points = _empty_points()

    yy = np.arange(h)[:, None]
    xx = np.arange(w)[None, :]
    for k in range(n):
        x, y, r = points[k, 0], points[k, 1], radii[k]
        contrast = rng.uniform(0.12, 0.28)
        tint = rng.uniform(-0.05, 0.05, size=3)
        ir_amp = rng.uniform(0.35, 0.55)
        i0, i1 = max(int(y - 3 * r), 0), min(int(y + 3 * r) + 1, h)
        j0, j1 = max(int(x - 3 * r), 0), min(int(x + 3 * r) + 1, w)
        d2 = (yy[i0:i1] - y) ** 2 + (xx[:, j0:j1] - x) ** 2
        disc = d2 <= r * r
        speckle = rng.uniform(0.6, 1.0, size=d2.shape)
        for ch in range(3):
            vis[i0:i1, j0:j1, ch] -= cfg.illumination * (contrast + tint[ch]) * disc * speckle
        blob_sigma = max(r / 1.5, 0.8)
        ir[i0:i1, j0:j1] += ir_amp * np.exp(-d2 / (2.0 * blob_sigma ** 2))

    vis += rng.normal(0.0, cfg.noise_sigma, size=(h, w, 3))
    ir += rng.normal(0.0, cfg.noise_sigma, size=(h, w))
    vis = np.clip(vis, 0.0, 1.0)
    ir = np.clip(ir, 0.0, 1.0)

    density = density_from_points(points, h, w, sigma=DEFAULT_DENSITY_SIGMA)
    # snap to the float32 grid so the .fcdm round-trip is bit-exact
    density = density.astype(np.float32).astype(np.float64)
    return RgbtSample(
        visible=vis,
        infrared=ir[:, :, None],
        points=points,
        gt_density=density[:, :, None],
    )


def make_dataset(n_samples, size=64, base_seed=0, people_range=(5, 40),
                 illumination_range=(0.5, 1.0), noise_sigma=0.02):
    """Generate a list of scenes with per-sample configs derived from base_seed.

    size is a square edge length or an (height, width) pair.
    """
    height, width = (size, size) if np.isscalar(size) else size
    master = np.random.default_rng(base_seed)
    samples = []
    for i in range(n_samples):
        cfg = SceneConfig(
            width=width,
            height=height,
            n_people=int(master.integers(people_range[0], people_range[1] + 1)),
            illumination=float(master.uniform(*illumination_range)),
            noise_sigma=noise_sigma,
            seed=int(master.integers(0, 2**63 - 1)),
        )
        samples.append(synth_scene(cfg))
    return samples


# on-disk formats -----------------------------------------------------------

def _quantize_u8(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _write_pnm(path, img, magic):
    data = _quantize_u8(img)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{magic}\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _read_pnm(path, magic, channels):
    name = str(path)
    try:
        raw = open(path, "rb").read()
    except FileNotFoundError:
        raise FormatError(f"missing file {name}")
    tokens = []
    pos = 0
    while len(tokens) < 4 and pos < len(raw):
        # header tokens separated by whitespace; '#' starts a comment
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if len(tokens) < 4 or tokens[0] != magic.encode("ascii"):
        raise FormatError(f"{name}: bad magic, expected {magic}")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise FormatError(f"{name}: malformed header")
    if maxval != 255:
        raise FormatError(f"{name}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    payload = raw[pos:]
    need = h * w * channels
    if len(payload) != need:
        raise FormatError(f"{name}: expected {need} pixel bytes, found {len(payload)}")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels)
    return img.astype(np.float64) / 255.0


def write_density(path, density):
    density = np.asarray(density, dtype=np.float64)
    if density.ndim == 3:
        density = density[:, :, 0]
    h, w = density.shape
    with open(path, "wb") as f:
        f.write(b"FCDM")
        f.write(struct.pack("<II", h, w))
        f.write(density.astype("<f4").tobytes())


def read_density(path):
    name = str(path)
    try:
        raw = open(path, "rb").read()
    except FileNotFoundError:
        raise FormatError(f"missing file {name}")
    if raw[:4] != b"FCDM":
        raise FormatError(f"{name}: bad magic {raw[:4]!r}, expected FCDM")
    if len(raw) < 12:
        raise FormatError(f"{name}: truncated header")
    h, w = struct.unpack("<II", raw[4:12])
    need = 12 + h * w * 4
    if len(raw) != need:
        raise FormatError(f"{name}: expected {need} bytes, found {len(raw)}")
    data = np.frombuffer(raw[12:], dtype="<f4").reshape(h, w)
    return data.astype(np.float64)


def write_sample(sample: RgbtSample, directory):
    """Write vis.ppm, ir.pgm, points.csv and gt_density.fcdm into directory."""
    from pathlib import Path

    d = Path(directory)
    _write_pnm(d / "vis.ppm", sample.visible, "P6")
    _write_pnm(d / "ir.pgm", sample.infrared, "P5")
    with open(d / "points.csv", "w", newline="\n") as f:
        f.write("x,y\n")
        for x, y in sample.points:
            f.write(f"{float(x)!r},{float(y)!r}\n")
    write_density(d / "gt_density.fcdm", sample.gt_density)


def read_sample(directory) -> RgbtSample:
    """Read a sample directory written by write_sample."""
    from pathlib import Path

    d = Path(directory)
    vis = _read_pnm(d / "vis.ppm", "P6", 3)
    ir = _read_pnm(d / "ir.pgm", "P5", 1)
    pts_path = d / "points.csv"
    if not pts_path.exists():
        raise FormatError(f"missing file {pts_path}")
    with open(pts_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["x", "y"]:
            raise FormatError(f"{pts_path}: bad header {header}")
        rows = []
        for row in reader:
            if len(row) != 2:
                raise FormatError(f"{pts_path}: malformed row {row}")
            try:
                rows.append((float(row[0]), float(row[1])))
            except ValueError:
                raise FormatError(f"{pts_path}: non-numeric row {row}")
    points = np.array(rows, dtype=np.float64) if rows else _empty_points()
    density = read_density(d / "gt_density.fcdm")
    h, w = vis.shape[:2]
    if ir.shape[:2] != (h, w) or density.shape != (h, w):
        raise FormatError(f"{d}: dimension mismatch between vis/ir/density files")
    for x, y in points:
        if not (0 <= x < w and 0 <= y < h):
            raise FormatError(f"{pts_path}: point ({x}, {y}) outside {h}x{w} image")
    return RgbtSample(visible=vis, infrared=ir, points=points, gt_density=density[:, :, None])


def write_dataset(samples, root):
    """Write samples into root/sample_00000, sample_00001, ..."""
    from pathlib import Path

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        d = root / f"sample_{i:05d}"
        d.mkdir(exist_ok=True)
        write_sample(s, d)


def read_dataset(root):
    """Read every sample_* subdirectory of root, sorted by name."""
    from pathlib import Path

    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("sample_"))
    if not dirs:
        raise FormatError(f"{root}: no sample_* directories found")
    return [read_sample(d) for d in dirs]
