"""Synthetic short-axis cine CMR phantom generator.

Each case is an ED/ES frame pair with exact ground-truth label masks
(0=background, 1=LV blood pool, 2=LV myocardium, 3=RV).  Five disease
classes are driven purely by geometry:

* NOR  - reference cavity, wall, ejection
* DCM  - dilated cavity, weak ejection
* HCM  - thick wall, small cavity
* MINF - one thinned angular wall sector, reduced ejection
* ARV  - enlarged right ventricle

A class-correlated bright "liver corner" blob acts as a controllable
spurious shortcut: it appears with probability rho for the confounded
classes and probability 1-rho for the rest (no blob at all when rho == 0,
so rho=0 really disables the feature).
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ManifestError
from .raster import read_raster, write_raster

LBL_BACKGROUND = 0
LBL_LV_POOL = 1
LBL_LV_MYO = 2
LBL_RV = 3

CLASSES = ("NOR", "DCM", "HCM", "MINF", "ARV")

RV_BASE_RADIUS = 11.0   # reference epicardial radius for RV sizing


@dataclass(frozen=True)
class ClassGeometry:
    """Sampling ranges (lo, hi) for one disease class."""
    cavity_radius: tuple = (6.5, 8.5)
    wall_thickness: tuple = (3.0, 4.0)
    ejection: tuple = (0.30, 0.40)          # fractional ED->ES cavity radius reduction
    rv_scale: tuple = (0.9, 1.1)
    infarct_arc_deg: float = 0.0            # MINF only: thinned sector width
    infarct_thin: tuple = (1.0, 1.0)        # sector wall = thin * remote wall


DEFAULT_GEOMETRY: dict[str, ClassGeometry] = {
    "NOR": ClassGeometry(),
    "DCM": ClassGeometry(cavity_radius=(10.0, 12.0), wall_thickness=(2.5, 3.2),
                         ejection=(0.10, 0.20)),
    "HCM": ClassGeometry(cavity_radius=(4.5, 5.8), wall_thickness=(5.5, 7.0)),
    "MINF": ClassGeometry(wall_thickness=(3.6, 4.4), ejection=(0.15, 0.25),
                          infarct_arc_deg=100.0, infarct_thin=(0.45, 0.58)),
    "ARV": ClassGeometry(rv_scale=(1.6, 2.0)),
}


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 64
    cases_per_class: int = 50
    classes: tuple = CLASSES
    geometry: dict = field(default_factory=lambda: dict(DEFAULT_GEOMETRY))
    noise_sigma: float = 0.4
    confounder_rho: float = 0.9
    confounded_classes: tuple = ("DCM", "MINF")
    train_frac: float = 0.7
    val_frac: float = 0.2                    # of the train portion
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 <= self.confounder_rho <= 1.0):
            raise ConfigurationError(f"confounder_rho must be in [0,1], got {self.confounder_rho}")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")
        if self.image_size < 32:
            raise ConfigurationError("image_size must be >= 32")
        if self.cases_per_class < 2:
            raise ConfigurationError("need at least 2 cases per class")
        if not self.classes:
            raise ConfigurationError("classes must be nonempty")
        for name in self.classes:
            g = self.geometry.get(name)
            if g is None:
                raise ConfigurationError(f"no geometry for class {name!r}")
            if g.cavity_radius[0] <= 0 or g.wall_thickness[0] < 2.0:
                raise ConfigurationError(f"{name}: radii must be positive and wall >= 2 px")
            if not (0.0 < g.ejection[0] <= g.ejection[1] < 1.0):
                raise ConfigurationError(f"{name}: ejection range must lie in (0,1)")


@dataclass
class CaseRecord:
    case_id: str
    class_label: str
    ed_frame: np.ndarray       # float32 (1,H,W), values in [0,1]
    es_frame: np.ndarray
    ed_mask: np.ndarray        # uint8 (H,W) labels
    es_mask: np.ndarray
    confounder_present: bool


@dataclass
class PhantomDataset:
    cases: list
    split: dict                # case_id -> {"train","val","test"}
    class_names: tuple
    config_digest: str


def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0):
    """Boolean raster of a rotated ellipse."""
    dy = yy - cy
    dx = xx - cx
    if angle:
        c, s = math.cos(angle), math.sin(angle)
        du = c * dx + s * dy
        dv = -s * dx + c * dy
    else:
        du, dv = dx, dy
    return (du / rx) ** 2 + (dv / ry) ** 2 < 1.0


def _heart_masks(size, cy, cx, phi, cavity_r, wall_fn, rv_scale):
    """Rasterize LV pool/myo and RV crescent for one frame.

    ``wall_fn(theta)`` gives wall thickness per polar angle (radians measured
    from the case orientation ``phi``).
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy = yy - cy
    dx = xx - cx
    rr = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    wall = wall_fn(theta)
    epi_r = cavity_r + wall

    mask = np.zeros((size, size), dtype=np.uint8)
    mask[(rr >= cavity_r) & (rr < epi_r)] = LBL_LV_MYO
    mask[rr < cavity_r] = LBL_LV_POOL

    # RV: ellipse abutting the epicardium along direction phi, carved to a
    # crescent by the LV labels.
    # RV ellipse size is anchored to a fixed reference radius so it tracks
    # rv_scale alone, not the LV epicardial size.
    epi_nominal = cavity_r + float(np.max(wall))
    s = math.sqrt(rv_scale)
    a = 0.95 * RV_BASE_RADIUS * s
    b = 0.70 * RV_BASE_RADIUS * s
    d = epi_nominal + 0.55 * a
    rv_cy = cy + d * math.sin(phi)
    rv_cx = cx + d * math.cos(phi)
    rv = _ellipse(yy, xx, rv_cy, rv_cx, b, a, angle=phi)
    mask[rv & (mask == LBL_BACKGROUND)] = LBL_RV
    return mask


def _paint_background(size, rng):
    """Low-frequency tissue texture: body, chest wall, lungs, liver."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.full((size, size), 0.02, dtype=np.float64)  # air
    c = (size - 1) / 2.0
    body = _ellipse(yy, xx, c, c, 0.50 * size, 0.47 * size)
    inner = _ellipse(yy, xx, c, c, 0.44 * size, 0.41 * size)
    img[body] = 0.50                     # chest-wall ring
    img[inner] = 0.32                    # soft tissue
    for sign in (-1.0, 1.0):             # lungs
        lung = _ellipse(yy, xx, 0.38 * size, c + sign * 0.30 * size,
                        0.18 * size, 0.11 * size)
        img[lung & inner] = 0.20
    liver = _ellipse(yy, xx, 0.80 * size, 0.76 * size, 0.14 * size, 0.18 * size,
                     angle=0.5)
    img[liver & body] = 0.50
    for _ in range(2):                   # unstructured texture patches
        ty = rng.uniform(0.2, 0.8) * size
        tx = rng.uniform(0.2, 0.8) * size
        tr = rng.uniform(0.05, 0.12) * size
        val = rng.uniform(0.2, 0.6)
        patch = _ellipse(yy, xx, ty, tx, tr, tr * rng.uniform(0.7, 1.4),
                         angle=rng.uniform(0, math.pi))
        img[patch & inner] = val
    return img


def _confounder_blob(size, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = 0.82 * size + rng.uniform(-2, 2)
    cx = 0.82 * size + rng.uniform(-2, 2)
    r = rng.uniform(0.05, 0.07) * size
    return _ellipse(yy, xx, cy, cx, r, r)


def render_case(class_label: str, config: PhantomConfig,
                rng: np.random.Generator, case_id: str = "case") -> CaseRecord:
    """Render one ED/ES pair with exact masks for ``class_label``."""
    config.validate()
    if class_label not in config.classes:
        raise ConfigurationError(f"unknown class {class_label!r}")
    g: ClassGeometry = config.geometry[class_label]
    size = config.image_size

    cavity_r = rng.uniform(*g.cavity_radius)
    wall_t = rng.uniform(*g.wall_thickness)
    ejection = rng.uniform(*g.ejection)
    rv_scale = rng.uniform(*g.rv_scale)
    thin = rng.uniform(*g.infarct_thin)
    cy = size / 2.0 + rng.uniform(-2, 2)
    cx = size / 2.0 + rng.uniform(-2, 2)
    phi = math.pi + rng.uniform(-0.5, 0.5)          # RV points roughly left
    infarct_center = rng.uniform(0, 2 * math.pi)

    arc = math.radians(g.infarct_arc_deg)

    def wall_ed(theta):
        w = np.full_like(theta, wall_t)
        if arc > 0:
            delta = np.angle(np.exp(1j * (theta - infarct_center)))
            w = np.where(np.abs(delta) < arc / 2, wall_t * thin, w)
        return w

    # ES: cavity shrinks, wall thickens conserving annulus area per angle.
    cavity_es = cavity_r * (1.0 - ejection)

    def wall_es(theta):
        w = wall_ed(theta)
        return np.sqrt(cavity_es ** 2 + (cavity_r + w) ** 2 - cavity_r ** 2) - cavity_es

    rv_es = rv_scale * (1.0 - 0.5 * ejection)
    ed_mask = _heart_masks(size, cy, cx, phi, cavity_r, wall_ed, rv_scale)
    es_mask = _heart_masks(size, cy, cx, phi, cavity_es, wall_es, rv_es)
    for m, frame in ((ed_mask, "ED"), (es_mask, "ES")):
        for lbl in (LBL_LV_POOL, LBL_LV_MYO, LBL_RV):
            if not np.any(m == lbl):
                raise ConfigurationError(
                    f"{case_id}: label {lbl} empty in {frame} mask (geometry out of range)")

    background = _paint_background(size, rng)
    if class_label in config.confounded_classes:
        p_blob = config.confounder_rho
    else:
        p_blob = (1.0 - config.confounder_rho) if config.confounder_rho > 0 else 0.0
    has_blob = bool(rng.random() < p_blob)
    if has_blob:
        background[_confounder_blob(size, rng)] = 0.95

    pool_i = 0.90 + rng.uniform(-0.03, 0.03)
    myo_i = 0.45 + rng.uniform(-0.03, 0.03)
    rv_i = 0.85 + rng.uniform(-0.03, 0.03)

    frames = []
    for m in (ed_mask, es_mask):
        img = background.copy()
        img[m == LBL_LV_MYO] = myo_i
        img[m == LBL_LV_POOL] = pool_i
        img[m == LBL_RV] = rv_i
        if config.noise_sigma > 0:
            img = img + rng.normal(0.0, config.noise_sigma, img.shape)
        frames.append(np.clip(img, 0.0, 1.0).astype(np.float32)[None])

    return CaseRecord(case_id=case_id, class_label=class_label,
                      ed_frame=frames[0], es_frame=frames[1],
                      ed_mask=ed_mask, es_mask=es_mask,
                      confounder_present=has_blob)


def config_digest(config: PhantomConfig) -> str:
    parts = [repr(config)]
    return hashlib.sha256("".join(parts).encode()).hexdigest()[:16]


def _stratified_split(n: int, train_frac: float, val_frac: float,
                      rng: np.random.Generator) -> list:
    """Per-class split labels; train/test then train/val, all nonempty."""
    order = rng.permutation(n)
    n_train = int(round(train_frac * n))
    n_train = min(max(n_train, 1), n - 1)
    labels = ["test"] * n
    train_ids = order[:n_train]
    for i in train_ids:
        labels[i] = "train"
    if n_train >= 2:
        n_val = int(round(val_frac * n_train))
        n_val = min(max(n_val, 1), n_train - 1)
        for i in train_ids[:n_val]:
            labels[i] = "val"
    return labels


def generate_dataset(config: PhantomConfig) -> PhantomDataset:
    """Deterministically generate all cases plus stratified split labels.

    Per-case RNG streams are derived from (seed, class index, case index), so
    generation is order-independent and reproducible.
    """
    config.validate()
    cases = []
    split = {}
    for ci, cls in enumerate(config.classes):
        split_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=config.seed, spawn_key=(1_000_000 + ci,)))
        labels = _stratified_split(config.cases_per_class, config.train_frac,
                                   config.val_frac, split_rng)
        for k in range(config.cases_per_class):
            case_id = f"{cls}_{k:03d}"
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=config.seed, spawn_key=(ci, k)))
            case = render_case(cls, config, rng, case_id=case_id)
            cases.append(case)
            split[case_id] = labels[k]
    return PhantomDataset(cases=cases, split=split, class_names=tuple(config.classes),
                          config_digest=config_digest(config))


MANIFEST_COLUMNS = ("case_id", "class", "split", "confounder",
                    "ed_path", "es_path", "ed_mask_path", "es_mask_path")


def write_dataset(dataset: PhantomDataset, directory) -> None:
    directory = Path(directory)
    (directory / "cases").mkdir(parents=True, exist_ok=True)
    rows = []
    for case in dataset.cases:
        paths = {
            "ed_path": f"cases/{case.case_id}_ed.cmrt",
            "es_path": f"cases/{case.case_id}_es.cmrt",
            "ed_mask_path": f"cases/{case.case_id}_ed_mask.cmrt",
            "es_mask_path": f"cases/{case.case_id}_es_mask.cmrt",
        }
        write_raster(directory / paths["ed_path"], case.ed_frame)
        write_raster(directory / paths["es_path"], case.es_frame)
        write_raster(directory / paths["ed_mask_path"], case.ed_mask)
        write_raster(directory / paths["es_mask_path"], case.es_mask)
        rows.append({"case_id": case.case_id, "class": case.class_label,
                     "split": dataset.split[case.case_id],
                     "confounder": int(case.confounder_present), **paths})
    with open(directory / "manifest.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=MANIFEST_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    with open(directory / "classes.txt", "w") as f:
        f.write(",".join(dataset.class_names) + "\n")
        f.write(dataset.config_digest + "\n")


def read_dataset(directory) -> PhantomDataset:
    directory = Path(directory)
    manifest = directory / "manifest.csv"
    if not manifest.exists():
        raise ManifestError(f"{manifest} not found")
    cases = []
    split = {}
    with open(manifest, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != list(MANIFEST_COLUMNS):
            raise ManifestError(f"{manifest}: unexpected columns {reader.fieldnames}")
        for row in reader:
            for key in ("ed_path", "es_path", "ed_mask_path", "es_mask_path"):
                if not (directory / row[key]).exists():
                    raise ManifestError(f"{manifest}: missing file {row[key]} for {row['case_id']}")
            ed = read_raster(directory / row["ed_path"])
            es = read_raster(directory / row["es_path"])
            ed_mask = read_raster(directory / row["ed_mask_path"])[0]
            es_mask = read_raster(directory / row["es_mask_path"])[0]
            cases.append(CaseRecord(case_id=row["case_id"], class_label=row["class"],
                                    ed_frame=ed, es_frame=es,
                                    ed_mask=ed_mask, es_mask=es_mask,
                                    confounder_present=bool(int(row["confounder"]))))
            split[row["case_id"]] = row["split"]
    classes_file = directory / "classes.txt"
    if classes_file.exists():
        lines = classes_file.read_text().splitlines()
        class_names = tuple(lines[0].split(","))
        digest = lines[1] if len(lines) > 1 else ""
    else:
        class_names = tuple(sorted({c.class_label for c in cases}))
        digest = ""
    return PhantomDataset(cases=cases, split=split, class_names=class_names,
                          config_digest=digest)


def datasets_equal(a: PhantomDataset, b: PhantomDataset) -> bool:
    if a.split != b.split or a.class_names != b.class_names:
        return False
    if len(a.cases) != len(b.cases):
        return False
    for ca, cb in zip(a.cases, b.cases):
        if (ca.case_id != cb.case_id or ca.class_label != cb.class_label
                or ca.confounder_present != cb.confounder_present):
            return False
        for fa, fb in ((ca.ed_frame, cb.ed_frame), (ca.es_frame, cb.es_frame),
                       (ca.ed_mask, cb.ed_mask), (ca.es_mask, cb.es_mask)):
            if fa.dtype != fb.dtype or not np.array_equal(fa, fb):
                return False
    return True


# ---------------------------------------------------------------------------
# mask-derived measurements and the fixed QC decision rule


def mask_measurements(mask: np.ndarray, bins: int = 24) -> dict:
    """Geometry statistics from one label mask.

    Wall thickness is the per-angular-bin radial extent (max - min + 1) of
    myocardium pixels around the cavity centroid.
    """
    pool = mask == LBL_LV_POOL
    myo = mask == LBL_LV_MYO
    rv = mask == LBL_RV
    ys, xs = np.nonzero(pool)
    cy, cx = ys.mean(), xs.mean()
    my, mx = np.nonzero(myo)
    rr = np.hypot(my - cy, mx - cx)
    th = np.arctan2(my - cy, mx - cx)
    bi = ((th + math.pi) / (2 * math.pi) * bins).astype(int) % bins
    thick = []
    for b in range(bins):
        sel = bi == b
        if sel.any():
            thick.append(rr[sel].max() - rr[sel].min() + 1.0)
    thick = np.asarray(thick)
    cavity_area = float(pool.sum())
    return {
        "cavity_area": cavity_area,
        "cavity_radius": math.sqrt(cavity_area / math.pi),
        "wall_median": float(np.median(thick)),
        "wall_min": float(thick.min()),
        "wall_min_ratio": float(thick.min() / np.median(thick)),
        "rv_area": float(rv.sum()),
        "epicard_area": float(pool.sum() + myo.sum()),
    }


def rule_classify(ed_mask: np.ndarray, es_mask: np.ndarray) -> str:
    """Fixed decision rule on mask statistics (QC for task solvability)."""
    ed = mask_measurements(ed_mask)
    es = mask_measurements(es_mask)
    es_ratio = es["cavity_area"] / max(ed["cavity_area"], 1.0)
    if ed["rv_area"] > 1.35 * _RV_NOMINAL_AREA:
        return "ARV"
    if ed["wall_min_ratio"] < 0.65:
        return "MINF"
    if ed["wall_median"] >= 5.3:
        return "HCM"
    if ed["cavity_radius"] >= 9.2 or (ed["cavity_radius"] >= 8.4 and es_ratio > 0.55):
        return "DCM"
    return "NOR"


# Nominal NOR right-ventricle raster area at the default 64 px geometry,
# used by the ARV branch of the rule (calibrated on noise-free renders).
_RV_NOMINAL_AREA = 220.0
