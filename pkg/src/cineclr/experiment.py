"""Experiment grid: configuration, the pretrain x input sweep, and reports.

A grid crosses pretraining modes {none, transfer-proxy, full-sscl,
segmented-sscl} with downstream input modes {full, segmented} over R repeat
seeds.  Each distinct pretraining is computed once per seed and its
checkpoint reused by every downstream cell that needs it.  All results are
pure functions of the configuration, so ``report.csv`` is byte-identical
across runs; wall-clock timings go to ``run.log`` only.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .augment import AugPolicy
from .classify import (
    FinetuneConfig, FusedClassifier, TrainCurve, binary_auc, finetune,
    init_classifier, macro_auc, predict_proba_batch,
)
from .contrastive import (
    NTXentConfig, PretrainConfig, pretrain, save_checkpoint,
)
from .encoder import EncoderConfig, clone_params
from .errors import ConfigurationError, InputDataError, ManifestError
from .phantom import PhantomConfig, PhantomDataset, generate_dataset

PRETRAIN_MODES = ("none", "transfer-proxy", "full-sscl", "segmented-sscl")
INPUT_MODES = ("full", "segmented")


@dataclass(frozen=True)
class ProxyConfig:
    """Out-of-domain shape/gradient images standing in for natural-image transfer."""
    n_images: int = 200
    image_size: int = 64
    seed: int = 1234

    def validate(self) -> None:
        if self.n_images < 4 or self.image_size < 8:
            raise ConfigurationError("proxy: need n_images >= 4 and image_size >= 8")


@dataclass(frozen=True)
class GridConfig:
    pretrain_modes: tuple = PRETRAIN_MODES
    input_modes: tuple = INPUT_MODES
    repeats: int = 3
    base_seed: int = 0

    def validate(self) -> None:
        if not self.pretrain_modes or not self.input_modes:
            raise ConfigurationError("grid: mode sets must be nonempty")
        for m in self.pretrain_modes:
            if m not in PRETRAIN_MODES:
                raise ConfigurationError(
                    f"grid.pretrain_modes: unknown mode {m!r} (choose from {PRETRAIN_MODES})")
        for m in self.input_modes:
            if m not in INPUT_MODES:
                raise ConfigurationError(
                    f"grid.input_modes: unknown mode {m!r} (choose from {INPUT_MODES})")
        if self.repeats < 1:
            raise ConfigurationError("grid.repeats must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: PhantomConfig = field(default_factory=PhantomConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    augment: AugPolicy = field(default_factory=AugPolicy)
    ntxent: NTXentConfig = field(default_factory=NTXentConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    proxy: ProxyConfig = field(default_factory=ProxyConfig)
    grid: GridConfig = field(default_factory=GridConfig)

    def validate(self) -> None:
        self.dataset.validate()
        self.encoder.validate()
        self.augment.validate()
        self.ntxent.validate()
        self.pretrain.validate()
        self.finetune.validate()
        self.proxy.validate()
        self.grid.validate()
        if self.encoder.image_size != self.dataset.image_size:
            raise ConfigurationError(
                f"encoder.image_size {self.encoder.image_size} != dataset.image_size "
                f"{self.dataset.image_size}")


_SECTIONS = {
    "dataset": PhantomConfig, "encoder": EncoderConfig, "augment": AugPolicy,
    "ntxent": NTXentConfig, "pretrain": PretrainConfig, "finetune": FinetuneConfig,
    "proxy": ProxyConfig, "grid": GridConfig,
}

# JSON has no tuples; these keys round-trip through lists
_TUPLE_KEYS = {"channels", "crop_scale", "contrast", "confounded_classes",
               "pretrain_modes", "input_modes", "classes"}


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = {}
    for name in _SECTIONS:
        section = asdict(getattr(cfg, name))
        section.pop("geometry", None)       # class geometry is not configurable here
        out[name] = {k: list(v) if isinstance(v, tuple) else v
                     for k, v in section.items()}
    return out


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config root must be an object, got {type(raw).__name__}")
    sections = {}
    for key, value in raw.items():
        if key not in _SECTIONS:
            raise ConfigurationError(
                f"unknown config section {key!r} (choose from {sorted(_SECTIONS)})")
        cls = _SECTIONS[key]
        known = {f.name for f in fields(cls)} - {"geometry"}
        if not isinstance(value, dict):
            raise ConfigurationError(f"{key}: expected an object of settings")
        kwargs = {}
        for k, v in value.items():
            if k not in known:
                raise ConfigurationError(
                    f"unknown config key {key}.{k} (choose from {sorted(known)})")
            kwargs[k] = tuple(v) if k in _TUPLE_KEYS and isinstance(v, list) else v
        try:
            sections[key] = cls(**kwargs)
        except TypeError as exc:
            raise ConfigurationError(f"{key}: {exc}") from exc
    cfg = ExperimentConfig(**sections)
    cfg.validate()
    return cfg


def parse_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{p}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# transfer-proxy dataset


def generate_transfer_proxy_dataset(cfg: ProxyConfig) -> list:
    """Random ellipse/polygon/gradient grayscale images, (1,H,W) float32.

    Deliberately out-of-domain relative to the phantoms (no anatomy, different
    intensity statistics) while sharing their raster size and value range.
    """
    cfg.validate()
    n = cfg.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    images = []
    for i in range(cfg.n_images):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(i,)))
        gy, gx = rng.uniform(-1, 1, size=2)
        img = 0.5 + 0.5 * (gy * (yy / n - 0.5) + gx * (xx / n - 0.5))
        for _ in range(int(rng.integers(2, 6))):
            kind = rng.integers(0, 2)
            cy, cx = rng.uniform(0, n, size=2)
            value = rng.uniform(0.0, 1.0)
            if kind == 0:                                   # rotated ellipse
                ay, ax = rng.uniform(n / 16, n / 3, size=2)
                th = rng.uniform(0, np.pi)
                dy, dx = yy - cy, xx - cx
                u = np.cos(th) * dy + np.sin(th) * dx
                v = -np.sin(th) * dy + np.cos(th) * dx
                inside = (u / ay) ** 2 + (v / ax) ** 2 <= 1.0
            else:                                           # convex polygon
                k = int(rng.integers(3, 7))
                angles = np.sort(rng.uniform(0, 2 * np.pi, size=k))
                radii = rng.uniform(n / 12, n / 3, size=k)
                inside = np.ones_like(yy, dtype=bool)
                pts = np.stack([cy + radii * np.sin(angles), cx + radii * np.cos(angles)], axis=1)
                for j in range(k):
                    p0, p1 = pts[j], pts[(j + 1) % k]
                    cross = ((p1[0] - p0[0]) * (xx - p0[1]) - (p1[1] - p0[1]) * (yy - p0[0]))
                    inside &= cross <= 0
            img = np.where(inside, 0.5 * img + 0.5 * value, img)
        img = np.clip(img + rng.normal(0, 0.02, img.shape), 0.0, 1.0)
        images.append(img[None].astype(np.float32))
    return images


# ---------------------------------------------------------------------------
# grid execution


@dataclass
class CellResult:
    pretrain_mode: str
    input_mode: str
    seed: int
    macro_auc: float
    per_class_auc: dict              # class name -> one-vs-rest AUC
    epochs_to_90: int
    curve: TrainCurve
    predictions: list                # (case_id, true_class, probabilities)


@dataclass
class ExperimentReport:
    cells: list
    class_names: tuple
    config_hash: str
    seeds: tuple
    version: str = __version__

    def cell(self, pretrain_mode: str, input_mode: str, seed: int) -> CellResult:
        for c in self.cells:
            if (c.pretrain_mode, c.input_mode, c.seed) == (pretrain_mode, input_mode, seed):
                return c
        raise InputDataError(f"no cell {pretrain_mode}/{input_mode}/seed {seed} in report")

    def mean_macro_auc(self, pretrain_mode: str, input_mode: str) -> float:
        vals = [c.macro_auc for c in self.cells
                if (c.pretrain_mode, c.input_mode) == (pretrain_mode, input_mode)]
        if not vals:
            raise InputDataError(f"no cells for {pretrain_mode}/{input_mode}")
        return float(np.mean(vals))


def epochs_to_fraction_of_final(curve: list, fraction: float = 0.9) -> int:
    """First 1-based epoch whose validation AUC reaches fraction * final value."""
    if not curve:
        raise InputDataError("empty validation curve")
    target = fraction * curve[-1]
    for i, v in enumerate(curve):
        if v >= target:
            return i + 1
    return len(curve)


class _RunLog:
    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.lines = []
        if self.path:
            self.path.write_text("")

    def __call__(self, msg: str) -> None:
        line = f"[{time.strftime('%Y-%m-%d %H:%M:%S')}] {msg}"
        self.lines.append(line)
        if self.path:
            with open(self.path, "a") as f:
                f.write(line + "\n")


def _pretrain_images(dataset: PhantomDataset, input_mode: str, dilate_px: int) -> tuple:
    from .classify import case_inputs
    train, val = [], []
    for case in dataset.cases:
        split = dataset.split[case.case_id]
        if split == "test":
            continue
        ed, es = case_inputs(case, input_mode, dilate_px)
        (train if split == "train" else val).extend([np.asarray(ed), np.asarray(es)])
    return train, val


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentReport:
    """Execute the full grid; returns the report and (optionally) writes artifacts.

    With ``out_dir`` set, emits ``report.csv``, ``tables.md``,
    ``convergence.svg``, ``predictions/*.csv``, ``checkpoints/*.clrw``, and
    ``run.log`` under it.
    """
    cfg.validate()
    chash = config_hash(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "predictions").mkdir(exist_ok=True)
        (out / "checkpoints").mkdir(exist_ok=True)
    log = _RunLog(out / "run.log" if out else None)
    log(f"config hash {chash}, version {__version__}")

    dataset = generate_dataset(cfg.dataset)
    log(f"phantom dataset: {len(dataset.cases)} cases, classes {dataset.class_names}")
    test = [c for c in dataset.cases if dataset.split[c.case_id] == "test"]
    class_index = {c: i for i, c in enumerate(dataset.class_names)}
    y_test = np.array([class_index[c.class_label] for c in test])

    proxy_images = None
    if "transfer-proxy" in cfg.grid.pretrain_modes:
        proxy_images = generate_transfer_proxy_dataset(cfg.proxy)
        log(f"transfer-proxy dataset: {len(proxy_images)} images")

    seeds = tuple(cfg.grid.base_seed + r for r in range(cfg.grid.repeats))
    cells = []
    for seed in seeds:
        pretrained: dict[str, dict] = {}

        def encoder_for(mode: str, seed=seed, pretrained=pretrained):
            if mode == "none":
                return None
            if mode in pretrained:
                log(f"seed {seed}: reusing {mode} checkpoint")
                return pretrained[mode]
            t0 = time.monotonic()
            pcfg = replace(cfg.pretrain, seed=seed,
                           input_mode="segmented" if mode == "segmented-sscl" else "full")
            if mode == "transfer-proxy":
                n_val = max(1, len(proxy_images) // 5)
                train, val = proxy_images[n_val:], proxy_images[:n_val]
            else:
                train, val = _pretrain_images(
                    dataset, pcfg.input_mode, cfg.finetune.mask_dilate_px)
            result = pretrain(train, val, cfg.encoder, pcfg, cfg.ntxent, cfg.augment)
            pretrained[mode] = result.params
            log(f"seed {seed}: pretrained {mode} "
                f"(best epoch {result.best_epoch}/{len(result.val_curve)}, "
                f"{time.monotonic() - t0:.1f}s)")
            if out:
                save_checkpoint(out / "checkpoints" / f"{mode}-seed{seed}.clrw",
                                result.params, pcfg)
            return result.params

        for pmode in cfg.grid.pretrain_modes:
            for imode in cfg.grid.input_modes:
                enc_params = encoder_for(pmode)
                t0 = time.monotonic()
                try:
                    clf = init_classifier(
                        cfg.encoder, dataset.class_names, np.random.default_rng(seed),
                        ed_params=clone_params(enc_params) if enc_params else None,
                        es_params=clone_params(enc_params) if enc_params else None,
                        trainable=cfg.finetune.trainable)
                    fcfg = replace(cfg.finetune, seed=seed, input_mode=imode)
                    curve = finetune(clf, dataset, fcfg)
                    probas = predict_proba_batch(clf, test, imode, fcfg.mask_dilate_px)
                except Exception as exc:
                    raise type(exc)(
                        f"cell {pmode}/{imode}/seed {seed} failed: {exc}") from exc
                per_class = {
                    name: binary_auc(probas[:, k], (y_test == k).astype(int))
                    for name, k in class_index.items()}
                cell = CellResult(
                    pretrain_mode=pmode, input_mode=imode, seed=seed,
                    macro_auc=macro_auc(probas, y_test),
                    per_class_auc=per_class,
                    epochs_to_90=epochs_to_fraction_of_final(curve.val_macro_auc),
                    curve=curve,
                    predictions=[(c.case_id, c.class_label, probas[i])
                                 for i, c in enumerate(test)])
                cells.append(cell)
                log(f"seed {seed}: cell {pmode}/{imode} macro AUC "
                    f"{cell.macro_auc:.4f}, epochs-to-90% {cell.epochs_to_90} "
                    f"({time.monotonic() - t0:.1f}s)")
                if out:
                    _write_predictions(
                        out / "predictions" / f"{pmode}_{imode}_seed{seed}.csv",
                        cell, dataset.class_names, chash)

    report = ExperimentReport(cells=cells, class_names=dataset.class_names,
                              config_hash=chash, seeds=seeds)
    if out:
        write_report_csv(report, out / "report.csv")
        emit_tables(report, out)
        curves = []
        labels = []
        imode = cfg.grid.input_modes[0]
        for pmode in cfg.grid.pretrain_modes:
            curves.append(report.cell(pmode, imode, seeds[0]).curve)
            labels.append(pmode)
        emit_convergence_plot(curves, labels, out / "convergence.svg",
                              chash=chash)
        log("artifacts written")
    return report


def _write_predictions(path, cell: CellResult, class_names: tuple, chash: str) -> None:
    with open(path, "w") as f:
        f.write(f"# config_hash={chash}\n")
        f.write("case_id,true_class," + ",".join(f"p_{c}" for c in class_names) + "\n")
        for case_id, true_class, probas in cell.predictions:
            f.write(f"{case_id},{true_class},"
                    + ",".join(f"{p:.6f}" for p in probas) + "\n")


# ---------------------------------------------------------------------------
# report emission

REPORT_COLUMNS = ("pretrain_mode", "input_mode", "seed", "macro_auc",
                  "epochs_to_90")


def write_report_csv(report: ExperimentReport, path) -> None:
    cols = REPORT_COLUMNS + tuple(f"auc_{c}" for c in report.class_names)
    with open(path, "w") as f:
        f.write(f"# config_hash={report.config_hash} version={report.version}\n")
        f.write(",".join(cols) + "\n")
        for c in report.cells:
            row = [c.pretrain_mode, c.input_mode, str(c.seed),
                   f"{c.macro_auc:.6f}", str(c.epochs_to_90)]
            row += [f"{c.per_class_auc[name]:.6f}" for name in report.class_names]
            f.write(",".join(row) + "\n")


def read_report_csv(path, expected_hash: str | None = None) -> list:
    """Rows as dicts; verifies the embedded config hash when one is expected."""
    import csv
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# config_hash="):
        raise ManifestError(f"{path}: missing config-hash provenance line")
    found = lines[0].split("config_hash=")[1].split()[0]
    if expected_hash is not None and found != expected_hash:
        raise ManifestError(
            f"{path}: config hash mismatch (file {found}, expected {expected_hash})")
    rows = list(csv.DictReader(lines[1:]))
    for row in rows:
        row["seed"] = int(row["seed"])
        row["epochs_to_90"] = int(row["epochs_to_90"])
        for k in row:
            if k.startswith("auc_") or k == "macro_auc":
                row[k] = float(row[k])
    return rows


def _md_table(headers: list, rows: list) -> str:
    out = ["| " + " | ".join(headers) + " |",
           "|" + "|".join(" --- " for _ in headers) + "|"]
    for r in rows:
        out.append("| " + " | ".join(r) + " |")
    return "\n".join(out) + "\n"


def _bold_best(values: dict) -> dict:
    """Format 6-decimal cells, bolding every cell tied for the maximum."""
    formatted = {k: f"{v:.6f}" for k, v in values.items()}
    best = max(formatted.values(), key=float)
    return {k: f"**{s}**" if float(s) == float(best) else s
            for k, s in formatted.items()}


def emit_tables(report: ExperimentReport, directory) -> Path:
    """Markdown result tables: one per input mode, plus the 2x2 combination."""
    directory = Path(directory)
    pmodes = [m for m in PRETRAIN_MODES
              if any(c.pretrain_mode == m for c in report.cells)]
    imodes = [m for m in INPUT_MODES
              if any(c.input_mode == m for c in report.cells)]
    parts = [f"# Results\n\nconfig_hash: `{report.config_hash}` "
             f"(version {report.version}, seeds {list(report.seeds)})\n"]

    for imode in imodes:
        parts.append(f"\n## {imode.capitalize()} input\n")
        parts.append("Mean test AUC over seeds; best per row in bold "
                     "(ties all bolded).\n\n")
        rows = []
        for cls in report.class_names + ("macro",):
            vals = {}
            for pmode in pmodes:
                cells = [c for c in report.cells
                         if (c.pretrain_mode, c.input_mode) == (pmode, imode)]
                vals[pmode] = float(np.mean(
                    [c.macro_auc if cls == "macro" else c.per_class_auc[cls]
                     for c in cells]))
            cells_fmt = _bold_best(vals)
            rows.append([cls] + [cells_fmt[p] for p in pmodes])
        parts.append(_md_table(["class"] + pmodes, rows))

    sscl = [m for m in ("full-sscl", "segmented-sscl") if m in pmodes]
    if len(sscl) == 2 and len(imodes) == 2:
        parts.append("\n## Pretrain input x fine-tune input (macro AUC)\n\n")
        rows = []
        for pmode in sscl:
            vals = {imode: report.mean_macro_auc(pmode, imode) for imode in imodes}
            fmt = _bold_best(vals)
            rows.append([pmode] + [fmt[i] for i in imodes])
        parts.append(_md_table(["pretrain \\ fine-tune"] + imodes, rows))

    path = directory / "tables.md"
    path.write_text("".join(parts))
    return path


# ---------------------------------------------------------------------------
# convergence plot

_PALETTE = ("#1b6ca8", "#d1495b", "#3a7d44", "#8d5a97", "#c77b30", "#444444")


def emit_convergence_plot(curves: list, labels: list, path, chash: str = "") -> Path:
    """Validation macro-AUC vs epoch as a standalone SVG line chart."""
    if not curves or any(not c.val_macro_auc for c in curves):
        raise InputDataError("convergence plot needs >= 1 nonempty curve")
    if len(curves) != len(labels):
        raise InputDataError("one label per curve required")
    width, height = 640, 420
    ml, mr, mt, mb = 60, 160, 30, 50
    pw, ph = width - ml - mr, height - mt - mb
    n_epochs = max(len(c.val_macro_auc) for c in curves)
    lo = min(min(c.val_macro_auc) for c in curves)
    hi = max(max(c.val_macro_auc) for c in curves)
    if hi - lo < 1e-9:
        lo, hi = lo - 0.05, hi + 0.05
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad

    def sx(epoch):
        return ml + pw * (epoch - 1) / max(1, n_epochs - 1)

    def sy(v):
        return mt + ph * (1 - (v - lo) / (hi - lo))

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<!-- config_hash={chash} -->' if chash else '<!-- convergence -->',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
             f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>']
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        v = lo + frac * (hi - lo)
        y = sy(v)
        parts.append(f'<line x1="{ml - 4}" y1="{y:.1f}" x2="{ml}" y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{ml - 8}" y="{y + 4:.1f}" font-size="11" '
                     f'text-anchor="end">{v:.3f}</text>')
        e = 1 + frac * (n_epochs - 1)
        x = sx(e)
        parts.append(f'<line x1="{x:.1f}" y1="{mt + ph}" x2="{x:.1f}" y2="{mt + ph + 4}" '
                     f'stroke="black"/>')
        parts.append(f'<text x="{x:.1f}" y="{mt + ph + 18}" font-size="11" '
                     f'text-anchor="middle">{e:.0f}</text>')
    parts.append(f'<text x="{ml + pw / 2}" y="{height - 12}" font-size="13" '
                 f'text-anchor="middle">epoch</text>')
    parts.append(f'<text x="16" y="{mt + ph / 2}" font-size="13" text-anchor="middle" '
                 f'transform="rotate(-90 16 {mt + ph / 2})">validation macro AUC</text>')
    for i, (curve, label) in enumerate(zip(curves, labels)):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{sx(e + 1):.1f},{sy(v):.1f}"
                       for e, v in enumerate(curve.val_macro_auc))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.8"/>')
        ly = mt + 16 + 20 * i
        parts.append(f'<line x1="{ml + pw + 12}" y1="{ly}" x2="{ml + pw + 36}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="1.8"/>')
        parts.append(f'<text x="{ml + pw + 42}" y="{ly + 4}" font-size="12">{label}</text>')
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n")
    return path
