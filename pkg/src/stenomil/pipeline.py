"""End-to-end stages: synthesize, pretrain, encode, train, evaluate, report.

Every stage reads and writes under one output directory::

    config.resolved              the fully resolved configuration
    dataset/<patient>/           volumes, masks and meta from ``synth``;
                                 artery_enc.bin and myo_feat.bin from ``encode``
    pretrain/artery.ckpt         artery VCAE + sequence CAE
    pretrain/myo.ckpt            myocardium patch CAE
    folds.txt                    patient -> fold assignment
    train/<mode>/fold<k>/        ckpt_<iteration>.ckpt
    eval/<mode>/                 metrics.ckpt and roc_<mode>_<fold>.csv
    report/                      report.txt and the ROC files of every mode
"""

from __future__ import annotations

import dataclasses
import shutil
from collections.abc import Callable, Iterator
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import formats
from .artery import ArteryEncoder, PretrainConfig, pretrain_artery_caes
from .evaluation import (
    EVALUATED_MODELS,
    AblationReport,
    FoldMetrics,
    FoldPlan,
    ablation_report,
    evaluate_fold,
    fold_seed,
    stratified_kfold,
    summarize_mode,
    write_report,
)
from .mil import MODES, Bag, canonical_mode, train_mil
from .myo import MyoCAE, cluster_myocardium, myo_features, pretrain_myo_cae
from .synthgen import (
    CohortConfig,
    PatientRecord,
    iter_cohort,
    read_patient_meta,
    read_patient_volumes,
    write_patient,
)
from .tensor import TrainConfig

PAPER_SCALE_ITERATIONS = 200_000
CONFIG_FILE = "config.resolved"


class ConfigError(ValueError):
    """Invalid configuration key or value."""


class MissingStageError(RuntimeError):
    """A prerequisite stage has not been run."""

    def __init__(self, stage: str, detail: str):
        super().__init__(f"{detail}; run `{stage}` first")
        self.stage = stage


@dataclass
class PipelineConfig:
    # cohort
    patients: int = 200
    seed: int = 0
    arteries_mean: float = 18.5
    arteries_sd: float = 4.3
    ffr_mean: float = 0.79
    ffr_sd: float = 0.10
    noise_sd: float = 20.0
    myo_noise_sd: float = 15.0
    coupling: float = 60.0
    territory_sd: float = 4.0
    length_min: int = 50
    length_max: int = 160
    extra_lesions: float = 1.5
    lesion_length_min: float = 5.0
    lesion_length_max: float = 20.0
    # unsupervised pretraining on a disjoint cohort
    pretrain_patients: int = 24
    vcae_iterations: int = 1500
    seq_iterations: int = 1500
    myo_iterations: int = 1500
    pretrain_batch: int = 32
    myo_batch: int = 64
    pretrain_lr: float = 1e-3
    pretrain_patches: int = 10_000
    # MIL training and evaluation
    l2: float = 0.001
    dropout: float = 0.5
    learning_rate: float = 1e-4
    iterations: int = 20_000
    checkpoint_interval: int = 1000
    precision: str = "f32"
    folds: int = 5
    mode: str = "combined"
    paper_scale: bool = False

    def __post_init__(self):
        if self.paper_scale:
            self.iterations = PAPER_SCALE_ITERATIONS
        try:
            self.mode = canonical_mode(self.mode)
        except ValueError as e:
            raise ConfigError(f"mode: {e}") from None
        for name in ("pretrain_patients", "vcae_iterations", "seq_iterations", "myo_iterations",
                     "pretrain_batch", "myo_batch", "pretrain_patches", "folds"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.pretrain_lr <= 0:
            raise ConfigError(f"pretrain_lr must be positive, got {self.pretrain_lr}")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        for build in (self.cohort, self.train_config):
            try:
                build()
            except ValueError as e:
                raise ConfigError(str(e)) from None

    # -- views -----------------------------------------------------------------------
    def cohort(self) -> CohortConfig:
        keys = {f.name for f in fields(CohortConfig)}
        return CohortConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in keys})

    def pretrain_cohort(self) -> CohortConfig:
        return dataclasses.replace(self.cohort(), patients=self.pretrain_patients)

    def train_config(self) -> TrainConfig:
        return TrainConfig(l2=self.l2, dropout=self.dropout, learning_rate=self.learning_rate, iterations=self.iterations,
                           checkpoint_interval=self.checkpoint_interval, precision=self.precision, seed=self.seed)

    def artery_pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(self.vcae_iterations, self.seq_iterations, self.pretrain_batch, self.pretrain_lr,
                              self.pretrain_patches, derived_seed(self.seed, "artery"))

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    # -- text form ---------------------------------------------------------------------
    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format_value(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, overrides: dict | None = None) -> PipelineConfig:
        values = parse_config_text(text)
        values.update(overrides or {})
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict) -> PipelineConfig:
        types = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(values) - set(types))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        parsed = {k: _coerce(k, types[k], v) for k, v in values.items()}
        return cls(**parsed)


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines are ignored."""
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected `key = value`, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {n}: empty key")
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(key: str, typ, value):
    if not isinstance(value, str):
        return value
    try:
        if typ in ("bool", bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if typ in ("int", int):
            return int(value)
        if typ in ("float", float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ}") from None
    return value


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def derived_seed(seed: int, purpose: str) -> int:
    """Independent seed for one pipeline purpose (pretraining, clustering, folds)."""
    tag = int.from_bytes(purpose.encode(), "little")
    return int(np.random.SeedSequence([seed, tag]).generate_state(1, dtype=np.uint64)[0] >> 1)


# -- pretraining ----------------------------------------------------------------------------

def iter_pretraining_patients(cfg: PipelineConfig) -> Iterator[PatientRecord]:
    """Patients from the seed stream reserved for unsupervised pretraining (never classified)."""
    return iter_cohort(cfg.pretrain_cohort(), stream=1)


def pretrain_artery(cfg: PipelineConfig) -> ArteryEncoder:
    arteries = [a for p in iter_pretraining_patients(cfg) for a in p.arteries]
    encoder, _ = pretrain_artery_caes(arteries, cfg.artery_pretrain_config(), cfg.dtype)
    return encoder


def pretrain_myo(cfg: PipelineConfig) -> MyoCAE:
    vols, masks = [], []
    for p in iter_pretraining_patients(cfg):
        vols.append(p.myo_volume)
        masks.append(p.myo_mask)
    model, _ = pretrain_myo_cae(vols, masks, cfg.myo_iterations, cfg.myo_batch, cfg.pretrain_lr,
                                cfg.pretrain_patches, derived_seed(cfg.seed, "myo"), cfg.dtype)
    return model


def load_artery_encoder(path, dtype=np.float32) -> ArteryEncoder:
    enc = ArteryEncoder.create(0, dtype)
    enc.load_state_dict(formats.load_checkpoint(path))
    return enc


def load_myo_cae(path, dtype=np.float32) -> MyoCAE:
    model = MyoCAE(np.random.default_rng(0), dtype)
    model.load_state_dict(formats.load_checkpoint(path))
    return model.eval()


# -- encoding --------------------------------------------------------------------------------

def encode_volumes(arteries, myo_volume, myo_mask, patient_seed: int, artery_enc: ArteryEncoder, myo_cae: MyoCAE) -> tuple[np.ndarray, np.ndarray]:
    """``(N x 1024 artery encodings, 512 myocardium features)`` for one patient."""
    enc = artery_enc.encode_many(arteries).astype(np.float32)
    cseed = derived_seed(patient_seed, "clusters")
    clusters = cluster_myocardium(myo_mask, seed=cseed % 2**31)
    feat = myo_features(myo_volume, clusters, myo_cae, seed=cseed).astype(np.float32)
    return enc, feat


def encode_cohort(cfg: PipelineConfig, artery_enc: ArteryEncoder, myo_cae: MyoCAE,
                  progress: Callable[[str], None] | None = None) -> tuple[list[Bag], np.ndarray]:
    """Generate and encode the classification cohort patient by patient, keeping only encodings."""
    bags, ffr = [], []
    for i, p in enumerate(iter_cohort(cfg.cohort(), stream=0)):
        enc, feat = encode_volumes([a.data for a in p.arteries], p.myo_volume, p.myo_mask, p.seed, artery_enc, myo_cae)
        bags.append(Bag(enc, feat, p.label, p.patient_id))
        ffr.append(p.min_ffr)
        if progress and (i + 1) % 20 == 0:
            progress(f"encoded {i + 1}/{cfg.patients}")
    return bags, np.array(ffr)


def fold_plan(cfg: PipelineConfig, labels, patient_ids) -> FoldPlan:
    return stratified_kfold(labels, cfg.folds, derived_seed(cfg.seed, "folds"), patient_ids)


def run_experiment(cfg: PipelineConfig, out_dir=None, progress: Callable[[str], None] | None = None) -> AblationReport:
    """In-memory pipeline: pretrain, encode, then the three-mode ablation under one fold plan."""
    say = progress or (lambda s: None)
    artery_enc = pretrain_artery(cfg)
    say("artery CAEs pretrained")
    myo_cae = pretrain_myo(cfg)
    say("myocardium CAE pretrained")
    bags, ffr = encode_cohort(cfg, artery_enc, myo_cae, say)
    plan = fold_plan(cfg, [b.label for b in bags], [b.patient_id for b in bags])
    return ablation_report(bags, ffr, plan, cfg.train_config(), MODES, out_dir, say)


# -- on-disk stages ----------------------------------------------------------------------------

class Workspace:
    """Paths of one output directory and the prerequisite checks between stages."""

    def __init__(self, root):
        self.root = Path(root)

    dataset = property(lambda self: self.root / "dataset")
    pretrain = property(lambda self: self.root / "pretrain")
    artery_ckpt = property(lambda self: self.root / "pretrain" / "artery.ckpt")
    myo_ckpt = property(lambda self: self.root / "pretrain" / "myo.ckpt")
    folds_file = property(lambda self: self.root / "folds.txt")

    def train_dir(self, mode: str, fold: int) -> Path:
        return self.root / "train" / mode / f"fold{fold}"

    def eval_dir(self, mode: str) -> Path:
        return self.root / "eval" / mode

    def patient_dirs(self) -> list[Path]:
        if not self.dataset.is_dir():
            raise MissingStageError("synth", f"no dataset in {self.dataset}")
        dirs = sorted(p for p in self.dataset.iterdir() if (p / "meta").is_file())
        if not dirs:
            raise MissingStageError("synth", f"dataset {self.dataset} is empty")
        return dirs

    def require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise MissingStageError(stage, f"missing {path}")
        return path

    def write_config(self, cfg: PipelineConfig) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / CONFIG_FILE).write_text(cfg.to_text())


def stage_synth(ws: Workspace, cfg: PipelineConfig) -> int:
    if ws.dataset.exists():
        shutil.rmtree(ws.dataset)
    ws.dataset.mkdir(parents=True)
    n = 0
    for p in iter_cohort(cfg.cohort(), stream=0):
        write_patient(ws.dataset, p)
        n += 1
    return n


def stage_pretrain_artery(ws: Workspace, cfg: PipelineConfig) -> Path:
    ws.pretrain.mkdir(parents=True, exist_ok=True)
    formats.save_checkpoint(ws.artery_ckpt, pretrain_artery(cfg).state_dict())
    return ws.artery_ckpt


def stage_pretrain_myo(ws: Workspace, cfg: PipelineConfig) -> Path:
    ws.pretrain.mkdir(parents=True, exist_ok=True)
    formats.save_checkpoint(ws.myo_ckpt, pretrain_myo(cfg).state_dict())
    return ws.myo_ckpt


def stage_encode(ws: Workspace, cfg: PipelineConfig) -> int:
    dirs = ws.patient_dirs()
    artery_enc = load_artery_encoder(ws.require(ws.artery_ckpt, "pretrain-artery"), cfg.dtype)
    myo_cae = load_myo_cae(ws.require(ws.myo_ckpt, "pretrain-myo"), cfg.dtype)
    for pdir in dirs:
        meta = read_patient_meta(pdir)
        arteries, vol, mask = read_patient_volumes(pdir)
        enc, feat = encode_volumes(arteries, vol, mask, meta["seed"], artery_enc, myo_cae)
        formats.write_artery_encodings(pdir / "artery_enc.bin", enc)
        formats.write_myo_features(pdir / "myo_feat.bin", feat)
    return len(dirs)


def load_bags(ws: Workspace) -> tuple[list[Bag], np.ndarray]:
    bags, ffr = [], []
    for pdir in ws.patient_dirs():
        meta = read_patient_meta(pdir)
        enc_path, feat_path = pdir / "artery_enc.bin", pdir / "myo_feat.bin"
        if not (enc_path.is_file() and feat_path.is_file()):
            raise MissingStageError("encode", f"patient {meta['patient_id']} has no encodings")
        bags.append(Bag(formats.read_artery_encodings(enc_path), formats.read_myo_features(feat_path), meta["label"], meta["patient_id"]))
        ffr.append(meta["min_ffr"])
    return bags, np.array(ffr)


def read_fold_plan(ws: Workspace, patient_ids: list[str]) -> FoldPlan:
    index = {pid: i for i, pid in enumerate(patient_ids)}
    members: dict[int, list[int]] = {}
    for line in ws.require(ws.folds_file, "train").read_text().splitlines():
        pid, fold = line.split()
        members.setdefault(int(fold), []).append(index[pid])
    return FoldPlan([np.sort(np.array(members[k])) for k in sorted(members)], patient_ids)


def stage_train(ws: Workspace, cfg: PipelineConfig, progress: Callable[[str], None] | None = None) -> list[Path]:
    bags, _ = load_bags(ws)
    plan = fold_plan(cfg, [b.label for b in bags], [b.patient_id for b in bags])
    ws.folds_file.write_text(plan.to_text())
    tcfg = cfg.train_config()
    written = []
    for i in range(plan.k):
        fold_cfg = dataclasses.replace(tcfg, seed=fold_seed(cfg.seed, i))
        snaps = train_mil([bags[j] for j in plan.train(i)], fold_cfg, cfg.mode)
        d = ws.train_dir(cfg.mode, i)
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        for snap in snaps:
            path = d / f"ckpt_{int(snap['train.iteration']):07d}.ckpt"
            formats.save_checkpoint(path, snap)
            written.append(path)
        if progress:
            progress(f"{cfg.mode} fold {i}: {len(snaps)} checkpoints")
    return written


def _fold_checkpoints(ws: Workspace, mode: str, fold: int) -> list[Path]:
    d = ws.train_dir(mode, fold)
    files = sorted(d.glob("ckpt_*.ckpt")) if d.is_dir() else []
    if not files:
        raise MissingStageError(f"train --mode {mode}", f"no checkpoints in {d}")
    return files


def _metrics_state(m: FoldMetrics, ffr: np.ndarray) -> dict[str, np.ndarray]:
    return {"aucs": m.aucs, "sensitivity": m.sensitivity, "specificity": m.specificity, "thresholds": m.thresholds,
            "scores": m.scores, "labels": m.labels.astype(np.int64), "iterations": m.iterations.astype(np.int64),
            "ffr": np.asarray(ffr, dtype=np.float64)}


def stage_eval(ws: Workspace, cfg: PipelineConfig) -> Path:
    bags, ffr = load_bags(ws)
    plan = read_fold_plan(ws, [b.patient_id for b in bags])
    out = ws.eval_dir(cfg.mode)
    out.mkdir(parents=True, exist_ok=True)
    folds, ffrs = [], []
    for i in range(plan.k):
        snaps = [formats.load_checkpoint(p) for p in _fold_checkpoints(ws, cfg.mode, i)[-EVALUATED_MODELS:]]
        test = plan.test(i)
        m = evaluate_fold(snaps, [bags[j] for j in test], cfg.mode, dtype=cfg.dtype)
        folds.append(m)
        ffrs.append(ffr[test])
        (out / f"roc_{cfg.mode}_{i}.csv").write_text(m.mean_roc().to_csv())
        formats.save_checkpoint(out / f"metrics_{i}.ckpt", _metrics_state(m, ffr[test]))
    single = AblationReport({cfg.mode: summarize_mode(cfg.mode, folds, ffrs)})
    (out / "summary.txt").write_text(single.table())
    return out


def load_mode_metrics(ws: Workspace, mode: str, k: int) -> tuple[list[FoldMetrics], list[np.ndarray]]:
    folds, ffrs = [], []
    for i in range(k):
        path = ws.eval_dir(mode) / f"metrics_{i}.ckpt"
        if not path.is_file():
            raise MissingStageError(f"eval --mode {mode}", f"missing {path}")
        s = formats.load_checkpoint(path)
        folds.append(FoldMetrics(mode, s["aucs"], s["sensitivity"], s["specificity"], s["thresholds"], s["scores"],
                                 s["labels"], s["iterations"]))
        ffrs.append(s["ffr"])
    return folds, ffrs


def stage_report(ws: Workspace, cfg: PipelineConfig) -> Path:
    bags, _ = load_bags(ws)
    plan = read_fold_plan(ws, [b.patient_id for b in bags])
    rows = {}
    for mode in MODES:
        folds, ffrs = load_mode_metrics(ws, mode, plan.k)
        rows[mode] = summarize_mode(mode, folds, ffrs)
    out = ws.root / "report"
    write_report(AblationReport(rows), out)
    return out / "report.txt"
