import csv
import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from jinja2 import BaseLoader, Environment
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from _AttacksMS.attacks import AttackConfig, AttacksMS, Perturbation, project
from _DatasetFingerprintMS.dataset_fingerprint import DatasetFingerprintMS
from _DefensesMS.defenses import STAGES, DefensesMS, NlmConfig, PatchDatabase
from _EvalCacheMS.eval_cache import DB_NAME, EvalCacheMS
from _MetricsMS.metrics import ConfusionMatrix, MetricsMS
from _SegNetMS.segnet import CLASS_NAMES, SegModel, SegNetMS
from _TensorCoreMS.tensor_core import DataError, NumericalError
from _ToyDatasetMS.toy_dataset import CAR, ToyDatasetMS, colorize
from _WorkerPoolMS.worker_pool import WorkerPoolMS

# ==============================================================================
# CONFIGURATION
# ==============================================================================
RESULT_COLUMNS = ["split", "image_id", "attack", "epsilon", "lambda", "defense",
                  "miou_clean", "miou_adv", "miou_def", "Q", "wallclock_ms"]
SUMMARY_COLUMNS = ["attack", "epsilon", "defense", "images",
                   "miou_clean", "miou_adv", "miou_def", "Q", "wallclock_ms"]
AGGREGATE_ID = "*"
ITERATIVE_ATTACKS = {"iterative_fgsm", "iterative_llcm", "ssmm", "dnnm"}
UNIVERSAL_ATTACKS = {"uap", "fff"}
AttackName = Literal["none", "fgsm", "llcm", "iterative_fgsm", "iterative_llcm", "ssmm", "dnnm", "uap", "fff"]

REPORT_TEMPLATE = """# Adversarial robustness report

Model `{{ model_digest[:12] }}` on split `{{ split }}` ({{ images }} images), attack `{{ attack }}`.

| epsilon | defense | mIoU clean | mIoU attacked | mIoU defended | Q |
| ---: | --- | ---: | ---: | ---: | ---: |
{% for row in aggregate -%}
| {{ row.epsilon }} | {{ row.defense }} | {{ "%.4f"|format(row.miou_clean) }} | {{ "%.4f"|format(row.miou_adv) }} | {{ "%.4f"|format(row.miou_def) }} | {{ "%.4f"|format(row.Q) }} |
{% endfor %}
{% if class_iou %}
## Clean per-class IoU

| class | IoU |
| --- | ---: |
{% for name, iou in class_iou -%}
| {{ name }} | {{ iou }} |
{% endfor %}
{% endif %}
Aggregate rows use the merged confusion matrix of all images; per-image rows are in `results.csv`,
their per-(attack, epsilon, defense) means in `summary.csv`. Panels show the first {{ panels }} images
of the split by id (clean image, then clean / attacked / defended predictions).
"""

logging.basicConfig(level=logging.INFO, format='%(asctime)s [%(levelname)s] %(message)s')
log = logging.getLogger("ExperimentRunner")
# ==============================================================================


class StageError(RuntimeError):
    """A per-image stage failed. `kind` is usage, data, numerical or internal."""

    def __init__(self, image_id: str, stage: str, message: str, kind: str = "internal"):
        super().__init__(image_id, stage, message, kind)
        self.image_id, self.stage, self.message, self.kind = image_id, stage, message, kind

    def __str__(self):
        return f"image '{self.image_id}', stage '{self.stage}': {self.message}"


def error_kind(exc: BaseException) -> str:
    if isinstance(exc, StageError):
        return exc.kind
    if isinstance(exc, (NumericalError, FloatingPointError)):
        return "numerical"
    if isinstance(exc, (DataError, FileNotFoundError)):
        return "data"
    if isinstance(exc, ValueError):
        return "usage"
    return "internal"


# --- Configuration & Results ---

class ExperimentConfig(BaseModel):
    model_config = ConfigDict(populate_by_name=True, arbitrary_types_allowed=True)

    checkpoint: Path
    dataset: Path
    out_dir: Path
    split: str = "val"
    attack: AttackName = "fgsm"
    epsilons: List[float] = Field(default_factory=lambda: [0.0, 2.0, 4.0, 8.0, 16.0])
    lambda_: Optional[float] = Field(default=None, alias="lambda", gt=0)
    iterations: Optional[int] = Field(default=None, ge=1)
    objective_class: int = CAR
    perturbation: Optional[Path] = None
    defenses: List[str] = Field(default_factory=lambda: ["none"])
    nlm: NlmConfig = Field(default_factory=NlmConfig)
    quilt_db: Optional[Path] = None
    ignore_class: Optional[int] = None
    limit: Optional[int] = Field(default=None, ge=1)
    panels: int = Field(default=4, ge=0)
    workers: int = Field(default=1, ge=1)
    record_wallclock: bool = False
    use_cache: bool = True
    seed: int = 0

    @field_validator("epsilons")
    @classmethod
    def _strictly_increasing(cls, v):
        if not v:
            raise ValueError("the epsilon sweep is empty")
        if any(e < 0 for e in v):
            raise ValueError("epsilons must be non-negative")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError(f"the epsilon sweep must be strictly increasing, got {v}")
        return v

    @field_validator("defenses")
    @classmethod
    def _known_pipelines(cls, v):
        if not v:
            raise ValueError("at least one defense variant is required ('none' for undefended)")
        for name in v:
            if name != "none" and any(stage not in STAGES for stage in name.split("+")):
                raise ValueError(f"Unknown defense pipeline '{name}'; use 'none' or '+'-joined {list(STAGES)}")
        return v

    @model_validator(mode="after")
    def _inputs_for_variant(self):
        if self.attack in UNIVERSAL_ATTACKS and self.perturbation is None:
            raise ValueError(f"attack '{self.attack}' needs a perturbation file")
        if any("quilt" in d.split("+") for d in self.defenses) and self.quilt_db is None:
            raise ValueError("quilting defenses need a patch database (quilt_db)")
        data_root, out = Path(self.dataset).resolve(), Path(self.out_dir).resolve()
        if out == data_root or data_root in out.parents:
            raise ValueError(f"out_dir {self.out_dir} lies inside the dataset {self.dataset}; "
                             "emitted files would change its fingerprint")
        return self

    def step_size(self, epsilon: float) -> float:
        """lambda = eps for single-step attacks, 1 for iterative ones, unless set explicitly."""
        if self.lambda_ is not None:
            return min(self.lambda_, epsilon)
        return min(1.0, epsilon) if self.attack in ITERATIVE_ATTACKS else epsilon


class ResultRow(BaseModel):
    split: str
    image_id: str
    attack: str
    epsilon: float
    lambda_: float = Field(alias="lambda")
    defense: str
    miou_clean: float
    miou_adv: float
    miou_def: float
    Q: float
    wallclock_ms: float

    model_config = ConfigDict(populate_by_name=True)

    def as_record(self) -> Dict[str, float]:
        return self.model_dump(by_alias=True)


@dataclass
class MaskPanel:
    image_id: str
    epsilon: float
    defense: str
    image: np.ndarray
    clean: np.ndarray
    adversarial: np.ndarray
    defended: np.ndarray


@dataclass
class ResultTable:
    rows: List[ResultRow] = field(default_factory=list)
    aggregate_rows: List[ResultRow] = field(default_factory=list)
    panels: List[MaskPanel] = field(default_factory=list)
    clean_confusion: Optional[ConfusionMatrix] = None
    model_digest: str = ""

    def summary(self) -> List[Dict[str, float]]:
        """Column means of the per-image rows, per (attack, epsilon, defense)."""
        groups: "OrderedDict[Tuple[str, float, str], List[ResultRow]]" = OrderedDict()
        for row in self.rows:
            groups.setdefault((row.attack, row.epsilon, row.defense), []).append(row)
        out = []
        for (attack, eps, defense), rows in groups.items():
            entry = {"attack": attack, "epsilon": eps, "defense": defense, "images": len(rows)}
            for col in ("miou_clean", "miou_adv", "miou_def", "Q", "wallclock_ms"):
                entry[col] = float(np.mean([getattr(r, col) for r in rows]))
            out.append(entry)
        return out


# --- Per-image jobs (picklable, run in the worker pool) ---

@dataclass
class CleanJob:
    image_id: str
    model: SegModel
    image: np.ndarray
    truth: np.ndarray
    ignore_class: Optional[int]


@dataclass
class ImageJob:
    image_id: str
    model: SegModel
    image: np.ndarray
    truth: np.ndarray
    fake_mask: np.ndarray
    attack: str
    epsilon: float
    lambda_: float
    iterations: Optional[int]
    objective_class: int
    perturbation: Optional[np.ndarray]
    defenses: List[str]
    nlm: NlmConfig
    patch_db: Optional[PatchDatabase]
    ignore_class: Optional[int]
    want_masks: bool
    seed: int


@dataclass
class ImageOutcome:
    image_id: str
    adv_confusion: ConfusionMatrix
    def_confusion: Dict[str, ConfusionMatrix]
    wallclock_ms: Dict[str, float]
    masks: Optional[Dict[str, np.ndarray]] = None


def run_clean_job(job: CleanJob) -> ConfusionMatrix:
    try:
        pred = SegNetMS(job.model).segment(np.asarray(job.image, dtype=np.float64))
        return MetricsMS.confusion(pred, job.truth, job.model.num_classes, job.ignore_class)
    except Exception as e:
        raise StageError(job.image_id, "clean", str(e), error_kind(e)) from e


def _craft(job: ImageJob, x: np.ndarray) -> np.ndarray:
    if job.epsilon == 0 or job.attack == "none":
        return np.asarray(x, dtype=np.uint8)
    if job.attack in UNIVERSAL_ATTACKS:
        r = project(job.perturbation, job.epsilon, math.inf)
        return AttacksMS.apply_perturbation(x, r)
    attacker = AttacksMS(SegNetMS(job.model))
    descend = job.attack in ("llcm", "iterative_llcm", "ssmm", "dnnm")
    cfg = AttackConfig(lambda_=job.lambda_, epsilon=job.epsilon, iterations=job.iterations,
                       direction="descend" if descend else "ascend", seed=job.seed)
    if job.attack == "fgsm":
        return attacker.fgsm(x, cfg)[0]
    if job.attack == "llcm":
        return attacker.llcm(x, cfg)[0]
    if job.attack == "iterative_fgsm":
        return attacker.iterative_attack(x, cfg, target="own")[0]
    if job.attack == "iterative_llcm":
        return attacker.iterative_attack(x, cfg, target="least_likely")[0]
    if job.attack == "ssmm":
        return attacker.ssmm_attack(x, job.fake_mask, cfg)
    return attacker.dnnm_attack(x, job.objective_class, cfg)[0]


def run_image_job(job: ImageJob) -> ImageOutcome:
    """Attack, then every defense variant, for one image at one epsilon."""
    segnet = SegNetMS(job.model)
    n = job.model.num_classes
    x = np.asarray(job.image, dtype=np.float64)
    stage = "attack"
    try:
        t0 = time.perf_counter()
        adv = _craft(job, x)
        attack_ms = (time.perf_counter() - t0) * 1000.0
        stage = "evaluate"
        adv_pred = segnet.segment(adv.astype(np.float64))
        adv_cm = MetricsMS.confusion(adv_pred, job.truth, n, job.ignore_class)
        masks = {"image": job.image, "clean": segnet.segment(x), "adversarial": adv_pred} if job.want_masks else None

        defender = DefensesMS(job.nlm, job.patch_db)
        def_cms, wallclock = {}, {}
        for defense in job.defenses:
            stage = f"defend:{defense}"
            t1 = time.perf_counter()
            if defense == "none":
                def_pred = adv_pred
            else:
                defended = defender.defend(adv, defense.split("+"))
                def_pred = segnet.segment(defended.astype(np.float64))
            def_cms[defense] = MetricsMS.confusion(def_pred, job.truth, n, job.ignore_class)
            wallclock[defense] = attack_ms + (time.perf_counter() - t1) * 1000.0
            if masks is not None:
                masks[f"defended:{defense}"] = def_pred
    except StageError:
        raise
    except Exception as e:
        raise StageError(job.image_id, stage, f"{type(e).__name__}: {e}", error_kind(e)) from e
    return ImageOutcome(job.image_id, adv_cm, def_cms, wallclock, masks)


def _safe_q(miou_def: float, miou_clean: float) -> float:
    if miou_clean <= 0:
        return math.nan
    return MetricsMS.miou_ratio(miou_def, miou_clean)


class ExperimentRunnerMS:
    """
    The Conductor: sweeps epsilon over a split, attacks and defends every
    image, scores clean / attacked / defended predictions and writes the
    CSVs, mask panels and a markdown report.
    """

    def __init__(self, pool: Optional[WorkerPoolMS] = None):
        self.pool = pool
        self.jinja_env = Environment(loader=BaseLoader())
        self.fingerprints = DatasetFingerprintMS()

    # --- Orchestration ---

    def _clean_confusions(self, cfg: ExperimentConfig, model: SegModel, samples, fingerprint: str,
                          pool: WorkerPoolMS) -> Dict[str, ConfusionMatrix]:
        digest = model.digest()
        cache = EvalCacheMS(cfg.out_dir / DB_NAME) if cfg.use_cache else None
        if cache is not None:
            cached = cache.get(digest, cfg.split, fingerprint)
            if cached is not None and all(s.image_id in cached for s in samples):
                return {s.image_id: cached[s.image_id] for s in samples}
        jobs = [CleanJob(s.image_id, model, s.image, s.mask, cfg.ignore_class) for s in samples]
        matrices = dict(zip((s.image_id for s in samples), pool.map(run_clean_job, jobs)))
        if cache is not None:
            cache.put(digest, cfg.split, fingerprint, matrices)
        return matrices

    def run_experiment(self, cfg: ExperimentConfig, emit: bool = True) -> ResultTable:
        for path in (cfg.checkpoint, cfg.dataset, cfg.perturbation, cfg.quilt_db):
            if path is not None and not Path(path).exists():
                raise FileNotFoundError(f"Referenced file not found: {path}")
        model = SegModel.load(cfg.checkpoint)
        before = self.fingerprints.scan(cfg.dataset)
        splits = ToyDatasetMS.load_dataset(cfg.dataset)
        if cfg.split not in splits:
            raise DataError(f"dataset {cfg.dataset} has no '{cfg.split}' split")
        samples = splits[cfg.split][:cfg.limit] if cfg.limit else splits[cfg.split]
        if not samples:
            raise DataError(f"split '{cfg.split}' is empty")
        perturbation = Perturbation.load(cfg.perturbation).values if cfg.perturbation else None
        patch_db = PatchDatabase.load(cfg.quilt_db) if cfg.quilt_db else None
        pool = self.pool or WorkerPoolMS(cfg.workers)
        n = model.num_classes

        clean = self._clean_confusions(cfg, model, samples, before["fingerprint"], pool)
        clean_total = MetricsMS.merge([clean[s.image_id] for s in samples])
        miou_clean_total = MetricsMS.miou(clean_total)
        table = ResultTable(clean_confusion=clean_total, model_digest=model.digest())
        log.info(f"Clean mIoU on '{cfg.split}' ({len(samples)} images): {miou_clean_total:.4f}")

        for eps in cfg.epsilons:
            lam = cfg.step_size(eps) if eps > 0 else 0.0
            jobs = []
            for i, s in enumerate(samples):
                fake = samples[(i + 1) % len(samples)].mask
                jobs.append(ImageJob(s.image_id, model, s.image, s.mask, fake, cfg.attack, eps, lam,
                                     cfg.iterations, cfg.objective_class, perturbation, cfg.defenses,
                                     cfg.nlm, patch_db, cfg.ignore_class, i < cfg.panels, cfg.seed))
            outcomes: List[ImageOutcome] = pool.map(run_image_job, jobs)

            for s, out in zip(samples, outcomes):
                m_clean = MetricsMS.miou(clean[s.image_id])
                m_adv = MetricsMS.miou(out.adv_confusion)
                for defense in cfg.defenses:
                    m_def = MetricsMS.miou(out.def_confusion[defense])
                    table.rows.append(ResultRow(
                        split=cfg.split, image_id=s.image_id, attack=cfg.attack, epsilon=eps, lambda_=lam,
                        defense=defense, miou_clean=m_clean, miou_adv=m_adv, miou_def=m_def,
                        Q=_safe_q(m_def, m_clean),
                        wallclock_ms=round(out.wallclock_ms[defense], 3) if cfg.record_wallclock else 0.0))
                    if out.masks is not None:
                        table.panels.append(MaskPanel(s.image_id, eps, defense, out.masks["image"],
                                                      out.masks["clean"], out.masks["adversarial"],
                                                      out.masks[f"defended:{defense}"]))

            adv_total = MetricsMS.merge([o.adv_confusion for o in outcomes])
            for defense in cfg.defenses:
                def_total = MetricsMS.merge([o.def_confusion[defense] for o in outcomes])
                m_def = MetricsMS.miou(def_total)
                wall = sum(o.wallclock_ms[defense] for o in outcomes) if cfg.record_wallclock else 0.0
                table.aggregate_rows.append(ResultRow(
                    split=cfg.split, image_id=AGGREGATE_ID, attack=cfg.attack, epsilon=eps, lambda_=lam,
                    defense=defense, miou_clean=miou_clean_total, miou_adv=MetricsMS.miou(adv_total),
                    miou_def=m_def, Q=_safe_q(m_def, miou_clean_total), wallclock_ms=round(wall, 3)))
                log.info(f"eps={eps:g} defense={defense}: mIoU {MetricsMS.miou(adv_total):.4f} attacked, "
                         f"{m_def:.4f} defended, Q={table.aggregate_rows[-1].Q:.4f}")

        self.fingerprints.verify_unchanged(before, cfg.dataset)
        if emit:
            self.emit_report(table, cfg.out_dir, n_panels=cfg.panels, split=cfg.split, attack=cfg.attack)
        return table

    # --- Output ---

    @staticmethod
    def _fmt(value) -> str:
        if isinstance(value, float):
            return repr(value)
        return str(value)

    def _write_csv(self, path: Path, columns: List[str], records: List[Dict]):
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            for rec in records:
                writer.writerow([self._fmt(rec[c]) for c in columns])

    def _write_panels(self, panels: List[MaskPanel], panel_dir: Path, attack: str):
        panel_dir.mkdir(parents=True, exist_ok=True)
        for p in panels:
            strip = np.concatenate([np.asarray(p.image, dtype=np.uint8), colorize(p.clean),
                                    colorize(p.adversarial), colorize(p.defended)], axis=1)
            Image.fromarray(strip).save(panel_dir / f"{attack}_eps{p.epsilon:g}_{p.defense}_{p.image_id}.png")

    def emit_report(self, table: ResultTable, out_dir: Union[str, Path], n_panels: int = 0,
                    split: str = "", attack: str = "") -> Dict[str, Path]:
        if not table.rows:
            raise ValueError("nothing to report: the result table is empty")
        out = Path(out_dir)
        paths = {name: out / name for name in ("results.csv", "aggregate.csv", "summary.csv", "report.md")}
        try:
            out.mkdir(parents=True, exist_ok=True)
            self._write_csv(paths["results.csv"], RESULT_COLUMNS, [r.as_record() for r in table.rows])
            self._write_csv(paths["aggregate.csv"], RESULT_COLUMNS, [r.as_record() for r in table.aggregate_rows])
            self._write_csv(paths["summary.csv"], SUMMARY_COLUMNS, table.summary())
            if table.panels:
                self._write_panels(table.panels, out / "panels", attack or table.rows[0].attack)
            paths["report.md"].write_text(self.render_report(table, n_panels, split, attack), encoding="utf-8")
        except OSError as e:
            raise DataError(f"cannot write the report to {out}: {e}") from e
        log.info(f"✅ Report written to {out}")
        return paths

    def render_report(self, table: ResultTable, n_panels: int = 0, split: str = "", attack: str = "") -> str:
        class_iou = []
        if table.clean_confusion is not None:
            for name, iou in zip(CLASS_NAMES, table.clean_confusion.class_iou()):
                class_iou.append((name, "n/a" if np.isnan(iou) else f"{iou:.4f}"))
        aggregate = table.aggregate_rows or [
            ResultRow(**{**row, "split": split, "image_id": AGGREGATE_ID, "lambda": 0.0})
            for row in table.summary()
        ]
        template = self.jinja_env.from_string(REPORT_TEMPLATE)
        return template.render(model_digest=table.model_digest or "unknown", split=split or table.rows[0].split,
                               images=len({r.image_id for r in table.rows}),
                               attack=attack or table.rows[0].attack, aggregate=aggregate,
                               class_iou=class_iou, panels=n_panels)

    @staticmethod
    def load_results(out_dir: Union[str, Path]) -> ResultTable:
        """Reads results.csv (and aggregate.csv when present) back into a table."""
        out = Path(out_dir)
        results = out / "results.csv"
        if not results.exists():
            raise FileNotFoundError(f"No results.csv in {out}")

        def _read(path: Path) -> List[ResultRow]:
            with path.open(newline="", encoding="utf-8") as fh:
                reader = csv.DictReader(fh)
                if reader.fieldnames != RESULT_COLUMNS:
                    raise DataError(f"{path.name}: unexpected header {reader.fieldnames}")
                return [ResultRow(**{k: (v if k in ("split", "image_id", "attack", "defense") else float(v))
                                     for k, v in rec.items()}) for rec in reader]

        aggregate = out / "aggregate.csv"
        return ResultTable(rows=_read(results), aggregate_rows=_read(aggregate) if aggregate.exists() else [])


# --- Independent Test Block ---
if __name__ == "__main__":
    import tempfile

    from _ToyDatasetMS.toy_dataset import ToyDatasetSpec

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        ToyDatasetMS(ToyDatasetSpec(train_count=2, val_count=3, seed=5)).generate(tmp / "data")
        SegModel.initialize(seed=2).save(tmp / "model.ckpt")
        cfg = ExperimentConfig(checkpoint=tmp / "model.ckpt", dataset=tmp / "data", out_dir=tmp / "out",
                               attack="fgsm", epsilons=[0, 4], panels=1)
        table = ExperimentRunnerMS().run_experiment(cfg)
        for row in table.aggregate_rows:
            print(f"eps={row.epsilon:g}: Q={row.Q:.4f}")
        print((tmp / "out" / "results.csv").read_text().splitlines()[0])
