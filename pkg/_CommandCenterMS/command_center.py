import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from PIL import Image
from pydantic import ValidationError

from _AttacksMS.attacks import FFF_STEP_SIZE, AttackConfig, AttacksMS
from _DefensesMS.defenses import DefensesMS, NlmConfig, PatchDatabase
from _ExperimentRunnerMS.experiment_runner import ExperimentConfig, ExperimentRunnerMS, error_kind
from _SegNetMS.segnet import SegModel, SegNetMS, TrainConfig
from _TensorCoreMS.tensor_core import DataError
from _ToyDatasetMS.toy_dataset import CAR, SCENE_CONTRAST, ToyDatasetMS, ToyDatasetSpec
from _WorkerPoolMS.worker_pool import WorkerPoolMS

# ==============================================================================
# CONFIGURATION
# ==============================================================================
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
EXIT_BY_KIND = {"usage": EXIT_USAGE, "data": EXIT_DATA, "numerical": EXIT_NUMERICAL}
DEFAULT_OUT = Path("out")
GLOBAL_KEYS = {"seed", "config", "out"}
# checked after parsing so a --config file may supply them
REQUIRED_OPTIONS = {
    "train": ("data",),
    "attack": ("model", "data"),
    "craft-uap": ("model", "data"),
    "fff": ("model",),
    "build-quilt-db": ("data",),
    "defend": ("images",),
    "eval": ("model", "data"),
}
logging.basicConfig(level=logging.INFO, format='%(asctime)s [%(levelname)s] %(message)s')
log = logging.getLogger("CommandCenter")
# ==============================================================================


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so main() owns the exit codes."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def read_config_file(path: Path) -> Dict[str, Any]:
    """UTF-8 key=value lines; '#' comments; values parsed as JSON where possible."""
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got '{raw.strip()}'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            values[key.replace("-", "_")] = json.loads(value)
        except json.JSONDecodeError:
            values[key.replace("-", "_")] = value
    return values


def float_list(value) -> List[float]:
    if isinstance(value, (list, tuple)):
        return [float(v) for v in value]
    return [float(v) for v in str(value).split(",") if v.strip()]


def str_list(value) -> List[str]:
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [v.strip() for v in str(value).split(",") if v.strip()]


def norm_value(value) -> float:
    return math.inf if str(value).lower() in ("inf", "infinity") else float(value)


class CommandCenterMS:
    """
    The Switchboard: command-line surface over the suite. Every subcommand
    reads its inputs, calls one service and writes its artifacts under --out.
    """

    def __init__(self):
        self._subcommands: List[argparse.ArgumentParser] = []
        self.parser = self._build_parser()

    # --- Parser ---

    def _build_parser(self) -> argparse.ArgumentParser:
        parser = _Parser(prog="segadv", description="Adversarial attacks and defenses on a desk-scale segmentation net")
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--config", type=Path, default=None, help="key=value file; flags override it")
        parser.add_argument("--out", type=Path, default=DEFAULT_OUT)
        sub = parser.add_subparsers(dest="command", required=True)

        p = sub.add_parser("gen-data", help="render the toy street-scene dataset")
        p.add_argument("--train", type=int, default=96)
        p.add_argument("--val", type=int, default=64)
        p.add_argument("--noise-std", type=float, default=0.5)
        p.add_argument("--contrast", type=float, default=SCENE_CONTRAST)
        p.set_defaults(handler=self.cmd_gen_data)

        p = sub.add_parser("train", help="(adversarially) train the segmentation net")
        p.add_argument("--data", type=Path, default=None)
        p.add_argument("--epochs", type=int, default=10)
        p.add_argument("--batch-size", type=int, default=4)
        p.add_argument("--lr", type=float, default=0.05)
        p.add_argument("--adversarial-eps", type=float, default=0.0)
        p.add_argument("--mix-ratio", type=float, default=0.5)
        p.set_defaults(handler=self.cmd_train)

        p = sub.add_parser("attack", help="craft adversarial images for a split")
        self._model_data_args(p)
        p.add_argument("--attack", default="fgsm",
                       choices=["fgsm", "llcm", "iterative_fgsm", "iterative_llcm", "ssmm", "dnnm"])
        p.add_argument("--epsilon", type=float, default=8.0)
        p.add_argument("--lambda", dest="lambda_", type=float, default=None)
        p.add_argument("--iterations", type=int, default=None)
        p.add_argument("--objective-class", type=int, default=CAR)
        p.set_defaults(handler=self.cmd_attack)

        p = sub.add_parser("craft-uap", help="universal perturbation from DeepFool steps")
        self._model_data_args(p)
        p.add_argument("--epsilon", type=float, default=10.0)
        p.add_argument("--norm", type=norm_value, default=math.inf)
        p.add_argument("--passes", type=int, default=1)
        p.add_argument("--train-count", type=int, default=32)
        p.add_argument("--holdout-count", type=int, default=32)
        p.set_defaults(handler=self.cmd_craft_uap)

        p = sub.add_parser("fff", help="data-free universal perturbation (Fast Feature Fool)")
        p.add_argument("--model", type=Path, default=None)
        p.add_argument("--epsilon", type=float, default=10.0)
        p.add_argument("--steps", type=int, default=20)
        p.add_argument("--step-size", type=float, default=FFF_STEP_SIZE)
        p.set_defaults(handler=self.cmd_fff)

        p = sub.add_parser("build-quilt-db", help="sample clean patches for image quilting")
        p.add_argument("--data", type=Path, default=None)
        p.add_argument("--split", default="train")
        p.add_argument("--patch-size", type=int, default=5)
        p.add_argument("--count", type=int, default=50_000)
        p.set_defaults(handler=self.cmd_build_quilt_db)

        p = sub.add_parser("defend", help="apply a defense pipeline to a folder of PNG images")
        p.add_argument("--images", type=Path, default=None)
        self._defense_args(p)
        p.add_argument("--pipeline", default="nlm+quilt")
        p.set_defaults(handler=self.cmd_defend)

        p = sub.add_parser("eval", help="epsilon sweep: attack, defend, score, report")
        self._model_data_args(p)
        self._defense_args(p)
        p.add_argument("--attack", default="fgsm")
        p.add_argument("--epsilons", default="0,2,4,8,16")
        p.add_argument("--lambda", dest="lambda_", type=float, default=None)
        p.add_argument("--iterations", type=int, default=None)
        p.add_argument("--objective-class", type=int, default=CAR)
        p.add_argument("--perturbation", type=Path, default=None)
        p.add_argument("--defenses", default="none")
        p.add_argument("--ignore-class", type=int, default=None)
        p.add_argument("--panels", type=int, default=4)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--record-wallclock", action="store_true")
        p.add_argument("--no-cache", action="store_true")
        p.set_defaults(handler=self.cmd_eval)

        p = sub.add_parser("report", help="rebuild summary.csv and report.md from results.csv")
        p.add_argument("--results", type=Path, default=None, help="defaults to --out")
        p.set_defaults(handler=self.cmd_report)
        self._subcommands = list(sub.choices.values())
        return parser

    @staticmethod
    def _model_data_args(p):
        p.add_argument("--model", type=Path, default=None)
        p.add_argument("--data", type=Path, default=None)
        p.add_argument("--split", default="val")
        p.add_argument("--limit", type=int, default=None)

    @staticmethod
    def _defense_args(p):
        p.add_argument("--nlm-h", default="auto_2_15_sigma")
        p.add_argument("--nlm-window", type=int, default=9)
        p.add_argument("--nlm-patch", type=int, default=7)
        p.add_argument("--quilt-db", type=Path, default=None)

    def parse(self, argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
        argv = list(sys.argv[1:] if argv is None else argv)
        pre = _Parser(add_help=False)
        pre.add_argument("--config", type=Path, default=None)
        known, _ = pre.parse_known_args(argv)
        if known.config is not None:
            file_values = read_config_file(known.config)
            if "lambda" in file_values:
                file_values["lambda_"] = file_values.pop("lambda")
            # subparser defaults win over the parent namespace, so global keys stay on the parent
            self.parser.set_defaults(**{k: v for k, v in file_values.items() if k in GLOBAL_KEYS})
            for sub in self._subcommands:
                sub.set_defaults(**{k: v for k, v in file_values.items() if k not in GLOBAL_KEYS})
        return self.parser.parse_args(argv)

    # --- Helpers ---

    @staticmethod
    def _samples(args, split: Optional[str] = None):
        splits = ToyDatasetMS.load_dataset(args.data)
        split = split or args.split
        if split not in splits:
            raise DataError(f"dataset {args.data} has no '{split}' split")
        samples = splits[split]
        limit = getattr(args, "limit", None)
        return samples[:limit] if limit else samples

    @staticmethod
    def _nlm_config(args) -> NlmConfig:
        h = args.nlm_h
        if h != "auto_2_15_sigma":
            h = float(h)
        return NlmConfig(patch_size=args.nlm_patch, window_size=args.nlm_window, filtering_h=h)

    # --- Subcommands ---

    def cmd_gen_data(self, args) -> Dict[str, Any]:
        spec = ToyDatasetSpec(train_count=args.train, val_count=args.val, noise_std=args.noise_std,
                              contrast=args.contrast, seed=args.seed)
        root = ToyDatasetMS(spec).generate(args.out)
        return {"dataset": str(root)}

    def cmd_train(self, args) -> Dict[str, Any]:
        dataset = [(s.image, s.mask) for s in self._samples(args, "train")]
        cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr, seed=args.seed)
        net = SegNetMS(SegModel.initialize(seed=args.seed))
        if args.adversarial_eps > 0:
            result = net.adversarial_train(dataset, cfg, epsilon=args.adversarial_eps, mix_ratio=args.mix_ratio)
        else:
            result = net.train(dataset, cfg)
        ckpt = result.model.save(Path(args.out) / "model.ckpt")
        (Path(args.out) / "loss_trace.json").write_text(json.dumps(result.loss_trace, indent=2), encoding="utf-8")
        return {"checkpoint": str(ckpt), "final_loss": result.loss_trace[-1]}

    def cmd_attack(self, args) -> Dict[str, Any]:
        attacker = AttacksMS(SegNetMS.load(args.model))
        iterative = args.attack not in ("fgsm", "llcm")
        lam = args.lambda_ if args.lambda_ is not None else (min(1.0, args.epsilon) if iterative else args.epsilon)
        descend = args.attack in ("llcm", "iterative_llcm", "ssmm", "dnnm")
        cfg = AttackConfig(lambda_=lam, epsilon=args.epsilon, iterations=args.iterations,
                           direction="descend" if descend else "ascend", seed=args.seed)
        samples = self._samples(args)
        out_dir = Path(args.out) / "adversarial"
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(samples):
            if args.attack == "fgsm":
                adv = attacker.fgsm(s.image, cfg)[0]
            elif args.attack == "llcm":
                adv = attacker.llcm(s.image, cfg)[0]
            elif args.attack == "iterative_fgsm":
                adv = attacker.iterative_attack(s.image, cfg, "own")[0]
            elif args.attack == "iterative_llcm":
                adv = attacker.iterative_attack(s.image, cfg, "least_likely")[0]
            elif args.attack == "ssmm":
                adv = attacker.ssmm_attack(s.image, samples[(i + 1) % len(samples)].mask, cfg)
            else:
                adv = attacker.dnnm_attack(s.image, args.objective_class, cfg)[0]
            Image.fromarray(adv).save(out_dir / f"{s.image_id}_img.png")
        return {"attack": args.attack, "images": len(samples), "dir": str(out_dir)}

    def cmd_craft_uap(self, args) -> Dict[str, Any]:
        attacker = AttacksMS(SegNetMS.load(args.model))
        samples = self._samples(args)
        if len(samples) < args.train_count + 1:
            raise UsageError(f"split has {len(samples)} images; need more than --train-count {args.train_count}")
        train = [s.image for s in samples[:args.train_count]]
        holdout = [s.image for s in samples[args.train_count:args.train_count + args.holdout_count]]
        result = attacker.craft_uap(train, holdout, epsilon=args.epsilon, norm_p=args.norm, passes=args.passes)
        path = result.perturbation.save(Path(args.out) / "uap.pert")
        return {"perturbation": str(path), "fooled_train": result.fooled_fraction_train,
                "fooled_holdout": result.fooled_fraction_holdout}

    def cmd_fff(self, args) -> Dict[str, Any]:
        attacker = AttacksMS(SegNetMS.load(args.model))
        result = attacker.fff_uap(epsilon=args.epsilon, steps=args.steps, step_size=args.step_size, seed=args.seed)
        path = result.perturbation.save(Path(args.out) / "fff.pert")
        (Path(args.out) / "fff_trace.json").write_text(json.dumps(result.objective_trace, indent=2), encoding="utf-8")
        return {"perturbation": str(path), "objective": result.objective_trace[-1]}

    def cmd_build_quilt_db(self, args) -> Dict[str, Any]:
        images = [s.image for s in self._samples(args, args.split)]
        db = DefensesMS.build_patch_db(images, (args.patch_size, args.patch_size), args.count, args.seed,
                                       source=f"{args.data}:{args.split}")
        path = db.save(Path(args.out) / "quilt.db")
        return {"patch_db": str(path), "patches": db.count}

    def cmd_defend(self, args) -> Dict[str, Any]:
        if not args.images.is_dir():
            raise FileNotFoundError(f"Image folder not found: {args.images}")
        db = PatchDatabase.load(args.quilt_db) if args.quilt_db else None
        defender = DefensesMS(self._nlm_config(args), db)
        pipeline = str_list(args.pipeline.replace("+", ","))
        out_dir = Path(args.out) / "defended"
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = sorted(args.images.glob("*.png"))
        for path in paths:
            with Image.open(path) as img:
                if img.mode != "RGB":
                    raise DataError(f"{path.name}: unsupported PNG format '{img.mode}', expected 8-bit RGB")
                image = np.asarray(img, dtype=np.uint8)
            Image.fromarray(defender.defend(image, pipeline)).save(out_dir / path.name)
        return {"pipeline": "+".join(pipeline), "images": len(paths), "dir": str(out_dir)}

    def cmd_eval(self, args) -> Dict[str, Any]:
        cfg = ExperimentConfig(
            checkpoint=args.model, dataset=args.data, out_dir=args.out, split=args.split, attack=args.attack,
            epsilons=float_list(args.epsilons), lambda_=args.lambda_, iterations=args.iterations,
            objective_class=args.objective_class, perturbation=args.perturbation,
            defenses=str_list(args.defenses), nlm=self._nlm_config(args), quilt_db=args.quilt_db,
            ignore_class=args.ignore_class, limit=args.limit, panels=args.panels, workers=args.workers,
            record_wallclock=args.record_wallclock, use_cache=not args.no_cache, seed=args.seed,
        )
        table = ExperimentRunnerMS(WorkerPoolMS(cfg.workers)).run_experiment(cfg)
        return {"rows": len(table.rows), "out": str(args.out)}

    def cmd_report(self, args) -> Dict[str, Any]:
        src = args.results or args.out
        runner = ExperimentRunnerMS()
        table = runner.load_results(src)
        paths = runner.emit_report(table, src)
        return {"report": str(paths["report.md"])}

    # --- Entry point ---

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        try:
            args = self.parse(argv)
            missing = [n for n in REQUIRED_OPTIONS.get(args.command, ()) if getattr(args, n, None) is None]
            if missing:
                raise UsageError(f"{args.command}: missing required option(s) "
                                 + ", ".join("--" + n.replace("_", "-") for n in missing))
            summary = args.handler(args)
            log.info(f"✅ {args.command}: {json.dumps(summary, default=str)}")
            return EXIT_OK
        except ValidationError as e:
            log.error(f"Invalid configuration: {e}")
            return EXIT_USAGE
        except Exception as e:
            kind = error_kind(e)
            if kind == "internal":
                raise
            log.error(f"Failed ({kind} error): {e}")
            return EXIT_BY_KIND[kind]


def main(argv: Optional[Sequence[str]] = None) -> int:
    return CommandCenterMS().run(argv)


# --- Independent Test Block ---
if __name__ == "__main__":
    sys.exit(main())
