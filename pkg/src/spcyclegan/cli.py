"""Command line entry point.

    spcyclegan synth --preset synthetic --output runs/demo
    spcyclegan run   --preset synthetic --output runs/demo --stage all --deterministic

Exit codes: 0 success, 2 config/validation, 3 data, 4 training, 5 missing artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import PRESETS, ExperimentConfig, load_config, with_zeta
from .data.dataset import load_directory_dataset
from .data.synthetic import generate_synthetic_domains
from .data.transforms import crop_dataset
from .errors import MissingArtifactError, SPCycleGANError, ValidationError
from .evaluation import DA_METHODS, MetricsRecord, compare_methods, evaluate, write_comparison, write_metrics
from .training import load_bundle, load_segmenter, train_segmenter, train_sp_cyclegan, translate_dataset

log = logging.getLogger("spcyclegan")

STAGES = ("train_da", "translate", "train_seg", "eval", "all")
GAN_METHODS = ("sp_cyclegan", "default_cyclegan")


class Runner:
    """Executes pipeline stages for a set of method arms under ``cfg.output``."""

    def __init__(self, cfg: ExperimentConfig, methods: Sequence[str] = DA_METHODS, per_image_csv=False):
        unknown = set(methods) - set(DA_METHODS)
        if unknown:
            raise ValidationError(f"unknown methods {sorted(unknown)}; expected {DA_METHODS}")
        self.cfg = cfg
        self.methods = [m for m in DA_METHODS if m in methods]
        self.per_image_csv = per_image_csv
        self._cache: dict = {}

    def arm_dir(self, method: str) -> Path:
        return self.cfg.output / method

    def gan_checkpoint(self, method: str) -> Path:
        return self.arm_dir(method) / "gan" / "final.pt"

    def translated_dir(self, method: str) -> Path:
        return self.arm_dir(method) / "translated"

    def segmenter_path(self, method: str) -> Path:
        return self.arm_dir(method) / "segmenter.pt"

    def _dataset(self, name: str):
        if name not in self._cache:
            self.cfg.require_data(name)
            # target labels are never read, so they cannot leak into adaptation
            self._cache[name] = load_directory_dataset(
                getattr(self.cfg, name), self.cfg.channels, self.cfg.num_label_classes,
                with_labels=name != "target")
        return self._cache[name]

    def _require(self, path: Path, stage: str, method: str) -> None:
        if not path.exists():
            raise MissingArtifactError(f"{path} not found for {method}: run {stage} first")

    # stages ---------------------------------------------------------------

    def train_da(self):
        cfg = self.cfg
        for method in self.methods:
            if method not in GAN_METHODS:
                continue
            sp = method == "sp_cyclegan"
            train_cfg = cfg.train_da if sp else with_zeta(cfg.train_da, 0.0)
            log.info("train_da[%s]: %d epochs", method, train_cfg.total_epochs)
            train_sp_cyclegan(self._dataset("source"), self._dataset("target"), cfg.model, train_cfg,
                              out_dir=self.arm_dir(method) / "gan", crop=cfg.crops.get("train_da"),
                              use_segmenter=sp, deterministic=cfg.deterministic)

    def translate(self):
        for method in self.methods:
            if method not in GAN_METHODS:
                continue
            ckpt = self.gan_checkpoint(method)
            self._require(ckpt, "train_da", method)
            bundle, _ = load_bundle(ckpt, self.cfg.model)
            log.info("translate[%s]", method)
            translate_dataset(bundle.G, self._dataset("source"), self.cfg.crops.get("translate"),
                              self.translated_dir(method), seed=self.cfg.seed)

    def train_seg(self):
        cfg = self.cfg
        for method in self.methods:
            if method in GAN_METHODS:
                self._require(self.translated_dir(method), "translate", method)
                data = load_directory_dataset(self.translated_dir(method), cfg.channels, cfg.num_label_classes)
            else:
                data = crop_dataset(self._dataset("source"), cfg.crops.get("translate"), cfg.seed)
            log.info("train_seg[%s]: %d samples", method, len(data))
            result = train_segmenter(data, cfg.model, cfg.train_seg, out_path=self.segmenter_path(method),
                                     deterministic=cfg.deterministic)
            with (self.arm_dir(method) / "segmenter_history.jsonl").open("w") as fh:
                for rec in result.history:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def eval(self) -> list[MetricsRecord]:
        cfg = self.cfg
        test = crop_dataset(self._dataset("test"), cfg.crops.get("test"), cfg.seed)
        records = []
        for method in self.methods:
            path = self.segmenter_path(method)
            if not path.exists():
                raise MissingArtifactError(f"no trained segmenter for {method} at {path}: run train_seg first")
            seg = load_segmenter(path, cfg.model)
            record = evaluate(seg, test, da_method=method, direction=cfg.direction,
                              num_classes=cfg.model.num_classes, class_names=cfg.class_names)
            write_metrics(record, self.arm_dir(method), per_image_csv=self.per_image_csv)
            records.append(record)
        report = compare_methods(records)
        write_comparison(report, cfg.output)
        print(report.to_text(), end="")
        return records

    def run(self, stage: str):
        if stage not in STAGES:
            raise ValidationError(f"unknown stage {stage!r}; expected one of {STAGES}")
        order = ["train_da", "translate", "train_seg", "eval"] if stage == "all" else [stage]
        # fail on missing inputs before any compute
        needed = {"train_da": ("source", "target"), "translate": ("source",),
                  "train_seg": ("source",), "eval": ("test",)}
        for s in order:
            self.cfg.require_data(*needed[s])
        result = None
        for s in order:
            result = getattr(self, s)()
        return result


def cmd_synth(cfg: ExperimentConfig) -> Path:
    if cfg.synth is None:
        raise ValidationError("config has no synth section")
    generate_synthetic_domains(cfg.synth, cfg.synth_root)
    manifest = cfg.synth_root / "manifest.json"
    print(manifest)
    return manifest


def cmd_run(cfg: ExperimentConfig, stage: str, methods: Sequence[str] = DA_METHODS, per_image_csv=False):
    cfg.output.mkdir(parents=True, exist_ok=True)
    (cfg.output / "resolved_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return Runner(cfg, methods, per_image_csv).run(stage)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--preset", choices=PRESETS, help="shipped preset to start from")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--output", type=Path, help="override the output directory")
    common.add_argument("--deterministic", action="store_true", default=None,
                        help="force deterministic algorithms")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="spcyclegan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic two-domain dataset")
    run = sub.add_parser("run", parents=[common], help="run pipeline stages")
    run.add_argument("--stage", choices=STAGES, default="all")
    run.add_argument("--methods", default=",".join(DA_METHODS),
                     help="comma-separated subset of " + ",".join(DA_METHODS))
    run.add_argument("--per-image-csv", action="store_true", help="also write per-image DSC as CSV")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config, args.preset, seed=args.seed, output=args.output,
                          deterministic=args.deterministic)
        if args.command == "synth":
            cmd_synth(cfg)
        else:
            methods = [m.strip() for m in args.methods.split(",") if m.strip()]
            cmd_run(cfg, args.stage, methods, args.per_image_csv)
    except SPCycleGANError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
