"""Command-line pipeline: synthetic data, patch extraction, pretraining, evaluation.

Every command takes ``--out DIR`` and writes a JSON report plus
``config.json``, the effective run configuration.  Feeding that echo back
through ``--config`` reproduces the run.  Exit codes: 0 success, 1 usage or
configuration error, 2 data error, 3 verification failure.
"""

import argparse
import json
import logging
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import patches
from . import synth as synthetic
from .imageops import AugmentConfig
from .model import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .train import ImageStore, TrainConfig, TrainingError, pretrain, whole_image_specs
from .verify import TOL, run_suite

log = logging.getLogger("lesioncl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3

# augmentation compositions, in report order
ABLATIONS = (
    ("crop",),
    ("rotation",),
    ("color_distortion",),
    ("gray_scaling",),
    ("rotation", "color_distortion", "gray_scaling"),
    ("crop", "color_distortion", "gray_scaling"),
    ("crop", "rotation", "gray_scaling"),
    ("crop", "rotation", "color_distortion"),
    ("crop", "rotation", "color_distortion", "gray_scaling"),
)
METHODS = ("lesion", "whole", "random")
PROTOCOLS = ("linear", "transfer")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def desk_train() -> TrainConfig:
    return TrainConfig(batch_size=32, epochs=12, initial_lr=0.1, augment=AugmentConfig(view_size=32))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    synth: synthetic.SynthConfig = field(default_factory=lambda: synthetic.SynthConfig(count=700))
    test_count: int = 200  # tail of the generated population
    threshold: float = 0.8
    train: TrainConfig = field(default_factory=desk_train)
    linear: ev.EvalConfig = field(default_factory=lambda: ev.EvalConfig(lr=1.0, epochs=300))
    transfer: ev.EvalConfig = field(default_factory=lambda: ev.EvalConfig(
        lr=1.0, epochs=20, batch_size=32, encoder_lr=0.01, probe_epochs=300, clip_norm=1.0))
    eval_size: int = 128
    fractions: tuple[float, ...] = ev.FRACTIONS
    ablate_fraction: float = 1.0

    def __post_init__(self):
        if not 1 <= self.test_count < self.synth.count:
            raise ValueError(f"test_count must lie in [1, {self.synth.count})")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if self.eval_size < 8:
            raise ValueError("eval_size must be >= 8")
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        for f in self.fractions + (self.ablate_fraction,):
            if not 0.0 < f <= 1.0:
                raise ValueError(f"fraction {f} outside (0, 1]")

    @property
    def num_classes(self) -> int:
        return self.synth.grades

    def with_seed(self, seed: int) -> "RunConfig":
        """The master seed drives every stage."""
        return replace(
            self, seed=seed, synth=replace(self.synth, seed=seed), train=replace(self.train, seed=seed),
            linear=replace(self.linear, seed=seed), transfer=replace(self.transfer, seed=seed),
        )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "synth": self.synth.to_dict(), "test_count": self.test_count,
            "threshold": self.threshold, "train": self.train.to_dict(), "linear": self.linear.to_dict(),
            "transfer": self.transfer.to_dict(), "eval_size": self.eval_size,
            "fractions": list(self.fractions), "ablate_fraction": self.ablate_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        # sub-sections merge over the desk defaults
        if "synth" in d:
            d["synth"] = synthetic.SynthConfig.from_dict({**base.synth.to_dict(), **d["synth"]})
        if "train" in d:
            t = {**base.train.to_dict(), **d["train"]}
            for sub in ("augment", "arch"):
                if sub in d["train"]:
                    t[sub] = {**base.train.to_dict()[sub], **d["train"][sub]}
            d["train"] = TrainConfig.from_dict(t)
        for name in ("linear", "transfer"):
            if name in d:
                d[name] = ev.EvalConfig.from_dict({**getattr(base, name).to_dict(), **d[name]})
        return cls(**d)


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    try:
        return RunConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config {path}: {exc}") from exc


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


# -- data access -----------------------------------------------------------


def _need(path: Path) -> Path:
    if not path.exists():
        raise DataError(f"missing input: {path}")
    return path


def load_split(data: Path, split: str, cfg: RunConfig) -> ev.LabeledDataset:
    images, grades = synthetic.load_labeled_images(_need(data / split / "labels.csv"), cfg.eval_size)
    try:
        return ev.LabeledDataset(images, grades, cfg.num_classes)
    except ValueError as exc:
        raise DataError(f"{data / split}: {exc}") from exc


def lesion_specs(data: Path, cfg: RunConfig, manifest: str | None = None) -> list[patches.PatchSpec]:
    if manifest:
        return patches.read_manifest(_need(Path(manifest)))
    recs = patches.read_detections(_need(data / "train" / "detections.jsonl"))
    return patches.build_patch_dataset(recs, cfg.threshold, cfg.seed, root=data / "train")


def whole_specs(data: Path) -> list[patches.PatchSpec]:
    return whole_image_specs([(p.stem, str(p)) for p, _ in synthetic.read_labels(_need(data / "train" / "labels.csv"))])


def run_pretrain(data: Path, cfg: RunConfig, mode: str, out: Path | None, deterministic: bool,
                 train_cfg: TrainConfig | None = None, manifest: str | None = None) -> tuple[Checkpoint, dict]:
    tc = train_cfg or cfg.train
    specs = lesion_specs(data, cfg, manifest)
    # the whole-image run gets exactly the lesion run's number of updates
    budget = tc.epochs * (len(specs) // tc.batch_size)
    store = ImageStore()
    if mode == "lesion":
        ck, tlog = pretrain(tc, specs, store, out_dir=out, deterministic_log=deterministic)
    else:
        whole = whole_specs(data)
        ck, tlog = pretrain(tc, whole, store, out_dir=out, anchor_lesion=False,
                            deterministic_log=deterministic, max_steps=budget)
    last = tlog.rows[-1] if tlog.rows else {}
    summary = {"mode": mode, "patches": len(specs), "steps": ck.step, "checkpoint_hash": ck.digest(),
               "final_mean_loss": last.get("mean_loss"), "final_contrastive_acc": last.get("contrastive_acc")}
    return ck, summary


def checkpoint_or_random(path: str | None, cfg: RunConfig) -> Checkpoint:
    if path is None:
        return ev.random_checkpoint(cfg.train.arch, cfg.seed)
    try:
        return load_checkpoint(_need(Path(path)), drop_head=True)
    except CheckpointError as exc:
        raise DataError(str(exc)) from exc


def evaluate(protocol: str, ck: Checkpoint, train: ev.LabeledDataset, test: ev.LabeledDataset,
             fraction: float, cfg: RunConfig) -> ev.EvalReport:
    sub = ev.sample_partial(train, fraction, cfg.seed)
    if protocol == "linear":
        return ev.linear_eval(ck, sub, test, cfg.linear, fraction)
    return ev.transfer_eval(ck, sub, test, cfg.transfer, fraction)


# -- commands --------------------------------------------------------------


def make_dataset(cfg: RunConfig, data: Path) -> dict:
    """One generated population; its last ``test_count`` samples form the test split."""
    samples = synthetic.generate(cfg.synth)
    n_train = cfg.synth.count - cfg.test_count
    out = {}
    for split, part in (("train", samples[:n_train]), ("test", samples[n_train:])):
        synthetic.export(part, data / split)
        grades = np.bincount([s.grade for s in part], minlength=cfg.num_classes)
        out[split] = {"images": len(part), "grade_counts": grades.tolist(),
                      "lesions": sum(len(s.lesions) for s in part)}
    out["max_lesion_fraction"] = max(synthetic.lesion_fraction(s) for s in samples)
    return out


def cmd_synth(args, cfg: RunConfig) -> dict:
    out = make_dataset(cfg, Path(args.out))
    print(f"{'split':>6} {'images':>7} {'lesions':>8}  grades")
    for split in ("train", "test"):
        r = out[split]
        print(f"{split:>6} {r['images']:>7d} {r['lesions']:>8d}  {r['grade_counts']}")
    return out


def cmd_extract(args, cfg: RunConfig) -> dict:
    recs = patches.read_detections(_need(Path(args.detections)))
    _, stats = patches.filter_by_confidence(recs, cfg.threshold)
    root = Path(args.root) if args.root else Path(args.detections).parent
    specs = patches.build_patch_dataset(recs, cfg.threshold, cfg.seed, root=root)
    manifest = Path(args.out) / "patches.jsonl"
    manifest.parent.mkdir(parents=True, exist_ok=True)
    patches.write_manifest(manifest, specs)
    print(f"{'threshold':>9} {'#images':>9} {'#lesions':>9}")
    print(stats.row())
    return {"threshold": stats.threshold, "num_images": stats.num_images, "num_lesions": stats.num_lesions,
            "manifest": str(manifest)}


def cmd_pretrain(args, cfg: RunConfig) -> dict:
    out = Path(args.out)
    _, summary = run_pretrain(Path(args.data), cfg, args.mode, out, args.single_thread, manifest=args.manifest)
    summary["checkpoint"] = str(out / "final.ckpt")
    print(f"{args.mode} pretraining: {summary['steps']} steps, final mean loss {summary['final_mean_loss']}")
    return summary


def _cmd_eval(protocol: str, args, cfg: RunConfig) -> dict:
    data = Path(args.data)
    train, test = load_split(data, "train", cfg), load_split(data, "test", cfg)
    ck = checkpoint_or_random(args.checkpoint, cfg)
    fractions = args.fraction or [1.0]
    reports = [evaluate(protocol, ck, train, test, f, cfg).to_json() for f in fractions]
    for r in reports:
        print(f"{protocol} fraction {r['fraction']:<5g} kappa {r['kappa']:.4f} accuracy {r['accuracy']:.4f}")
    return {"checkpoint": args.checkpoint or "random", "reports": reports}


def cmd_linear_eval(args, cfg):
    return _cmd_eval("linear", args, cfg)


def cmd_transfer_eval(args, cfg):
    return _cmd_eval("transfer", args, cfg)


def cmd_ablate(args, cfg: RunConfig) -> dict:
    data = Path(args.data)
    train, test = load_split(data, "train", cfg), load_split(data, "test", cfg)
    fraction = args.fraction[0] if args.fraction else cfg.ablate_fraction
    rows = []
    for ops in ABLATIONS:
        tc = replace(cfg.train, augment=cfg.train.augment.with_ops(set(ops)))
        ck, summary = run_pretrain(data, cfg, "lesion", None, args.single_thread, train_cfg=tc)
        rep = evaluate("linear", ck, train, test, fraction, cfg)
        rows.append({"ops": list(ops), "kappa": rep.kappa, "accuracy": rep.accuracy,
                     "final_mean_loss": summary["final_mean_loss"]})
        log.info("ablation %s: kappa %.4f", "+".join(ops), rep.kappa)
    print(f"{'composition':<45} {'kappa':>8}")
    for r in rows:
        print(f"{' + '.join(r['ops']):<45} {r['kappa']:>8.4f}")
    return {"fraction": fraction, "rows": rows}


def cmd_gradcheck(args, cfg: RunConfig) -> dict:
    checks = run_suite(cfg.seed)
    for c in checks:
        print(f"{c.name:<40} {c.size:>5d} entries  max rel error {c.max_rel_error:.3e}  {'ok' if c.passed else 'FAIL'}")
    worst = max(c.max_rel_error for c in checks)
    print(f"max relative error {worst:.3e} (tolerance {TOL:g})")
    report = {"tolerance": TOL, "max_rel_error": worst, "passed": all(c.passed for c in checks),
              "checks": [{"name": c.name, "size": c.size, "max_rel_error": c.max_rel_error} for c in checks]}
    if not report["passed"]:
        raise VerificationFailure(report)
    return report


class VerificationFailure(Exception):
    def __init__(self, report: dict):
        super().__init__("gradient check failed")
        self.report = report


def format_grid(grid: dict, fractions) -> str:
    head = f"{'method':<8} {'protocol':<9}" + "".join(f"{f'{100 * f:g}%':>9}" for f in fractions)
    lines = [head]
    for m, by_proto in grid.items():
        for p, by_frac in by_proto.items():
            cells = "".join(f"{by_frac[str(f)]:>9.4f}" if str(f) in by_frac else f"{'-':>9}" for f in fractions)
            lines.append(f"{m:<8} {p:<9}" + cells)
    return "\n".join(lines)


def run_compare(data: Path, cfg: RunConfig, cells=None, methods=METHODS, deterministic: bool = True,
                out: Path | None = None) -> dict:
    """Lesion-patch CL, whole-image CL at the same step budget, and an untrained encoder.

    ``cells`` lists the (protocol, fraction) pairs to evaluate; by default
    every protocol at every configured fraction.
    """
    if cells is None:
        cells = [(p, f) for p in PROTOCOLS for f in cfg.fractions]
    train, test = load_split(data, "train", cfg), load_split(data, "test", cfg)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    cks, pre = {}, {}
    for m in methods:
        if m == "random":
            cks[m] = ev.random_checkpoint(cfg.train.arch, cfg.seed)
            continue
        cks[m], pre[m] = run_pretrain(data, cfg, m, None, deterministic)
        if out is not None:
            save_checkpoint(out / f"{m}.ckpt", cks[m])
        log.info("%s pretraining done: %d steps", m, cks[m].step)
    protocols = [p for p in PROTOCOLS if any(c[0] == p for c in cells)]
    grid = {m: {p: {} for p in protocols} for m in methods}
    for p, f in cells:
        for m in methods:
            grid[m][p][str(f)] = evaluate(p, cks[m], train, test, f, cfg).kappa
            log.info("%s %s %g: %.4f", m, p, f, grid[m][p][str(f)])
    return {"pretraining": pre, "grid": grid, "fractions": sorted({f for _, f in cells})}


def cmd_compare(args, cfg: RunConfig) -> dict:
    fractions = tuple(args.fraction) if args.fraction else cfg.fractions
    protocols = tuple(args.protocol) if args.protocol else PROTOCOLS
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cells = [(p, f) for p in protocols for f in fractions]
    rep = run_compare(Path(args.data), cfg, cells, deterministic=args.single_thread, out=out)
    print(format_grid(rep["grid"], fractions))
    return rep


COMMANDS = {
    "synth": cmd_synth, "extract": cmd_extract, "pretrain": cmd_pretrain, "linear-eval": cmd_linear_eval,
    "transfer-eval": cmd_transfer_eval, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck, "compare": cmd_compare,
}


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults: desk scale)")
    common.add_argument("--seed", type=int, help="master seed; overrides the config")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--threshold", type=float, help="detector confidence threshold; overrides the config")
    common.add_argument("--fraction", type=float, action="append", help="labeled fraction (repeatable)")
    common.add_argument("--single-thread", action="store_true",
                        help="one BLAS thread and no wall-clock fields, for byte-identical outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = Parser(prog="lesioncl", description="Lesion-patch contrastive pretraining pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)
    sub.add_parser("synth", parents=[common], help="generate a synthetic train/test dataset under --out")
    s = sub.add_parser("extract", parents=[common], help="threshold detections into a patch manifest")
    s.add_argument("--detections", required=True)
    s.add_argument("--root", help="folder image paths are relative to (default: the detections file's)")
    s = sub.add_parser("pretrain", parents=[common], help="contrastive pretraining")
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=("lesion", "whole"), default="lesion")
    s.add_argument("--manifest", help="patch manifest from 'extract' (lesion mode)")
    for name in ("linear-eval", "transfer-eval"):
        s = sub.add_parser(name, parents=[common], help=f"{name.split('-')[0]} evaluation of a checkpoint")
        s.add_argument("--data", required=True)
        s.add_argument("--checkpoint", help="omit for a randomly initialised encoder")
    s = sub.add_parser("ablate", parents=[common], help="pretrain + linear eval for each augmentation composition")
    s.add_argument("--data", required=True)
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all gradients")
    s = sub.add_parser("compare", parents=[common], help="lesion vs whole-image vs random encoders")
    s.add_argument("--data", required=True)
    s.add_argument("--protocol", choices=PROTOCOLS, action="append")
    return p


@contextmanager
def _one_thread(enabled: bool):
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        cfg = cfg.with_seed(cfg.seed if args.seed is None else args.seed)
        if args.threshold is not None:
            cfg = replace(cfg, threshold=args.threshold)
        for f in args.fraction or ():
            if not 0.0 < f <= 1.0:
                raise UsageError(f"--fraction {f} outside (0, 1]")
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    name = args.command.replace("-", "_")
    t0 = time.perf_counter()
    code = EXIT_OK
    try:
        with _one_thread(args.single_thread):
            report = COMMANDS[args.command](args, cfg)
    except VerificationFailure as exc:
        report, code = exc.report, EXIT_VERIFY
        print(f"error: {exc}", file=sys.stderr)
    except (DataError, FileNotFoundError, CheckpointError, synthetic.SynthError, TrainingError, OSError,
            ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if not args.single_thread:
        report["elapsed_s"] = round(time.perf_counter() - t0, 3)
    write_json(out / f"{name}.json", report)
    write_json(out / "config.json", cfg.to_dict())
    return code


if __name__ == "__main__":
    sys.exit(main())
