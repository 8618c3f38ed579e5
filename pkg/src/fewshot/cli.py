"""Command-line entry point: ``fewshot {prepare,synth,train,eval,explain}``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from .data.dataset import MAX_PER_CLASS, FewShotDataset, scan_dataset, write_dataset
from .data.synth import nearest_centroid_accuracy, synth_generate
from .errors import CapabilityError, CheckpointError, DataError, TrainingError
from .explain import METHODS, explain_episode
from .numcore import NumcoreError
from .train import HEAD_DEFAULTS, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

log = logging.getLogger("fewshot")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

LOSS_FN = {
    "siamese": "TripletMarginLoss",
    "relation": "BCELoss",
    "matching": "CrossEntropyLoss",
    "proto": "CrossEntropyLoss",
    "hybrid": "CrossEntropyLoss",
}

CHECKPOINT_NAME = "checkpoint.fsl"
LOG_NAME = "train_log.jsonl"
CONFIG_NAME = "config.txt"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Flat key=value run description; unknown keys are rejected."""

    head: str = "hybrid"
    num_classes: int = 4
    num_support: int = 5
    num_query: int = 10
    feature_dim: int = 512
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    loss_fn: str = "CrossEntropyLoss"
    patience: int = 10
    max_epochs: int | None = 100
    max_episodes: int | None = None
    eval_interval: int = 20
    margin: float = 1.0
    batch_size: int = 32
    val_episodes: int = 40
    eval_episodes: int = 100
    augment: bool = False
    dataset_root: str = ""
    image_size: int = 64
    seed: int = 0
    output_dir: str = "runs"
    threads: int = 1

    @classmethod
    def for_head(cls, head: str) -> "RunConfig":
        if head not in HEAD_DEFAULTS:
            raise UsageError(f"unknown head {head!r}; expected one of {sorted(HEAD_DEFAULTS)}")
        tc = TrainConfig.for_head(head)
        return cls(
            head=head,
            num_classes=tc.n_way,
            num_support=tc.k_shot,
            num_query=tc.q_query,
            feature_dim=tc.feature_dim or 64,
            learning_rate=tc.lr,
            loss_fn=LOSS_FN[head],
            patience=tc.patience,
            max_epochs=tc.max_epochs,
            max_episodes=tc.max_episodes,
            eval_interval=tc.eval_interval,
            margin=tc.margin,
            batch_size=tc.batch_size,
            val_episodes=tc.val_episodes,
        )

    def validate(self) -> "RunConfig":
        if self.optimizer.lower() != "adam":
            raise UsageError(f"optimizer {self.optimizer!r} unsupported; only 'adam' is implemented")
        if self.loss_fn != LOSS_FN[self.head]:
            raise UsageError(f"loss_fn {self.loss_fn!r} does not match head {self.head!r} (uses {LOSS_FN[self.head]})")
        for k in ("num_classes", "num_support", "num_query", "feature_dim", "patience", "eval_interval",
                  "batch_size", "val_episodes", "eval_episodes", "image_size", "threads"):
            if getattr(self, k) < 1:
                raise UsageError(f"{k} must be >= 1")
        if self.num_classes < 2:
            raise UsageError("num_classes must be >= 2")
        if self.max_epochs is None and self.max_episodes is None:
            raise UsageError("set max_epochs or max_episodes")
        if self.learning_rate < 0:
            raise UsageError("learning_rate must be >= 0")
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            head=self.head,
            n_way=self.num_classes,
            k_shot=self.num_support,
            q_query=self.num_query,
            lr=self.learning_rate,
            max_episodes=self.max_episodes,
            max_epochs=self.max_epochs,
            eval_interval=self.eval_interval,
            patience=self.patience,
            margin=self.margin,
            batch_size=self.batch_size,
            seed=self.seed,
            feature_dim=self.feature_dim,
            image_size=self.image_size,
            val_episodes=self.val_episodes,
            augment=self.augment,
        )

    def to_text(self) -> str:
        lines = []
        for k, v in sorted(asdict(self).items()):
            lines.append(f"{k} = {_fmt(v)}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    if "None" in kind and raw.lower() in ("none", ""):
        return None
    try:
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
        if kind.startswith("bool"):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r} (expected {kind})") from None
    return raw


def parse_config_text(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key = value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise UsageError(f"config line {n}: unknown key {key!r}")
        out[key] = _coerce(key, val)
    return out


def build_run_config(path: str | None = None, head: str | None = None, overrides: dict | None = None,
                     env: dict | None = None) -> RunConfig:
    """Head defaults, then the config file, then environment, then CLI flags."""
    env = os.environ if env is None else env
    values = parse_config_text(Path(path).read_text()) if path else {}
    head = head or values.get("head") or "hybrid"
    cfg = asdict(RunConfig.for_head(head))
    cfg.update(values)
    cfg["head"] = head
    if "loss_fn" not in values:
        cfg["loss_fn"] = LOSS_FN[head]
    if env.get("FSL_OUTPUT_DIR"):
        cfg["output_dir"] = env["FSL_OUTPUT_DIR"]
    if env.get("FSL_THREADS"):
        cfg["threads"] = _coerce("threads", env["FSL_THREADS"])
    cfg.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**cfg).validate()


def _limit_threads(n: int):
    return threadpool_limits(limits=n)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_dataset(root: str, image_size: int) -> FewShotDataset:
    if not root:
        raise UsageError("no dataset given: pass --data or set dataset_root in the config")
    return scan_dataset(root, image_size)


def _check_compatible(manifest: dict, ds: FewShotDataset) -> None:
    model = manifest.get("model", {})
    if model.get("image_size") not in (None, ds.image_size):
        raise DataError(f"checkpoint expects {model['image_size']}px images, dataset decoded at {ds.image_size}px")
    classes = manifest.get("classes")
    if classes is not None and len(classes) != len(ds.classes):
        raise DataError(f"checkpoint was trained on {len(classes)} classes, dataset has {len(ds.classes)}")


def _train_config_from(manifest: dict, seed: int | None) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    tc = {k: v for k, v in manifest.get("train_config", {}).items() if k in known}
    if not tc:
        tc = {"head": manifest["model"]["head"]}
    if seed is not None:
        tc["seed"] = seed
    return TrainConfig(**tc)


# --- commands -------------------------------------------------------------

def cmd_prepare(args) -> int:
    ds = scan_dataset(args.root, args.image_size)
    counts = ds.counts()
    for split, per in counts.items():
        for cls, n in per.items():
            if n > MAX_PER_CLASS:
                log.warning("%s/%s has %d images, above the %d cap", split, cls, n, MAX_PER_CLASS)
    manifest = {
        "root": str(Path(args.root)),
        "image_size": ds.image_size,
        "classes": ds.classes,
        "counts": counts,
        "dataset_hash": ds.manifest_hash,
    }
    out = Path(args.out) if args.out else Path(args.root) / "manifest.json"
    _write_json(out, manifest)
    print(f"{len(ds.classes)} classes, {ds.count()} images; manifest written to {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    ds = synth_generate(args.classes, args.per_class, args.image_size, args.seed)
    root = write_dataset(ds, args.out)
    score = nearest_centroid_accuracy(ds)
    print(f"wrote {ds.count()} images ({len(ds.classes)} classes) to {root}")
    print(f"separability (nearest-centroid accuracy): {score:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_run_config(args.config, args.head, {
        "seed": args.seed, "output_dir": args.out, "max_episodes": args.episodes, "dataset_root": args.data,
    })
    if args.episodes is not None:
        cfg.max_epochs = None
    out = Path(cfg.output_dir)
    with _limit_threads(cfg.threads):
        ds = _load_dataset(cfg.dataset_root, cfg.image_size)
        tc = cfg.train_config()
        out.mkdir(parents=True, exist_ok=True)
        (out / CONFIG_NAME).write_text(cfg.to_text())
        model, result = train(tc, ds, log_path=out / LOG_NAME)
        ckpt = result.best
        ckpt.manifest["threads"] = cfg.threads
        save_checkpoint(ckpt, None, out / CHECKPOINT_NAME)
        report = evaluate(model, ds, "val", cfg.eval_episodes, tc)
    (out / "metrics_val.json").write_text(report.to_json())
    print(f"best val accuracy {result.best_val_accuracy:.4f}; checkpoint {out / CHECKPOINT_NAME}")
    _print_metrics(report)
    return EXIT_OK


def _print_metrics(report) -> None:
    print(f"accuracy {report.accuracy:.4f}  precision {report.precision:.4f}  "
          f"recall {report.recall:.4f}  f1 {report.f1:.4f}")


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = _load_dataset(args.data, ckpt.manifest["model"]["image_size"])
    _check_compatible(ckpt.manifest, ds)
    tc = _train_config_from(ckpt.manifest, args.seed)
    out = Path(args.out or os.environ.get("FSL_OUTPUT_DIR") or Path(args.checkpoint).parent)
    with _limit_threads(_env_threads()):
        report = evaluate(ckpt.build_model(), ds, args.split, args.episodes, tc)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"metrics_{args.split}.json").write_text(report.to_json())
    _print_metrics(report)
    return EXIT_OK


def _env_threads() -> int:
    raw = os.environ.get("FSL_THREADS")
    return _coerce("threads", raw) if raw else 1


def parse_methods(text: str) -> tuple[str, ...]:
    if text == "all":
        return METHODS
    methods = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise UsageError(f"unknown CAM method(s) {bad or [text]}; choose from {', '.join(METHODS)} or 'all'")
    return methods


def cmd_explain(args) -> int:
    methods = parse_methods(args.methods)
    ckpt = load_checkpoint(args.checkpoint)
    ds = _load_dataset(args.data, ckpt.manifest["model"]["image_size"])
    _check_compatible(ckpt.manifest, ds)
    tc = _train_config_from(ckpt.manifest, args.seed)
    out = Path(args.out or os.environ.get("FSL_OUTPUT_DIR") or "explanations")
    model = ckpt.build_model()
    with _limit_threads(_env_threads()):
        index = explain_episode(model, ds, out, methods, n_way=tc.n_way, k_shot=tc.k_shot,
                                q_query=args.queries, seed=tc.seed, split=args.split)
    print(f"wrote {len(index)} overlays to {out}")
    return EXIT_OK


# --- parser ---------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fewshot", description="Few-shot image classification toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="validate a dataset tree and write its manifest")
    s.add_argument("root")
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--out", help="manifest path (default <root>/manifest.json)")
    s.set_defaults(fn=cmd_prepare)

    s = sub.add_parser("synth", help="write a synthetic dataset in the standard layout")
    s.add_argument("--out", required=True)
    s.add_argument("--per-class", type=int, default=100)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train a model from a config file and/or head defaults")
    s.add_argument("--config")
    s.add_argument("--head", choices=sorted(HEAD_DEFAULTS))
    s.add_argument("--data", help="dataset root (overrides dataset_root)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="output directory (overrides output_dir)")
    s.add_argument("--episodes", type=int, help="training episode budget (replaces max_epochs)")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--episodes", type=int, default=100)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("explain", help="write CAM overlays for one test episode")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--methods", default="all", help="comma list of " + ", ".join(METHODS) + ", or 'all'")
    s.add_argument("--queries", type=int, default=2, help="query images per class")
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_explain)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"fewshot: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"fewshot: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, CapabilityError, NumcoreError, OSError) as exc:
        print(f"fewshot: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
