"""``pict`` command line: gen-data, train, eval, viz, sweep, ablate.

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import train as TR
from .config import RunConfig
from .datagen import DatasetManifest, make_dataset
from .errors import ConfigError, DataError, LoadError
from .viz import visualize

log = logging.getLogger("pict")


def _manifest(data: str, split: str) -> DatasetManifest:
    p = Path(data)
    return DatasetManifest.load(p if p.is_file() else p / split / "manifest.tsv")


def cmd_gen_data(args) -> None:
    cfg = RunConfig.load(args.config)
    out = make_dataset(cfg.data, args.out)
    for split, m in out.items():
        print(f"{split}: {len(m.entries)} images")


def cmd_train(args) -> None:
    cfg = RunConfig.load(args.config)
    train_m = _manifest(args.data, "train")
    out = Path(args.out)
    (out / "config.txt").parent.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    model, _ = TR.train(cfg, train_m, out, progress=lambda e: print(e.line(), flush=True))
    test_path = Path(args.data) / "test" / "manifest.tsv"
    if test_path.exists():
        csv = TR.evaluate_csv(model, DatasetManifest.load(test_path))
        (out / "metrics.csv").write_text(csv)
        sys.stdout.write(csv)


def cmd_eval(args) -> None:
    expected = RunConfig.load(args.config) if args.config else None
    model = TR.load_model(args.ckpt, expected)
    csv = TR.evaluate_csv(model, _manifest(args.data, args.split), args.task)
    if args.out:
        Path(args.out).write_text(csv)
    sys.stdout.write(csv)


def cmd_viz(args) -> None:
    model = TR.load_model(args.ckpt)
    for p in visualize(model, args.images, args.out):
        print(p)


def _values(text: str) -> list[str]:
    vals = [v.strip() for v in text.split(",") if v.strip()]
    if not vals:
        raise ConfigError("--values is empty")
    return vals


def cmd_sweep(args) -> None:
    cfg = RunConfig.load(args.config)
    try:
        csv = TR.sweep(cfg, args.param, _values(args.values), _manifest(args.data, "train"),
                       _manifest(args.data, "test"), args.out)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "sweep.csv").write_text(csv)
    sys.stdout.write(csv)


def cmd_ablate(args) -> None:
    cfg = RunConfig.load(args.config)
    results = TR.ablation(cfg, _manifest(args.data, "train"), _manifest(args.data, "test"), out_dir=args.out)
    lines = ["variant,metric,score,config_hash"]
    for name, metrics in results.items():
        h = cfg.replace(**TR.ABLATIONS[name]).hash
        lines += [f"{name},{k},{v:.6f},{h}" for k, v in metrics.items()]
    csv = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "ablation.csv").write_text(csv)
    sys.stdout.write(csv)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pict", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic pavement dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and evaluate it on the test split")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, printing metric CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset root or a manifest file")
    p.add_argument("--task", choices=["det", "rec"])
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--config", help="fail unless the checkpoint was trained with this config")
    p.add_argument("--out", help="also write the CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="token overlays and heatmaps for images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True, nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("sweep", help="train and evaluate once per value of k or delta-rel")
    p.add_argument("--config", required=True)
    p.add_argument("--param", required=True, choices=["k", "delta-rel"])
    p.add_argument("--values", required=True, help="comma separated")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="baseline / refiner / teacher / both")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, LoadError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
