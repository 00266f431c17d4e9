"""Command-line surface: gen-data, train, translate, evaluate.

Exit codes: 0 success, 1 usage error, 2 I/O failure, 3 non-finite loss abort.
Every command writes a run manifest (config snapshot, seed, dataset hash,
artifact paths) and prints its path on success.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import LOSS_NAMES, Config, Rng
from .metrics import (diversity_score, inception_proxy, merge_stats,
                      pq_stats, report_from_stats, train_proxy_classifier)
from .synthdata import DatasetError, generate_dataset, read_dataset, write_dataset
from .trainer import NumericError, fit, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


def _dataset_hash(data_dir: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(data_dir.glob("*")):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _write_manifest(out_dir: Path, cfg: Config, seed: int, artifacts: list[str],
                    dataset_hash: str | None = None) -> Path:
    manifest = {
        "tool_version": __version__,
        "seed": seed,
        "config": cfg.to_text(),
        "dataset_hash": dataset_hash,
        "artifacts": sorted(artifacts),
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    print(str(path))
    return path


def _load_config(path: str | None, seed: int | None = None) -> Config:
    cfg = Config.from_text(Path(path).read_text()) if path else Config()
    if seed is not None:
        from dataclasses import replace
        cfg = replace(cfg, seed=seed)
    cfg.validate()
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config, args.seed)
    out = Path(args.out)
    try:
        samples = generate_dataset(args.n, cfg, seed=cfg.seed)
        write_dataset(out, samples)
        files = [p.name for p in sorted(out.glob("0*"))]
        _write_manifest(out, cfg, cfg.seed, files, dataset_hash=_dataset_hash(out))
    except OSError as e:
        print(f"gen-data: I/O failure: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed)
    for name in args.disable_loss or ():
        if name not in LOSS_NAMES:
            print(f"train: unknown loss name {name!r}; valid: {', '.join(LOSS_NAMES)}",
                  file=sys.stderr)
            return EXIT_USAGE
        cfg = cfg.disable(name)
    if args.iterations is not None:
        from dataclasses import replace
        cfg = replace(cfg, iterations=args.iterations)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        state = fit(cfg, args.data, out)
        save_checkpoint(state, out / "checkpoints" / "final.ckpt")
        artifacts = ["losses.csv", "paired_l1.csv", "checkpoints/final.ckpt"]
        _write_manifest(out, cfg, cfg.seed, artifacts,
                        dataset_hash=_dataset_hash(Path(args.data)))
    except NumericError as e:
        print(f"train: aborted: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetError) as e:
        print(f"train: I/O failure: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def _panoptic_overlay(sample, cfg: Config) -> np.ndarray:
    """Source image blended with per-object colors plus bbox outlines."""
    base = (sample.a + 1.0) / 2.0
    rng = np.random.Generator(np.random.Philox(key=np.array([np.uint64(7), np.uint64(0)])))
    colors = rng.uniform(0.1, 0.9, size=(len(sample.pmap.objects), 3))
    out = base.copy()
    for i, obj in enumerate(sample.pmap.objects):
        out[obj.mask] = 0.5 * base[obj.mask] + 0.5 * colors[i]
        x0, y0, x1, y1 = obj.bbox
        out[y0, x0:x1] = colors[i]
        out[y1 - 1, x0:x1] = colors[i]
        out[y0:y1, x0] = colors[i]
        out[y0:y1, x1 - 1] = colors[i]
    return (out * 2.0 - 1.0).astype(np.float32)


def cmd_translate(args) -> int:
    from .trainer import _save_png
    try:
        state = load_checkpoint(args.ckpt)
        samples = read_dataset(args.data)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rng = Rng(state.cfg.seed)
        artifacts = []
        for i, smp in enumerate(samples):
            for k in range(args.styles):
                img = state.translate_sample(
                    smp, args.direction, rng.stream("translate", args.direction, i, k))
                name = f"{i:06d}_{args.direction}_{k}.png"
                _save_png(img, out / name)
                artifacts.append(name)
            overlay = f"{i:06d}_panoptic.png"
            _save_png(_panoptic_overlay(smp, state.cfg), out / overlay)
            artifacts.append(overlay)
        _write_manifest(out, state.cfg, state.cfg.seed, artifacts,
                        dataset_hash=_dataset_hash(Path(args.data)))
    except (OSError, DatasetError) as e:
        print(f"translate: I/O failure: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def evaluation_report(state, samples, n_eval: int | None = None,
                      n_styles: int = 2) -> dict:
    """Metrics JSON payload: PQ (ground-truth oracle path at desk scale),
    proxy inception score of translations, proxy diversity over style pairs."""
    cfg = state.cfg
    rng = Rng(cfg.seed)
    use = samples[:n_eval] if n_eval else samples
    stats: dict = {}
    for smp in use:
        merge_stats(stats, pq_stats(smp.pmap, smp.pmap))
    pq = report_from_stats(stats)

    translations = []
    pairs = []
    for i, smp in enumerate(use):
        outs = [state.translate_sample(smp, "t2c", rng.stream("eval", i, k))
                for k in range(n_styles)]
        translations.extend(outs)
        if len(outs) >= 2:
            pairs.append((outs[0], outs[1]))
    clf = train_proxy_classifier(samples, seed=cfg.seed)
    report = {
        "pq": {k: round(v, 10) for k, v in pq.as_dict().items()},
        "inception_proxy": round(inception_proxy(translations, clf), 10),
        "diversity_proxy": round(diversity_score(pairs, state.phi), 10),
        "n_samples": len(use),
        "config_hash": cfg.config_hash(),
    }
    return report


def cmd_evaluate(args) -> int:
    try:
        state = load_checkpoint(args.ckpt)
        samples = read_dataset(args.data)
        report = evaluation_report(state, samples, n_eval=args.n)
        report_path = Path(args.report)
        report_path.parent.mkdir(parents=True, exist_ok=True)
        with open(report_path, "w") as f:
            json.dump(report, f, indent=1, sort_keys=True)
        _write_manifest(report_path.parent, state.cfg, state.cfg.seed,
                        [report_path.name], dataset_hash=_dataset_hash(Path(args.data)))
    except (OSError, DatasetError) as e:
        print(f"evaluate: I/O failure: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="posagan",
                                description="Panoptic object style-align translation")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--config", default=None)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a generated dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--iterations", type=int, default=None)
    t.add_argument("--disable-loss", action="append", metavar="NAME",
                   help=f"drop one objective term ({', '.join(LOSS_NAMES)})")
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("translate", help="translate dataset images with a checkpoint")
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--direction", choices=("t2c", "c2t"), required=True)
    tr.add_argument("--styles", type=int, default=1)
    tr.set_defaults(func=cmd_translate)

    e = sub.add_parser("evaluate", help="emit the metrics JSON report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--n", type=int, default=None, help="evaluate on the first N samples")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except ValueError as e:
        print(f"{args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
