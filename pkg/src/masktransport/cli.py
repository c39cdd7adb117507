"""Command-line entry points: train / evaluate / manipulate / serve.

Every subcommand is a thin client over the library; nothing here owns model
state.  `serve` hands off to uvicorn with an app built by the service module.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch
import yaml

from .data import load_image, load_mask, make_synthetic_corpus, save_image, save_mask
from .evaluation import METRIC_KEYS, run_report
from .pipeline import load_model, manipulate
from .training import load_train_config, train_loop


def _parse_overrides(pairs) -> dict:
    overrides = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise SystemExit(f"bad --set {pair!r}: expected KEY=VALUE")
        overrides[key] = yaml.safe_load(value)
    return overrides


def cmd_train(args) -> int:
    cfg = load_train_config(args.config, overrides=_parse_overrides(args.set))
    if not cfg.manifest:
        raise SystemExit(
            f"{args.config}: config must set `manifest:` (dataset NDJSON path)")
    manifest = Path(args.config).parent / cfg.manifest

    def log(record: dict) -> None:
        if record["step"] % args.log_every == 0 or record["step"] + 1 == cfg.steps:
            print(f"step {record['step']:6d}  total {record['total']:.4f}",
                  flush=True)

    ckpt_path, _ = train_loop(cfg, manifest, resume=args.resume, log_cb=log)
    print(f"final checkpoint: {ckpt_path}")
    return 0


def cmd_evaluate(args) -> int:
    out_csv = out_json = None
    for out in args.out:
        suffix = Path(out).suffix.lower()
        if suffix == ".csv":
            out_csv = out
        elif suffix == ".json":
            out_json = out
        else:
            raise SystemExit(f"--out {out}: expected a .csv or .json path")
    report = run_report(args.manifest, out_csv=out_csv, out_json=out_json,
                        metrics=args.metrics)
    for key, value in report.aggregates["All"].items():
        print(f"{key:12s} {value:.6f}")
    for out in args.out:
        print(f"wrote {out}")
    return 0


def cmd_manipulate(args) -> int:
    bundle, _ = load_model(args.ckpt)
    exemplar = load_image(args.exemplar)
    resolution = exemplar.shape[-1]
    exemplar_mask = load_mask(args.exemplar_mask, resolution)
    edited_mask = load_mask(args.edited_mask, resolution)

    result = manipulate(bundle, exemplar, exemplar_mask, edited_mask,
                        diagnostics=args.diagnostics is not None)
    save_image(result["output_image"], args.out)
    print(f"wrote {args.out}")
    if result["binarized_input"]:
        print("note: edited mask was not binary; thresholded at 0.5",
              file=sys.stderr)
    if args.out_mask:
        save_mask(result["output_mask"], args.out_mask)
        print(f"wrote {args.out_mask}")

    if args.diagnostics is not None:
        diag_dir = Path(args.diagnostics)
        diag_dir.mkdir(parents=True, exist_ok=True)
        diag = result["diagnostics"]
        (diag_dir / "keypoints.json").write_text(json.dumps({
            "source": diag["source_keypoints"].tolist(),
            "driver": diag["driver_keypoints"].tolist(),
            "degenerate": diag["degenerate"].tolist(),
        }, indent=2))
        attention = diag["attention"]
        for i in range(attention.shape[0]):
            channel = attention[i]
            peak = channel.max().clamp(min=1e-8)
            save_image((channel / peak)[None], diag_dir / f"attention_{i:02d}.png")
        field = diag["fused_field"]
        preview = torch.stack([
            (field[..., 0] + 1.0) / 2.0,
            (field[..., 1] + 1.0) / 2.0,
            torch.full_like(field[..., 0], 0.5),
        ]).clamp(0, 1)
        save_image(preview, diag_dir / "fused_field.png")
        print(f"wrote diagnostics to {diag_dir}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    from .sessions import SessionStore

    store = SessionStore(path=args.store, ttl_seconds=args.ttl)
    app = create_app(args.ckpt, store=store, segmenter_url=args.segmenter,
                     ui_dir=args.ui, ttl_seconds=args.ttl)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def cmd_synth_data(args) -> int:
    manifest = make_synthetic_corpus(args.out, args.count,
                                     resolution=args.resolution, seed=args.seed)
    print(f"wrote {args.count} pairs; manifest: {manifest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="masktransport",
        description="exemplar-based image manipulation via mask transport",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the optimization loop")
    p_train.add_argument("--config", required=True,
                         help="YAML config; see TrainConfig for keys")
    p_train.add_argument("--resume", default=None,
                         help="checkpoint to continue from")
    p_train.add_argument("--set", action="append", metavar="KEY=VALUE",
                         help="override a (dotted) config key")
    p_train.add_argument("--log-every", type=int, default=50)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="score outputs listed in a manifest")
    p_eval.add_argument("--manifest", required=True,
                        help="NDJSON with output/exemplar/x_a/y_a paths")
    p_eval.add_argument("--out", action="append", required=True,
                        help="report path (.csv or .json); repeatable")
    p_eval.add_argument("--metrics", nargs="+", choices=METRIC_KEYS,
                        default=None, help="restrict to a metric subset")
    p_eval.set_defaults(func=cmd_evaluate)

    p_man = sub.add_parser("manipulate", help="apply one mask edit to an image")
    p_man.add_argument("--ckpt", required=True)
    p_man.add_argument("--exemplar", required=True, help="image to edit")
    p_man.add_argument("--exemplar-mask", required=True,
                       help="current region mask (single-channel PNG)")
    p_man.add_argument("--edited-mask", required=True,
                       help="target region mask (single-channel PNG)")
    p_man.add_argument("--out", required=True, help="output image path")
    p_man.add_argument("--out-mask", default=None,
                       help="also save the fused output mask here")
    p_man.add_argument("--diagnostics", default=None, metavar="DIR",
                       help="dump keypoints + attention + field previews")
    p_man.set_defaults(func=cmd_manipulate)

    p_serve = sub.add_parser("serve", help="run the HTTP editing service")
    p_serve.add_argument("--ckpt", required=True)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.add_argument("--ui", default=None, metavar="DIR",
                         help="static UI bundle to serve at /")
    p_serve.add_argument("--segmenter", default=None, metavar="URL",
                         help="external segmentation service for mask prompts")
    p_serve.add_argument("--store", default=None, metavar="PATH",
                         help="sqlite session db (default: in-memory)")
    p_serve.add_argument("--ttl", type=float, default=3600.0,
                         help="idle session lifetime in seconds")
    p_serve.set_defaults(func=cmd_serve)

    p_synth = sub.add_parser("synth-data",
                             help="generate a synthetic training corpus")
    p_synth.add_argument("--out", required=True, metavar="DIR")
    p_synth.add_argument("--count", type=int, default=20)
    p_synth.add_argument("--resolution", type=int, default=64)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.set_defaults(func=cmd_synth_data)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
