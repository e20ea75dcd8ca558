"""Command line: ``ewir {train,eval,count-macs,sweep,serve,proxy,send} --config FILE``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from .data import DatasetError, load_cifar, to_tensor

log = logging.getLogger("ewir")


def _cmd_train(cfg, args) -> int:
    result = ex.train(cfg)
    last = result["metrics"][-1] if result["metrics"] else {}
    print(f"trained stages {','.join(cfg.stages)}; final top1={last.get('top1')} top5={last.get('top5')}")
    return 0


def _cmd_eval(cfg, args) -> int:
    acc = ex.evaluate(cfg)
    out = Path(args.out) if args.out else cfg.out / "eval.csv"
    out.write_text(f"snr_db,top1,top5\n{cfg.channel.snr_db!r},{acc[1]!r},{acc[5]!r}\n")
    print(f"top1={acc[1]:.4f} top5={acc[5]:.4f}")
    return 0


def _cmd_count(cfg, args) -> int:
    report = ex.complexity(cfg)
    out = Path(args.out) if args.out else cfg.out / "macs.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv() + report.summary() + "\n")
    print(report.summary())
    return 0


def _cmd_sweep(cfg, args) -> int:
    if not args.axis or not args.values:
        print("sweep needs --axis and --values", file=sys.stderr)
        return 2
    values = [float(v) for v in args.values.split(",")]
    rows, skipped = ex.sweep(cfg, args.axis, values, with_eval=not args.no_eval)
    out = Path(args.out) if args.out else cfg.out / f"sweep_{args.axis}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(ex.sweep_csv(rows))
    for s in skipped:
        print(f"skipped {s}", file=sys.stderr)
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def _cmd_serve(cfg, args) -> int:
    from .link import ServerRuntime, make_server
    decoder, rest = ex.load_server(cfg, args.checkpoint or cfg.out / "server.ewck")
    server = make_server(cfg.server, ServerRuntime(decoder, rest))
    print(f"serving on {cfg.server[0]}:{cfg.server[1]}")
    with server:
        server.serve_forever()
    return 0


def _cmd_proxy(cfg, args) -> int:
    from .link import make_proxy
    proxy = make_proxy(cfg.proxy, cfg.server, cfg.channel)
    print(f"channel proxy {cfg.proxy[0]}:{cfg.proxy[1]} -> {cfg.server[0]}:{cfg.server[1]} "
          f"({cfg.channel.kind}, {cfg.channel.snr_db} dB)")
    with proxy:
        proxy.serve_forever()
    return 0


def load_image(path: str | Path) -> np.ndarray:
    from PIL import Image
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB").resize((32, 32)), dtype=np.uint8)
    return arr.transpose(2, 0, 1).copy()


def _cmd_send(cfg, args) -> int:
    from .link import DeviceRuntime, send_block
    if args.image:
        if not Path(args.image).is_file():
            print(f"error: image {args.image} not found", file=sys.stderr)
            return 1
        pixels = load_image(args.image)
    elif args.index is not None:
        _, test = load_cifar(cfg.data_root or None, cfg.variant, None)
        pixels = test.images[args.index]
    else:
        print("send needs --image or --index", file=sys.stderr)
        return 2
    if not (cfg.mean and cfg.std):
        print("error: config needs data.mean and data.std (see the training manifest.cfg)", file=sys.stderr)
        return 2
    front, encoder = ex.load_device(cfg, args.checkpoint or cfg.out / "device.ewck")
    block = DeviceRuntime(front, encoder, cfg.power).symbols(to_tensor(pixels[None], cfg.mean, cfg.std))
    address = ex._address(args.address) if args.address else cfg.proxy
    try:
        kind, payload = send_block(address, block, timeout=args.timeout)
    except OSError as exc:
        print(f"error: cannot reach {address[0]}:{address[1]}: {exc}", file=sys.stderr)
        return 1
    if kind == "error":
        print(f"server error reason {payload}", file=sys.stderr)
        return 1
    for rank, (cls, prob) in enumerate(payload, 1):
        print(f"{rank}. class {cls}  p={prob:.4f}")
    return 0


COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "count-macs": _cmd_count, "sweep": _cmd_sweep,
            "serve": _cmd_serve, "proxy": _cmd_proxy, "send": _cmd_send}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="ewir", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="experiment config file (key = value lines)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key")
    parser.add_argument("--out", help="output file for eval/count-macs/sweep")
    parser.add_argument("--axis", choices=("snr", "bandwidth", "split"))
    parser.add_argument("--values", help="comma-separated sweep values")
    parser.add_argument("--no-eval", action="store_true", help="sweep complexity columns only")
    parser.add_argument("--checkpoint", help="device/server checkpoint for send/serve")
    parser.add_argument("--image", help="image file for send")
    parser.add_argument("--index", type=int, help="test-set index for send")
    parser.add_argument("--address", help="host:port for send (default: link.proxy)")
    parser.add_argument("--timeout", type=float, default=30.0)
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    overrides = {}
    for item in args.set:
        key, _, value = item.partition("=")
        overrides[key.strip().replace(".", "__")] = value.strip()
    try:
        cfg = ex.load_config(args.config, **overrides)
    except ex.ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    except FileNotFoundError:
        print(f"error: config {args.config} not found", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg, args)
    except (DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
