"""Operator command line: train, compress, serve, run the edge daemon,
simulate scenarios, render reports, and emit heatmaps.

One binary with subcommands; every path is scriptable (``--json``) and
deterministic given ``--seed``. Exit codes: 0 on success, 2 on usage or
missing-input errors, 1 on runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np


def _env_int(name: str, fallback: int) -> int:
    return int(os.environ.get(name, fallback))


def _fmt(prog):
    return argparse.HelpFormatter(prog, width=96)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cxrelay",
        description="Offline-tolerant chest X-ray screening relay.",
        formatter_class=_fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", formatter_class=_fmt,
                       help="train a model on a scan store or the synthetic task")
    p.add_argument("--out", required=True, help="output artifact path (.cxrm)")
    p.add_argument("--data", help="scan store directory (labeled records)")
    p.add_argument("--synthetic", type=int, default=0,
                   help="train on N synthetic disc scans instead of --data")
    p.add_argument("--arch", choices=["reference", "compact"],
                   default="reference", help="model architecture")
    p.add_argument("--side", type=int, default=128, help="input side, pixels")
    p.add_argument("--val-fraction", type=float, default=0.2,
                   help="fraction held out for validation")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--learning-rate", type=float, default=0.001)
    p.add_argument("--optimizer", choices=["sgd", "adam"], default="adam")
    p.add_argument("--patience", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", help="artifact (.cxrm/.cxrc) to retrain from")
    p.add_argument("--report", help="write a JSON training report here")
    p.add_argument("--json", action="store_true", help="JSON to stdout")

    p = sub.add_parser("compress", formatter_class=_fmt,
                       help="prune+quantize+Huffman an artifact")
    p.add_argument("--artifact", required=True, help="input .cxrm")
    p.add_argument("--out", required=True, help="output .cxrc")
    p.add_argument("--sparsity", type=float, default=0.9)
    p.add_argument("--conv-bits", type=int, default=8)
    p.add_argument("--dense-bits", type=int, default=5)
    p.add_argument("--json", action="store_true", help="JSON to stdout")

    p = sub.add_parser("serve", formatter_class=_fmt,
                       help="run the central prediction/registry server")
    p.add_argument("--storage", default=os.environ.get("CXRELAY_STORAGE"),
                   help="server storage root (env CXRELAY_STORAGE)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=_env_int("CXRELAY_PORT", 7745),
                   help="TCP port (env CXRELAY_PORT)")
    p.add_argument("--arch", choices=["reference", "compact"],
                   default="reference")
    p.add_argument("--side", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("registry", formatter_class=_fmt,
                       help="operator actions on a server's model registry")
    p.add_argument("action", choices=["list", "publish", "rollback", "export"])
    p.add_argument("--storage", default=os.environ.get("CXRELAY_STORAGE"),
                   help="server storage root (env CXRELAY_STORAGE)")
    p.add_argument("--artifact", help="artifact to publish (.cxrm)")
    p.add_argument("--version", type=int, help="version to roll back to")
    p.add_argument("--dest", help="export destination directory")
    p.add_argument("--json", action="store_true", help="JSON to stdout")

    p = sub.add_parser("client", formatter_class=_fmt,
                       help="run the edge daemon with its local HTTP API")
    p.add_argument("--storage", required=True, help="client storage root")
    p.add_argument("--server", required=True, help="server address host:port")
    p.add_argument("--http-port", type=int,
                   default=_env_int("CXRELAY_HTTP_PORT", 7746),
                   help="local API port (env CXRELAY_HTTP_PORT)")
    p.add_argument("--static", help="directory of web UI files to serve")
    p.add_argument("--gamma", type=float, default=2.8)
    p.add_argument("--sync-interval", type=float, default=6 * 3600,
                   help="background cache-flush/update-check period, seconds")
    p.add_argument("--config", help="plain-text key=value config file")

    p = sub.add_parser("simulate", formatter_class=_fmt,
                       help="run a scripted link scenario / budget arithmetic")
    p.add_argument("--script", help="scenario script file")
    p.add_argument("--out", help="write the event log here")
    p.add_argument("--storage", help="working directory for the simulated pair")
    p.add_argument("--bandwidth", type=float, default=56.0,
                   help="link bandwidth, kbit/s")
    p.add_argument("--latency", type=float, default=10.0,
                   help="one-way latency, ms")
    p.add_argument("--scans-per-day", type=float, default=100.0)
    p.add_argument("--per-scan-kb", type=float, default=17.0)
    p.add_argument("--overhead-kb", type=float, default=1.0)
    p.add_argument("--updates-per-week", type=float, default=1.0)
    p.add_argument("--model-mb", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true", help="JSON to stdout")

    p = sub.add_parser("report", formatter_class=_fmt,
                       help="classification report + AUC from a predictions file")
    p.add_argument("--predictions", required=True,
                   help="CSV lines: label,score  (score = P(Pneumonia))")
    p.add_argument("--json", action="store_true", help="JSON to stdout")

    p = sub.add_parser("heatmap", formatter_class=_fmt,
                       help="occlusion heatmap overlay for one image")
    p.add_argument("--artifact", required=True, help="model .cxrm or .cxrc")
    p.add_argument("--image", required=True, help="input PGM")
    p.add_argument("--out", required=True, help="overlay PGM path")
    p.add_argument("--raw", help="also write the bare heatmap PGM here")
    p.add_argument("--target-class", type=int, default=1, choices=[0, 1])
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--stride", type=int, default=8)
    p.add_argument("--gamma", type=float, default=2.8,
                   help="preprocessing gamma when the image is not model-sized")

    return parser


def _load_artifact(path):
    from .compress import decompress_model, read_compressed
    from .nn import deserialize_artifact

    if path.endswith(".cxrc"):
        return decompress_model(read_compressed(path))
    with open(path, "rb") as fh:
        return deserialize_artifact(fh.read())


def _cmd_train(args) -> int:
    from .dataset import Label, ScanStore
    from .imaging import normalize
    from .nn import TrainConfig, build_artifact, reference_architecture, serialize_artifact, train
    from .nn.model import compact_architecture
    from .synthetic import make_disc_dataset

    if args.synthetic:
        x, y = make_disc_dataset(args.synthetic, seed=args.seed, side=args.side)
    elif args.data:
        store = ScanStore(args.data, target_side=args.side)
        records = [r for r in store.records() if r.label != Label.UNLABELED]
        if not records:
            print("no labeled records in the scan store", file=sys.stderr)
            return 2
        x = np.stack([normalize(r.image) for r in records]).astype(np.float32)
        y = np.array([int(r.label) for r in records], dtype=np.int64)
    else:
        print("one of --data or --synthetic is required", file=sys.stderr)
        return 2

    n_val = max(1, int(round(len(x) * args.val_fraction)))
    rng = np.random.default_rng(args.seed)
    order = rng.permutation(len(x))
    val_idx, train_idx = order[:n_val], order[n_val:]
    train_xy = (x[train_idx], y[train_idx])
    val_xy = (x[val_idx], y[val_idx])

    base_digest = None
    if args.resume:
        base = _load_artifact(args.resume)
        base_digest = base.digest
    else:
        layers = (reference_architecture() if args.arch == "reference"
                  else compact_architecture())
        base = build_artifact(layers, input_shape=(args.side, args.side, 1),
                              seed=args.seed)

    cfg = TrainConfig(batch_size=args.batch_size,
                      learning_rate=args.learning_rate, epochs=args.epochs,
                      optimizer=args.optimizer,
                      patience=min(args.patience, args.epochs), seed=args.seed)
    artifact, history = train(base, train_xy, val_xy, cfg)
    with open(args.out, "wb") as fh:
        fh.write(serialize_artifact(artifact))

    summary = {
        "artifact": args.out,
        "digest": artifact.digest,
        "version": artifact.version,
        "base_digest": base_digest,
        "val_metrics": artifact.val_metrics,
        "best_epoch": history.best_epoch,
        "stopped_epoch": history.stopped_epoch,
        "train_loss": history.train_loss,
        "val_loss": history.val_loss,
        "val_accuracy": history.val_accuracy,
    }
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=1)
    if args.json:
        print(json.dumps(summary))
    else:
        m = artifact.val_metrics
        print(f"trained {args.out} v{artifact.version} "
              f"(best epoch {history.best_epoch}, "
              f"val accuracy {m.get('accuracy', float('nan')):.3f})")
    return 0


def _cmd_compress(args) -> int:
    from .compress import CompressionConfig, compress_model, write_compressed

    artifact = _load_artifact(args.artifact)
    cfg = CompressionConfig(sparsity_target=args.sparsity,
                            conv_bits=args.conv_bits,
                            dense_bits=args.dense_bits)
    cm = compress_model(artifact, cfg)
    write_compressed(cm, args.out)
    summary = {
        "out": args.out,
        "original_bytes": cm.original_size,
        "compressed_bytes": cm.compressed_size,
        "ratio": cm.ratio,
        "original_digest": cm.original_digest,
        "restored_digest": cm.restored_digest,
    }
    if args.json:
        print(json.dumps(summary))
    else:
        print(f"compressed {cm.original_size} -> {cm.compressed_size} bytes "
              f"({cm.ratio:.1f}x) into {args.out}")
    return 0


def _cmd_serve(args) -> int:
    from .server import ServerCore, serve_tcp

    if not args.storage:
        print("--storage (or CXRELAY_STORAGE) is required", file=sys.stderr)
        return 2
    core = ServerCore(args.storage, arch=args.arch, seed=args.seed,
                      input_side=args.side)
    server = serve_tcp(core, args.host, args.port)
    entry = core.active_snapshot()[0]
    print(f"serving v{entry.version} ({entry.restored_digest[:12]}) "
          f"on {args.host}:{server.server_address[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


def _cmd_client(args) -> int:
    import threading

    from .client import EdgeClient, TcpTransport, parse_config, serve_api
    from .imaging import PreprocessConfig

    settings = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            settings = parse_config(fh.read())
    server_addr = settings.get("server", args.server)
    host, _, port = server_addr.partition(":")
    gamma = float(settings.get("gamma", args.gamma))
    storage = settings.get("storage", args.storage)
    sync_interval = float(settings.get("sync_interval_s", args.sync_interval))

    client = EdgeClient(storage, TcpTransport(host, int(port or 7745)),
                        preprocess_cfg=PreprocessConfig(gamma=gamma))
    client.provision()
    api = serve_api(client, port=int(settings.get("http_port",
                                                  args.http_port)),
                    static_dir=args.static or settings.get("static_dir"))

    stop = threading.Event()

    def background_sync():
        # periodic cache flush + digest check; also our reconnect probe
        while not stop.wait(sync_interval):
            try:
                client.sync_cycle()
            except Exception:
                pass    # offline cycles retry on the next tick

    threading.Thread(target=background_sync, daemon=True).start()
    print(f"edge daemon on http://127.0.0.1:{api.server_address[1]} "
          f"(model v{client.model_version}, sync every {sync_interval:.0f}s)")
    try:
        api.serve_forever()
    except KeyboardInterrupt:
        stop.set()
    return 0


def _cmd_registry(args) -> int:
    from .dataset import ScanStore, Section
    from .server import ModelRegistry, RegistryError

    if not args.storage:
        print("--storage (or CXRELAY_STORAGE) is required", file=sys.stderr)
        return 2
    registry = ModelRegistry(os.path.join(args.storage, "registry"))

    if args.action == "list":
        entries = [e.__dict__ for e in registry.entries()]
        if args.json:
            print(json.dumps(entries))
        else:
            for e in entries:
                print(f"v{e['version']}  {e['restored_digest'][:12]}  "
                      f"{e['compressed_size']} B compressed")
        return 0

    if args.action == "publish":
        if not args.artifact:
            print("--artifact is required for publish", file=sys.stderr)
            return 2
        entry = registry.publish(_load_artifact(args.artifact))
        print(f"published v{entry.version} ({entry.restored_digest[:12]})")
        return 0

    if args.action == "rollback":
        if args.version is None:
            print("--version is required for rollback", file=sys.stderr)
            return 2
        try:
            registry.activate(args.version)
        except RegistryError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(f"active version is now v{args.version}")
        return 0

    # export: emit the public-section dataset
    if not args.dest:
        print("--dest is required for export", file=sys.stderr)
        return 2
    store = ScanStore(os.path.join(args.storage, "data"))
    manifest = store.export(args.dest, Section.PUBLIC)
    count = len(open(manifest, encoding="utf-8").read().splitlines())
    print(f"exported {count} public records to {args.dest}")
    return 0


def _cmd_simulate(args) -> int:
    from .netsim import LinkProfile
    from .protocol import ledger_weekly_total
    from .simulate import SimWorld

    weekly = ledger_weekly_total(args.scans_per_day, args.per_scan_kb,
                                 args.overhead_kb, args.updates_per_week,
                                 args.model_mb)
    summary = {"weekly_total_kb": weekly}

    if args.script:
        if not args.storage:
            print("--storage is required with --script", file=sys.stderr)
            return 2
        with open(args.script, encoding="utf-8") as fh:
            script = fh.read()
        world = SimWorld(args.storage,
                         profile=LinkProfile(args.bandwidth, args.latency),
                         arch="compact", seed=args.seed)
        world.run(script)
        summary["events"] = len(world.log.lines)
        summary["ledger"] = world.client.ledger.totals()
        summary["ledger_matches_link"] = world.ledger_matches_link()
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(world.log.text())

    if args.json:
        print(json.dumps(summary))
    else:
        print(f"weekly total: {weekly:.0f} KB")
        if args.script:
            totals = summary["ledger"]
            print(f"scenario: {summary['events']} events, "
                  f"{totals['bytes_up']} B up, {totals['bytes_down']} B down")
    return 0


def _parse_predictions(path):
    labels, scores = [], []
    name_map = {"normal": 0, "pneumonia": 1}
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.lower().startswith("label"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) < 2:
                raise ValueError(f"bad predictions line: {raw!r}")
            label = name_map.get(parts[0].lower())
            labels.append(int(parts[0]) if label is None else label)
            scores.append(float(parts[-1]))
    return np.array(labels), np.array(scores)


def _cmd_report(args) -> int:
    from .metrics import confusion, render_report, report, report_dict, roc_auc

    labels, scores = _parse_predictions(args.predictions)
    preds = (scores >= 0.5).astype(int)
    rep = report(confusion(labels, preds))
    auc = roc_auc(scores, labels) if labels.min() != labels.max() else None
    if args.json:
        payload = report_dict(rep)
        payload["auc"] = auc
        print(json.dumps(payload))
    else:
        print(render_report(rep), end="")
        if auc is not None:
            print(f"AUC: {auc * 100:.2f}%")
    return 0


def _cmd_heatmap(args) -> int:
    from .imaging import PreprocessConfig, preprocess, read_pgm
    from .saliency import heatmap_to_pgm, occlusion_heatmap, overlay_pgm

    artifact = _load_artifact(args.artifact)
    image = read_pgm(args.image)
    side = artifact.input_shape[0]
    if (image.width, image.height) != (side, side):
        image = preprocess(image, PreprocessConfig(gamma=args.gamma,
                                                   target_side=side))
    hm = occlusion_heatmap(artifact, image, target_class=args.target_class,
                           patch=args.patch, stride=args.stride)
    with open(args.out, "wb") as fh:
        fh.write(overlay_pgm(hm, image))
    if args.raw:
        with open(args.raw, "wb") as fh:
            fh.write(heatmap_to_pgm(hm))
    flag = " (degenerate: model is insensitive)" if hm.degenerate else ""
    print(f"wrote {args.out}{flag}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "compress": _cmd_compress,
    "serve": _cmd_serve,
    "registry": _cmd_registry,
    "client": _cmd_client,
    "simulate": _cmd_simulate,
    "report": _cmd_report,
    "heatmap": _cmd_heatmap,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
