"""Command-line entry point.

Subcommands: run (full arm over loopback), serve / client (distributed TCP
pieces), gradcheck, featuremap (distortion report), partition (dry-run
sizes). Exit codes: 0 success, 1 config error, 2 transport error, 3 numeric
error.
"""

import argparse
import json
import sys

import numpy as np

from . import data as D
from . import experiment as X
from . import nn
from . import split as S
from . import transport as TR
from .errors import (
    BuildError,
    ConfigError,
    DecodeError,
    DimensionError,
    NumericError,
    ProtocolError,
    TransportError,
    ValidationError,
)
from .tensor import Tensor

EXIT_CONFIG = 1
EXIT_TRANSPORT = 2
EXIT_NUMERIC = 3


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="splitfire",
        description="Split-learning flame classifier: experiment arms, "
        "distributed pieces, and diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (flat ExperimentConfig)")
        p.add_argument("--arm", choices=X.ARMS)
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--out", help="metrics output path")
        p.add_argument("--format", choices=("csv", "jsonl"))
        return p

    run = common(sub.add_parser("run", help="run one experiment arm end to end"))
    run.add_argument("--save-model", help="write the trained model checkpoint here")

    serve = common(sub.add_parser("serve", help="run the TCP server side of a split arm"))
    serve.add_argument("--listen", help="host:port to listen on")

    client = common(sub.add_parser("client", help="run one TCP client worker"))
    client.add_argument("--connect", help="host:port of the server")
    client.add_argument("--client-id", type=int, required=True)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every layer kind")
    gc.add_argument("--seed", type=int, default=13)

    fm = sub.add_parser("featuremap", help="feature-map distortion report")
    fm.add_argument("--model", required=True, help="model checkpoint (front or full)")
    fm.add_argument("--image", help="64x64 P5 PGM input; defaults to a synthetic flame")
    fm.add_argument("--seed", type=int, default=0)
    fm.add_argument("--out", required=True, help="output directory for report + PGMs")

    part = sub.add_parser("partition", help="dry-run partition sizes")
    part.add_argument("--samples", type=int, required=True)
    part.add_argument("--ratios", default="7:2:1", help="colon-separated ratios")
    part.add_argument("--seed", type=int, default=0)
    return parser


def _load_config(args, overrides=()):
    if getattr(args, "config", None):
        config = X.ExperimentConfig.from_file(args.config)
    else:
        config = X.ExperimentConfig()
    patch = {}
    for name in ("arm", "seed", "epochs", "out", "format", "listen", "connect") + tuple(overrides):
        value = getattr(args, name.replace("-", "_"), None)
        if value is not None:
            patch[name] = value
    if getattr(args, "save_model", None):
        patch["save_model"] = args.save_model
    if patch:
        config = X.ExperimentConfig.from_dict({**_config_dict(config), **patch})
    return config


def _config_dict(config):
    return {name: getattr(config, name) for name in config.__dataclass_fields__}


def _cmd_run(args):
    config = _load_config(args)
    records = X.run_arm(config)
    for r in records:
        print(
            f"{r.arm} seed={r.seed} epoch={r.epoch} "
            f"loss={r.train_loss:.6g} acc={r.test_accuracy:.6g}"
        )
    if config.out:
        print(f"metrics written to {config.out}")
    return 0


def _cmd_serve(args):
    config = _load_config(args)
    if config.arm == "central":
        raise ConfigError("serve needs a split arm; central has no clients")
    host, port = X.parse_hostport(config.listen)
    endpoint = TR.tcp_endpoint(host, port, config.n_clients)
    engine = X.SplitServerEngine(config)
    server = TR.Server(endpoint)
    print(f"listening on {host}:{server.port} for {config.n_clients} clients")
    sys.stdout.flush()
    try:
        TR.serve(endpoint, config.n_clients, engine, server=server)
    finally:
        server.close()
    if config.out:
        X.emit_metrics(engine.records, config.out, config.format)
        print(f"metrics written to {config.out}")
    return 0


def _cmd_client(args):
    config = _load_config(args)
    if config.arm == "central":
        raise ConfigError("client needs a split arm")
    if not 0 <= args.client_id < config.n_clients:
        raise ConfigError(f"client-id must be in 0..{config.n_clients - 1}")
    host, port = X.parse_hostport(config.connect)
    endpoint = TR.tcp_endpoint(host, port, config.n_clients)
    worker = X.SplitClientWorker(config, args.client_id)
    TR.connect(endpoint, args.client_id, worker)
    print(f"client {args.client_id} finished after epoch {worker.epoch}")
    return 0


def _cmd_gradcheck(args):
    results = nn.gradcheck_suite(seed=args.seed)
    worst = max(results.values())
    for name, err in results.items():
        status = "ok" if err < 1e-4 else "FAIL"
        print(f"{name:<12} max rel error {err:.3e}  {status}")
    if worst >= 1e-4:
        print(f"gradcheck FAILED: worst {worst:.3e} >= 1e-4")
        return EXIT_NUMERIC
    print(f"gradcheck passed: worst {worst:.3e}")
    return 0


def _cmd_featuremap(args):
    model = nn.load_model(args.model)
    if len(model.specs) > nn.SMALL_VGG_CUT_INDEX:
        front = S.cut_model(model, nn.SMALL_VGG_CUT_INDEX).front
    else:
        front = model
    if args.image:
        img = D.read_pgm(args.image)
        if img.shape != (64, 64):
            raise DimensionError(f"{args.image}: expected 64x64, got {img.shape}")
        image = Tensor(img[None, :, :])
    else:
        ds = D.synth_dataset(16, 0.5, args.seed)
        pos = int(np.flatnonzero(ds.labels == 1.0)[0])
        image, _ = ds.sample(pos)
    report = X.feature_map_report(front, image, args.out)
    print(json.dumps(
        {k: report[k] for k in ("mean_abs_correlation", "max_abs_correlation", "best_psnr_db")},
        indent=2, sort_keys=True,
    ))
    print(f"report and {len(report['channel_dumps'])} channel PGMs written to {args.out}")
    return 0


def _cmd_partition(args):
    try:
        ratios = tuple(float(r) for r in args.ratios.split(":"))
    except ValueError:
        raise ConfigError(f"bad ratios {args.ratios!r}; expected e.g. 7:2:1") from None
    plan = D.PartitionPlan(ratios, seed=args.seed)
    parts = D.partition(args.samples, plan)
    sizes = [len(p) for p in parts]
    print(f"{args.samples} samples at {args.ratios} -> sizes {sizes}")
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "serve": _cmd_serve,
    "client": _cmd_client,
    "gradcheck": _cmd_gradcheck,
    "featuremap": _cmd_featuremap,
    "partition": _cmd_partition,
}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ValidationError, BuildError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TransportError, ProtocolError, DecodeError) as e:
        print(f"transport error: {e}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (NumericError, DimensionError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
