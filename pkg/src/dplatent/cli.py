"""Command line interface: one subcommand per stage plus ``run``, ``verify`` and ``budget``.

Stage subcommands read their section of a config file (``--config``, a YAML
path or ``toy``) and accept ``--set key=value`` overrides. Errors exit with the
code attached to their exception class.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys

import yaml

from .dp import max_steps_for_budget, noise_for_budget, rdp_to_dp
from .dp.rdp import DEFAULT_ORDERS, AccountantState
from .errors import DplatentError, InvalidArgument
from .evaluation import ClassifierConfig
from .gan import GanConfig
from .inversion import InversionConfig
from .latent_gan import DpGanConfig
from .manifest import verify_manifest_chain
from . import pipeline


def _overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise InvalidArgument(f"override {pair!r} is not key=value")
        out[key.strip()] = yaml.safe_load(value)
    return out


def _section(args, name: str) -> dict:
    values = {}
    if args.config:
        values = dict(pipeline.load_config(args.config).get(name) or {})
    values.update(_overrides(args.set))
    return values


def _dp_values(values: dict) -> dict:
    if values.get("epsilon_budget") in ("inf", "infinity", ".inf"):
        values["epsilon_budget"] = math.inf
    return values


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def cmd_partition(args):
    classes = None
    if args.public_classes:
        classes = [int(c) if c.isdigit() else c for c in args.public_classes.split(",")]
    m = pipeline.stage_partition(args.dataset, args.out, classes, args.preset,
                                 args.label_fraction, args.seed, args.stratified)
    _emit({"id": m.id, "stats": m.stats})


def cmd_train_public(args):
    cfg = pipeline._dataclass_from(GanConfig, _section(args, "public_gan"))
    m = pipeline.stage_train_public(args.split, args.out, cfg)
    _emit({"id": m.id, "stats": m.stats})


def cmd_invert(args):
    values = _section(args, "inversion")
    method = args.method or values.pop("method", "gomi")
    values.pop("method", None)
    cfg = pipeline._dataclass_from(InversionConfig, values)
    m = pipeline.stage_invert(args.public, args.split, args.out, method, cfg)
    _emit({"id": m.id, "stats": m.stats})


def cmd_train_dp(args):
    values = _section(args, "dp_gan")
    flags = {"epsilon_budget": args.epsilon, "delta": args.delta, "noise_multiplier": args.sigma,
             "clip_norm": args.clip}
    values.update({k: v for k, v in flags.items() if v is not None})
    cfg = pipeline._dataclass_from(DpGanConfig, _dp_values(values))
    m = pipeline.stage_train_dp(args.latents, args.out, cfg)
    _emit({"id": m.id, "privacy": {k: v for k, v in m.privacy.items() if k != "accountant"}})


def cmd_synthesize(args):
    m = pipeline.stage_synthesize(args.dp, args.public, args.out, args.n, args.seed, args.quantize)
    _emit({"id": m.id, "outputs": m.outputs})


def cmd_evaluate(args):
    cfg = pipeline._dataclass_from(ClassifierConfig, _section(args, "classifier"))
    _, report = pipeline.stage_evaluate(args.synthetic, args.split, args.out, cfg, args.backbone)
    _emit(report)


def cmd_run(args):
    cfg = pipeline.load_config(args.config)
    for key, value in _overrides(args.set).items():
        node = cfg
        *path, leaf = key.split(".")
        for part in path:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise InvalidArgument(f"override {key!r} does not address a config section")
        node[leaf] = value
    report = pipeline.run_pipeline(cfg, args.run_dir)
    report.pop("access", None)
    _emit(report)


def cmd_verify(args):
    violations = verify_manifest_chain(args.run_dir)
    for v in violations:
        print(v)
    if violations:
        return 1
    print("ok")
    return 0


def cmd_budget(args):
    if args.q is not None:
        q = args.q
    elif args.batch_size and args.n:
        q = min(1.0, args.batch_size / args.n)
    else:
        raise InvalidArgument("give --q, or --batch-size and --n")
    out = {"q": q, "delta": args.delta}
    if args.steps is not None and args.sigma is not None:
        state = AccountantState(tuple(DEFAULT_ORDERS), ((q, args.sigma, args.steps),))
        out.update(sigma=args.sigma, steps=args.steps, epsilon=rdp_to_dp(state, args.delta))
    elif args.epsilon is not None and args.sigma is not None:
        out.update(sigma=args.sigma, epsilon=args.epsilon,
                   max_steps=max_steps_for_budget(args.epsilon, args.delta, q, args.sigma))
    elif args.epsilon is not None and args.steps is not None:
        out.update(steps=args.steps, epsilon=args.epsilon,
                   sigma=noise_for_budget(args.epsilon, args.delta, q, args.steps))
    else:
        raise InvalidArgument("give two of --epsilon, --sigma, --steps")
    _emit(out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dplatent", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def staged(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML config file or 'toy'")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.set_defaults(fn=fn)
        return p

    p = sub.add_parser("partition", help="split a dataset into D_l, D_p, D_s")
    p.add_argument("--dataset", required=True, help="'toy', 'toy:k=v,...' or an .npz file")
    p.add_argument("--out", required=True)
    p.add_argument("--public-classes", help="comma separated class names or ids")
    p.add_argument("--preset", choices=sorted(pipeline.PRESETS))
    p.add_argument("--label-fraction", type=float, default=1 / 3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stratified", action="store_true")
    p.set_defaults(fn=cmd_partition)

    p = staged("train-public", cmd_train_public, "train the public GAN on D_p")
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)

    p = staged("invert", cmd_invert, "invert D_s into latent vectors")
    p.add_argument("--public", "--ckpt", dest="public", required=True, help="train-public stage directory")
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=["gomi", "mi"])

    p = staged("train-dp", cmd_train_dp, "train the DP latent GAN")
    p.add_argument("--latents", required=True, help="invert stage directory")
    p.add_argument("--out", required=True)
    p.add_argument("--epsilon", type=float, help="epsilon budget (inf with --sigma 0 for debug runs)")
    p.add_argument("--delta", type=float)
    p.add_argument("--sigma", type=float, help="noise multiplier")
    p.add_argument("--clip", type=float, help="per-sample clip norm")

    p = sub.add_parser("synthesize", help="sample synthetic images")
    p.add_argument("--dp", "--dp-ckpt", dest="dp", required=True, help="train-dp stage directory")
    p.add_argument("--public", "--public-ckpt", dest="public", required=True, help="train-public stage directory")
    p.add_argument("--out", required=True)
    p.add_argument("-n", "--n", dest="n", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quantize", action="store_true", help="store 8-bit images")
    p.set_defaults(fn=cmd_synthesize)

    p = staged("evaluate", cmd_evaluate, "score a synthetic release")
    p.add_argument("--synthetic", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True, help="directory for report.json and the manifest")
    p.add_argument("--backbone", help="saved backbone module; default trains one on D_l")

    p = sub.add_parser("run", help="run every stage from one config")
    p.add_argument("--config", default="toy", help="YAML config file or 'toy'")
    p.add_argument("--run-dir", help=f"defaults to ${pipeline.CACHE_ENV}/runs/<config hash>")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("verify", help="check a run directory's manifest chain")
    p.add_argument("run_dir")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("budget", help="privacy budget calculator (two of epsilon, sigma, steps)")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--sigma", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--q", type=float, help="sampling rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--n", type=int, help="dataset size")
    p.set_defaults(fn=cmd_budget)
    return parser


VERIFY_FAILED = 12


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = args.fn(args)
    except DplatentError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    if rc:
        return VERIFY_FAILED
    return 0


if __name__ == "__main__":
    sys.exit(main())
