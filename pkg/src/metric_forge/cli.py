"""metric-forge command line: gen | train | eval | gradcheck | ablate | rerank.

Configuration is a flat TOML document of ``key = value`` pairs (see
``metric-forge --help`` for every key and its default). Precedence, lowest
first: built-in defaults, ``--config`` file, ``METRIC_FORGE_SEED``, ``--set``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import evalkit, gradcheck, synthdata
from .embedding import cross_distances
from .errors import ConfigInvalid, MetricForgeError, ParseError, TooFewClasses
from .evalkit import EvalSplit, RerankConfig, query_gallery_split
from .losses import LossConfig
from .model import load_checkpoint
from .synthdata import SynthSpec
from .trainer import TrainConfig, fit

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

SEED_ENV = "METRIC_FORGE_SEED"


@dataclass(frozen=True)
class Key:
    default: object
    help: str
    kind: type  # expected python type of the value
    optional: bool = False


KEYS = {
    # shared
    "seed": Key(0, "seed for data generation and training", int),
    # synthetic data
    "n_classes": Key(10, "identities to generate", int),
    "per_class": Key(50, "samples per identity", int),
    "dim": Key(16, "raw input dimension", int),
    "noise_sigma": Key(0.3, "per-coordinate std of the Gaussian noise", float),
    "n_cameras": Key(2, "cameras, assigned round-robin within each identity", int),
    "domain_rotation_seed": Key(None, "rotate prototypes by a seeded orthogonal matrix", int, True),
    "domain_offset": Key(None, "offset added to every sample (scalar or dim-vector)", float, True),
    "heldout_fraction": Key(0.2, "per-identity fraction written to the held-out file", float),
    # training
    "base_lr": Key(0.01, "peak learning rate", float),
    "warmup_epochs": Key(10, "linear warmup length", int),
    "total_epochs": Key(120, "training epochs", int),
    "momentum": Key(0.9, "SGD momentum", float),
    "weight_decay": Key(5e-4, "L2 weight decay (not applied to the BN scale)", float),
    "P": Key(8, "identities per batch (the default dataset has 10)", int),
    "K": Key(4, "samples per identity in a batch", int),
    "mode": Key("combined", "combined | lin_only | softmax_only", str),
    "feature_tap": Key("post_bn", "features fed to Lin and used for retrieval: post_bn | pre_bn", str),
    "hidden_sizes": Key([64], "encoder hidden layer widths", list),
    "embed_dim": Key(32, "embedding dimension D", int),
    "normalized_classifier": Key(False, "feed the unit-norm post-BN feature to the classifier", bool),
    # loss
    "r": Key(0.7, "positive hypersphere radius", float),
    "T": Key(1.0, "negative weighting temperature", float),
    "w": Key(0.4, "weight of Lin in the combined loss", float),
    "epsilon_ls": Key(0.1, "label smoothing", float),
    "detach_weights": Key(True, "treat negative weights as constants in backprop", bool),
    # evaluation
    "n_query_per_class": Key(0, "queries per identity (0: all-vs-all with self excluded)", int),
    "k1": Key(20, "re-ranking k1", int),
    "k2": Key(6, "re-ranking k2", int),
    "lambda": Key(0.3, "re-ranking blend weight of the original distance", float),
}


def _check_type(name, value):
    key = KEYS[name]
    if value is None and key.optional:
        return None
    if key.kind is float:
        if name == "domain_offset" and isinstance(value, list):
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
                raise ConfigInvalid(f"{name}: expected numbers")
            return tuple(float(v) for v in value)
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif key.kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif key.kind is list:
        if isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            return list(value)
    elif isinstance(value, key.kind):
        return value
    raise ConfigInvalid(f"{name}: expected {key.kind.__name__}, got {value!r}")


def _parse_scalar(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


class RunConfig:
    """Resolved configuration values keyed by :data:`KEYS`."""

    def __init__(self, values: dict | None = None):
        self.values = {k: v.default for k, v in KEYS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, name, value):
        if name not in KEYS:
            raise ConfigInvalid(f"unknown config key {name!r}")
        self.values[name] = _check_type(name, value)

    @classmethod
    def from_sources(cls, config_path=None, overrides=(), env=None) -> "RunConfig":
        cfg = cls()
        if config_path:
            try:
                with open(config_path, "rb") as fh:
                    doc = tomllib.load(fh)
            except OSError as exc:
                raise ConfigInvalid(f"cannot read config file: {exc}") from None
            except tomllib.TOMLDecodeError as exc:
                raise ConfigInvalid(f"config file is not valid TOML: {exc}") from None
            for k, v in doc.items():
                if isinstance(v, dict):
                    raise ConfigInvalid(f"{k!r}: config must be flat (no tables)")
                cfg.set(k, v)
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            try:
                cfg.set("seed", int(env[SEED_ENV]))
            except ValueError:
                raise ConfigInvalid(f"seed: {SEED_ENV} must be an integer") from None
        for item in overrides:
            if "=" not in item:
                raise ConfigInvalid(f"override {item!r} must look like key=value")
            k, v = item.split("=", 1)
            cfg.set(k.strip(), _parse_scalar(v.strip()))
        return cfg

    def __getitem__(self, name):
        return self.values[name]

    def synth_spec(self) -> SynthSpec:
        v = self.values
        try:
            return SynthSpec(v["n_classes"], v["per_class"], v["dim"], v["noise_sigma"], v["n_cameras"],
                             v["seed"], v["domain_rotation_seed"], v["domain_offset"])
        except ValueError as exc:
            raise ConfigInvalid(str(exc)) from None

    def loss_config(self) -> LossConfig:
        v = self.values
        return LossConfig(r=v["r"], T=v["T"], w=v["w"], epsilon_ls=v["epsilon_ls"],
                          detach_weights=v["detach_weights"])

    def train_config(self, **changes) -> TrainConfig:
        v = dict(self.values, **changes)
        return TrainConfig(base_lr=v["base_lr"], warmup_epochs=v["warmup_epochs"],
                           total_epochs=v["total_epochs"], momentum=v["momentum"],
                           weight_decay=v["weight_decay"], seed=v["seed"], loss=self.loss_config(),
                           P=v["P"], K=v["K"], mode=v["mode"], feature_tap=v["feature_tap"],
                           hidden_sizes=tuple(v["hidden_sizes"]), embed_dim=v["embed_dim"],
                           normalized_classifier=v["normalized_classifier"])

    def rerank_config(self) -> RerankConfig:
        return RerankConfig(k1=self["k1"], k2=self["k2"], lam=self["lambda"])


# ------------------------------------------------------------------ output

def _emit(rows: list, fmt: str, columns: list, out=None) -> None:
    out = sys.stdout if out is None else out
    if fmt == "jsonl":
        for row in rows:
            out.write(json.dumps(row, sort_keys=True) + "\n")
        return
    cells = [[_cell(row.get(c)) for c in columns] for row in rows]
    widths = [max(len(c), *(len(r[i]) for r in cells)) for i, c in enumerate(columns)]
    out.write("  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip() + "\n")
    out.write("  ".join("-" * w for w in widths) + "\n")
    for r in cells:
        out.write("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() + "\n")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _report_rows(report, label="baseline") -> list:
    rows = [dict(variant=label, **{k: v for k, v in report.as_dict().items() if k != "reranked"})]
    if report.reranked is not None:
        rows.append(dict(variant="reranked", **report.reranked.as_dict()))
    return rows


REPORT_COLUMNS = ["variant", "map", "rank1", "rank5", "rank10", "n_queries_used", "n_queries_skipped"]


# ------------------------------------------------------------------ commands

def cmd_gen(args, cfg: RunConfig) -> int:
    ds = synthdata.generate(cfg.synth_spec())
    if args.heldout:
        train, held = synthdata.train_heldout_split(ds, cfg["heldout_fraction"])
        synthdata.save(train, args.out)
        synthdata.save(held, args.heldout)
        print(f"wrote {len(train)} training rows to {args.out} and {len(held)} held-out rows to {args.heldout}")
    else:
        synthdata.save(ds, args.out)
        print(f"wrote {len(ds)} rows to {args.out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    ds = synthdata.load(args.data)
    try:
        _, log = fit(ds, cfg.train_config(), out_dir=args.out_dir)
    except TooFewClasses as exc:
        raise ConfigInvalid(f"P: {exc}") from None
    if log.records:
        _emit([log.records[0], log.records[-1]], args.format, ["epoch", "lr", "m_loss", "lp", "ln", "softmax_ls"])
    print(f"checkpoint and log written to {args.out_dir}", file=sys.stderr)
    return 0


def _load_split(args, cfg: RunConfig) -> EvalSplit:
    if args.data:
        return query_gallery_split(synthdata.load(args.data).to_batch(), cfg["n_query_per_class"])
    if args.query and args.gallery:
        return EvalSplit(synthdata.load(args.query).to_batch(), synthdata.load(args.gallery).to_batch())
    raise ConfigInvalid("data: pass --data, or both --query and --gallery")


def cmd_eval(args, cfg: RunConfig) -> int:
    params = load_checkpoint(args.checkpoint)
    split = _load_split(args, cfg)
    tap = cfg["feature_tap"]
    rerank = cfg.rerank_config() if args.rerank else None
    report = evalkit.evaluate(split, params, rerank, tap)
    if args.dump_dist or args.dump_joint:
        emb = evalkit.embed_split(split, params, tap)
        if args.dump_dist:
            evalkit.write_distance_matrix(args.dump_dist, cross_distances(emb.query.features, emb.gallery.features))
        if args.dump_joint:
            evalkit.write_distance_matrix(args.dump_joint, evalkit.joint_distances(emb))
    _emit(_report_rows(report), args.format, REPORT_COLUMNS)
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    seed = cfg["seed"] if args.seed is None else args.seed
    results = gradcheck.run_trials(seed, args.trials)
    worst = max(r.max_rel_error for _, r in results)
    checked = sum(r.n_checked for _, r in results)
    skipped = sum(r.n_skipped for _, r in results)
    ok = worst < gradcheck.TOLERANCE
    print(f"trials {args.trials}  coordinates {checked}  skipped {skipped}  "
          f"max relative error {worst:.3e}  tolerance {gradcheck.TOLERANCE:.0e}  {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


ABLATION_GRID = [
    ("lin_only", "pre_bn", "Lin_before"),
    ("lin_only", "post_bn", "Lin_after"),
    ("softmax_only", "pre_bn", "Softmax(LS)"),
    ("softmax_only", "post_bn", "Softmax_BN(LS)"),
    ("combined", "pre_bn", "M_loss_before"),
    ("combined", "post_bn", "M_loss_after"),
]


def run_ablation(train_ds, eval_split: EvalSplit, cfg: RunConfig, repeats: int = 1) -> list:
    """Train every (mode, feature tap) pair ``repeats`` times; mean mAP / rank-1 per pair."""
    rows = []
    for mode, tap, label in ABLATION_GRID:
        maps, r1s = [], []
        for k in range(repeats):
            params, _ = fit(train_ds, cfg.train_config(mode=mode, feature_tap=tap, seed=cfg["seed"] + k))
            rep = evalkit.evaluate(eval_split, params, None, tap)
            maps.append(rep.map)
            r1s.append(rep.rank1)
        rows.append({"loss": label, "mode": mode, "feature_tap": tap,
                     "r": None if mode == "softmax_only" else cfg["r"],
                     "T": None if mode == "softmax_only" else cfg["T"],
                     "map": float(np.mean(maps)), "rank1": float(np.mean(r1s)), "repeats": repeats})
    return rows


def cmd_ablate(args, cfg: RunConfig) -> int:
    train_ds = synthdata.load(args.data)
    split = query_gallery_split(synthdata.load(args.eval_data).to_batch(), cfg["n_query_per_class"])
    rows = run_ablation(train_ds, split, cfg, args.repeats)
    _emit(rows, args.format, ["loss", "mode", "feature_tap", "r", "T", "map", "rank1"])
    return 0


def cmd_rerank(args, cfg: RunConfig) -> int:
    joint = evalkit.read_distance_matrix(args.dist)
    reranked = evalkit.k_reciprocal_rerank(joint, args.num_query, cfg.rerank_config())
    evalkit.write_distance_matrix(args.out, reranked)
    if args.query and args.gallery:
        split = EvalSplit(synthdata.load(args.query).to_batch(), synthdata.load(args.gallery).to_batch())
        base = evalkit.evaluate_distances(split, joint[:args.num_query, args.num_query:])
        base.reranked = evalkit.evaluate_distances(split, reranked)
        _emit(_report_rows(base), args.format, REPORT_COLUMNS)
    else:
        print(f"wrote {reranked.shape[0]} x {reranked.shape[1]} re-ranked distances to {args.out}")
    return 0


def _keys_epilog() -> str:
    lines = ["config keys (flat TOML; override with --set key=value):"]
    for k, v in KEYS.items():
        lines.append(f"  {k:<22} default {v.default!r:<10} {v.help}")
    lines.append(f"\n{SEED_ENV} overrides the config-file seed; --set overrides both.")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat TOML config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--format", choices=["table", "jsonl"], default="table", help="metric output format")

    parser = argparse.ArgumentParser(prog="metric-forge", description=__doc__.splitlines()[0],
                                     epilog=_keys_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="dataset file (training part when --heldout is set)")
    p.add_argument("--heldout", help="also split per identity and write the held-out part here")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train a model; writes checkpoint + JSONL log")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="CMC / mAP of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset split into query/gallery by n_query_per_class")
    p.add_argument("--query")
    p.add_argument("--gallery")
    p.add_argument("--rerank", action="store_true", help="also report k-reciprocal re-ranked metrics")
    p.add_argument("--dump-dist", help="write the query x gallery distance matrix (binary)")
    p.add_argument("--dump-joint", help="write the joint (query+gallery) distance matrix (binary)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", parents=[common], help="{lin_only, softmax_only, combined} x {pre_bn, post_bn}")
    p.add_argument("--data", required=True, help="training dataset")
    p.add_argument("--eval-data", required=True, help="evaluation dataset")
    p.add_argument("--repeats", type=int, default=1, help="training seeds averaged per row")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("rerank", parents=[common], help="re-rank a dumped joint distance matrix")
    p.add_argument("--dist", required=True, help="joint distance dump from `eval --dump-joint`")
    p.add_argument("--num-query", type=int, required=True)
    p.add_argument("--out", required=True, help="re-ranked query x gallery distance dump")
    p.add_argument("--query", help="query dataset (labels) for metrics")
    p.add_argument("--gallery", help="gallery dataset (labels) for metrics")
    p.set_defaults(func=cmd_rerank)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.from_sources(args.config, args.set)
        return args.func(args, cfg)
    except (ConfigInvalid, ParseError) as exc:
        print(f"metric-forge: error: {exc}", file=sys.stderr)
        return 2
    except (MetricForgeError, ValueError, OSError) as exc:
        print(f"metric-forge: error: {exc}", file=sys.stderr)
        return 1


def dispatch(argv) -> int:
    try:
        return main(argv)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
