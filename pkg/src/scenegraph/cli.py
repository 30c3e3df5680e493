"""``scenegraph`` command line: gen, train, eval, gradcheck, attention.

Settings live in one flat dictionary with dotted keys (``gen.O``,
``train.lr``, ``eval.mode``, ...). A JSON config file may set any of them;
``--set key=value`` and the dedicated flags override the file. The
effective configuration is printed before every command runs.

Exit codes: 0 ok, 1 validation or configuration error, 2 numerical failure
(divergence, failed gradient check), 3 file I/O error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

DEFAULTS = {
    "seed": 1,
    "workdir": "run",
    "threads": 1,
    "gen.O": 6,
    "gen.R": 5,
    "gen.d": 32,
    "gen.d_u": 32,
    "gen.n_images": 300,
    "gen.min_nodes": 3,
    "gen.max_nodes": 5,
    "gen.noise_sigma": 0.0,
    "gen.tail_exponent": 1.0,
    "gen.fg_fraction": 0.5,
    "split.train_fraction": 0.7,
    "model.f": 64,
    "train.lr": 1e-3,
    "train.momentum": 0.9,
    "train.batch_size": 6,
    "train.epochs": 50,
    "train.bg_fg_ratio": 3.0,
    "train.mu": 4.0,
    "train.clip_norm": 10.0,
    "train.bias": "arm",
    "eval.mode": "predcls",
    "eval.ks": [20, 50, 100],
    "eval.k_per_pair": None,
    "eval.graph_constraint": True,
    "eval.split": "test",
    "gradcheck.seeds": 10,
    "gradcheck.d": 16,
    "gradcheck.n": 4,
    "gradcheck.tolerance": 1e-5,
    "gradcheck.flip": None,
}

FILES = {
    "corpus": "corpus.jsonl",
    "features": "features.jsonl",
    "vocab": "vocab.json",
    "meta": "meta.json",
    "weights": "weights.json",
    "loss": "loss.csv",
    "report_json": "report.json",
    "report_text": "report.txt",
}


class ConfigParseError(ValueError):
    pass


def _coerce(key: str, raw):
    """Convert a command-line string to the type of the key's default."""
    if key not in DEFAULTS:
        raise ConfigParseError(f"unknown config key {key!r}")
    if not isinstance(raw, str):
        return raw
    ref = DEFAULTS[key]
    if raw.lower() in ("none", "null"):
        return None
    if isinstance(ref, bool) or key == "eval.graph_constraint":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigParseError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(ref, list):
            return [int(v) for v in raw.split(",") if v.strip()]
        if isinstance(ref, int) or key in ("eval.k_per_pair",):
            return int(raw)
        if isinstance(ref, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigParseError(f"{key}: cannot parse {raw!r}") from exc
    return raw


def load_config(path=None, overrides=()) -> dict:
    cfg = dict(DEFAULTS)
    if path:
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigParseError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigParseError(f"{path}: expected a JSON object of dotted keys")
        for k, v in data.items():
            cfg[k] = _coerce(k, v)
    for item in overrides:
        if "=" not in item:
            raise ConfigParseError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        cfg[k.strip()] = _coerce(k.strip(), v.strip())
    return cfg


def _path(cfg, name):
    return os.path.join(cfg["workdir"], FILES[name])


def gen_config(cfg):
    from .synthetic import GenConfig
    return GenConfig(**{k[4:]: cfg[k] for k in cfg if k.startswith("gen.")}, seed=cfg["seed"])


def train_config(cfg):
    from .trainer import TrainConfig
    return TrainConfig(**{k[6:]: cfg[k] for k in cfg if k.startswith("train.")}, seed=cfg["seed"])


def _load_corpus(cfg):
    """Graphs and features in corpus order; missing files raise OSError."""
    from .graph import read_jsonl
    from .synthetic import read_features
    from .errors import DataError
    O, R = cfg["gen.O"], cfg["gen.R"]
    graphs = read_jsonl(_path(cfg, "corpus"), O, R)
    feats = read_features(_path(cfg, "features"))
    try:
        features = [feats[g.image_id] for g in graphs]
    except KeyError as exc:
        raise DataError(f"no features for image {exc.args[0]}") from exc
    return graphs, features


def _split(cfg, graphs, features):
    from .synthetic import split_indices
    tr, te = split_indices(len(graphs), cfg["split.train_fraction"], cfg["seed"])
    pick = lambda idx: ([graphs[i] for i in idx], [features[i] for i in idx])
    return pick(tr), pick(te)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen(cfg, out=sys.stdout) -> int:
    from .graph import write_jsonl, write_vocab
    from .synthetic import gen_corpus, predicate_histogram, write_features, write_meta
    gc = gen_config(cfg)
    corpus = gen_corpus(gc)
    os.makedirs(cfg["workdir"], exist_ok=True)
    write_jsonl(_path(cfg, "corpus"), corpus.graphs)
    write_features(_path(cfg, "features"), corpus)
    write_vocab(_path(cfg, "vocab"), ["__background__"] + [f"obj{c}" for c in range(1, gc.O)],
                ["__background__"] + [f"pred{r}" for r in range(1, gc.R)])
    write_meta(_path(cfg, "meta"), corpus)
    hist = predicate_histogram(corpus.graphs, gc.R)
    total = sum(len(g.triplets) for g in corpus.graphs)
    print(f"images {len(corpus)}  triplets {total}", file=out)
    print("predicate histogram:", file=out)
    for r in range(1, gc.R):
        print(f"  pred{r:<3d} {hist[r]:6d}  {hist[r] / max(total, 1):.4f}", file=out)
    return EXIT_OK


def cmd_train(cfg, out=sys.stdout) -> int:
    from .graph import build_frequency_prior
    from .trainer import init_model, save_weights, train, write_loss_csv
    tc = train_config(cfg).validate()
    graphs, features = _load_corpus(cfg)
    (tr_g, tr_f), _ = _split(cfg, graphs, features)
    prior = build_frequency_prior(tr_g, cfg["gen.O"], cfg["gen.R"])
    model = init_model(cfg["seed"], cfg["gen.O"], cfg["gen.R"], cfg["gen.d"], cfg["gen.d_u"], cfg["model.f"])
    params, curve = train(tr_g, tr_f, model, prior, tc)
    save_weights(_path(cfg, "weights"), params, cfg, cfg["seed"])
    write_loss_csv(_path(cfg, "loss"), curve)
    if curve:
        print(f"trained {len(curve)} epochs on {len(tr_g)} images; final loss {curve[-1].total:.6f}", file=out)
    return EXIT_OK


def _eval_graphs(cfg, graphs, features):
    (tr_g, tr_f), (te_g, te_f) = _split(cfg, graphs, features)
    which = cfg["eval.split"]
    if which == "train":
        return tr_g, tr_f, tr_g
    if which == "test":
        return te_g, te_f, tr_g
    if which == "all":
        return graphs, features, tr_g
    from .errors import ConfigError
    raise ConfigError(f"eval.split must be train, test or all, got {which!r}")


def cmd_eval(cfg, out=sys.stdout) -> int:
    from .evaluation import evaluate, write_report
    from .graph import build_frequency_prior, read_vocab
    from .trainer import load_weights, predict_corpus
    graphs, features = _load_corpus(cfg)
    eg, ef, tr_g = _eval_graphs(cfg, graphs, features)
    params = load_weights(_path(cfg, "weights"), cfg["gen.O"], cfg["gen.R"], cfg["gen.d"], cfg["gen.d_u"])
    prior = build_frequency_prior(tr_g, cfg["gen.O"], cfg["gen.R"])
    mode = cfg["eval.mode"]
    preds = predict_corpus(params, eg, ef, prior, mode, cfg["train.bias"])
    report = evaluate(preds, eg, cfg["eval.ks"], mode, cfg["eval.graph_constraint"], cfg["eval.k_per_pair"])
    names = None
    if os.path.exists(_path(cfg, "vocab")):
        names = read_vocab(_path(cfg, "vocab"))[1]
    write_report(report, _path(cfg, "report_json"), _path(cfg, "report_text"), names)
    print(report.to_text(names), file=out)
    return EXIT_OK


def cmd_gradcheck(cfg, out=sys.stdout) -> int:
    from .gradcheck import run_suite
    reports, seconds = run_suite(range(cfg["gradcheck.seeds"]), d=cfg["gradcheck.d"], n=cfg["gradcheck.n"],
                                 tolerance=cfg["gradcheck.tolerance"], flip=cfg["gradcheck.flip"])
    failed = [r for r in reports if not r.passed]
    for r in failed:
        print(r.summary(), file=out)
    worst = max(r.max_rel_error for r in reports)
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed, worst relative error {worst:.2e}, "
          f"{seconds:.1f} s", file=out)
    return EXIT_OK if not failed else EXIT_NUMERIC


def cmd_attention(cfg, image_id: str, out=sys.stdout) -> int:
    import numpy as np
    from .errors import ConfigError
    from .message_passing import (dmp_forward, export_attention, gcmp_forward, init_gcmp, init_sgcmp,
                                  sgcmp_forward)
    from .trainer import load_weights
    graphs, features = _load_corpus(cfg)
    ids = [g.image_id for g in graphs]
    if image_id not in ids:
        raise ConfigError(f"unknown image id {image_id!r}")
    X, U = features[ids.index(image_id)]
    params = load_weights(_path(cfg, "weights"), cfg["gen.O"], cfg["gen.R"], cfg["gen.d"], cfg["gen.d_u"])
    rng = np.random.default_rng(cfg["seed"])
    d = X.shape[1]
    maps = {
        "gcmp": gcmp_forward(X, init_gcmp(rng, d))[1],
        "sgcmp": sgcmp_forward(X, init_sgcmp(rng, d))[1],
        "dmp": dmp_forward(X, U, params.dmp)[1],
    }
    for name, A in maps.items():
        path = os.path.join(cfg["workdir"], f"attention_{name}_{image_id}.csv")
        export_attention(A, path)
        print(f"wrote {path} ({A.shape[0]}x{A.shape[1]})", file=out)
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of dotted keys")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--workdir", help="directory for all artifacts")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    common.add_argument("--mu", type=float, help="priority-loss sharpness")
    common.add_argument("--mode", choices=["predcls", "sgcls", "sgdet"])
    common.add_argument("--k", help="comma-separated K list, e.g. 20,50,100")
    common.add_argument("--k-per-pair", help="predicates kept per pair (int or 'none')")
    common.add_argument("--graph-constraint", choices=["on", "off"])

    parser = argparse.ArgumentParser(prog="scenegraph", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate a synthetic corpus")
    sub.add_parser("train", parents=[common], help="train on the corpus split")
    sub.add_parser("eval", parents=[common], help="write metric reports")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference audit")
    g.add_argument("--flip", help="negate one parameter gradient of the composed model (fault injection)")
    a = sub.add_parser("attention", parents=[common], help="export attention maps for one image")
    a.add_argument("image_id")
    return parser


def _flag_overrides(args) -> list:
    pairs = [("workdir", args.workdir), ("seed", args.seed), ("threads", args.threads),
             ("train.mu", args.mu), ("eval.mode", args.mode), ("eval.ks", args.k),
             ("eval.k_per_pair", args.k_per_pair), ("eval.graph_constraint", args.graph_constraint),
             ("gradcheck.flip", getattr(args, "flip", None))]
    return [f"{k}={v}" for k, v in pairs if v is not None]


def _limit_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, list(args.set) + _flag_overrides(args))
    except ConfigParseError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    if cfg["threads"]:
        _limit_threads(cfg["threads"])
    print("effective config: " + json.dumps(cfg, sort_keys=True), file=out)

    from .errors import NumericalError, ValidationError
    try:
        if args.command == "gen":
            return cmd_gen(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, out)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, out)
        return cmd_attention(cfg, args.image_id, out)
    except (ValidationError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
