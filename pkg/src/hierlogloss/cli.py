"""Command-line experiment harness.

Subcommands::

    gen     write train/test datasets (synthetic mixture or converted MNIST)
    train   fit softmax | ova | hierarchical | leveraged and save the model
    eval    log-loss / error / regret report, per-node breakdown for trees
    verify  randomized checks of the regret bounds and decompositions
    tree    print and validate a tree

Every subcommand accepts ``--config FILE`` holding ``key=value`` lines
(keys are flag names, e.g. ``train-n=10000``) or a JSON run manifest;
command-line flags win over the file.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 verification failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy.special import log_expit

from . import regret_lab
from .compose import (
    HierarchicalClassifier,
    LogisticScorer,
    ProjectedNodeScorer,
    SoftmaxClassifier,
    leveraged_classifier,
    load_model,
    model_kind,
    read_model_header,
    save_model,
)
from .datasets import (
    calibrate_sigma,
    find_mnist_files,
    load_dataset,
    load_mnist_idx,
    make_mixture_spec,
    sample_mixture,
    save_dataset,
)
from .errors import FormulaMismatch, HierLogLossError, ShapeMismatch
from .learners import (
    TrainConfig,
    check_gradients,
    random_node_problem,
    random_softmax_problem,
    train_hierarchical,
    train_leveraged,
    train_ova,
    train_softmax,
)
from .probability import CLAMP_EPS, empirical_report, kl_divergence_rows
from .tree import ClassTree, build_balanced_tree, build_cova_tree, induce_node_probs, parse_tree, serialize_tree

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_VERIFY = 0, 2, 3, 4
METHODS = ("softmax", "ova", "hierarchical", "leveraged")
RECONSTRUCTION_TOL = 1e-9

# Digits grouped by shape: curved digits
# {0,2,6,8} on bit 1 of the root, the rest on bit 0.
MNIST_CURVED_TREE = "(((0 6) (2 8)) ((1 7) ((4 9) (3 5))))"
MNIST_CURVED_ORDER = (0, 2, 6, 8, 1, 7, 4, 5, 3, 9)


class ConfigError(Exception):
    pass


class VerificationFailed(Exception):
    pass


# tree sources


def resolve_tree(source: str, num_classes: int) -> ClassTree:
    """``cova``, ``balanced``, ``balanced:<perm>``, ``mnist-curved``, a file, or a literal expression."""
    source = source.strip()
    if source == "cova":
        return build_cova_tree(num_classes)
    if source == "balanced":
        return build_balanced_tree(num_classes)
    if source.startswith("balanced:"):
        order = [int(c) for c in source.split(":", 1)[1].split(",") if c.strip()]
        return build_balanced_tree(num_classes, order)
    if source == "balanced-permuted":
        return build_balanced_tree(num_classes, MNIST_CURVED_ORDER)
    if source == "mnist-curved":
        tree = parse_tree(MNIST_CURVED_TREE)
    elif source.startswith("("):
        tree = parse_tree(source)
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"unknown tree source {source!r}")
        tree = parse_tree(path.read_text())
    if tree.num_classes != num_classes:
        raise ConfigError(f"tree has {tree.num_classes} classes, data has {num_classes}")
    return tree


# configuration handling


def _read_config(path: str) -> dict:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        doc = None
    if isinstance(doc, dict):
        items = doc.get("config", doc).items()
        return {str(k).replace("_", "-"): v for k, v in items if k != "command"}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        values[key.strip().replace("_", "-")] = value.strip()
    return values


def _config_path(argv: List[str]) -> Optional[str]:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser: argparse.ArgumentParser, subparsers: dict, argv: List[str]) -> argparse.Namespace:
    path = _config_path(argv)
    sub = subparsers.get(argv[0]) if argv else None
    if path is None or sub is None:
        return parser.parse_args(argv)
    known = {a.dest.replace("_", "-"): a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, value in _read_config(path).items():
        if key not in known:
            raise ConfigError(f"unknown configuration key {key!r}")
        action = known[key]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[action.dest] = str(value).strip().lower() in ("1", "true", "yes", "on")
        elif value is None:
            defaults[action.dest] = None
        else:
            try:
                defaults[action.dest] = action.type(value) if action.type else value
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from None
            if action.choices and defaults[action.dest] not in action.choices:
                raise ConfigError(f"{key!r} must be one of {list(action.choices)}")
        action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        seed=args.seed,
        keep_best=args.keep_best,
        standardize=args.standardize,
    )


def _digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


def _digest_obj(obj) -> str:
    return _digest_bytes(json.dumps(obj, sort_keys=True).encode())


# gen


def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mnist_dir:
        for split in ("train", "test"):
            files = find_mnist_files(args.mnist_dir, split)
            if files is None:
                raise FileNotFoundError(f"no MNIST {split} files in {args.mnist_dir}")
            save_dataset(out / f"{split}.ds", load_mnist_idx(*files, crop=args.crop))
        return EXIT_OK
    if args.scenario not in ("A", "B"):
        raise ConfigError("--scenario must be A or B")
    spec = make_mixture_spec(args.classes, args.dim, args.scenario, args.sigma or 1.0, args.alpha_scale, args.seed)
    if not args.sigma:
        spec = calibrate_sigma(spec, args.target_error)
    (out / "spec.json").write_text(spec.to_json() + "\n")
    save_dataset(out / "train.ds", sample_mixture(spec, args.train_n, stream=0))
    save_dataset(out / "test.ds", sample_mixture(spec, args.test_n, stream=1))
    print(f"scenario {spec.scenario}: K={spec.num_classes} d={spec.dim} sigma={spec.sigma:.6g} spec={spec.digest()}")
    return EXIT_OK


# train


def _model_path(out: Path, method: str) -> Path:
    return out / f"model-{method}.bin"


def _final_loss(model, data) -> float:
    return empirical_report(model.predict_proba(data.features), data.labels).log_loss


def _baseline(args, data, data_digest, cfg: TrainConfig):
    """Load a matching softmax model from the output directory or train one."""
    base_cfg = TrainConfig(
        cfg.learning_rate, cfg.batch_size, args.baseline_epochs if args.baseline_epochs is not None else cfg.epochs,
        cfg.seed, cfg.keep_best, cfg.standardize,
    )
    digest = _digest_obj(base_cfg.__dict__)
    path = _model_path(Path(args.out), "softmax")
    if path.exists():
        header = read_model_header(path)
        if header.get("meta.dataset_digest") == data_digest and header.get("meta.config_digest") == digest:
            return load_model(path).params, {"source": "loaded", "path": str(path), "config_digest": digest}
    params = train_softmax(data, base_cfg)
    save_model(path, SoftmaxClassifier(params), dataset_digest=data_digest, config_digest=digest)
    return params, {"source": "trained", "path": str(path), "config_digest": digest}


def cmd_train(args) -> int:
    data_dir, out = Path(args.data), Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_path = data_dir / "train.ds"
    data = load_dataset(train_path)
    data_digest = _digest_bytes(train_path.read_bytes())
    cfg = _train_config(args)
    method = args.method
    if method in ("hierarchical", "leveraged") and not args.tree:
        raise ConfigError(f"--tree is required for method {method}")
    if method not in ("hierarchical", "leveraged") and args.tree:
        raise ConfigError(f"--tree does not apply to method {method}")
    started = time.perf_counter()
    manifest_extra = {}
    if method == "softmax":
        model = SoftmaxClassifier(train_softmax(data, cfg))
    elif method == "ova":
        model = train_ova(data, cfg)
    else:
        tree = resolve_tree(args.tree, data.num_classes)
        if method == "hierarchical":
            model = train_hierarchical(data, tree, cfg)
        else:
            base, info = _baseline(args, data, data_digest, cfg)
            manifest_extra["baseline"] = info
            model = leveraged_classifier(train_leveraged(data, tree, base, cfg))
    wall = time.perf_counter() - started
    config = {k.replace("_", "-"): v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "command")}
    config_digest = _digest_obj(cfg.__dict__)
    path = _model_path(out, method)
    save_model(path, model, dataset_digest=data_digest, config_digest=config_digest)
    manifest = {
        "command": "train",
        "config": config,
        "config_digest": config_digest,
        "dataset_digest": data_digest,
        "model": str(path),
        "model_digest": _digest_bytes(path.read_bytes()),
        "final_train_log_loss": _final_loss(model, data),
        "wall_time_s": wall,
        **manifest_extra,
    }
    (out / f"manifest-{method}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"{method}: final train log-loss {manifest['final_train_log_loss']:.4f} -> {path}")
    return EXIT_OK


# eval


def node_log_probs(model: HierarchicalClassifier, X) -> np.ndarray:
    """``N x (K-1) x 2`` log-probabilities of bit 0 / bit 1 at every node."""
    out = np.empty((X.shape[0], len(model.scorers), 2))
    for j, s in enumerate(model.scorers):
        if isinstance(s, ProjectedNodeScorer):
            out[:, j, 1], out[:, j, 0] = s.log_predict(X)
        elif isinstance(s, LogisticScorer):
            z = X @ s.weights
            out[:, j, 1], out[:, j, 0] = log_expit(z), log_expit(-z)
        else:
            q = np.clip(s.predict(X), CLAMP_EPS, 1 - CLAMP_EPS)
            out[:, j, 1], out[:, j, 0] = np.log(q), np.log1p(-q)
    return out


def node_breakdown(model: HierarchicalClassifier, data) -> dict:
    """Per-node binary log-losses whose reach-weighted sum is the multiclass log-loss."""
    tree = model.tree
    X, y = data.features, data.labels
    logq = node_log_probs(model, X)
    n = len(data)
    rows = []
    total = 0.0
    regret_total = 0.0
    logp = None
    if data.posteriors is not None:
        pn = induce_node_probs(tree, data.posteriors)
        with np.errstate(divide="ignore"):
            logp = np.stack([np.log1p(-pn), np.log(pn)], axis=-1)
    for j, node in enumerate(tree.nodes):
        reach = np.isin(y, sorted(node.subset))
        bits = np.isin(y[reach], sorted(node.one_branch)).astype(int)
        weight = reach.mean()
        idx = np.flatnonzero(reach)
        losses = -logq[idx, j, bits]
        loss = float(losses.mean()) if idx.size else 0.0
        row = {"node": j, "one": sorted(node.one_branch), "zero": sorted(node.zero_branch),
               "weight": float(weight), "log_loss": loss, "weighted": float(weight * loss)}
        total += losses.sum() / n
        if logp is not None:
            opt = -np.maximum(logp[idx, j, bits], np.log(CLAMP_EPS))
            r = float((losses - opt).mean()) if idx.size else 0.0
            row["regret"] = r
            regret_total += float(weight * r)
        rows.append(row)
    return {"nodes": rows, "weighted_sum": float(total), "regret_sum": regret_total if logp is not None else None}


def evaluate(model, data) -> dict:
    Q = model.predict_proba(data.features)
    rep = empirical_report(Q, data.labels, data.posteriors)
    out = {"n": len(data), "log_loss": rep.log_loss, "error": rep.zero_one_error, "regret": rep.regret}
    if data.posteriors is not None:
        P = data.posteriors
        bayes = empirical_report(P, data.labels)
        out["bayes_log_loss"] = bayes.log_loss
        out["bayes_error"] = bayes.zero_one_error
        out["kl_regret"] = float(np.mean(kl_divergence_rows(P, np.maximum(Q, CLAMP_EPS))))
    if isinstance(model, HierarchicalClassifier):
        br = node_breakdown(model, data)
        gap = abs(br["weighted_sum"] - rep.log_loss)
        if rep.regret is not None:
            gap = max(gap, abs(br["regret_sum"] - rep.regret))
        br["reconstruction_gap"] = gap
        br["reconstruction_ok"] = gap <= RECONSTRUCTION_TOL
        out["nodes"] = br
    return out


def _fmt(x, scale=1.0) -> str:
    return "-" if x is None else f"{x * scale:.4f}"


def format_report(kind: str, model, results: dict, fmt: str, units: str) -> str:
    scale = 1.0 / np.log(2) if units == "bits" else 1.0
    loss_keys = {"log_loss", "regret", "kl_regret", "bayes_log_loss", "weighted", "regret_sum", "weighted_sum"}
    cols = ["n", "log_loss", "error", "regret", "kl_regret", "bayes_log_loss", "bayes_error"]
    sep = "\t" if fmt == "delimited" else "  "
    lines = []

    def table(header, rows):
        if fmt == "delimited":
            lines.append(sep.join(header))
            lines.extend(sep.join(r) for r in rows)
            return
        widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
        lines.append(sep.join(h.ljust(w) for h, w in zip(header, widths)).rstrip())
        lines.extend(sep.join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)

    lines.append(f"# model={kind} classes={model.num_classes} units={units}")
    if isinstance(model, HierarchicalClassifier):
        lines.append(f"# tree={serialize_tree(model.tree)}")
    splits = list(results)
    rows = []
    for split in splits:
        r = results[split]
        row = [split]
        for c in cols:
            v = r.get(c)
            row.append(str(v) if c == "n" else _fmt(v, scale if c in loss_keys else 1.0))
        rows.append(row)
    table(["split"] + cols, rows)
    lines.append("")
    summary = ["method"] + [f"{s}_error" for s in splits] + [f"{s}_log_loss" for s in splits]
    table(summary, [[kind] + [_fmt(results[s]["error"]) for s in splits] + [_fmt(results[s]["log_loss"], scale) for s in splits]])
    for split in splits:
        br = results[split].get("nodes")
        if br is None:
            continue
        lines.append("")
        lines.append(f"# per-node binary log-loss ({split})")
        has_regret = br["regret_sum"] is not None
        header = ["node", "split", "weight", "log_loss", "weighted"] + (["regret"] if has_regret else [])
        rows = []
        for nd in br["nodes"]:
            label = "{" + ",".join(map(str, nd["one"])) + "}|{" + ",".join(map(str, nd["zero"])) + "}"
            row = [str(nd["node"]), label, _fmt(nd["weight"]), _fmt(nd["log_loss"], scale), _fmt(nd["weighted"], scale)]
            if has_regret:
                row.append(_fmt(nd["regret"], scale))
            rows.append(row)
        total = ["sum", "", "", "", _fmt(br["weighted_sum"], scale)] + ([_fmt(br["regret_sum"], scale)] if has_regret else [])
        rows.append(total)
        table(header, rows)
        status = "ok" if br["reconstruction_ok"] else "FAILED"
        lines.append(f"# reconstruction |sum - total| = {br['reconstruction_gap']:.3e} ({status})")
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    model = load_model(args.model)
    kind = model_kind(model)
    data_dir = Path(args.data)
    results = {}
    for split in ("train", "test"):
        path = data_dir / f"{split}.ds"
        if not path.exists():
            continue
        data = load_dataset(path)
        if data.num_classes != model.num_classes or data.features.shape[1] != _vector_length(model):
            raise ShapeMismatch(
                f"{split} data has K={data.num_classes}, d={data.dim}; model expects K={model.num_classes}, "
                f"d={_vector_length(model) - 1}"
            )
        results[split] = evaluate(model, data)
    if not results:
        raise FileNotFoundError(f"no train.ds or test.ds in {data_dir}")
    text = format_report(kind, model, results, args.format, args.units)
    sys.stdout.write(text)
    if args.report:
        Path(args.report).write_text(text)
    failed = [s for s, r in results.items() if "nodes" in r and not r["nodes"]["reconstruction_ok"]]
    if failed:
        raise VerificationFailed(f"per-node reconstruction failed on {failed}")
    return EXIT_OK


def _vector_length(model) -> int:
    if isinstance(model, SoftmaxClassifier):
        return model.params.vector_length
    s = model.scorers[0]
    return s.weights.shape[-1]


# verify


def _fault(name: Optional[str]):
    if name is None:
        return None
    if name == "node-offset":
        return lambda tree, p: np.roll(induce_node_probs(tree, p), 1, axis=-1)
    raise ConfigError(f"unknown fault {name!r}")


def _grad_result(trials: int, seed: int) -> regret_lab.TheoremCheckResult:
    res = regret_lab.TheoremCheckResult("gradients", "inequality", 1e-4)
    for label, factory in (("node", random_node_problem), ("softmax", random_softmax_problem)):
        rep = check_gradients(factory, trials=trials, step=1e-5, tol=1e-4, seed=seed)
        res.add(rep.max_rel_error, 0.0, {"loss": label})
    return res


def cmd_verify(args) -> int:
    names = [s.strip() for s in args.suite.split(",") if s.strip()]
    unknown = set(names) - set(regret_lab.SUITES) - {"grad"}
    if unknown:
        raise ConfigError(f"unknown suite entries {sorted(unknown)}")
    fault = _fault(args.inject_fault)
    results = []
    for name in names:
        if name == "grad":
            results.append(_grad_result(max(20, min(args.trials, 50)), args.seed))
            continue
        try:
            results.extend(regret_lab.run_suite([name], args.trials, args.seed, fault))
        except FormulaMismatch as exc:
            res = regret_lab.TheoremCheckResult(f"{name}_decomposition", "equality", regret_lab.EXACT_TOL)
            res.max_violation = float("inf")
            res.extras["error"] = str(exc)
            results.append(res)
    summaries = [r.summary() for r in results]
    width = max(len(s["name"]) for s in summaries)
    for s in summaries:
        print(
            f"{s['name']:<{width}}  trials={s['trials']:<5d} max_violation={s['max_violation']:+.3e}  "
            f"max_slack={s['max_slack']:+.3e}  {'PASS' if s['passed'] else 'FAIL'}"
        )
    if args.report:
        Path(args.report).write_text(json.dumps({"seed": args.seed, "checks": summaries}, indent=2, sort_keys=True) + "\n")
    if not all(r.passed for r in results):
        raise VerificationFailed("at least one check failed")
    return EXIT_OK


# tree


def cmd_tree(args) -> int:
    tree = resolve_tree(args.source, args.classes) if args.classes else None
    if tree is None:
        src = args.source.strip()
        if src.startswith("(") or src == "mnist-curved" or Path(src).exists():
            tree = resolve_tree(src, _peek_classes(src))
        else:
            raise ConfigError(f"--classes is required for tree source {src!r}")
    lo, hi = int(np.ceil(np.log2(tree.num_classes))), tree.num_classes - 1
    print(serialize_tree(tree))
    print(f"# classes={tree.num_classes} nodes={len(tree.nodes)} depth={tree.depth} (bounds {lo}..{hi})")
    for c, word in tree.codewords.items():
        print(f"class {c}: {word}")
    for j, node in enumerate(tree.nodes):
        print(f"node {j}: {sorted(node.one_branch)} | {sorted(node.zero_branch)}")
    return EXIT_OK


def _peek_classes(src: str) -> int:
    if src == "mnist-curved":
        return 10
    text = src if src.startswith("(") else Path(src).read_text()
    return parse_tree(text).num_classes


# parser


def build_parser() -> argparse.ArgumentParser:
    return _build_parser()[0]


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="hierlogloss",
        description=__doc__.split("\n\n")[0],
        epilog="exit codes: 0 success, 2 configuration error, 3 data error, 4 verification failure",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    registry = {}

    def sub(name, func, help_text):
        p = subs.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value file or JSON run manifest")
        p.set_defaults(func=func)
        registry[name] = p
        return p

    g = sub("gen", cmd_gen, "generate datasets")
    g.add_argument("--scenario", default="A", help="A (isotropic) or B (random class covariances)")
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--dim", type=int, default=20)
    g.add_argument("--sigma", type=float, default=None, help="noise scale; calibrated when omitted")
    g.add_argument("--target-error", type=float, default=0.25, help="Bayes error targeted by calibration")
    g.add_argument("--alpha-scale", type=float, default=0.1)
    g.add_argument("--train-n", type=int, default=10000)
    g.add_argument("--test-n", type=int, default=10000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mnist-dir", default=None, help="convert MNIST IDX files instead of sampling")
    g.add_argument("--crop", type=int, default=4)
    g.add_argument("--out", required=True)

    t = sub("train", cmd_train, "train a classifier")
    t.add_argument("--data", required=True, help="directory holding train.ds")
    t.add_argument("--method", choices=METHODS, required=True)
    t.add_argument("--tree", default=None, help="cova | balanced | balanced:<perm> | balanced-permuted | mnist-curved | file | expression")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--baseline-epochs", type=int, default=None, help="softmax epochs for the leveraged init")
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--batch", type=int, default=64)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--no-keep-best", dest="keep_best", action="store_false")
    t.add_argument("--no-standardize", dest="standardize", action="store_false")
    t.add_argument("--out", required=True)

    e = sub("eval", cmd_eval, "evaluate a model")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--format", choices=("text", "delimited"), default="text")
    e.add_argument("--units", choices=("nats", "bits"), default="nats")
    e.add_argument("--report", default=None, help="also write the report here")

    v = sub("verify", cmd_verify, "run the regret checks")
    v.add_argument("--suite", default="ova,tree,cova,dpi,grad")
    v.add_argument("--trials", type=int, default=1000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--report", default=None, help="write a JSON report here")
    v.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)

    tr = sub("tree", cmd_tree, "print and validate a tree")
    tr.add_argument("source")
    tr.add_argument("--classes", type=int, default=None)
    return parser, registry


def main(argv: Optional[List[str]] = None) -> int:
    parser, registry = _build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, registry, argv)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VerificationFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (HierLogLossError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
