"""``xpfl`` command-line entry point: run, compare, explain.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import os
import re
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as D
from . import explain as X
from . import fedcore as F
from . import models as M
from . import numkit as nk
from . import plots, quality

log = logging.getLogger("xpfl")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

ROUNDS_HEADER = ["round", "scheme", "client", "local_loss", "local_acc", "global_acc", "psi", "qox"]


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration

_INT, _FLOAT, _STR = int, float, str

SCHEMA = {
    "data": {
        "source": (_STR, "synthetic"),
        "n_train": (_INT, 1000),
        "n_test": (_INT, 200),
        "n_classes": (_INT, 10),
        "height": (_INT, 16),
        "width": (_INT, 16),
        "noise": (_FLOAT, 0.1),
        "train_images": (_STR, ""),
        "train_labels": (_STR, ""),
        "test_images": (_STR, ""),
        "test_labels": (_STR, ""),
    },
    "partition": {
        "clients": (_INT, 10),
        "eta": (_FLOAT, 0.5),
        "gamma": (_FLOAT, 0.1),
        "seed": (_INT, 0),
    },
    "rounds": {
        "rounds": (_INT, 40),
        "local_iters": (_INT, 1),
        "kd_weight": (_FLOAT, 1.0),
        "tau": (_FLOAT, 2.0),
        "lr_gae": (_FLOAT, 0.01),
        "lr_clf": (_FLOAT, 0.05),
        "batch_size": (_INT, 16),
        "eps_recon": (_FLOAT, 1e-3),
        "reliability": (_STR, "accuracy"),
    },
    "model": {
        "patch": (_INT, 4),
        "dim": (_INT, 32),
        "heads": (_INT, 4),
        "enc_layers": (_INT, 2),
        "dec_layers": (_INT, 1),
        "mask_ratio": (_FLOAT, 0.5),
    },
    "run": {
        "out": (_STR, "xpfl-run"),
        "schemes": (_STR, "xpfl"),
        "workers": (_INT, 1),
        "checkpoint_every": (_INT, 5),
        "recon_images": (_INT, 8),
    },
    "explain": {
        "rounds": (_STR, ""),
        "tsne_iters": (_INT, 500),
        "tsne_points": (_INT, 100),
        "chi": (_FLOAT, 1.0),
        "max_depth": (_INT, 8),
        "min_leaf": (_INT, 3),
        "purity": (_FLOAT, 0.99),
    },
}


@dataclass
class ExperimentConfig:
    values: dict  # section -> key -> typed value
    source_path: str = "<defaults>"

    def __getitem__(self, section):
        return self.values[section]

    @property
    def partition(self):
        return D.PartitionSpec(**self.values["partition"])

    @property
    def rounds(self):
        return F.RoundConfig(**self.values["rounds"])

    @property
    def schemes(self):
        return [s.strip() for s in self.values["run"]["schemes"].split(",") if s.strip()]

    @property
    def explain_rounds(self):
        txt = self.values["explain"]["rounds"].strip()
        return tuple(int(t) for t in re.split(r"[,\s]+", txt) if t) if txt else ()

    def explain_config(self):
        e = self.values["explain"]
        limits = X.TreeLimits(e["max_depth"], e["min_leaf"], e["purity"])
        return F.ExplainConfig(self.explain_rounds, e["tsne_iters"], e["tsne_points"], e["chi"], limits)

    def to_ini(self):
        cp = configparser.ConfigParser()
        for sec, kv in self.values.items():
            cp[sec] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in kv.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _line_of(text, section, key):
    cur = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[(.+)\]$", s)
        if m:
            cur = m.group(1).strip()
        elif cur == section and re.match(rf"{re.escape(key)}\s*[=:]", s):
            return n
    return None


def _coerce(section, key, raw, where):
    kind = SCHEMA[section][key][0]
    try:
        return kind(raw.strip()) if kind is not _STR else raw.strip()
    except ValueError:
        raise ConfigError(f"{where}{section}.{key}: expected {kind.__name__}, got {raw.strip()!r}") from None


def load_config(path=None, overrides=(), env=None):
    """Parse an INI config, apply ``section.key=value`` overrides and XPFL_SEED."""
    env = os.environ if env is None else env
    values = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        try:
            cp.read_string(text, source=str(path))
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        for sec in cp.sections():
            if sec not in SCHEMA:
                raise ConfigError(f"{path}:{_line_of(text, sec, '') or '?'}: unknown section [{sec}]")
            for key, raw in cp[sec].items():
                line = _line_of(text, sec, key)
                where = f"{path}:{line}: " if line else f"{path}: "
                if key not in SCHEMA[sec]:
                    raise ConfigError(f"{where}unknown key {sec}.{key}")
                values[sec][key] = _coerce(sec, key, raw, where)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        lhs, raw = item.split("=", 1)
        sec, key = lhs.strip().split(".", 1)
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            raise ConfigError(f"--set: unknown key {lhs.strip()}")
        values[sec][key] = _coerce(sec, key, raw, "--set ")
    if env.get("XPFL_SEED", "").strip():
        values["partition"]["seed"] = _coerce("partition", "seed", env["XPFL_SEED"], "XPFL_SEED: ")
    cfg = ExperimentConfig(values, str(path) if path else "<defaults>")
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig):
    try:
        cfg.partition
        cfg.rounds
        cfg.explain_config()
        _model_configs(cfg, (cfg["data"]["height"], cfg["data"]["width"], 1), cfg["data"]["n_classes"])
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None
    d = cfg["data"]
    if d["source"] not in ("synthetic", "idx"):
        raise ConfigError(f"data.source must be 'synthetic' or 'idx', got {d['source']!r}")
    if d["source"] == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not d[key]:
                raise ConfigError(f"data.{key} is required when data.source = idx")
            if not Path(d[key]).is_file():
                raise ConfigError(f"data.{key}: no such file {d[key]}")
    elif d["n_train"] < 1 or d["n_test"] < 1:
        raise ConfigError("data.n_train and data.n_test must be >= 1")
    unknown = [s for s in cfg.schemes if s not in F.SCHEMES]
    if unknown or not cfg.schemes:
        raise ConfigError(f"run.schemes: unknown scheme(s) {unknown}; choose from {sorted(F.SCHEMES)}")
    r = cfg["run"]
    if r["workers"] < 1 or r["checkpoint_every"] < 1 or r["recon_images"] < 0:
        raise ConfigError("run.workers and run.checkpoint_every must be >= 1")
    bad = [t for t in cfg.explain_rounds if not 1 <= t <= cfg["rounds"]["rounds"]]
    if bad:
        raise ConfigError(f"explain.rounds outside 1..{cfg['rounds']['rounds']}: {bad}")


def _model_configs(cfg, image_shape, n_classes):
    H, W, C = image_shape
    m = cfg["model"]
    gae = M.GaeConfig(height=H, width=W, channels=C, patch=m["patch"], dim=m["dim"], heads=m["heads"],
                      enc_layers=m["enc_layers"], dec_layers=m["dec_layers"], mask_ratio=m["mask_ratio"])
    clf = M.ClassifierConfig(height=H, width=W, channels=C, n_classes=n_classes, feature_dim=gae.dim)
    return F.ModelConfigs(gae, clf)


def load_datasets(cfg: ExperimentConfig):
    d = cfg["data"]
    if d["source"] == "idx":
        train = D.load_idx(d["train_images"], d["train_labels"], d["n_classes"])
        test = D.load_idx(d["test_images"], d["test_labels"], d["n_classes"])
        return train, test
    seed = cfg["partition"]["seed"]
    train = D.synth_shapes(d["n_train"], d["n_classes"], d["height"], d["width"], seed=seed, noise=d["noise"])
    test = D.synth_shapes(d["n_test"], d["n_classes"], d["height"], d["width"],
                          seed=seed + 1_000_003, noise=d["noise"])
    return train, test


# ---------------------------------------------------------------------------
# output helpers


def num(x):
    """Locale-independent decimal text; empty for NaN."""
    x = float(x)
    if np.isnan(x):
        return ""
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def report_rows(report: F.RoundReport):
    return [[report.round, report.scheme, k, num(report.local_loss[k]), num(report.local_acc[k]),
             num(report.global_acc), num(report.psi[k]), num(report.qox[k])]
            for k in range(len(report.local_acc))]


def write_embedding(prefix: Path, ex: X.AggregationExplanation, true_labels, pre_model, post_model, images):
    rows = []
    for phase, run, model in (("pre", ex.pre, pre_model), ("post", ex.post, post_model)):
        preds = M.predict(images, model)
        rows += [[phase, i, num(x), num(y), int(t), int(p)]
                 for i, ((x, y), t, p) in enumerate(zip(run.Y, true_labels, preds))]
        prefix.with_name(prefix.name + f"-{phase}.svg").write_text(
            plots.scatter(run.Y, true_labels, title=f"{phase}: KL={run.kl:.4f}"))
    write_csv(prefix.with_name(prefix.name + ".csv"), ["phase", "index", "x", "y", "true", "pred"], rows)
    prefix.with_name(prefix.name + "-kl.json").write_text(
        json.dumps({"kl_pre": ex.kl_pre, "kl_post": ex.kl_post, "improvement": ex.improvement}, indent=2) + "\n")


def write_tree(prefix: Path, tree: X.SurrogateTree):
    prefix.with_name(prefix.name + ".json").write_text(json.dumps(tree.to_dict(), indent=1) + "\n")
    prefix.with_name(prefix.name + ".txt").write_text(
        f"fidelity {tree.fidelity:.6f}\n" + tree.render())


# ---------------------------------------------------------------------------
# commands


def cmd_run(args):
    cfg = load_config(args.config, args.set or ())
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    train, test = load_datasets(cfg)
    configs = _model_configs(cfg, train.image_shape, train.n_classes)
    spec, rcfg, ecfg = cfg.partition, cfg.rounds, cfg.explain_config()

    (out / "data").mkdir(exist_ok=True)
    D.write_idx(train, out / "data" / "train-images.idx", out / "data" / "train-labels.idx")
    D.write_idx(test, out / "data" / "test-images.idx", out / "data" / "test-labels.idx")
    shards = D.partition_dirichlet(train, spec)
    D.write_manifest(out / "partition.json", shards)

    every = cfg["run"]["checkpoint_every"]
    tsne_idx = F.explain_subset(len(test), spec.seed, ecfg.tsne_points)
    rows, curves, recon_rows = [], {}, []
    jsonl = open(out / "rounds.jsonl", "w")
    ctx = {"scheme": None, "round": 0}
    try:
        for scheme in cfg.schemes:
            ctx.update(scheme=scheme, round=1)
            ck_dir = out / "checkpoints" / scheme
            ex_dir = out / "explain" / scheme
            ck_dir.mkdir(parents=True, exist_ok=True)

            def on_round(t, pre, post, g, report, ck_dir=ck_dir, scheme=scheme):
                if t % every == 0 or t == rcfg.rounds or t == 1:
                    d = ck_dir / f"round-{t:03d}"
                    d.mkdir(exist_ok=True)
                    M.save_checkpoint(d / "global.ckpt", g.params)
                    for s in post:
                        M.save_checkpoint(d / f"client-{s.shard.client_id}.ckpt", s.classifier.params)
                        M.save_checkpoint(d / f"client-{s.shard.client_id}-pre.ckpt", pre[s.shard.client_id].classifier.params)
                jsonl.write(json.dumps({"scheme": scheme, **report.to_dict()}, sort_keys=True) + "\n")
                jsonl.flush()
                log.info("%s round %d: global_acc=%.4f mean local_acc=%.4f", scheme, t,
                         report.global_acc, float(np.mean(report.local_acc)))
                ctx["round"] = t + 1

            def on_explain(t, k, tree, ex, pre_model, post_model, ex_dir=ex_dir):
                d = ex_dir / f"round-{t:03d}"
                d.mkdir(parents=True, exist_ok=True)
                write_tree(d / f"client-{k}-tree", tree)
                write_embedding(d / f"client-{k}-embedding", ex, test.labels[tsne_idx],
                                pre_model, post_model, test.images[tsne_idx])

            result = F.run_xpfl(rcfg, spec, (train, test), scheme, configs, ecfg,
                                workers=cfg["run"]["workers"], on_round=on_round, shards=shards,
                                on_explain=on_explain)
            for rep in result.reports:
                rows += report_rows(rep)
            curves[f"{scheme} global"] = ([r.round for r in result.reports], [r.global_acc for r in result.reports])
            curves[f"{scheme} local"] = ([r.round for r in result.reports],
                                         [float(np.mean(r.local_acc)) for r in result.reports])
            if F.SCHEMES[scheme].use_unlabeled:
                recon_rows += _reconstructions(out, scheme, result, test, cfg)
            for s in result.states:
                M.save_checkpoint(ck_dir / f"gae-client-{s.shard.client_id}.ckpt", s.gae.params)
    except Exception as e:
        raise RuntimeFailure(f"scheme {ctx['scheme']}, round {ctx['round']}: {e}") from e
    finally:
        jsonl.close()

    write_csv(out / "rounds.csv", ROUNDS_HEADER, rows)
    (out / "accuracy.svg").write_text(plots.line_chart(curves, ylabel="accuracy", title="accuracy per round"))
    if recon_rows:
        write_csv(out / "recon.csv", ["scheme", "client", "index", "mse", "psnr", "ssim"], recon_rows)
    print(f"wrote {out}")
    return EXIT_OK


def _reconstructions(out, scheme, result, test, cfg):
    n = min(cfg["run"]["recon_images"], len(test))
    if n == 0:
        return []
    imgs = test.images[:n]
    rows, grid, labels = [], [list(imgs)], ["original"]
    for s in result.states:
        _, rec = M.gae_forward(imgs, s.gae, rng=nk.make_rng(cfg["partition"]["seed"], 0xEC0, s.shard.client_id))
        rec = rec.data
        for i in range(n):
            rows.append([scheme, s.shard.client_id, i, num(quality.mse(imgs[i], rec[i])),
                         num(quality.psnr(imgs[i], rec[i])), num(quality.ssim(imgs[i], rec[i]))])
        if s.shard.client_id < 4:
            grid.append(list(np.clip(rec, 0, 1)))
            labels.append(f"client {s.shard.client_id}")
    (out / f"recon-{scheme}.svg").write_text(plots.image_grid(grid, row_labels=labels))
    return rows


class RuntimeFailure(RuntimeError):
    pass


def read_rounds(path):
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            body = list(reader)
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e.strerror}") from None
    if header != ROUNDS_HEADER:
        raise ConfigError(f"{path}: header {header} does not match {ROUNDS_HEADER}")
    return [dict(zip(header, r)) for r in body]


def cmd_compare(args):
    out = Path(args.out)
    columns, seen = {}, {}
    for d in args.dirs:
        rows = read_rounds(Path(d) / "rounds.csv")
        label = Path(d).resolve().name
        seen[label] = seen.get(label, 0) + 1
        if seen[label] > 1:
            label = f"{label}#{seen[label]}"
        for r in rows:
            col = columns.setdefault(f"{label}:{r['scheme']}", {})
            col.setdefault(int(r["round"]), r["global_acc"])
    rounds = sorted({t for col in columns.values() for t in col})
    out.mkdir(parents=True, exist_ok=True)
    names = list(columns)
    write_csv(out / "comparison.csv", ["round"] + names,
              [[t] + [columns[n].get(t, "") for n in names] for t in rounds])
    series = {n: (sorted(c), [float(c[t]) if c[t] else float("nan") for t in sorted(c)]) for n, c in columns.items()}
    (out / "comparison.svg").write_text(plots.line_chart(series, ylabel="global accuracy",
                                                         title="global accuracy per round"))
    print(f"wrote {out / 'comparison.csv'}")
    return EXIT_OK


def _find(data_dir: Path, name):
    for cand in (data_dir / name, data_dir / "data" / name, data_dir.parent / name):
        if cand.is_file():
            return cand
    return None


def cmd_explain(args):
    data_dir, out = Path(args.data), Path(args.out)
    try:
        pre_params = M.load_checkpoint(args.checkpoint)
        post_params = M.load_checkpoint(args.post_checkpoint) if args.post_checkpoint else None
        pre = M.classifier_from_params(pre_params)
    except (OSError, M.CheckpointError, KeyError, ValueError) as e:
        raise ConfigError(f"cannot load checkpoint: {e}") from None
    if post_params is not None and M.layout_tag(post_params) != M.layout_tag(pre_params):
        raise ConfigError(f"layout mismatch: {args.checkpoint} is {M.layout_tag(pre_params)}, "
                          f"{args.post_checkpoint} is {M.layout_tag(post_params)}")
    post = M.ClassifierModel(pre.config, post_params) if post_params is not None else None

    tr_img, tr_lab = _find(data_dir, "train-images.idx"), _find(data_dir, "train-labels.idx")
    if tr_img is None or tr_lab is None:
        raise ConfigError(f"{data_dir}: train-images.idx / train-labels.idx not found")
    train = D.load_idx(tr_img, tr_lab, pre.config.n_classes)
    cfgc = pre.config
    if train.image_shape != (cfgc.height, cfgc.width, cfgc.channels):
        raise ConfigError(f"layout mismatch: data images {train.image_shape} vs checkpoint "
                          f"{(cfgc.height, cfgc.width, cfgc.channels)}")
    fit_images = train.images
    if args.client is not None:
        man = _find(data_dir, "partition.json")
        if man is None:
            raise ConfigError("--client needs partition.json next to the data")
        shards = D.shards_from_manifest(json.loads(man.read_text()), train)
        match = [s for s in shards if s.client_id == args.client]
        if not match:
            raise ConfigError(f"client {args.client} not in {man}")
        fit_images = match[0].all_images

    te_img, te_lab = _find(data_dir, "test-images.idx"), _find(data_dir, "test-labels.idx")
    if post is not None and (te_img is None or te_lab is None):
        raise ConfigError("t-SNE needs a test set: test-images.idx / test-labels.idx not found")

    out.mkdir(parents=True, exist_ok=True)
    limits = X.TreeLimits(args.max_depth, args.min_leaf, args.purity)
    tree = X.fit_surrogate(fit_images, pre, limits)
    write_tree(out / "tree", tree)
    kl_pre = kl_post = 0.0
    n_test = 0
    if post is not None:
        test = D.load_idx(te_img, te_lab, pre.config.n_classes)
        idx = F.explain_subset(len(test), args.seed, args.tsne_points)
        ex = X.aggregation_explain(pre, post, test.images[idx], args.tsne_iters, seed=args.seed)
        write_embedding(out / "embedding", ex, test.labels[idx], pre, post, test.images[idx])
        kl_pre, kl_post, n_test = ex.kl_pre, ex.kl_post, len(idx)
    score = X.qox(tree, len(fit_images), pre.size, kl_pre, kl_post, n_test, args.chi)
    report = {
        "layout_tag": M.layout_tag(pre_params),
        "fidelity": tree.fidelity,
        "n_samples": len(fit_images),
        "model_size": pre.size,
        "kl_pre": kl_pre,
        "kl_post": kl_post,
        "n_test": n_test,
        "chi": args.chi,
        "decision_term": score.decision_term,
        "aggregation_term": score.aggregation_term,
        "qox": score.value,
    }
    (out / "qox.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"QoX {score.value:.6g} (fidelity {tree.fidelity:.4f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    p = argparse.ArgumentParser(prog="xpfl", description="Explainable personalised federated learning simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run federated training and write artifacts")
    r.add_argument("--config", required=False, help="INI config file")
    r.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="merge rounds.csv files from several runs")
    c.add_argument("dirs", nargs="+", metavar="DIR")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)

    e = sub.add_parser("explain", help="surrogate tree, t-SNE and QoX for saved checkpoints")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--post-checkpoint")
    e.add_argument("--data", required=True, help="directory holding the IDX files (and partition.json)")
    e.add_argument("--out", required=True)
    e.add_argument("--client", type=int, help="fit the tree on this client's shard")
    e.add_argument("--tsne-iters", type=int, default=500)
    e.add_argument("--tsne-points", type=int, default=100)
    e.add_argument("--chi", type=float, default=1.0)
    e.add_argument("--max-depth", type=int, default=8)
    e.add_argument("--min-leaf", type=int, default=3)
    e.add_argument("--purity", type=float, default=0.99)
    e.add_argument("--seed", type=int, default=None, help="defaults to XPFL_SEED or 0")
    e.set_defaults(func=cmd_explain)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", 0) is None:
        raw = os.environ.get("XPFL_SEED", "").strip()
        try:
            args.seed = int(raw) if raw else 0
        except ValueError:
            print(f"error: XPFL_SEED must be an integer, got {raw!r}", file=sys.stderr)
            return EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, nk.UsageError, D.IdxFormatError, F.LayoutMismatchError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - last-resort boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
