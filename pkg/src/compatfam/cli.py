"""Command-line entry point.

Exit codes: 0 ok, 2 file-system error, 3 bad data, 4 config/checkpoint
mismatch, 64 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError
from .compat import CompatModel, export_embeddings_csv
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import (DataError, ItemSet, RelationSpec, gen_procedural_items, load_idx, read_pairs_csv,
                   write_idx, write_pairs_csv)
from .evaluate import (CandidateIndex, auc, error_rate, parallel_executor, recommend_approx,
                       recommend_exact, recommend_l2, symmetric_auc_bound, write_metrics_csv,
                       write_rankings_csv)
from .experiments import SPLITS, Dataset, make_dataset, summarize, table2, test_scores, write_rows_csv
from .gan import GanData, GanModel, default_m_prj, sample_compatible, train_mrcgan, write_curve_csv
from .pgm import grid, write_pgm
from .train import AdamState, PairData, TrainConfig, check_disjoint, read_history_csv, train_compat, write_history_csv

log = logging.getLogger("compatfam")

EXIT_OK, EXIT_IO, EXIT_DATA, EXIT_MISMATCH, EXIT_USAGE = 0, 2, 3, 4, 64


class UsageError(Exception):
    pass


class MismatchError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- file layout ----------------------------------------------------------------

def _data_dir(args, cfg):
    return args.data or os.path.join(cfg.run.out, "data")


def _model_path(args, cfg):
    return args.model or os.path.join(cfg.run.out, f"model-{cfg.model.mode}.cfam.best")


def _train_paths(args, cfg):
    """(best, last) checkpoint paths; for train, --model is a stem."""
    stem = args.model or os.path.join(cfg.run.out, f"model-{cfg.model.mode}.cfam")
    return stem + ".best", stem + ".last"


def save_dataset(ds, directory, meta):
    os.makedirs(directory, exist_ok=True)
    for split in SPLITS:
        items = ds.items[split]
        write_idx(items, os.path.join(directory, f"{split}-images.idx3-ubyte"),
                  os.path.join(directory, f"{split}-labels.idx1-ubyte"))
        np.savetxt(os.path.join(directory, f"{split}-ids.txt"), items.ids, fmt="%d")
        write_pairs_csv(ds.pairs[split], os.path.join(directory, f"{split}-pairs.csv"))
    with open(os.path.join(directory, "dataset.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_dataset(directory):
    try:
        with open(os.path.join(directory, "dataset.json")) as fh:
            meta = json.load(fh)
        spec = RelationSpec(int(meta["num_classes"]), set(meta["shifts"]))
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{directory}/dataset.json: {exc}") from exc
    items, pairs = {}, {}
    for split in SPLITS:
        part = load_idx(os.path.join(directory, f"{split}-images.idx3-ubyte"),
                        os.path.join(directory, f"{split}-labels.idx1-ubyte"))
        try:
            ids = np.loadtxt(os.path.join(directory, f"{split}-ids.txt"), dtype=np.int64, ndmin=1)
        except ValueError as exc:
            raise DataError(f"{split}-ids.txt: {exc}") from exc
        if len(ids) != len(part):
            raise DataError(f"{split}: {len(ids)} ids for {len(part)} images")
        items[split] = ItemSet(part.images, part.labels, ids)
        pairs[split] = read_pairs_csv(os.path.join(directory, f"{split}-pairs.csv"), split)
        items[split].lookup(pairs[split].query_ids)
        items[split].lookup(pairs[split].candidate_ids)
    check_disjoint(*pairs.values())
    return Dataset(spec, items, pairs), meta


# -- config and overrides -------------------------------------------------------

def _config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.out is not None:
        cfg.run.out = args.out
    for flag, section, key in [("mode", "model", "mode"), ("k", "model", "K"), ("n", "model", "N"),
                               ("lambda_m", "model", "lambda_m"), ("epochs", "train", "epochs")]:
        value = getattr(args, flag, None)
        if value is not None:
            setattr(getattr(cfg, section), key, value)
    try:
        cfg.train = TrainConfig(**{**dataclasses.asdict(cfg.train), "seed": cfg.run.seed})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _load_compat(path, args, input_dim=None):
    model, header, extra = CompatModel.load(path)
    for flag, key in (("k", "K"), ("n", "N")):
        want = getattr(args, flag, None)
        if want is not None and want != getattr(model.config, key):
            raise MismatchError(f"{path} has {key}={getattr(model.config, key)} but --{flag} {want} was given")
    if input_dim is not None and input_dim != model.config.input_dim:
        raise MismatchError(f"{path} expects {model.config.input_dim} inputs, data has {input_dim}")
    return model, header, extra


def _input_dim(ds):
    return int(np.prod(ds.items["train"].image_shape))


# -- commands -------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    d = cfg.data
    spec = RelationSpec(d.num_classes, set(d.shifts))
    if d.idx_images:
        items = load_idx(d.idx_images, d.idx_labels)
        if items.labels.max() >= spec.num_classes:
            raise DataError(f"labels exceed num_classes={spec.num_classes}")
    else:
        items = gen_procedural_items(d.per_class, spec, d.image_size, cfg.run.seed)
    ds = make_dataset(spec, seed=cfg.run.seed, ratios=d.ratios, pairs_per_item=d.pairs_per_item,
                      positive_ratio=d.positive_ratio, items=items)
    meta = {"num_classes": spec.num_classes, "shifts": sorted(spec.positive_shifts),
            "seed": cfg.run.seed, "image_shape": list(items.image_shape)}
    out = _data_dir(args, cfg)
    save_dataset(ds, out, meta)
    for split in SPLITS:
        p = ds.pairs[split]
        print(f"{split}: items={len(ds.items[split])} pairs={len(p)} "
              f"positive={int((p.labels > 0).sum())} negative={int((p.labels < 0).sum())}")
    print(f"wrote {out}")


def cmd_train(args, cfg):
    from .plotting import plot_history

    ds, _ = load_dataset(_data_dir(args, cfg))
    os.makedirs(cfg.run.out, exist_ok=True)
    mode = cfg.model.mode
    hist_path = os.path.join(cfg.run.out, f"history-{mode}.csv")
    best_path, last_path = _train_paths(args, cfg)
    train, val = ds.pair_data("train"), ds.pair_data("val")
    history, adam, start, prior_best = [], None, 0, np.inf
    if args.resume:
        model, header, extra = _load_compat(last_path, args, _input_dim(ds))
        adam = AdamState.from_tensors(extra)
        start = int(header["epoch"])
        history = [r for r in read_history_csv(hist_path) if r["epoch"] <= start]
        if history:
            prior_best = min(r["val_loss"] for r in history)
    else:
        model = CompatModel(cfg.model.compat(_input_dim(ds)), seed=cfg.run.seed)
    # a resumed run keeps its own shuffling stream
    tcfg = dataclasses.replace(cfg.train, seed=cfg.run.seed + start)
    res = train_compat(model, train, val, tcfg, start_epoch=start, adam=adam,
                       progress=lambda r: log.info("epoch %(epoch)d train %(train_loss).4f "
                                                   "val %(val_loss).4f auc %(val_auc).4f", r))
    history += res.history
    end = history[-1]["epoch"] if history else start
    res.last_model.save(last_path, extra={"epoch": end, "seed": cfg.run.seed},
                        extra_tensors=res.adam.tensors())
    new_best = min((r["val_loss"] for r in res.history), default=np.inf)
    if new_best < prior_best or not os.path.exists(best_path):
        res.best_model.save(best_path, extra={"epoch": res.best_epoch, "seed": cfg.run.seed})
    write_history_csv(history, hist_path)
    if history:
        plot_history(history, os.path.join(cfg.run.out, f"history-{mode}.png"), title=mode)
    if res.diverged:
        print("training diverged; kept the last finite model", file=sys.stderr)
    best_model, _, _ = CompatModel.load(best_path)
    _, val_auc, _ = _evaluate_split(best_model, val)
    print(f"best_val_auc={val_auc:.4f}")


def _evaluate_split(model, data):
    from .train import evaluate_pairs

    return evaluate_pairs(model, data)


def cmd_eval(args, cfg):
    from .plotting import plot_roc

    ds, _ = load_dataset(_data_dir(args, cfg))
    path = _model_path(args, cfg)
    model, _, _ = _load_compat(path, args, _input_dim(ds))
    data = ds.pair_data(args.split)
    scores, probs, approx = test_scores(model, data)
    row = {"split": args.split, "mode": model.config.mode, "K": model.config.K, "N": model.config.N,
           "pairs": len(data), "error_rate": error_rate(probs, data.labels), "auc": auc(scores, data.labels)}
    if approx is not None:
        row["auc_min_k"] = auc(approx, data.labels)
    row["symmetric_bound"] = symmetric_auc_bound(ds.spec.num_classes, ds.spec.positive_shifts)
    os.makedirs(cfg.run.out, exist_ok=True)
    stem = os.path.join(cfg.run.out, f"metrics-{model.config.mode}-{args.split}")
    write_metrics_csv([row], stem + ".csv")
    plot_roc(scores, data.labels, stem + "-roc.png", label=f"{model.config.mode} AUC {row['auc']:.3f}")
    if args.embeddings:
        export_embeddings_csv(model, ds.items[args.split], stem + "-embeddings.csv")
    print(f"auc={row['auc']:.4f} error_rate={row['error_rate']:.4f}")


def cmd_recommend(args, cfg):
    ds, _ = load_dataset(_data_dir(args, cfg))
    model, _, _ = _load_compat(_model_path(args, cfg), args, _input_dim(ds))
    items = ds.items[args.split]
    index = CandidateIndex.build(model, items)
    rng = np.random.default_rng(cfg.run.seed)
    n = min(args.queries, len(items))
    rows = np.sort(rng.choice(len(items), size=n, replace=False))
    e0, protos = model.encode(items.images[rows])
    method = "approx" if args.approx else "exact"
    if protos is None:
        method = "l2"
        ranked = [recommend_l2(e0[i], index, args.top_n, int(items.ids[r])) for i, r in enumerate(rows)]
        other = None
    else:
        from .compat import FamilyEmbedding

        fams = [FamilyEmbedding(e0[i], protos[i]) for i in range(n)]
        qids = [int(items.ids[r]) for r in rows]
        executor = parallel_executor(args.workers)
        try:
            approx = [recommend_approx(f, index, args.top_n, q, executor) for f, q in zip(fams, qids)]
        finally:
            if executor is not None:
                executor.shutdown()
        exact = [recommend_exact(f, index, args.top_n, q) for f, q in zip(fams, qids)]
        ranked, other = (approx, exact) if args.approx else (exact, approx)
    os.makedirs(cfg.run.out, exist_ok=True)
    name = "rankings-l2.csv" if method == "l2" else f"rankings-pcd-{method}.csv"
    path = os.path.join(cfg.run.out, name)
    write_rankings_csv(ranked, path)
    if other is not None:
        agree = np.mean([a.ids[0] == b.ids[0] for a, b in zip(ranked, other)])
        print(f"top1_agreement={agree:.4f}")
    print(f"wrote {path} ({n} queries, top {args.top_n})")


def _gan_data(compat, ds):
    train = ds.items["train"]
    pairs = ds.pairs["train"]
    neg = pairs.labels < 0
    return GanData.build(compat, train.flat(), train.lookup(pairs.query_ids[neg]),
                         train.lookup(pairs.candidate_ids[neg]))


def _preview(gan, compat, items, rng, count=6):
    """One row per prototype (plus style) for a few fixed queries."""
    h, w = items.image_shape
    tiles = []
    for q in range(min(count, len(items))):
        tiles.append(items.images[q])
        for k in range(1, gan.config.K + 1):
            tiles.append(sample_compatible(gan, compat, items.images[q], k, 1, rng)[0].reshape(h, w))
    return grid(np.stack(tiles), cols=gan.config.K + 1)


def cmd_train_gan(args, cfg):
    from .plotting import plot_gan_curves

    ds, _ = load_dataset(_data_dir(args, cfg))
    compat, _, _ = _load_compat(_model_path(args, cfg), args, _input_dim(ds))
    if compat.config.mode != "pcd":
        raise MismatchError("the generator needs a pcd-mode compatibility model")
    if compat.config.lambda_m == 0:
        log.warning("compatibility model was trained with lambda_m=0; prototypes may sit far from items")
    tp = ds.pair_data("train")
    g = cfg.gan
    m_prj = g.m_prj or default_m_prj(compat, tp.xq, tp.xc, tp.labels)
    m_enc = g.m_enc or 0.2 * m_prj
    gcfg = g.gan(compat.config.K, compat.config.N, _input_dim(ds), m_enc, m_prj)
    data = _gan_data(compat, ds)
    out = cfg.run.out
    sample_dir = os.path.join(out, "samples")
    os.makedirs(sample_dir, exist_ok=True)
    test = ds.items["test"]

    def snapshot(step, gan):
        rng = np.random.default_rng(cfg.run.seed + step)
        write_pgm(os.path.join(sample_dir, f"gan-step{step:06d}.pgm"), _preview(gan, compat, test, rng))

    gan, curve = train_mrcgan(GanModel(gcfg, seed=cfg.run.seed), data, g.steps, seed=cfg.run.seed,
                              log_every=g.log_every, snapshot_every=g.sample_every, snapshot=snapshot,
                              callback=lambda r: log.info("step %(step)d L_D %(L_D).4f L_G %(L_G).4f", r))
    gan.save(os.path.join(out, "gan.cfam"), extra={"steps": g.steps, "seed": cfg.run.seed})
    write_curve_csv(curve, os.path.join(out, "gan-curves.csv"))
    plot_gan_curves(curve, os.path.join(out, "gan-curves.png"))
    last = curve[-1]
    print(f"m_enc={m_enc:.4f} m_prj={m_prj:.4f} final L_D={last['L_D']:.4f} L_G={last['L_G']:.4f} "
          f"Omega_c={last['Omega_c']:.4f}")


def cmd_sample(args, cfg):
    from .plotting import plot_image_grid

    ds, _ = load_dataset(_data_dir(args, cfg))
    compat, _, _ = _load_compat(_model_path(args, cfg), args, _input_dim(ds))
    gan_path = args.gan or os.path.join(cfg.run.out, "gan.cfam")
    gan, _ = GanModel.load(gan_path)
    if (gan.config.K, gan.config.N) != (compat.config.K, compat.config.N):
        raise MismatchError(f"{gan_path} has K={gan.config.K}, N={gan.config.N}; compatibility model has "
                            f"K={compat.config.K}, N={compat.config.N}")
    if not args.style and not 1 <= args.prototype <= gan.config.K:
        raise MismatchError(f"--prototype {args.prototype} outside 1..{gan.config.K}")
    items = ds.items[args.split]
    row = 0 if args.query_id is None else int(items.lookup([args.query_id])[0])
    rng = np.random.default_rng(cfg.run.seed)
    out = sample_compatible(gan, compat, items.images[row], args.prototype, args.count, rng, style=args.style)
    h, w = items.image_shape
    imgs = out.reshape(args.count, h, w)
    tag = "style" if args.style else f"k{args.prototype}"
    directory = os.path.join(cfg.run.out, "samples")
    os.makedirs(directory, exist_ok=True)
    stem = os.path.join(directory, f"q{int(items.ids[row])}-{tag}")
    for i, img in enumerate(imgs):
        write_pgm(f"{stem}-{i:03d}.pgm", img)
    sheet = grid(np.concatenate([items.images[row][None], imgs]), cols=min(args.count + 1, 9))
    write_pgm(f"{stem}-grid.pgm", sheet)
    plot_image_grid(sheet, f"{stem}-grid.png", title=f"query {int(items.ids[row])}, {tag}")
    print(f"wrote {args.count} samples to {directory}")


def cmd_compare(args, cfg):
    from .plotting import plot_comparison

    d = cfg.data
    spec = RelationSpec(d.num_classes, set(d.shifts))
    seeds = [cfg.run.seed + i for i in range(args.repeats)]
    rows, _ = table2(seeds, ks=tuple(args.ks), latent_total=args.latent, per_class=d.per_class,
                     epochs=cfg.train.epochs, image_size=d.image_size, trunk=cfg.model.trunk,
                     head_init=cfg.model.head_init, spec=spec,
                     progress=lambda r: log.info("%s K=%d seed %d auc %.4f", r["mode"], r["K"], r["seed"], r["auc"]))
    summary = summarize(rows)
    bound = symmetric_auc_bound(spec.num_classes, spec.positive_shifts)
    os.makedirs(cfg.run.out, exist_ok=True)
    write_rows_csv(rows, os.path.join(cfg.run.out, "compare-runs.csv"))
    write_rows_csv(summary, os.path.join(cfg.run.out, "compare-summary.csv"))
    plot_comparison(summary, bound, os.path.join(cfg.run.out, "compare.png"))
    for s in summary:
        label = "l2" if s["mode"] == "l2" else f"pcd K={s['K']}"
        print(f"{label:10s} N={s['N']:3d} auc={s['auc_mean']:.4f}±{s['auc_std']:.4f} "
              f"error_rate={s['error_rate_mean']:.4f}")
    print(f"symmetric_bound={bound:.4f}")


# -- argument parsing -----------------------------------------------------------

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", metavar="DIR", help="run directory for all outputs")
    common.add_argument("--data", metavar="DIR", help="dataset directory (default OUT/data)")
    common.add_argument("-v", "--verbose", action="store_true")

    model = _Parser(add_help=False)
    model.add_argument("--mode", choices=("pcd", "l2"))
    model.add_argument("--k", type=int, help="number of prototypes")
    model.add_argument("--n", type=int, help="latent size per head")
    model.add_argument("--model", metavar="PATH",
                       help="compatibility checkpoint (default OUT/model-MODE.cfam.best); a path stem for train")

    parser = _Parser(prog="compatfam", description="Compatibility families and the conditional generator.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    sub.add_parser("gen-data", parents=[common], help="generate the procedural dataset")

    p = sub.add_parser("train", parents=[common, model], help="train a compatibility model")
    p.add_argument("--lambda-m", type=float, dest="lambda_m")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", action="store_true", help="continue from the .last checkpoint")

    p = sub.add_parser("eval", parents=[common, model], help="AUC and error rate on a split")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--embeddings", action="store_true", help="also export embeddings CSV")

    p = sub.add_parser("recommend", parents=[common, model], help="top-N retrieval")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--exact", action="store_true", help="rank by the full distance (default)")
    g.add_argument("--approx", action="store_true", help="K nearest-neighbour searches merged")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--queries", type=int, default=100)
    p.add_argument("--top-n", type=int, default=10, dest="top_n")
    p.add_argument("--workers", type=int, default=1)

    sub.add_parser("train-gan", parents=[common, model], help="train the conditional generator")

    p = sub.add_parser("sample", parents=[common, model], help="draw generator samples for one query")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--prototype", type=int, default=1, metavar="K")
    g.add_argument("--style", action="store_true", help="condition on E_0 of the query")
    p.add_argument("--gan", metavar="PATH")
    p.add_argument("--query-id", type=int, dest="query_id")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--split", choices=SPLITS, default="test")

    p = sub.add_parser("compare", parents=[common], help="symmetric baseline vs prototypes over repeated runs")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--ks", type=int, nargs="+", default=[2, 3, 4, 5])
    p.add_argument("--latent", type=int, default=60, help="total latent size (K+1)*N")
    p.add_argument("--epochs", type=int)
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "recommend": cmd_recommend,
    "train-gan": cmd_train_gan,
    "sample": cmd_sample,
    "compare": cmd_compare,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"compatfam: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        if getattr(args, "count", 1) < 1 or getattr(args, "queries", 1) < 1:
            raise ConfigError("--count and --queries must be >= 1")
        COMMANDS[args.command](args, cfg)
    except (ConfigError, ValueError) as exc:
        # DataError and CheckpointError are ValueErrors too; test them first
        if isinstance(exc, (DataError, CheckpointError)):
            print(f"compatfam: data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        if isinstance(exc, ConfigError):
            print(f"compatfam: config error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        print(f"compatfam: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (MismatchError, ad.ShapeError) as exc:
        print(f"compatfam: mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except ad.NonFiniteError as exc:
        print(f"compatfam: numerical error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"compatfam: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
