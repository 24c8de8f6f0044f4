"""End-to-end pipelines shared by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .compat import CompatConfig, CompatModel
from .data import (RelationSpec, build_pairs, gaussian_mixture_items, gen_procedural_items, load_idx,
                   split_items, ItemSet)
from .evaluate import auc, error_rate, min_prototype_distance
from .gan import GanConfig, GanData, GanModel, default_m_prj, train_mrcgan
from .train import PairData, TrainConfig, evaluate_pairs, train_compat

SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    spec: RelationSpec
    items: dict  # split -> ItemSet
    pairs: dict  # split -> PairSet

    def pair_data(self, split):
        return PairData.from_pairs(self.items[split], self.pairs[split])


def make_dataset(spec, per_class=200, image_size=16, seed=0, ratios=(0.6, 0.2, 0.2),
                 pairs_per_item=1, positive_ratio=0.5, items=None):
    """Procedural (or given) items, stratified split, then pairs drawn inside each split."""
    if items is None:
        items = gen_procedural_items(per_class, spec, image_size, seed)
    parts = split_items(items, ratios, seed + 1)
    split_items_ = dict(zip(SPLITS, parts))
    pairs = {s: build_pairs(split_items_[s], spec, pairs_per_item, seed + 10 + i, positive_ratio, s)
             for i, s in enumerate(SPLITS)}
    return Dataset(spec, split_items_, pairs)


def test_scores(model, data):
    """(scores, probabilities, min_k scores or None) on a PairData set."""
    d = model.distance(data.xq, data.xc)
    probs = model.probability(data.xq, data.xc)
    approx = None
    if model.config.mode == "pcd":
        _, protos = model.encode(data.xq)
        e0, _ = model.encode(data.xc)
        approx = -min_prototype_distance(protos, e0)
    return -d, probs, approx


def fit_and_score(dataset, compat_config, train_config, seed):
    model = CompatModel(compat_config, seed=seed)
    res = train_compat(model, dataset.pair_data("train"), dataset.pair_data("val"),
                       replace(train_config, seed=seed))
    test = dataset.pair_data("test")
    scores, probs, approx = test_scores(res.best_model, test)
    row = {
        "mode": compat_config.mode,
        "K": compat_config.K,
        "N": compat_config.N,
        "seed": seed,
        "best_epoch": res.best_epoch,
        "error_rate": error_rate(probs, test.labels),
        "auc": auc(scores, test.labels),
        "auc_min_k": auc(approx, test.labels) if approx is not None else float("nan"),
    }
    return res, row


def table2(seeds, ks=(2, 3, 4, 5), latent_total=60, per_class=200, epochs=50, image_size=16,
           trunk=(128, 64), head_init=0.1, spec=None, progress=None):
    """Symmetric baseline vs prototype model at a fixed total latent size, over several seeds."""
    spec = spec or RelationSpec(10, {1, 2})
    rows, models = [], {}
    for seed in seeds:
        ds = make_dataset(spec, per_class, image_size, seed)
        input_dim = image_size * image_size
        tcfg = TrainConfig(epochs=epochs)
        configs = [CompatConfig(K=ks[0], N=latent_total // (ks[0] + 1), mode="l2", trunk=trunk,
                                input_dim=input_dim, head_init=head_init)]
        configs += [CompatConfig(K=k, N=latent_total // (k + 1), trunk=trunk, input_dim=input_dim,
                                 head_init=head_init) for k in ks]
        for cfg in configs:
            res, row = fit_and_score(ds, cfg, tcfg, seed)
            rows.append(row)
            models[(cfg.mode, cfg.K, seed)] = (res.best_model, ds)
            if progress:
                progress(row)
    return rows, models


def summarize(rows):
    """Mean and std per (mode, K) of the per-seed rows."""
    groups = {}
    for r in rows:
        key = (r["mode"], r["K"] if r["mode"] == "pcd" else 0)
        groups.setdefault(key, []).append(r)
    out = []
    for (mode, k), rs in sorted(groups.items()):
        err = np.array([r["error_rate"] for r in rs])
        a = np.array([r["auc"] for r in rs])
        out.append({"mode": mode, "K": k, "N": rs[0]["N"], "runs": len(rs),
                    "error_rate_mean": float(err.mean()), "error_rate_std": float(err.std()),
                    "auc_mean": float(a.mean()), "auc_std": float(a.std())})
    return out


# -- generator toy --------------------------------------------------------------

@dataclass
class ToySetup:
    spec: RelationSpec
    points: np.ndarray
    labels: np.ndarray
    train: ItemSet
    compat: CompatModel
    data: GanData
    m_prj: float
    m_enc: float


def toy_compat(per_class=150, seed=0, N=4, K=2, lambda_m=0.03, epochs=50, pairs_per_item=4,
               trunk=(32, 32), head_init=0.1, prj_scale=1.2, enc_ratio=0.2, batch_size=100):
    """Point clusters on a ring with the {1, 2} shift relation and a trained compatibility model."""
    spec = RelationSpec(4, {1, 2})
    pts, labels, ids = gaussian_mixture_items(per_class, 4, seed=seed)
    items = ItemSet(pts.reshape(-1, 1, 2), labels, ids)
    ds = make_dataset(spec, items=items, seed=seed, pairs_per_item=pairs_per_item)
    cfg = CompatConfig(K=K, N=N, trunk=trunk, lambda_m=lambda_m, input_dim=2, head_init=head_init)
    res = train_compat(CompatModel(cfg, seed=seed), ds.pair_data("train"), ds.pair_data("val"),
                       TrainConfig(epochs=epochs, seed=seed, batch_size=batch_size))
    compat = res.best_model
    train = ds.items["train"]
    tp = ds.pair_data("train")
    m_prj = default_m_prj(compat, tp.xq, tp.xc, tp.labels, prj_scale)
    neg = ds.pairs["train"].labels < 0
    gdata = GanData.build(compat, train.flat(), train.lookup(ds.pairs["train"].query_ids[neg]),
                          train.lookup(ds.pairs["train"].candidate_ids[neg]))
    return ToySetup(spec, pts, labels, train, compat, gdata, m_prj, enc_ratio * m_prj)


def toy_gan_config(setup, **overrides):
    kw = dict(Z=20, K=setup.compat.config.K, N=setup.compat.config.N, sample_dim=2, hidden=(64, 64),
              output="linear", m_enc=setup.m_enc, m_prj=setup.m_prj)
    kw.update(overrides)
    return GanConfig(**kw)


def toy_gan_statistics(gan, setup, samples=500, seed=1):
    """Where G(z, E_k(x)) lands, measured through Q_0 and in sample space.

    Cluster centres in the compatibility space are the mean E_0 of each
    class's training items.
    """
    rng = np.random.default_rng(seed)
    e0, protos = setup.compat.encode(setup.train.flat())
    labels = setup.train.labels
    C = setup.spec.num_classes
    centers = np.stack([e0[labels == c].mean(axis=0) for c in range(C)])
    data_centers = np.stack([setup.points[setup.labels == c].mean(axis=0) for c in range(C)])
    xi = rng.integers(len(labels), size=samples)
    ks = rng.integers(gan.config.K, size=samples)
    z = rng.standard_normal((samples, gan.config.Z))
    out = gan.generate(z, protos[xi, ks])
    _, q0 = gan.discriminate(out)
    dist = np.linalg.norm(q0[:, None, :] - centers[None], axis=-1)
    comp = setup.spec.compatible(labels[xi][:, None], np.arange(C)[None, :])
    near_compat = (np.where(comp, dist, np.inf) <= gan.config.m_prj).any(axis=1)
    near_incompat = (np.where(~comp, dist, np.inf) <= gan.config.m_enc).any(axis=1)
    cluster = np.argmin(np.linalg.norm(out[:, None, :] - data_centers[None], axis=-1), axis=1)
    # same (x, z), every prototype: does the output cluster depend on k?
    per_k = []
    for k in range(gan.config.K):
        o = gan.generate(z, protos[xi, k])
        per_k.append(np.argmin(np.linalg.norm(o[:, None, :] - data_centers[None], axis=-1), axis=1))
    per_k = np.stack(per_k, axis=1)
    return {
        "within_m_prj_of_compatible": float(near_compat.mean()),
        "within_m_enc_of_incompatible": float(near_incompat.mean()),
        "sample_space_compatible": float(comp[np.arange(samples), cluster].mean()),
        "k_changes_cluster": float((per_k != per_k[:, :1]).any(axis=1).mean()),
    }


def write_rows_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(rows[0]))
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r.values()])
