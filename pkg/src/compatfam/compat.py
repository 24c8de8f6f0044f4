"""Compatibility family encoder and the projected compatibility distance."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint

PROB_FLOOR = 1e-12
LEAK = 0.2


@dataclass
class CompatConfig:
    K: int = 2
    N: int = 20
    trunk: tuple = (128, 64)
    lambda_m: float = 0.0
    mode: str = "pcd"
    input_dim: int = 256
    c_init: float = 1.0
    head_init: float = 0.1

    def __post_init__(self):
        self.trunk = tuple(int(w) for w in self.trunk)
        if self.mode not in ("pcd", "l2"):
            raise ValueError(f"mode must be 'pcd' or 'l2', got {self.mode!r}")
        if self.K < 1 or self.N < 1:
            raise ValueError("K and N must be >= 1")
        if self.lambda_m < 0:
            raise ValueError("lambda_m must be >= 0")

    @property
    def heads(self):
        return self.K + 1 if self.mode == "pcd" else 1

    @property
    def head_dim(self):
        # the symmetric baseline gets the same total latent budget
        return self.N if self.mode == "pcd" else (self.K + 1) * self.N

    def to_dict(self):
        d = asdict(self)
        d["trunk"] = list(self.trunk)
        return d


@dataclass
class FamilyEmbedding:
    e0: np.ndarray
    prototypes: np.ndarray  # (K, N)


class CompatModel:
    """Shared dense trunk (leaky ReLU) feeding K+1 affine heads, plus the sigmoid shift c."""

    def __init__(self, config, params=None, seed=0):
        self.config = config
        self.params = params if params is not None else self._init(seed)

    def _init(self, seed):
        rng = np.random.default_rng(seed)
        cfg = self.config
        params = {}
        widths = (cfg.input_dim,) + cfg.trunk
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            params[f"trunk.{i}.W"] = rng.normal(0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))
            params[f"trunk.{i}.b"] = np.zeros(fan_out)
        for k in range(cfg.heads):
            params[f"head.{k}.W"] = rng.normal(0, cfg.head_init / np.sqrt(widths[-1]), (widths[-1], cfg.head_dim))
            params[f"head.{k}.b"] = np.zeros(cfg.head_dim)
        params["c"] = np.array(cfg.c_init)
        return params

    def copy(self):
        return CompatModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def tensors(self, requires_grad=False):
        return {k: ad.Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()}

    def heads_graph(self, P, x):
        """Head outputs for a (B, input_dim) batch; index 0 is E_0."""
        h = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
        for i in range(len(self.config.trunk)):
            h = ad.leaky_relu(h @ P[f"trunk.{i}.W"] + P[f"trunk.{i}.b"], LEAK)
        return [h @ P[f"head.{k}.W"] + P[f"head.{k}.b"] for k in range(self.config.heads)]

    def _flat(self, images):
        x = np.asarray(images, dtype=np.float64)
        x = x.reshape(len(x), -1)
        if x.shape[1] != self.config.input_dim:
            raise ad.ShapeError(f"expected {self.config.input_dim} input values per item, got {x.shape[1]}")
        return x

    def encode(self, images):
        """(e0 (n, D), prototypes (n, K, N) or None in l2 mode) as arrays."""
        with ad.no_grad():
            outs = self.heads_graph(self.tensors(), self._flat(images))
        e0 = outs[0].data
        if self.config.mode == "l2":
            return e0, None
        return e0, np.stack([o.data for o in outs[1:]], axis=1)

    def encode_family(self, image):
        e0, protos = self.encode(np.asarray(image)[None])
        return FamilyEmbedding(e0[0], None if protos is None else protos[0])

    def distance(self, query_images, candidate_images):
        """Pairwise-aligned d(x_i, y_i) for two equally long batches."""
        eq, pq = self.encode(query_images)
        ec, _ = self.encode(candidate_images)
        if self.config.mode == "l2":
            return np.sum((eq - ec) ** 2, axis=1)
        return pcd(pq, ec)[0]

    def probability(self, query_images, candidate_images):
        return pair_probability(self.distance(query_images, candidate_images), float(self.params["c"]))

    def save(self, path, extra=None, extra_tensors=None):
        cfg = {"kind": "compat", "config": self.config.to_dict()}
        cfg.update(extra or {})
        tensors = dict(self.params)
        tensors.update(extra_tensors or {})
        checkpoint.save(path, cfg, tensors)

    @classmethod
    def load(cls, path):
        """Returns (model, header, extra tensors not belonging to the model)."""
        header, tensors = checkpoint.load(path)
        if header.get("kind") != "compat":
            raise checkpoint.CheckpointError(f"{path}: not a compatibility model checkpoint")
        model = cls(CompatConfig(**header["config"]), params={})
        expected = set(model._init(0))
        missing = expected - set(tensors)
        if missing:
            raise checkpoint.CheckpointError(f"{path}: missing tensors {sorted(missing)}")
        model.params = {k: tensors[k] for k in expected}
        extra = {k: v for k, v in tensors.items() if k not in expected}
        return model, header, extra


def pcd(prototypes, e0_y):
    """Projected compatibility distance for arrays.

    ``prototypes`` is (..., K, N) and ``e0_y`` is (..., N). Returns
    (d, d_k, w) where w are the softmin weights over the K prototypes.
    """
    prototypes = np.asarray(prototypes, dtype=np.float64)
    e0_y = np.asarray(e0_y, dtype=np.float64)
    diff = prototypes - e0_y[..., None, :]
    d_k = np.sum(diff * diff, axis=-1)
    e = np.exp(-(d_k - d_k.min(axis=-1, keepdims=True)))
    w = e / e.sum(axis=-1, keepdims=True)
    mix = np.sum(w[..., None] * prototypes, axis=-2)
    d = np.sum((mix - e0_y) ** 2, axis=-1)
    return d, d_k, w


def pcd_graph(prototypes, e0_y):
    """Tensor version of :func:`pcd` for a list of K (B, N) prototype batches."""
    d_k = ad.concat([((p - e0_y) ** 2).sum(axis=1, keepdims=True) for p in prototypes], axis=1)
    w = ad.softmin(d_k, axis=1)
    mix = prototypes[0] * w[:, 0:1]
    for k in range(1, len(prototypes)):
        mix = mix + prototypes[k] * w[:, k:k + 1]
    return ((mix - e0_y) ** 2).sum(axis=1), d_k


def pair_probability(d, c):
    """Shifted sigmoid 1 / (1 + exp(d - c)), evaluated without overflow."""
    z = np.asarray(c, dtype=np.float64) - np.asarray(d, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def distance_graph(model, P, xq, xc):
    """Per-pair distance tensor (B,) for query/candidate input batches."""
    b = len(xq)
    outs = model.heads_graph(P, np.concatenate([xq, xc], axis=0))
    if model.config.mode == "l2":
        e = outs[0]
        return ((e[:b] - e[b:]) ** 2).sum(axis=1)
    e0_y = outs[0][b:]
    d, _ = pcd_graph([o[:b] for o in outs[1:]], e0_y)
    return d


def loss_graph(model, P, xq, xc, labels, weights=None):
    """Cross-entropy on the shifted sigmoid plus lambda_m times the mean positive distance.

    Returns (loss tensor, breakdown dict). A missing positive or negative
    term is omitted and flagged in the breakdown.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty batch")
    weights = np.ones(len(labels)) if weights is None else np.asarray(weights, dtype=np.float64)
    d = distance_graph(model, P, model._flat(xq), model._flat(xc))
    c = P["c"]
    pos = np.flatnonzero(labels > 0)
    neg = np.flatnonzero(labels < 0)
    info = {"n_pos": len(pos), "n_neg": len(neg), "missing_pos": not len(pos), "missing_neg": not len(neg)}
    terms = []
    ce_pos = ce_neg = reg = None
    if len(pos):
        wp = weights[pos] / weights[pos].sum()
        d_pos = d[pos]
        p = ad.clip(ad.sigmoid(c - d_pos), PROB_FLOOR, 1 - PROB_FLOOR)
        ce_pos = -(ad.log(p) * wp).sum()
        terms.append(ce_pos)
        if model.config.lambda_m > 0:
            reg = model.config.lambda_m * (d_pos * wp).sum()
            terms.append(reg)
    if len(neg):
        wn = weights[neg] / weights[neg].sum()
        q = ad.clip(ad.sigmoid(d[neg] - c), PROB_FLOOR, 1 - PROB_FLOOR)
        ce_neg = -(ad.log(q) * wn).sum()
        terms.append(ce_neg)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    info["ce_pos"] = ce_pos.item() if ce_pos is not None else 0.0
    info["ce_neg"] = ce_neg.item() if ce_neg is not None else 0.0
    info["ce"] = info["ce_pos"] + info["ce_neg"]
    info["reg"] = reg.item() if reg is not None else 0.0
    info["total"] = total.item()
    return total, info


def batch_loss(model, xq, xc, labels, weights=None):
    """Loss value and breakdown for a batch of image pairs (no gradients)."""
    with ad.no_grad():
        _, info = loss_graph(model, model.tensors(), xq, xc, labels, weights)
    return info["total"], info


def loss_and_grads(model, xq, xc, labels, weights=None):
    P = model.tensors(requires_grad=True)
    loss, info = loss_graph(model, P, xq, xc, labels, weights)
    names = list(P)
    grads = ad.grad(loss, [P[n] for n in names])
    return info, {n: g.data for n, g in zip(names, grads)}


def export_embeddings_csv(model, items, path):
    """id,e0_0..e0_{N-1},p1_0..pK_{N-1} with floats written in round-trip form."""
    e0, protos = model.encode(items.images)
    n = e0.shape[1]
    header = ["id"] + [f"e0_{j}" for j in range(n)]
    if protos is not None:
        header += [f"p{k + 1}_{j}" for k in range(protos.shape[1]) for j in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, item_id in enumerate(items.ids):
            row = list(e0[i])
            if protos is not None:
                row += list(protos[i].reshape(-1))
            w.writerow([int(item_id)] + [repr(float(v)) for v in row])


def read_embeddings_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    ids = np.array([int(r[0]) for r in body], dtype=np.int64)
    values = np.array([[float(v) for v in r[1:]] for r in body]).reshape(len(body), len(header) - 1)
    return header, ids, values
