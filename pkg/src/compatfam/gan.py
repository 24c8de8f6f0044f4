"""Metric-regularized conditional GAN driven by a frozen compatibility model."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .compat import PROB_FLOOR
from .train import AdamState, TrainConfig, adam_step

log = logging.getLogger(__name__)

LEAK = 0.2


class GradientLeakError(AssertionError):
    pass


@dataclass
class GanConfig:
    Z: int = 20
    K: int = 2
    N: int = 20
    sample_dim: int = 256
    hidden: tuple = (128, 128)
    output: str = "sigmoid"  # "sigmoid" for images in [0, 1], "linear" for the point toy
    lambda_gp: float = 0.5
    lambda_dra: float = 0.5
    m_enc: float = 0.1
    m_prj: float = 0.5
    learning_rate: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 64
    nonsaturating: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.Z < 1 or self.K < 1 or self.N < 1:
            raise ValueError("Z, K and N must be >= 1")
        if self.m_enc < 0 or self.m_prj < 0:
            raise ValueError("margins must be >= 0")
        if self.output not in ("sigmoid", "linear"):
            raise ValueError("output must be 'sigmoid' or 'linear'")
        if self.m_prj <= self.m_enc:
            log.warning("m_prj (%g) is not larger than m_enc (%g)", self.m_prj, self.m_enc)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def adam(self):
        return TrainConfig(learning_rate=self.learning_rate, beta1=self.beta1, beta2=self.beta2)


def _dense(rng, params, prefix, widths, last_scale=None):
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        scale = np.sqrt(2.0 / a) if last_scale is None or i < len(widths) - 2 else last_scale / np.sqrt(a)
        params[f"{prefix}.{i}.W"] = rng.normal(0, scale, (a, b))
        params[f"{prefix}.{i}.b"] = np.zeros(b)


class GanModel:
    """Generator G(z, cond) and a two-headed discriminator (D(y), Q_0(y))."""

    def __init__(self, config, params=None, seed=0):
        self.config = config
        self.params = params if params is not None else self._init(seed)

    def _init(self, seed):
        cfg = self.config
        rng = np.random.default_rng(seed)
        params = {}
        _dense(rng, params, "G", (cfg.Z + cfg.N,) + cfg.hidden + (cfg.sample_dim,), last_scale=1.0)
        _dense(rng, params, "D", (cfg.sample_dim,) + cfg.hidden)
        h = cfg.hidden[-1]
        params["D.real.W"] = rng.normal(0, 1.0 / np.sqrt(h), (h, 1))
        params["D.real.b"] = np.zeros(1)
        params["D.q0.W"] = rng.normal(0, 1.0 / np.sqrt(h), (h, cfg.N))
        params["D.q0.b"] = np.zeros(cfg.N)
        return params

    def copy(self):
        return GanModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def names(self, net):
        return [k for k in self.params if k.startswith(net + ".")]

    def tensors(self, track=()):
        return {k: ad.Tensor(v, requires_grad=k.split(".")[0] in track, name=k)
                for k, v in self.params.items()}

    def generate_graph(self, P, z, cond):
        h = ad.concat([ad.constant(z), ad.constant(cond)], axis=1)
        layers = len(self.config.hidden) + 1
        for i in range(layers):
            h = h @ P[f"G.{i}.W"] + P[f"G.{i}.b"]
            if i < layers - 1:
                h = ad.leaky_relu(h, LEAK)
        return ad.sigmoid(h) if self.config.output == "sigmoid" else h

    def discriminate_graph(self, P, y):
        """(probability real (B,), predicted latent Q_0 (B, N))."""
        h = ad.constant(y)
        for i in range(len(self.config.hidden)):
            h = ad.leaky_relu(h @ P[f"D.{i}.W"] + P[f"D.{i}.b"], LEAK)
        logit = h @ P["D.real.W"] + P["D.real.b"]
        q0 = h @ P["D.q0.W"] + P["D.q0.b"]
        return ad.sigmoid(logit.reshape(-1)), q0

    def generate(self, z, cond):
        with ad.no_grad():
            return self.generate_graph(self.tensors(), z, cond).data

    def discriminate(self, y):
        with ad.no_grad():
            prob, q0 = self.discriminate_graph(self.tensors(), y)
        return prob.data, q0.data

    def save(self, path, extra=None, extra_tensors=None):
        header = {"kind": "gan", "config": self.config.to_dict()}
        header.update(extra or {})
        tensors = dict(self.params)
        tensors.update(extra_tensors or {})
        checkpoint.save(path, header, tensors)

    @classmethod
    def load(cls, path):
        header, tensors = checkpoint.load(path)
        if header.get("kind") != "gan":
            raise checkpoint.CheckpointError(f"{path}: not a GAN checkpoint")
        model = cls(GanConfig(**header["config"]), params={})
        names = set(model._init(0))
        missing = names - set(tensors)
        if missing:
            raise checkpoint.CheckpointError(f"{path}: missing tensors {sorted(missing)}")
        model.params = {k: tensors[k] for k in names}
        return model, header


# -- loss pieces ------------------------------------------------------------------

def dragan_perturb(batch, lambda_dra, rng):
    """batch + lambda_dra * std(batch) * U[0, 1], one scalar std over all elements."""
    batch = np.asarray(batch, dtype=np.float64)
    return batch + lambda_dra * batch.std() * rng.uniform(0.0, 1.0, batch.shape)


def gradient_penalty(d_fn, y_hat, lambda_gp):
    """lambda_gp * mean_i (||grad_y D(y_i)|| - 1)^2, differentiable w.r.t. D's parameters."""
    y = ad.Tensor(y_hat, requires_grad=True)
    prob = d_fn(y)
    (g,) = ad.grad(prob.sum(), [y], create_graph=True)
    return lambda_gp * ((ad.norm(g, axis=1) - 1.0) ** 2).mean()


def margin_pull(v, q, margin):
    """Per-row max(0, ||v - q|| - margin)^2."""
    return ad.maximum(ad.norm(ad.constant(v) - q, axis=1) - margin, 0.0) ** 2


def margin_push(v, q, margin):
    """Per-row max(0, margin - ||v - q||)^2."""
    return ad.maximum(margin - ad.norm(ad.constant(v) - q, axis=1), 0.0) ** 2


def _neg_log(p):
    return -ad.log(ad.clip(p, PROB_FLOOR, 1 - PROB_FLOOR)).mean()


@dataclass
class GanBatch:
    """Conditioning data for one step, all taken from the frozen compatibility model."""

    y: np.ndarray  # real samples (B, sample_dim)
    e0_y: np.ndarray  # (B, N)
    protos_x: np.ndarray  # (Bx, K, N)
    neg_e0_y: np.ndarray  # (Bn, N) embeddings of the incompatible candidates
    neg_protos_x: np.ndarray  # (Bn, K, N) prototypes of their queries


def _frozen(values):
    arr = values.data if isinstance(values, ad.Tensor) else np.asarray(values)
    return np.array(arr, dtype=np.float64)


def make_batch(compat, y, x, neg_x, neg_y, compat_params=None):
    """Encode a step's items with the compatibility model and cut all gradient paths."""
    P = compat_params if compat_params is not None else compat.tensors()
    outs_y = compat.heads_graph(P, compat._flat(y))
    outs_x = compat.heads_graph(P, compat._flat(x))
    outs_nx = compat.heads_graph(P, compat._flat(neg_x))
    outs_ny = compat.heads_graph(P, compat._flat(neg_y))
    batch = GanBatch(
        y=np.asarray(y, dtype=np.float64).reshape(len(y), -1),
        e0_y=_frozen(outs_y[0]),
        protos_x=np.stack([_frozen(o) for o in outs_x[1:]], axis=1),
        neg_e0_y=_frozen(outs_ny[0]),
        neg_protos_x=np.stack([_frozen(o) for o in outs_nx[1:]], axis=1),
    )
    for name in ("e0_y", "protos_x", "neg_e0_y", "neg_protos_x"):
        if isinstance(getattr(batch, name), ad.Tensor):
            raise GradientLeakError(f"{name} still attached to the compatibility model")
    return batch


def _noise(rng, n, z_dim):
    return rng.standard_normal((n, z_dim))


def d_loss_graph(gan, P, batch, rng):
    """L_D = L_real + (L_enc + L_prj)/2 + L_gp + Omega_c; generator outputs are detached."""
    cfg = gan.config
    bx = len(batch.protos_x)
    with ad.no_grad():
        y_enc = gan.generate_graph(P, _noise(rng, len(batch.y), cfg.Z), batch.e0_y).data
        y_prj = gan.generate_graph(P, _noise(rng, bx * cfg.K, cfg.Z),
                                   batch.protos_x.reshape(bx * cfg.K, -1)).data
    prob_real, q0_real = gan.discriminate_graph(P, batch.y)
    l_real = _neg_log(prob_real)
    l_enc = _neg_log(1.0 - gan.discriminate_graph(P, y_enc)[0])
    l_prj = _neg_log(1.0 - gan.discriminate_graph(P, y_prj)[0])
    terms = {"L_real": l_real, "L_enc": l_enc, "L_prj": l_prj}
    total = l_real + 0.5 * (l_enc + l_prj)
    if cfg.lambda_gp > 0:
        y_hat = dragan_perturb(batch.y, cfg.lambda_dra, rng)
        l_gp = gradient_penalty(lambda y: gan.discriminate_graph(P, y)[0], y_hat, cfg.lambda_gp)
        total = total + l_gp
        terms["L_gp"] = l_gp
    omega_c = ((ad.constant(batch.e0_y) - q0_real) ** 2).sum(axis=1).mean()
    terms["Omega_c"] = omega_c
    return total + omega_c, terms


def g_loss_graph(gan, P, batch, rng):
    """L_G = -(L_enc + L_prj)/2 + Omega_enc + Omega_prj; discriminator parameters are constants."""
    cfg = gan.config
    DP = {k: (v.detach() if k.startswith("D.") else v) for k, v in P.items()}
    bx, bn = len(batch.protos_x), len(batch.neg_e0_y)
    y_enc = gan.generate_graph(DP, _noise(rng, len(batch.y), cfg.Z), batch.e0_y)
    y_prj = gan.generate_graph(DP, _noise(rng, bx * cfg.K, cfg.Z), batch.protos_x.reshape(bx * cfg.K, -1))
    prob_enc, q0_enc = gan.discriminate_graph(DP, y_enc)
    prob_prj, _ = gan.discriminate_graph(DP, y_prj)
    if cfg.nonsaturating:
        l_enc, l_prj = _neg_log(prob_enc), _neg_log(prob_prj)
        adv = 0.5 * (l_enc + l_prj)
    else:
        l_enc, l_prj = _neg_log(1.0 - prob_enc), _neg_log(1.0 - prob_prj)
        adv = -0.5 * (l_enc + l_prj)
    omega_enc = margin_pull(batch.e0_y, q0_enc, cfg.m_enc).mean()
    # every incompatible pair is paired with each of the query's K prototypes
    neg_cond = batch.neg_protos_x.reshape(bn * cfg.K, -1)
    neg_v = np.repeat(batch.neg_e0_y, cfg.K, axis=0)
    y_neg = gan.generate_graph(DP, _noise(rng, bn * cfg.K, cfg.Z), neg_cond)
    _, q0_neg = gan.discriminate_graph(DP, y_neg)
    omega_prj = margin_push(neg_v, q0_neg, cfg.m_prj).mean()
    terms = {"G_L_enc": l_enc, "G_L_prj": l_prj, "Omega_enc": omega_enc, "Omega_prj": omega_prj}
    return adv + omega_enc + omega_prj, terms


def gan_losses(gan, compat, y, x, neg_x, neg_y, rng, P=None, compat_params=None):
    """(L_G, L_D, terms) with all parameters live in one graph.

    ``P`` defaults to GAN tensors with every parameter tracked, so the
    detachment inside the two loss builders can be checked numerically.
    """
    P = P if P is not None else gan.tensors(track=("G", "D"))
    batch = make_batch(compat, y, x, neg_x, neg_y, compat_params)
    l_d, d_terms = d_loss_graph(gan, P, batch, rng)
    l_g, g_terms = g_loss_graph(gan, P, batch, rng)
    terms = {k: v.item() for k, v in {**d_terms, **g_terms}.items()}
    return l_g, l_d, terms


# -- training -------------------------------------------------------------------

@dataclass
class GanData:
    """Flat samples and their frozen compatibility-space codes."""

    samples: np.ndarray  # (n, sample_dim)
    e0: np.ndarray  # (n, N)
    protos: np.ndarray  # (n, K, N)
    neg_query: np.ndarray  # row indices of incompatible pairs
    neg_cand: np.ndarray

    @classmethod
    def build(cls, compat, samples, neg_query_rows, neg_cand_rows):
        samples = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
        e0, protos = compat.encode(samples)
        if protos is None:
            raise ValueError("the GAN needs a prototype (pcd) compatibility model")
        return cls(samples, e0, protos, np.asarray(neg_query_rows), np.asarray(neg_cand_rows))

    def batch(self, rng, size):
        yi = rng.integers(len(self.samples), size=size)
        xi = rng.integers(len(self.samples), size=size)
        ni = rng.integers(len(self.neg_query), size=size)
        q, c = self.neg_query[ni], self.neg_cand[ni]
        return GanBatch(self.samples[yi], self.e0[yi], self.protos[xi], self.e0[c], self.protos[q])


CURVE_FIELDS = ["step", "L_D", "L_G", "Omega_c", "Omega_enc", "Omega_prj", "L_gp"]


def default_m_prj(compat, query_samples, cand_samples, labels, scale=1.2):
    """scale times the mean compatibility-space distance ||mix - E_0(y)|| over positive pairs."""
    pos = np.asarray(labels) > 0
    d = compat.distance(np.asarray(query_samples)[pos], np.asarray(cand_samples)[pos])
    return float(scale * np.mean(np.sqrt(d)))


def train_mrcgan(gan, data, steps, seed=0, log_every=50, callback=None, snapshot_every=0, snapshot=None):
    """Alternate one discriminator step and one generator step per iteration.

    Returns (trained copy, curve rows). Aborts with NonFiniteError on NaN.
    ``snapshot(step, gan)`` runs every ``snapshot_every`` steps and must not
    touch the training RNG.
    """
    gan = gan.copy()
    cfg = gan.config
    opt = cfg.adam()
    rng = np.random.default_rng(seed)
    d_state, g_state = AdamState(), AdamState()
    d_names, g_names = gan.names("D"), gan.names("G")
    curve = []
    for step in range(1, steps + 1):
        batch = data.batch(rng, cfg.batch_size)
        P = gan.tensors(track=("D",))
        l_d, d_terms = d_loss_graph(gan, P, batch, rng)
        grads = ad.grad(l_d, [P[n] for n in d_names])
        adam_step(d_state, gan.params, {n: g.data for n, g in zip(d_names, grads)}, opt)

        P = gan.tensors(track=("G",))
        l_g, g_terms = g_loss_graph(gan, P, batch, rng)
        grads = ad.grad(l_g, [P[n] for n in g_names])
        adam_step(g_state, gan.params, {n: g.data for n, g in zip(g_names, grads)}, opt)

        if step == 1 or step % log_every == 0 or step == steps:
            row = {
                "step": step,
                "L_D": l_d.item(),
                "L_G": l_g.item(),
                "Omega_c": d_terms["Omega_c"].item(),
                "Omega_enc": g_terms["Omega_enc"].item(),
                "Omega_prj": g_terms["Omega_prj"].item(),
                "L_gp": d_terms["L_gp"].item() if "L_gp" in d_terms else 0.0,
            }
            curve.append(row)
            if callback:
                callback(row)
        if snapshot and snapshot_every and (step % snapshot_every == 0 or step == steps):
            snapshot(step, gan)
    return gan, curve


def sample_compatible(gan, compat, query, k, count, rng, style=False):
    """``count`` samples G(z, E_k(query)); with ``style`` the condition is E_0(query).

    Returns (count, sample_dim) arrays; image-mode samples lie in [0, 1].
    """
    if not style and not 1 <= k <= gan.config.K:
        raise ValueError(f"prototype index {k} outside 1..{gan.config.K}")
    e0, protos = compat.encode(np.asarray(query)[None])
    cond = e0[0] if style else protos[0, k - 1]
    z = _noise(rng, count, gan.config.Z)
    return gan.generate(z, np.repeat(cond[None], count, axis=0))


def write_curve_csv(curve, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        for row in curve:
            w.writerow([row["step"]] + [repr(float(row[k])) for k in CURVE_FIELDS[1:]])


def read_curve_csv(path):
    with open(path, newline="") as fh:
        return [{"step": int(r["step"]), **{k: float(r[k]) for k in CURVE_FIELDS[1:]}}
                for r in csv.DictReader(fh)]
