"""Encoder/decoder power-flow networks, joint training and linear baselines.

The encoder maps z-scored power-flow inputs to z-scored ``[mu; omega]``.
Decoders map physical voltages ``[mu; omega]`` to physical injections
``[p; q]``; the reconstruction loss is taken on z-scored injections.
"""

from __future__ import annotations

import copy
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from .data import Dataset, Normalizer
from .nn import Adam, LossWeights, Mlp, load_arrays, save_arrays, sq_loss

__all__ = [
    "Bnn",
    "DivergedLoss",
    "History",
    "LinearModel",
    "MaskViolation",
    "MlpDecoder",
    "PgnnModel",
    "TrainConfig",
    "bnn_backward",
    "bnn_forward",
    "build_model",
    "fit_bnn",
    "fit_linear",
    "load_model",
    "make_decoder",
    "save_model",
    "train",
    "train_decoder",
]

log = logging.getLogger(__name__)


class DivergedLoss(RuntimeError):
    pass


class MaskViolation(AssertionError):
    pass


# --------------------------------------------------------------------------- bilinear decoder


def bnn_forward(w_g, w_b, b_p, b_q, mu, omega, mask=None):
    """Bilinear injection model.

    Row sums of ``S1 = (mu mu^T + om om^T) o W_G + (om mu^T - mu om^T) o W_B``
    and ``S2 = (om mu^T - mu om^T) o W_G - (mu mu^T + om om^T) o W_B`` plus
    biases.  With ``mask`` (adjacency) the maps are masked before summing.
    Batched over leading rows; the row sums are evaluated as matrix products.
    """
    if mask is not None:
        w_g, w_b = w_g * mask, w_b * mask
    g_mu, g_om = mu @ w_g.T, omega @ w_g.T
    b_mu, b_om = mu @ w_b.T, omega @ w_b.T
    y_p = mu * g_mu + omega * g_om + omega * b_mu - mu * b_om + b_p
    y_q = omega * g_mu - mu * g_om - mu * b_mu - omega * b_om + b_q
    return y_p, y_q, (mu, omega, g_mu, g_om, b_mu, b_om, w_g, w_b)


def bnn_backward(cache, grad_p, grad_q, mask=None):
    """Gradients ``(dW_G, dW_B, db_p, db_q, d_mu, d_omega)``, summed over batch rows.

    ``dy_p[i]/dW_G[i, k] = mu_i mu_k + om_i om_k``,
    ``dy_p[i]/dW_B[i, k] = om_i mu_k - mu_i om_k``, and likewise for ``y_q``
    with the roles exchanged and ``W_B`` negated.
    """
    mu, om, g_mu, g_om, b_mu, b_om, w_g, w_b = cache
    gp, gq = np.atleast_2d(grad_p), np.atleast_2d(grad_q)
    mu2, om2 = np.atleast_2d(mu), np.atleast_2d(om)
    gp_mu, gp_om = gp * mu2, gp * om2
    gq_mu, gq_om = gq * mu2, gq * om2
    d_wg = (gp_mu.T @ mu2 + gp_om.T @ om2 + gq_om.T @ mu2 - gq_mu.T @ om2)
    d_wb = (gp_om.T @ mu2 - gp_mu.T @ om2 - gq_mu.T @ mu2 - gq_om.T @ om2)
    if mask is not None:
        d_wg *= mask
        d_wb *= mask
    d_mu = (grad_p * (g_mu - b_om) + gp_mu @ w_g + gp_om @ w_b
            + gq_om @ w_g - grad_q * (g_om + b_mu) - gq_mu @ w_b)
    d_om = (grad_p * (g_om + b_mu) + gp_om @ w_g - gp_mu @ w_b
            + grad_q * (g_mu - b_om) - gq_mu @ w_g - gq_om @ w_b)
    if np.ndim(grad_p) == 1:
        d_mu, d_om = d_mu.reshape(-1), d_om.reshape(-1)
    db_p = gp.sum(axis=0)
    db_q = gq.sum(axis=0)
    return d_wg, d_wb, db_p, db_q, d_mu, d_om


class Bnn:
    """Bilinear decoder; with an adjacency ``mask`` it is the topology-pruned variant."""

    def __init__(self, n_bus: int, mask: np.ndarray | None = None, w_g=None, w_b=None):
        self.n = n_bus
        self.mask = None if mask is None else np.asarray(mask, dtype=float)
        self.w_g = np.zeros((n_bus, n_bus)) if w_g is None else np.array(w_g, dtype=float)
        self.w_b = np.zeros((n_bus, n_bus)) if w_b is None else np.array(w_b, dtype=float)
        self.b_p = np.zeros(n_bus)
        self.b_q = np.zeros(n_bus)
        if self.mask is not None:
            self.w_g *= self.mask
            self.w_b *= self.mask
            self._off = self.mask == 0

    kind = property(lambda self: "bnn" if self.mask is None else "tpbnn")

    @property
    def params(self):
        return [self.w_g, self.w_b, self.b_p, self.b_q]

    def check_mask(self):
        if self.mask is not None and (np.any(self.w_g[self._off]) or np.any(self.w_b[self._off])):
            raise MaskViolation("nonzero weight outside the adjacency pattern")

    def forward(self, v):
        self.check_mask()
        n = self.n
        y_p, y_q, cache = bnn_forward(self.w_g, self.w_b, self.b_p, self.b_q,
                                      v[..., :n], v[..., n:], self.mask)
        return np.concatenate([y_p, y_q], axis=-1), cache

    def backward(self, cache, grad_s):
        n = self.n
        d_wg, d_wb, db_p, db_q, d_mu, d_om = bnn_backward(cache, grad_s[..., :n], grad_s[..., n:],
                                                          self.mask)
        return np.concatenate([d_mu, d_om], axis=-1), [d_wg, d_wb, db_p, db_q]


class MlpDecoder:
    """Two tanh MLPs sharing the voltage input: one predicts p, the other q.

    Works on z-scored voltages and injections internally.
    """

    kind = "mlp"

    def __init__(self, n_bus: int, hidden, rng: np.random.Generator, v_norm: Normalizer,
                 s_norm: Normalizer):
        self.n = n_bus
        self.p_net = Mlp.build(2 * n_bus, hidden, n_bus, rng)
        self.q_net = Mlp.build(2 * n_bus, hidden, n_bus, rng)
        self.v_norm, self.s_norm = v_norm, s_norm

    @property
    def params(self):
        return self.p_net.params + self.q_net.params

    def forward(self, v):
        z = self.v_norm.transform(v)
        zp, cp = self.p_net.forward(z)
        zq, cq = self.q_net.forward(z)
        return self.s_norm.inverse(np.concatenate([zp, zq], axis=-1)), (cp, cq)

    def backward(self, cache, grad_s):
        cp, cq = cache
        gz = grad_s * self.s_norm.std
        n = self.n
        dz_p, gp = self.p_net.backward(cp, gz[..., :n])
        dz_q, gq = self.q_net.backward(cq, gz[..., n:])
        return (dz_p + dz_q) / self.v_norm.std, gp + gq


# --------------------------------------------------------------------------- full model


@dataclass
class TrainConfig:
    lr: float = 1e-3
    decoder_lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 32
    max_epochs: int = 2000
    patience: int = 50
    seed: int = 0


@dataclass
class History:
    """Per-epoch mean per-sample losses (z-scored units)."""

    train_sup: list = field(default_factory=list)
    train_unsup: list = field(default_factory=list)
    val_sup: list = field(default_factory=list)
    val_unsup: list = field(default_factory=list)
    best_val: list = field(default_factory=list)
    best_epoch: int = -1
    seconds: float = 0.0

    def to_csv(self) -> str:
        lines = ["epoch,train_sup,train_unsup,val_sup,val_unsup"]
        for e, row in enumerate(zip(self.train_sup, self.train_unsup, self.val_sup, self.val_unsup)):
            lines.append(",".join([str(e)] + [f"{v:.9g}" for v in row]))
        return "\n".join(lines) + "\n"


class PgnnModel:
    """MLP encoder with an optional injection-reconstructing decoder.

    ``decoder=None`` is the plain MLP solver.
    """

    def __init__(self, encoder: Mlp, decoder, weights: LossWeights, x_norm: Normalizer,
                 v_norm: Normalizer, s_norm: Normalizer):
        self.encoder = encoder
        self.decoder = decoder
        self.weights = weights
        self.x_norm, self.v_norm, self.s_norm = x_norm, v_norm, s_norm

    @property
    def kind(self) -> str:
        return "mlp" if self.decoder is None else f"mlp+{self.decoder.kind}"

    def encode(self, x_norm: np.ndarray) -> np.ndarray:
        """Normalized inputs to normalized ``[mu; omega]``."""
        return self.encoder(x_norm)

    def predict_v(self, x: np.ndarray) -> np.ndarray:
        """Physical inputs to physical ``[mu; omega]``."""
        return self.v_norm.inverse(self.encoder(self.x_norm.transform(x)))

    def predict_s(self, v: np.ndarray) -> np.ndarray:
        return self.decoder.forward(v)[0]

    def loss_and_grads(self, xz, vz, sz, need_grads=True):
        """Loss on a normalized batch; returns ``(total, sup, unsup, enc_grads, dec_grads)``.

        ``enc_grads``/``dec_grads`` are parameter gradients of the total loss.
        """
        y, enc_cache = self.encoder.forward(xz)
        sup, g_y = sq_loss(y, vz)
        g_y = self.weights.alpha_sup * g_y
        unsup = math.nan
        dec_grads = []
        if self.decoder is not None:
            v_phys = self.v_norm.inverse(y)
            s_phys, dec_cache = self.decoder.forward(v_phys)
            unsup, g_s = sq_loss(self.s_norm.transform(s_phys), sz)
            if need_grads:
                g_s = (self.weights.alpha_unsup * g_s) / self.s_norm.std
                g_v, dec_grads = self.decoder.backward(dec_cache, g_s)
                g_y = g_y + g_v * self.v_norm.std
        total = self.weights.alpha_sup * sup
        if self.decoder is not None:
            total += self.weights.alpha_unsup * unsup
        enc_grads = self.encoder.backward(enc_cache, g_y)[1] if need_grads else []
        return total, sup, unsup, enc_grads, dec_grads

    @property
    def param_groups(self):
        dec = [] if self.decoder is None else self.decoder.params
        return self.encoder.params, dec


def build_model(kind: str, train_ds: Dataset, seed: int, weights: LossWeights | None = None,
                hidden=(128, 128), decoder_hidden=(128,), adjacency=None) -> PgnnModel:
    """Fresh model of ``kind`` in {mlp, mlp+mlp, mlp+bnn, mlp+tpbnn}.

    Normalizers are fit on ``train_ds``.  Encoder and decoder are initialized
    from independent streams of ``seed`` so the encoder does not depend on the
    decoder choice.
    """
    enc_seq, dec_seq, _ = np.random.SeedSequence(seed).spawn(3)
    x_norm = Normalizer.fit(train_ds.x)
    v_norm = Normalizer.fit(train_ds.v)
    s_norm = Normalizer.fit(train_ds.s)
    n = train_ds.n_bus
    encoder = Mlp.build(train_ds.x.shape[1], hidden, 2 * n, np.random.default_rng(enc_seq))
    decoder = make_decoder(kind.removeprefix("mlp+") if kind != "mlp" else None, n,
                           np.random.default_rng(dec_seq), v_norm, s_norm, decoder_hidden, adjacency)
    return PgnnModel(encoder, decoder, weights or LossWeights(), x_norm, v_norm, s_norm)


def make_decoder(kind, n_bus, rng, v_norm, s_norm, hidden=(128,), adjacency=None):
    if kind is None:
        return None
    if kind == "mlp":
        return MlpDecoder(n_bus, hidden, rng, v_norm, s_norm)
    if kind == "bnn":
        return Bnn(n_bus)
    if kind == "tpbnn":
        if adjacency is None:
            raise ValueError("tpbnn needs the adjacency matrix")
        return Bnn(n_bus, mask=adjacency)
    raise ValueError(f"unknown decoder {kind!r}; expected mlp, bnn or tpbnn")


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def _snapshot(params):
    return [p.copy() for p in params]


def _restore(params, snap):
    for p, s in zip(params, snap):
        p[...] = s


def train(model: PgnnModel, train_ds: Dataset, val_ds: Dataset,
          config: TrainConfig | None = None) -> History:
    """Minimize ``alpha_sup * voltage loss + alpha_unsup * injection loss`` with Adam.

    Early-stops on the validation total loss and restores the best epoch's
    parameters.  Raises DivergedLoss on a non-finite training loss.
    """
    cfg = config or TrainConfig()
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    enc_p, dec_p = model.param_groups
    enc_opt = Adam(enc_p, cfg.lr, cfg.beta1, cfg.beta2)
    dec_opt = Adam(dec_p, cfg.decoder_lr, cfg.beta1, cfg.beta2) if dec_p else None
    xz = model.x_norm.transform(train_ds.x)
    vz = model.v_norm.transform(train_ds.v)
    sz = model.s_norm.transform(train_ds.s)
    vxz = model.x_norm.transform(val_ds.x)
    vvz = model.v_norm.transform(val_ds.v)
    vsz = model.s_norm.transform(val_ds.s)
    hist = History()
    best, best_snap, stale = math.inf, None, 0
    t0 = time.perf_counter()
    n = len(train_ds)
    for epoch in range(cfg.max_epochs):
        sums = np.zeros(2)
        for idx in _batches(n, cfg.batch_size, shuffle_rng):
            total, sup, unsup, g_enc, g_dec = model.loss_and_grads(xz[idx], vz[idx], sz[idx])
            if not math.isfinite(total):
                raise DivergedLoss(f"{model.kind}: non-finite loss at epoch {epoch} "
                                   f"(sup={sup}, unsup={unsup})")
            enc_opt.step(g_enc)
            if dec_opt is not None:
                dec_opt.step(g_dec)
            sums += len(idx) * np.array([sup, unsup])
        val_total, val_sup, val_unsup, _, _ = model.loss_and_grads(vxz, vvz, vsz, need_grads=False)
        hist.train_sup.append(sums[0] / n)
        hist.train_unsup.append(sums[1] / n)
        hist.val_sup.append(val_sup)
        hist.val_unsup.append(val_unsup)
        if val_total < best:
            best, stale, hist.best_epoch = val_total, 0, epoch
            best_snap = _snapshot(enc_p + dec_p)
        else:
            stale += 1
        hist.best_val.append(best)
        if stale >= cfg.patience:
            break
    if best_snap is not None:
        _restore(enc_p + dec_p, best_snap)
    hist.seconds = time.perf_counter() - t0
    log.info("%s seed %d: %d epochs, best %d, %.1fs", model.kind, cfg.seed, len(hist.val_sup),
             hist.best_epoch, hist.seconds)
    return hist


def train_decoder(decoder, s_norm: Normalizer, train_ds: Dataset, val_ds: Dataset,
                  config: TrainConfig | None = None) -> History:
    """Fit a decoder alone on (voltage -> injection) pairs, z-scored injection loss."""
    cfg = config or TrainConfig()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    params = decoder.params
    opt = Adam(params, cfg.decoder_lr, cfg.beta1, cfg.beta2)
    sz = s_norm.transform(train_ds.s)
    vsz = s_norm.transform(val_ds.s)
    hist = History()
    best, snap, stale = math.inf, None, 0
    t0 = time.perf_counter()
    n = len(train_ds)
    for epoch in range(cfg.max_epochs):
        acc = 0.0
        for idx in _batches(n, cfg.batch_size, rng):
            out, cache = decoder.forward(train_ds.v[idx])
            loss, g = sq_loss(s_norm.transform(out), sz[idx])
            if not math.isfinite(loss):
                raise DivergedLoss(f"{decoder.kind} decoder: non-finite loss at epoch {epoch}")
            opt.step(decoder.backward(cache, g / s_norm.std)[1])
            acc += loss * len(idx)
        val = sq_loss(s_norm.transform(decoder.forward(val_ds.v)[0]), vsz)[0]
        hist.train_sup.append(math.nan)
        hist.train_unsup.append(acc / n)
        hist.val_sup.append(math.nan)
        hist.val_unsup.append(val)
        if val < best:
            best, stale, hist.best_epoch, snap = val, 0, epoch, _snapshot(params)
        else:
            stale += 1
        hist.best_val.append(best)
        if stale >= cfg.patience:
            break
    _restore(params, snap)
    hist.seconds = time.perf_counter() - t0
    return hist


def fit_bnn(decoder: Bnn, train_ds: Dataset) -> float:
    """Set a bilinear decoder to the exact least-squares minimizer of its training loss.

    The decoder is linear in its parameters, and bus ``i``'s ``p_i``/``q_i``
    depend only on row ``i`` of ``W_G``/``W_B`` and the two biases, so each
    row is an independent least-squares problem (minimum-norm solution).
    Masked entries stay exactly zero.  Returns the mean per-sample training
    loss in physical units.
    """
    n = decoder.n
    mu, om = train_ds.v[:, :n], train_ds.v[:, n:]
    t = len(train_ds)
    one, zero = np.ones((t, 1)), np.zeros((t, 1))
    sse = 0.0
    for i in range(n):
        ks = np.arange(n) if decoder.mask is None else np.flatnonzero(decoder.mask[i])
        f1 = mu[:, [i]] * mu[:, ks] + om[:, [i]] * om[:, ks]
        f2 = om[:, [i]] * mu[:, ks] - mu[:, [i]] * om[:, ks]
        a = np.vstack([np.hstack([f1, f2, one, zero]), np.hstack([f2, -f1, zero, one])])
        rhs = np.concatenate([train_ds.s[:, i], train_ds.s[:, n + i]])
        theta, *_ = scipy.linalg.lstsq(a, rhs)
        m = len(ks)
        decoder.w_g[i, ks] = theta[:m]
        decoder.w_b[i, ks] = theta[m:2 * m]
        decoder.b_p[i], decoder.b_q[i] = theta[2 * m], theta[2 * m + 1]
        r = a @ theta - rhs
        sse += float(r @ r)
    decoder.check_mask()
    return sse / max(t, 1)


# --------------------------------------------------------------------------- linear baseline


@dataclass(eq=False)
class LinearModel:
    coef: np.ndarray
    intercept: np.ndarray
    ridge: float

    def predict(self, x):
        return x @ self.coef + self.intercept


def fit_linear(x: np.ndarray, y: np.ndarray, ridge: float = 1e-6) -> LinearModel:
    """Ridge least squares with an unpenalized intercept.

    If the normal matrix is numerically singular the ridge is raised tenfold
    until it is not, with a warning.
    """
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    xm, ym = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - xm, y - ym
    gram = xc.T @ xc
    rhs = xc.T @ yc
    lam = ridge
    eye = np.eye(gram.shape[0])
    while True:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
                coef = scipy.linalg.solve(gram + lam * eye, rhs, assume_a="pos")
            break
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning):
            lam = lam * 10 if lam > 0 else 1e-12
            warnings.warn(f"normal matrix singular; ridge raised to {lam:g}", RuntimeWarning)
    return LinearModel(coef, ym - xm @ coef, lam)


# --------------------------------------------------------------------------- checkpoints


def save_model(model: PgnnModel, path, config: TrainConfig | None = None) -> None:
    arrays = {}
    for i, layer in enumerate(model.encoder.layers):
        arrays[f"enc{i}_w"], arrays[f"enc{i}_b"] = layer.w, layer.bias
    for name, nrm in (("x", model.x_norm), ("v", model.v_norm), ("s", model.s_norm)):
        arrays[f"norm_{name}_mean"], arrays[f"norm_{name}_std"] = nrm.mean, nrm.std
    dec = model.decoder
    meta = {
        "kind": model.kind,
        "encoder": [[list(l.w.shape), l.activation] for l in model.encoder.layers],
        "weights": asdict(model.weights),
        "config": asdict(config) if config else None,
    }
    if isinstance(dec, Bnn):
        arrays.update(dec_w_g=dec.w_g, dec_w_b=dec.w_b, dec_b_p=dec.b_p, dec_b_q=dec.b_q)
        if dec.mask is not None:
            arrays["dec_mask"] = dec.mask
    elif isinstance(dec, MlpDecoder):
        for tag, net in (("p", dec.p_net), ("q", dec.q_net)):
            for i, layer in enumerate(net.layers):
                arrays[f"dec{tag}{i}_w"], arrays[f"dec{tag}{i}_b"] = layer.w, layer.bias
        meta["decoder_layers"] = len(dec.p_net.layers)
    save_arrays(path, arrays, meta)


def load_model(path) -> tuple[PgnnModel, dict]:
    from .nn import DenseLayer

    arrays, meta = load_arrays(path)
    layers = [DenseLayer(arrays[f"enc{i}_w"], arrays[f"enc{i}_b"], act)
              for i, (_, act) in enumerate(meta["encoder"])]
    norms = [Normalizer(arrays[f"norm_{k}_mean"], arrays[f"norm_{k}_std"]) for k in "xvs"]
    n = norms[1].mean.size // 2
    kind = meta["kind"]
    decoder = None
    if kind in ("mlp+bnn", "mlp+tpbnn"):
        decoder = Bnn(n, arrays.get("dec_mask"), arrays["dec_w_g"], arrays["dec_w_b"])
        decoder.b_p[...] = arrays["dec_b_p"]
        decoder.b_q[...] = arrays["dec_b_q"]
    elif kind == "mlp+mlp":
        decoder = MlpDecoder.__new__(MlpDecoder)
        decoder.n, decoder.v_norm, decoder.s_norm = n, norms[1], norms[2]
        k = meta["decoder_layers"]
        for tag in "pq":
            net = Mlp([DenseLayer(arrays[f"dec{tag}{i}_w"], arrays[f"dec{tag}{i}_b"],
                                  "identity" if i == k - 1 else "tanh") for i in range(k)])
            setattr(decoder, f"{tag}_net", net)
    model = PgnnModel(Mlp(layers), decoder, LossWeights(**meta["weights"]), *norms)
    return model, meta


def clone(model: PgnnModel) -> PgnnModel:
    return copy.deepcopy(model)
