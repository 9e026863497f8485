"""The deformed variational objective with multi-class decoder decomposition,
its non-negativity bracket, and the training loop.

The objective maximized per sample z ~ p(z|x) is

    p(z)^(1-q) * sum_c zeta_c * p(x_<c|z)^(1-q_<c) * ln_{q_c} p(x_c|z)
    + beta * ln_q p(z) - gamma * ln_q p(z|x)

with every likelihood power formed as exp((1-q_j) * log p_j) under a shared
exponent clamp, and gradients kept through all factors. At q = 1 (with
gamma = beta) this is exactly the beta-VAE objective, so the standard and
beta baselines are the q = 1 branch of the same code path.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, TrainingAbort
from .nets import (
    Adam,
    Mlp,
    MlpSpec,
    cb_log_prob,
    cb_log_prob_t,
    gaussian_log_prob_t,
    load_checkpoint,
    reparam_sample,
    save_checkpoint,
)
from .tsallis import (
    DEFAULT_MAX_EXPONENT,
    LatentBelief,
    QParams,
    check_sparsity_condition,
)

CLASS_KINDS = ("diag_gaussian", "continuous_bernoulli")

# Pre-squash logits for continuous-Bernoulli heads are clamped here, keeping
# lambda in (3e-7, 1 - 3e-7) so its logs stay finite.
CB_LOGIT_CLAMP = 15.0


@dataclasses.dataclass(frozen=True)
class ObservationClass:
    name: str
    kind: str
    width: int

    def __post_init__(self):
        if self.kind not in CLASS_KINDS:
            raise ConfigError(f"unknown observation class kind {self.kind!r}")
        if self.width < 1:
            raise ConfigError(f"class width must be positive, got {self.width}")


def validate_classes(classes):
    classes = tuple(classes)
    if not classes:
        raise ConfigError("at least one observation class is required")
    widths = [c.width for c in classes]
    if any(a > b for a, b in zip(widths, widths[1:])):
        raise ConfigError(
            "observation classes must be ordered by nondecreasing width "
            f"(wider classes need larger q_c), got {widths}"
        )
    return classes


@dataclasses.dataclass
class LossBreakdown:
    total: float
    recon_per_class: list
    prior_term: float
    entropy_term: float
    bracket_min: float
    saturation_count: int


class QvaeModel:
    """Encoder + one decoder head per observation class + fixed standard
    normal prior over the latent space."""

    def __init__(self, classes, latent_dim, encoder, decoders, qparams: QParams):
        self.classes = validate_classes(classes)
        if len(self.classes) != qparams.n_classes:
            raise ConfigError(
                f"{len(self.classes)} observation classes but "
                f"{qparams.n_classes} class_qs"
            )
        self.latent_dim = int(latent_dim)
        self.encoder = encoder
        self.decoders = list(decoders)
        self.qparams = qparams
        self.obs_dim = sum(c.width for c in self.classes)
        if encoder.spec.in_dim != self.obs_dim:
            raise ConfigError(
                f"encoder input {encoder.spec.in_dim} != observation width {self.obs_dim}"
            )
        if encoder.spec.out_dim != 2 * self.latent_dim:
            raise ConfigError(
                f"encoder output {encoder.spec.out_dim} != 2*|Z| = {2 * self.latent_dim}"
            )
        for cls, dec in zip(self.classes, self.decoders):
            want = 2 * cls.width if cls.kind == "diag_gaussian" else cls.width
            if dec.spec.out_dim != want:
                raise ConfigError(
                    f"decoder for {cls.name!r} outputs {dec.spec.out_dim}, expected {want}"
                )
            if dec.spec.in_dim != self.latent_dim:
                raise ConfigError(f"decoder for {cls.name!r} does not take |Z| inputs")

    def parameters(self):
        out = list(self.encoder.params)
        for dec in self.decoders:
            out.extend(dec.params)
        return out

    def parameter_count(self):
        return sum(p.data.size for p in self.parameters())

    def split_observation(self, x):
        """Split (B, obs_dim) into per-class blocks."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.obs_dim:
            raise ValueError(f"expected observations of width {self.obs_dim}, got {x.shape}")
        blocks = []
        off = 0
        for cls in self.classes:
            blocks.append(x[:, off : off + cls.width])
            off += cls.width
        return x, blocks

    # -- inference (tape-free) ------------------------------------------

    def encode(self, x) -> LatentBelief:
        """Posterior belief over the latent space; deterministic."""
        x, _ = self.split_observation(x)
        out = self.encoder.forward_np(x)
        return LatentBelief(
            mean=out[:, : self.latent_dim], log_std=out[:, self.latent_dim :]
        )

    def decode(self, z):
        """Per-class decoder parameters at latent z: (mean, log_std) for
        Gaussian heads, lambda in (0, 1) for continuous-Bernoulli heads."""
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1:
            z = z[None, :]
        if z.shape[1] != self.latent_dim:
            raise ValueError(f"expected latent of width {self.latent_dim}, got {z.shape}")
        out = []
        for cls, dec in zip(self.classes, self.decoders):
            raw = dec.forward_np(z)
            if cls.kind == "diag_gaussian":
                mean = raw[:, : cls.width]
                log_std = np.clip(raw[:, cls.width :], -6.0, 2.0)
                out.append((mean, log_std))
            else:
                lam = 1.0 / (1.0 + np.exp(-np.clip(raw, -CB_LOGIT_CLAMP, CB_LOGIT_CLAMP)))
                out.append(lam)
        return out

    def reconstruct(self, x):
        """Point reconstruction through the encoder mean: decoder means for
        Gaussian classes, lambda for continuous-Bernoulli classes."""
        _, _ = self.split_observation(x)
        belief = self.encode(x)
        parts = []
        for cls, params in zip(self.classes, self.decode(belief.mean)):
            parts.append(params[0] if cls.kind == "diag_gaussian" else params)
        return np.concatenate(parts, axis=1)

    # -- graph paths ------------------------------------------------------

    def _encode_graph(self, x):
        out = self.encoder.forward(x)
        mean = ad.slice_cols(out, 0, self.latent_dim)
        log_std = ad.clip(
            ad.slice_cols(out, self.latent_dim, 2 * self.latent_dim), -6.0, 2.0
        )
        return mean, log_std

    def _class_log_prob_graph(self, index, z_t, x_block):
        cls = self.classes[index]
        raw = self.decoders[index].forward(z_t)
        if cls.kind == "diag_gaussian":
            mean = ad.slice_cols(raw, 0, cls.width)
            log_std = ad.clip(ad.slice_cols(raw, cls.width, 2 * cls.width), -6.0, 2.0)
            return gaussian_log_prob_t(mean, log_std, x_block)
        lam = ad.sigmoid(ad.clip(raw, -CB_LOGIT_CLAMP, CB_LOGIT_CLAMP))
        return cb_log_prob_t(lam, x_block)


def recon_mse(model: QvaeModel, x) -> float:
    """Mean squared reconstruction error per observation feature."""
    x, _ = model.split_observation(x)
    recon = model.reconstruct(x)
    return float(np.mean((recon - x) ** 2))


def _bracket_values(logps, qparams: QParams, max_exponent):
    """Per-sample bracketed reconstruction quantity (q < 1 only).

    logps: list of (B,) arrays of per-class log likelihoods.
    """
    q = qparams.q
    qs = (q,) + qparams.class_qs
    zs = (qparams.beta,) + qparams.class_weights
    n = qparams.n_classes
    b = logps[0].shape[0]
    out = np.zeros(b)
    log_prefix = np.zeros(b)
    for c in range(1, n + 1):
        gap = zs[c - 1] / (1.0 - qs[c - 1]) - zs[c] / (1.0 - qs[c])
        out += np.exp(log_prefix) * gap
        log_prefix = log_prefix + np.minimum((1.0 - qs[c]) * logps[c - 1], max_exponent)
    out += zs[n] / (1.0 - qs[n]) * np.exp(log_prefix)
    return out


def bracket_term(model: QvaeModel, x, z, qparams=None, max_exponent=DEFAULT_MAX_EXPONENT):
    """Evaluate the bracketed quantity at given observations and latents."""
    qparams = qparams or model.qparams
    if qparams.q == 1.0:
        raise ConfigError("the bracket is defined only for q < 1")
    _, blocks = model.split_observation(x)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    logps = []
    for i, (cls, params) in enumerate(zip(model.classes, model.decode(z))):
        if cls.kind == "diag_gaussian":
            mean, log_std = params
            zn = (blocks[i] - mean) / np.exp(log_std)
            lp = np.sum(-0.5 * zn * zn - log_std - 0.5 * np.log(2 * np.pi), axis=1)
        else:
            lp = np.atleast_1d(cb_log_prob(params, blocks[i]))
        logps.append(lp)
    return _bracket_values(logps, qparams, max_exponent)


def qvae_loss(
    model: QvaeModel,
    x,
    noise,
    qparams: QParams = None,
    unsafe=False,
    max_exponent=DEFAULT_MAX_EXPONENT,
):
    """Monte-Carlo estimate (one z per datum) of minus the objective.

    Returns (loss tensor, LossBreakdown). Raises ConfigError when the
    sparsification condition fails (unless unsafe=True, which also disables
    the bracket assertion) and TrainingAbort on non-finite values.
    """
    qparams = qparams or model.qparams
    report = check_sparsity_condition(qparams)
    if not report.satisfied and not unsafe:
        raise ConfigError(
            "sparsification condition violated: chain "
            f"{tuple(round(v, 6) for v in report.chain)} must be nonincreasing; "
            "pass unsafe=True to train anyway"
        )
    x, blocks = model.split_observation(x)
    if x.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    noise = np.asarray(noise, dtype=np.float64)

    mean_t, log_std_t = model._encode_graph(x)
    z_t = reparam_sample(mean_t, log_std_t, noise)

    log_pz = gaussian_log_prob_t(
        np.zeros((1, model.latent_dim)), np.zeros((1, model.latent_dim)), z_t
    )
    log_pzx = gaussian_log_prob_t(mean_t, log_std_t, z_t)
    log_pcs = [
        model._class_log_prob_graph(i, z_t, blocks[i]) for i in range(len(model.classes))
    ]

    q = qparams.q
    saturation = 0
    if q == 1.0:
        recon_terms = [ad.scale(lp, w) for lp, w in zip(log_pcs, qparams.class_weights)]
        prior_t = ad.scale(log_pz, qparams.beta)
        entropy_t = ad.scale(log_pzx, -qparams.gamma)
        bracket_min = float("nan")
    else:
        u_pz = ad.clip(ad.scale(log_pz, 1.0 - q), None, max_exponent)
        pz_pow = ad.exp(u_pz)
        lnq_pz = ad.scale(ad.expm1(u_pz), 1.0 / (1.0 - q))
        u_pzx = ad.clip(ad.scale(log_pzx, 1.0 - q), None, max_exponent)
        lnq_pzx = ad.scale(ad.expm1(u_pzx), 1.0 / (1.0 - q))
        saturation += int(np.count_nonzero((1.0 - q) * log_pz.data > max_exponent))
        saturation += int(np.count_nonzero((1.0 - q) * log_pzx.data > max_exponent))

        recon_terms = []
        prefix_t = None  # p(x_<c|z)^(1-q_<c), running product
        for c, (lp, qc, w) in enumerate(
            zip(log_pcs, qparams.class_qs, qparams.class_weights)
        ):
            u_c = ad.clip(ad.scale(lp, 1.0 - qc), None, max_exponent)
            saturation += int(np.count_nonzero((1.0 - qc) * lp.data > max_exponent))
            lnq_c = ad.scale(ad.expm1(u_c), 1.0 / (1.0 - qc))
            term = ad.scale(lnq_c, w)
            if prefix_t is not None:
                term = ad.mul(prefix_t, term)
            recon_terms.append(ad.mul(pz_pow, term))
            if c + 1 < len(log_pcs):
                pow_c = ad.exp(u_c)
                prefix_t = pow_c if prefix_t is None else ad.mul(prefix_t, pow_c)
        prior_t = ad.scale(lnq_pz, qparams.beta)
        entropy_t = ad.scale(lnq_pzx, -qparams.gamma)

        bracket = _bracket_values([lp.data for lp in log_pcs], qparams, max_exponent)
        bracket_min = float(bracket.min())
        if report.satisfied and not unsafe and bracket_min < 0.0:
            raise TrainingAbort(
                f"non-negativity bracket violated: min {bracket_min}",
                diagnostics={"bracket_min": bracket_min},
            )

    obj = recon_terms[0]
    for term in recon_terms[1:]:
        obj = ad.add(obj, term)
    obj = ad.add(ad.add(obj, prior_t), entropy_t)
    loss = ad.neg(ad.mean_all(obj))

    if not np.isfinite(loss.data):
        raise TrainingAbort(
            "non-finite loss",
            diagnostics={
                "saturation_count": saturation,
                "bracket_min": bracket_min,
                "log_pz_range": (float(log_pz.data.min()), float(log_pz.data.max())),
            },
        )

    breakdown = LossBreakdown(
        total=float(loss.data),
        recon_per_class=[float(t.data.mean()) for t in recon_terms],
        prior_term=float(prior_t.data.mean()),
        entropy_term=float(entropy_t.data.mean()),
        bracket_min=bracket_min,
        saturation_count=saturation,
    )
    return loss, breakdown


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 256
    seed: int = 0
    learning_rate: float = 1e-3
    unsafe: bool = False
    max_exponent: float = DEFAULT_MAX_EXPONENT


LOG_FIELDS = ("epoch", "total", "recon_c1", "recon_c2", "prior", "entropy",
              "bracket_min", "saturation_count")


def _format_log_row(values):
    return "\t".join(
        f"{v:d}" if isinstance(v, (int, np.integer)) else f"{v:.17g}" for v in values
    )


def train_qvae(model: QvaeModel, x_data, cfg: TrainConfig, log_path=None, ckpt_path=None):
    """Deterministic minibatch training; returns one aggregate LossBreakdown
    per epoch. Appends one record per epoch to log_path; writes a checkpoint
    at the end, or the last good parameters if the loss goes non-finite."""
    x_data, _ = model.split_observation(x_data)
    if x_data.shape[0] == 0:
        raise ValueError("dataset must be nonempty")
    report = check_sparsity_condition(model.qparams)
    if not report.satisfied and not cfg.unsafe:
        raise ConfigError(
            f"sparsification condition violated: chain {report.chain}; "
            "use the unsafe flag to override"
        )

    params = model.parameters()
    opt = Adam(params, learning_rate=cfg.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x71AE]))
    n = x_data.shape[0]
    n_classes = len(model.classes)

    log_fh = open(log_path, "a") if log_path else None
    if log_fh and log_fh.tell() == 0:
        fields = ["epoch", "total"]
        fields += [f"recon_c{i + 1}" for i in range(n_classes)]
        fields += ["prior", "entropy", "bracket_min", "saturation_count"]
        log_fh.write("\t".join(fields) + "\n")

    records = []
    last_good = [p.data.copy() for p in params]
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(n)
            tot = np.zeros(3 + n_classes)  # total, recon_c.., prior, entropy
            bracket_min = np.inf
            saturation = 0
            seen = 0
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                batch = x_data[idx]
                noise = rng.standard_normal((idx.size, model.latent_dim))
                try:
                    loss, bd = qvae_loss(
                        model, batch, noise, unsafe=cfg.unsafe,
                        max_exponent=cfg.max_exponent,
                    )
                except TrainingAbort as exc:
                    exc.diagnostics["epoch"] = epoch
                    raise
                opt.zero_grad()
                ad.backward(loss)
                opt.step()
                w = idx.size
                tot += w * np.array([bd.total, *bd.recon_per_class, bd.prior_term,
                                     bd.entropy_term])
                bracket_min = min(bracket_min, bd.bracket_min)
                saturation += bd.saturation_count
                seen += w
            tot /= seen
            record = LossBreakdown(
                total=float(tot[0]),
                recon_per_class=[float(v) for v in tot[1 : 1 + n_classes]],
                prior_term=float(tot[1 + n_classes]),
                entropy_term=float(tot[2 + n_classes]),
                bracket_min=float(bracket_min) if np.isfinite(bracket_min) else float("nan"),
                saturation_count=int(saturation),
            )
            records.append(record)
            last_good = [p.data.copy() for p in params]
            if log_fh:
                row = [epoch, record.total, *record.recon_per_class,
                       record.prior_term, record.entropy_term,
                       record.bracket_min, record.saturation_count]
                log_fh.write(_format_log_row(row) + "\n")
                log_fh.flush()
    except TrainingAbort:
        for p, data in zip(params, last_good):
            p.data = data
        if ckpt_path:
            save_qvae(ckpt_path, model)
        raise
    finally:
        if log_fh:
            log_fh.close()

    if ckpt_path:
        save_qvae(ckpt_path, model)
    return records


# --- model construction and persistence ------------------------------------


def build_qvae(
    classes,
    latent_dim,
    qparams: QParams,
    encoder_hidden=(128, 64),
    decoder_hidden=None,
    activation="swish",
    normalization="layer_norm",
    norm_position="post",
    seed=0,
) -> QvaeModel:
    """Construct encoder/decoder networks for the class layout.

    decoder_hidden is one width tuple per class; defaults to the reversed
    encoder widths for every class.
    """
    classes = validate_classes(classes)
    obs_dim = sum(c.width for c in classes)
    if decoder_hidden is None:
        decoder_hidden = [tuple(reversed(encoder_hidden))] * len(classes)
    seeds = np.random.SeedSequence(seed).spawn(1 + len(classes))
    enc_spec = MlpSpec(
        (obs_dim, *encoder_hidden, 2 * latent_dim),
        activation=activation,
        normalization=normalization,
        norm_position=norm_position,
    )
    encoder = Mlp(enc_spec, seed=seeds[0])
    decoders = []
    for cls, hidden, ss in zip(classes, decoder_hidden, seeds[1:]):
        out = 2 * cls.width if cls.kind == "diag_gaussian" else cls.width
        spec = MlpSpec(
            (latent_dim, *hidden, out),
            activation=activation,
            normalization=normalization,
            norm_position=norm_position,
        )
        decoders.append(Mlp(spec, seed=ss))
    return QvaeModel(classes, latent_dim, encoder, decoders, qparams)


def save_qvae(path, model: QvaeModel):
    header = {
        "kind": "qvae",
        "latent_dim": model.latent_dim,
        "classes": [
            {"name": c.name, "kind": c.kind, "width": c.width} for c in model.classes
        ],
        "encoder": model.encoder.spec.to_dict(),
        "decoders": [d.spec.to_dict() for d in model.decoders],
        "qparams": {
            "q": model.qparams.q,
            "class_qs": list(model.qparams.class_qs),
            "class_weights": list(model.qparams.class_weights),
            "beta": model.qparams.beta,
            "gamma": model.qparams.gamma,
        },
    }
    arrays = [p.data for p in model.parameters()]
    save_checkpoint(path, header, arrays)


def load_qvae(path) -> QvaeModel:
    header, arrays = load_checkpoint(path)
    if header.get("kind") != "qvae":
        raise ValueError(f"{path} is not a qvae checkpoint")
    classes = tuple(
        ObservationClass(name=c["name"], kind=c["kind"], width=c["width"])
        for c in header["classes"]
    )
    qp = header["qparams"]
    qparams = QParams(
        q=qp["q"],
        class_qs=tuple(qp["class_qs"]),
        class_weights=tuple(qp["class_weights"]),
        beta=qp["beta"],
        gamma=qp["gamma"],
    )
    encoder = Mlp(MlpSpec.from_dict(header["encoder"]), seed=0)
    decoders = [Mlp(MlpSpec.from_dict(d), seed=0) for d in header["decoders"]]
    model = QvaeModel(classes, header["latent_dim"], encoder, decoders, qparams)
    counts = [len(encoder.params)] + [len(d.params) for d in decoders]
    off = 0
    encoder.load_arrays(arrays[off : off + counts[0]])
    off += counts[0]
    for dec, cnt in zip(decoders, counts[1:]):
        dec.load_arrays(arrays[off : off + cnt])
        off += cnt
    return model
