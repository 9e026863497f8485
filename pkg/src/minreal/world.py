"""Learned dynamics p(s'|s,a) and reward p(r|s,a) as Gaussian-headed dense
networks trained by negative log-likelihood on (masked) latent states, plus
deterministic mean-propagation rollouts for planning.

rollout() accepts anything exposing dynamics_mean(s, a) and reward_mean(s, a)
over batched arrays, so analytic test models plug in directly.
"""

from __future__ import annotations

import dataclasses
import struct

import numpy as np

from . import autodiff as ad
from .errors import TrainingAbort
from .nets import (
    Adam,
    Mlp,
    MlpSpec,
    clamp_log_std_np,
    gaussian_log_prob_t,
    load_checkpoint,
    save_checkpoint,
)
from .latent import LatentMask, apply_mask

_WORLD_MAGIC = b"MRWORLD1"

# Hidden widths scale with the input so masking shrinks the whole network,
# not just its first layer (the planner's per-candidate cost then drops
# roughly quadratically with the kept state size).
HIDDEN_SCALE = 4


def default_hidden(state_dim, action_dim, scale=HIDDEN_SCALE):
    w = scale * (state_dim + action_dim)
    return (w, w)


class WorldModel:
    def __init__(self, state_dim, action_dim, dynamics: Mlp, reward: Mlp):
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        if dynamics.spec.in_dim != self.state_dim + self.action_dim:
            raise ValueError("dynamics input must be state_dim + action_dim")
        if dynamics.spec.out_dim != 2 * self.state_dim:
            raise ValueError("dynamics must output mean and log-std per state dim")
        if reward.spec.in_dim != self.state_dim + self.action_dim:
            raise ValueError("reward input must be state_dim + action_dim")
        if reward.spec.out_dim != 2:
            raise ValueError("reward must output a scalar mean and log-std")
        self.dynamics = dynamics
        self.reward = reward

    def parameter_count(self):
        return self.dynamics.parameter_count() + self.reward.parameter_count()

    def parameters(self):
        return list(self.dynamics.params) + list(self.reward.params)

    def _join(self, s, a):
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        if s.shape[1] != self.state_dim or a.shape[1] != self.action_dim:
            raise ValueError(
                f"expected state {self.state_dim} / action {self.action_dim}, "
                f"got {s.shape} / {a.shape}"
            )
        return np.hstack([s, a])

    def dynamics_params(self, s, a):
        out = self.dynamics.forward_np(self._join(s, a))
        return out[:, : self.state_dim], clamp_log_std_np(out[:, self.state_dim :])

    def reward_params(self, s, a):
        out = self.reward.forward_np(self._join(s, a))
        return out[:, 0], clamp_log_std_np(out[:, 1])

    def dynamics_mean(self, s, a):
        return self.dynamics_params(s, a)[0]

    def reward_mean(self, s, a):
        return self.reward_params(s, a)[0]


def build_world_model(
    state_dim,
    action_dim,
    dyn_hidden=None,
    rew_hidden=None,
    activation="tanh",
    normalization="layer_norm",
    seed=0,
) -> WorldModel:
    dyn_hidden = dyn_hidden or default_hidden(state_dim, action_dim)
    rew_hidden = rew_hidden or default_hidden(state_dim, action_dim)
    s_dyn, s_rew = np.random.SeedSequence(seed).spawn(2)
    dyn = Mlp(
        MlpSpec(
            (state_dim + action_dim, *dyn_hidden, 2 * state_dim),
            activation=activation,
            normalization=normalization,
        ),
        seed=s_dyn,
    )
    rew = Mlp(
        MlpSpec(
            (state_dim + action_dim, *rew_hidden, 2),
            activation=activation,
            normalization=normalization,
        ),
        seed=s_rew,
    )
    return WorldModel(state_dim, action_dim, dyn, rew)


@dataclasses.dataclass(frozen=True)
class WorldDataset:
    states: np.ndarray  # (N, S)
    actions: np.ndarray  # (N, A)
    next_states: np.ndarray  # (N, S)
    rewards: np.ndarray  # (N,)

    def __post_init__(self):
        n = self.states.shape[0]
        if not (self.actions.shape[0] == self.next_states.shape[0] == self.rewards.shape[0] == n):
            raise ValueError("inconsistent record counts")
        if self.states.shape[1] != self.next_states.shape[1]:
            raise ValueError("state and next_state widths differ")

    def __len__(self):
        return self.states.shape[0]

    @property
    def state_dim(self):
        return self.states.shape[1]

    @property
    def action_dim(self):
        return self.actions.shape[1]


def encode_dataset(vae, mask, transitions) -> WorldDataset:
    """Map raw transitions into latent space through the frozen encoder mean,
    optionally dropping masked-out dimensions."""
    if not transitions:
        raise ValueError("transition list must be nonempty")
    obs = np.stack([t.obs.vector() for t in transitions])
    nxt = np.stack([t.next_obs.vector() for t in transitions])
    s = vae.encode(obs).mean
    sp = vae.encode(nxt).mean
    if mask is not None:
        s = apply_mask(s, mask)
        sp = apply_mask(sp, mask)
    return WorldDataset(
        states=s,
        actions=np.stack([t.action for t in transitions]),
        next_states=sp,
        rewards=np.array([t.reward for t in transitions]),
    )


def wm_loss(model: WorldModel, batch: WorldDataset):
    """Mean over the batch of -log p(s'|s,a) - log p(r|s,a).

    Returns (loss tensor, (dynamics nll, reward nll) floats).
    """
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    x = np.hstack([batch.states, batch.actions])
    dyn_out = model.dynamics.forward(x)
    mean = ad.slice_cols(dyn_out, 0, model.state_dim)
    log_std = ad.clip(
        ad.slice_cols(dyn_out, model.state_dim, 2 * model.state_dim), -6.0, 2.0
    )
    dyn_lp = gaussian_log_prob_t(mean, log_std, batch.next_states)

    rew_out = model.reward.forward(x)
    r_mean = ad.slice_cols(rew_out, 0, 1)
    r_ls = ad.clip(ad.slice_cols(rew_out, 1, 2), -6.0, 2.0)
    rew_lp = gaussian_log_prob_t(r_mean, r_ls, batch.rewards[:, None])

    loss = ad.neg(ad.mean_all(ad.add(dyn_lp, rew_lp)))
    if not np.isfinite(loss.data):
        raise TrainingAbort("non-finite world-model loss")
    return loss, (-float(dyn_lp.data.mean()), -float(rew_lp.data.mean()))


def heldout_nll(model: WorldModel, ds: WorldDataset, dims=None):
    """Tape-free held-out NLL. Returns (total, dynamics, reward) means.

    dims optionally restricts the dynamics term to a subset of predicted
    state dimensions (for like-for-like comparisons across maskings).
    """
    mean, log_std = model.dynamics_params(ds.states, ds.actions)
    zn = (ds.next_states - mean) / np.exp(log_std)
    per_dim = -0.5 * zn**2 - log_std - 0.5 * np.log(2 * np.pi)
    if dims is not None:
        per_dim = per_dim[:, dims]
    dyn_nll = -float(per_dim.sum(axis=1).mean())
    r_mean, r_ls = model.reward_params(ds.states, ds.actions)
    zr = (ds.rewards - r_mean) / np.exp(r_ls)
    rew_nll = -float((-0.5 * zr**2 - r_ls - 0.5 * np.log(2 * np.pi)).mean())
    return dyn_nll + rew_nll, dyn_nll, rew_nll


def rollout(model, s0, actions, sample=False, rng=None):
    """Propagate dynamics means from s0 under an action sequence.

    Returns (states, reward_means), one entry per action; rewards are
    evaluated at the pre-transition pair. Empty actions give empty outputs.
    A non-finite prediction truncates the rollout; the remaining rewards are
    -inf markers.
    """
    s0 = np.asarray(s0, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    h = actions.shape[0]
    states = np.empty((h, s0.shape[-1]))
    rewards = np.full(h, -np.inf)
    s = np.atleast_2d(s0)
    for t in range(h):
        a = actions[t : t + 1]
        rewards[t] = float(model.reward_mean(s, a)[0])
        if sample:
            mean, log_std = model.dynamics_params(s, a)
            s = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        else:
            s = np.atleast_2d(model.dynamics_mean(s, a))
        states[t] = s[0]
        if not np.all(np.isfinite(s)) or not np.isfinite(rewards[t]):
            states[t:] = np.nan
            rewards[t:] = -np.inf
            return states, rewards
    return states, rewards


def rollout_batch(model, s0, action_seqs):
    """Vectorized mean-propagation rollout over K candidates.

    action_seqs is (K, L, A); returns total scores (K,), with -inf for
    candidates whose rollout left the finite range. Results are identical to
    K independent rollout() calls, reduced in candidate order.
    """
    action_seqs = np.asarray(action_seqs, dtype=np.float64)
    k, horizon, _ = action_seqs.shape
    s = np.tile(np.asarray(s0, dtype=np.float64)[None, :], (k, 1))
    scores = np.zeros(k)
    alive = np.ones(k, dtype=bool)
    for t in range(horizon):
        a = action_seqs[:, t, :]
        r = model.reward_mean(s, a)
        s = model.dynamics_mean(s, a)
        ok = np.isfinite(r) & np.all(np.isfinite(s), axis=1)
        alive &= ok
        scores = np.where(alive, scores + r, -np.inf)
    return scores


# --- training ----------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class WorldTrainConfig:
    epochs: int
    batch_size: int = 512
    seed: int = 0
    dynamics_learning_rate: float = 1e-3
    reward_learning_rate: float = 3e-4


def train_world(model: WorldModel, train_ds: WorldDataset, val_ds: WorldDataset,
                cfg: WorldTrainConfig, log_path=None, ckpt_path=None):
    """NLL training with per-epoch held-out reporting; deterministic per seed.

    Returns a list of per-epoch dicts (train/val total, dynamics, reward).
    """
    if len(train_ds) == 0:
        raise ValueError("training dataset must be nonempty")
    opt_dyn = Adam(model.dynamics.params, learning_rate=cfg.dynamics_learning_rate)
    opt_rew = Adam(model.reward.params, learning_rate=cfg.reward_learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x37D1]))
    n = len(train_ds)

    log_fh = open(log_path, "a") if log_path else None
    if log_fh and log_fh.tell() == 0:
        log_fh.write(
            "epoch\ttrain_total\ttrain_dyn\ttrain_rew\tval_total\tval_dyn\tval_rew\n"
        )

    records = []
    last_good = [p.data.copy() for p in model.parameters()]
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(n)
            dyn_sum = rew_sum = 0.0
            seen = 0
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                batch = WorldDataset(
                    states=train_ds.states[idx],
                    actions=train_ds.actions[idx],
                    next_states=train_ds.next_states[idx],
                    rewards=train_ds.rewards[idx],
                )
                loss, (dyn_nll, rew_nll) = wm_loss(model, batch)
                opt_dyn.zero_grad()
                opt_rew.zero_grad()
                ad.backward(loss)
                opt_dyn.step()
                opt_rew.step()
                dyn_sum += dyn_nll * idx.size
                rew_sum += rew_nll * idx.size
                seen += idx.size
            val_total, val_dyn, val_rew = heldout_nll(model, val_ds)
            rec = {
                "epoch": epoch,
                "train_dyn": dyn_sum / seen,
                "train_rew": rew_sum / seen,
                "train_total": (dyn_sum + rew_sum) / seen,
                "val_total": val_total,
                "val_dyn": val_dyn,
                "val_rew": val_rew,
            }
            records.append(rec)
            last_good = [p.data.copy() for p in model.parameters()]
            if log_fh:
                log_fh.write(
                    "\t".join(
                        [str(epoch)]
                        + [
                            f"{rec[k]:.17g}"
                            for k in ("train_total", "train_dyn", "train_rew",
                                      "val_total", "val_dyn", "val_rew")
                        ]
                    )
                    + "\n"
                )
                log_fh.flush()
    except TrainingAbort:
        for p, data in zip(model.parameters(), last_good):
            p.data = data
        if ckpt_path:
            save_world(ckpt_path, model)
        raise
    finally:
        if log_fh:
            log_fh.close()

    if ckpt_path:
        save_world(ckpt_path, model)
    return records


# --- persistence ---------------------------------------------------------


def save_world(path, model: WorldModel):
    header = {
        "kind": "world",
        "state_dim": model.state_dim,
        "action_dim": model.action_dim,
        "dynamics": model.dynamics.spec.to_dict(),
        "reward": model.reward.spec.to_dict(),
    }
    save_checkpoint(path, header, [p.data for p in model.parameters()])


def load_world(path) -> WorldModel:
    header, arrays = load_checkpoint(path)
    if header.get("kind") != "world":
        raise ValueError(f"{path} is not a world-model checkpoint")
    dyn = Mlp(MlpSpec.from_dict(header["dynamics"]), seed=0)
    rew = Mlp(MlpSpec.from_dict(header["reward"]), seed=0)
    model = WorldModel(header["state_dim"], header["action_dim"], dyn, rew)
    n_dyn = len(dyn.params)
    dyn.load_arrays(arrays[:n_dyn])
    rew.load_arrays(arrays[n_dyn:])
    return model


def save_world_dataset(path, ds: WorldDataset):
    """Binary: magic, int64 header (state_dim, action_dim, count), then flat
    little-endian float64 records (s, a, s', r)."""
    with open(path, "wb") as fh:
        fh.write(_WORLD_MAGIC)
        fh.write(struct.pack("<3q", ds.state_dim, ds.action_dim, len(ds)))
        flat = np.hstack(
            [ds.states, ds.actions, ds.next_states, ds.rewards[:, None]]
        )
        fh.write(np.ascontiguousarray(flat, dtype="<f8").tobytes())


def load_world_dataset(path) -> WorldDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(_WORLD_MAGIC)] != _WORLD_MAGIC:
        raise ValueError(f"{path} is not a world-dataset file")
    sd, adim, n = struct.unpack_from("<3q", raw, len(_WORLD_MAGIC))
    rec = 2 * sd + adim + 1
    data = np.frombuffer(raw, dtype="<f8", offset=len(_WORLD_MAGIC) + 24)
    if data.size != n * rec:
        raise ValueError(f"{path}: expected {n * rec} floats, got {data.size}")
    data = data.reshape(n, rec)
    return WorldDataset(
        states=data[:, :sd].copy(),
        actions=data[:, sd : sd + adim].copy(),
        next_states=data[:, sd + adim : 2 * sd + adim].copy(),
        rewards=data[:, -1].copy(),
    )
