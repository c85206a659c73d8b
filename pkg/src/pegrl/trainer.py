"""Offline DRL training against a hole map.

One run is single-threaded and fully deterministic: a master seed fans out
into separate streams for initialization, start sampling, exploration,
replay sampling, and input noise. Training never touches the live world —
every observation comes from the map.
"""

import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from pegrl import agent as ag_mod
from pegrl import autograd as ag
from pegrl.agent import (
    AnnealSchedule, ImageNoiseBank, ReplayBuffer, anneal, build_variant,
    observation_record, point_loss, select_action, state_from_records,
    td_loss, td_targets, total_loss,
)
from pegrl.autoencoder import AutoEncoder
from pegrl.autograd.tensor import Tensor
from pegrl.errors import ConfigError, TrainingDiverged, UsageError
from pegrl.holemap import LABEL_SEARCHING, OfflineEnv
from pegrl.sap import SapNetwork
from pegrl.validation import DEFAULT_WINDOW, IMAGE_SHAPE

LOG_COLUMNS = ("episode", "steps", "cumulative_reward", "rolling100_reward",
               "tau", "w_i", "w_p", "J_i", "J_Q", "J_p")


@dataclass
class TrainConfig:
    variant: str = "saprle"
    episodes: int = 4000
    seed: int = 0
    window: int = DEFAULT_WINDOW
    batch_size: int = 32
    target_sync_period: int = 100      # episodes between target copies
    learning_rate: float = 0.001
    gamma: float = 0.99
    d_lim: float = 4.5
    r_found: float = 100.0
    step_limit: int = 100
    replay_capacity: int = 50000
    update_every: int = 4              # env steps per gradient update
    image_noise: float = 2.0 / 255.0
    proprio_noise: float = 0.01
    anneal: AnnealSchedule = field(default_factory=AnnealSchedule)
    pretrain_epochs: int = 50
    pretrain_batch: int = 32
    checkpoint_every: int = 250
    convergence_threshold: float = 96.0

    def to_dict(self):
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "anneal" in d and isinstance(d["anneal"], dict):
            d["anneal"] = AnnealSchedule(**d["anneal"])
        return cls(**d)


@dataclass
class TrainReport:
    rows: list
    convergence_episode: int = None
    wall_clock: dict = field(default_factory=dict)
    pretrain_losses: list = field(default_factory=list)

    def rewards(self):
        return np.array([r["cumulative_reward"] for r in self.rows])

    def rolling(self):
        return np.array([r["rolling100_reward"] for r in self.rows])

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write(",".join(LOG_COLUMNS) + "\n")
            for r in self.rows:
                f.write(",".join(_fmt(r[c]) for c in LOG_COLUMNS) + "\n")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def rolling_reward(values, window=100):
    """Trailing mean over at most `window` entries (fewer at the start)."""
    values = np.asarray(values, dtype=np.float64)
    out = np.empty_like(values)
    csum = np.cumsum(values)
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        total = csum[i] - (csum[lo - 1] if lo > 0 else 0.0)
        out[i] = total / (i - lo + 1)
    return out


def convergence_episode(rewards, threshold=96.0, window=100):
    """First episode whose rolling mean exceeds the threshold and never
    drops back below it; None when that never happens."""
    roll = rolling_reward(rewards, window)
    ok = roll > threshold
    sustained = np.logical_and.accumulate(ok[::-1])[::-1]
    idx = np.nonzero(sustained)[0]
    return int(idx[0]) if len(idx) else None


# ---------------------------------------------------------------------------
# encoder pre-training
# ---------------------------------------------------------------------------


def pretrain_encoder(kind, holemap, config=None, log_cb=None):
    """Reconstruction-only training of an AE or SAP on the map's images:
    current image in, current image out, no motion involved.

    Returns (network, per-epoch mean losses)."""
    config = config or TrainConfig()
    if kind not in ("ae", "sap"):
        raise ConfigError(f"pretrain kind must be 'ae' or 'sap', got {kind!r}")
    images = np.ascontiguousarray(
        holemap.images.reshape((-1,) + IMAGE_SHAPE), dtype=np.float32)
    n = len(images)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 77)))
    net = (AutoEncoder(seed=config.seed + 13) if kind == "ae"
           else SapNetwork(seed=config.seed + 13))
    opt = ag.Adam(net.parameters(), lr=config.learning_rate)
    losses = []
    for epoch in range(config.pretrain_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for lo in range(0, n, config.pretrain_batch):
            idx = order[lo:lo + config.pretrain_batch]
            clean = images[idx]
            noisy = clean
            if config.image_noise > 0:
                noisy = np.clip(
                    clean + config.image_noise
                    * rng.standard_normal(clean.shape, dtype=np.float32), 0.0, 1.0)
            x = Tensor(noisy)
            if kind == "ae":
                recon = net.reconstruct(x)
            else:
                pts, _ = net.encode_attention(x)
                feats = net.encode_features(x)
                recon = net.predict_image(pts, feats)
            loss = ag.mse(recon, clean, normalizer=float(clean.size))
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"{kind} pre-training loss became non-finite",
                                       snapshot={"epoch": epoch})
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            batches += 1
        losses.append(epoch_loss / batches)
        if log_cb:
            log_cb(f"pretrain {kind} epoch {epoch}: loss {losses[-1]:.5f}")
    return net, losses


# ---------------------------------------------------------------------------
# gradient updates
# ---------------------------------------------------------------------------


def _window_indices(t, window):
    return [max(0, i) for i in range(t - window + 1, t + 1)]


def _batch_windows(buffer, batch):
    """Window and next-window records per sampled transition."""
    wins, nexts = [], []
    for tr in batch:
        records = buffer._episodes[tr.episode_id]
        idx = _window_indices(tr.step, buffer.window)
        idx_next = _window_indices(tr.step + 1, buffer.window)
        wins.append([records[i] for i in idx])
        nexts.append([records[i] for i in idx_next])
    return wins, nexts


def _stack_states(model, wins):
    return np.stack([state_from_records(model, w) for w in wins])


class _Updater:
    """Owns the per-batch composite-loss update for one model."""

    def __init__(self, model, holemap, config, noiser):
        self.model = model
        self.config = config
        self.noiser = noiser
        self.opt = ag.Adam(model.trainable_parameters(), lr=config.learning_rate)
        self.flat_images = holemap.images.reshape((-1,) + IMAGE_SHAPE)

    def _materialize(self, keys):
        out = np.empty((len(keys),) + IMAGE_SHAPE, dtype=np.float32)
        for i, (cell, idx) in enumerate(keys):
            out[i] = self.noiser.apply(self.flat_images[cell], idx)
        return out

    def update(self, buffer, rng, w_i, w_p):
        batch = buffer.sample(self.config.batch_size, rng)
        if batch is None:
            return None
        wins, nexts = _batch_windows(buffer, batch)
        actions = np.array([tr.action for tr in batch], dtype=np.int64)
        rewards = np.array([tr.reward for tr in batch])
        dones = np.array([tr.done for tr in batch], dtype=bool)
        if self.model.kind == "saprle":
            return self._update_end_to_end(wins, nexts, actions, rewards, dones, w_i, w_p)
        return self._update_frozen(wins, nexts, actions, rewards, dones, w_p)

    def _finish(self, loss, j_i, j_q, j_p):
        if not np.isfinite(loss.data):
            norms = {p.name: float(np.linalg.norm(p.data))
                     for p in self.model.trainable_parameters()}
            raise TrainingDiverged(
                "training loss became non-finite",
                snapshot={"J_i": j_i, "J_Q": j_q, "J_p": j_p, "param_norms": norms})
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        return {"J_i": j_i, "J_Q": j_q, "J_p": j_p}

    def _update_frozen(self, wins, nexts, actions, rewards, dones, w_p):
        """prl / aerl / saprl: encoders are frozen (or absent), so states are
        plain arrays and only the policy trains."""
        model, cfg = self.model, self.config
        states = _stack_states(model, wins)
        next_states = _stack_states(model, nexts)
        q_next_main = model.policy.forward_np(next_states)
        q_next_target = model.target.forward_np(next_states)
        targets = td_targets(rewards, dones, q_next_main, q_next_target, cfg.gamma)

        q_s, p_hat = model.policy.forward(Tensor(states))
        j_q_t = td_loss(q_s, actions, targets)
        j_p_t = None
        if p_hat is not None:
            width = ag_mod.PER_STEP_VISION
            p_in = states.reshape(len(wins), model.window, model.per_step_width)[:, :, :width]
            j_p_t = point_loss(Tensor(p_in.reshape(len(wins), -1).copy()), p_hat)
        loss = total_loss(None, j_q_t, j_p_t, w_i=0.0, w_p=w_p)
        return self._finish(loss, None, float(j_q_t.data),
                            float(j_p_t.data) if j_p_t is not None else None)

    def _update_end_to_end(self, wins, nexts, actions, rewards, dones, w_i, w_p):
        """saprle: gradients reach the attention and feature encoders and the
        decoder through the composite loss."""
        model, cfg = self.model, self.config
        b = len(wins)
        window = model.window
        sap = model.sap

        keys = [r.image_key for w in wins for r in w]
        imgs = self._materialize(keys)                        # [B*L,3,64,64]
        new_keys = [w[-1].image_key for w in nexts]
        new_imgs = self._materialize(new_keys)                # [B,3,64,64]

        pts_t, _ = sap.encode_attention(Tensor(imgs))         # [B*L,8,2], with graph
        feats_t = sap.encode_features(Tensor(imgs))
        pts3 = ag.reshape(pts_t, (b, window, ag_mod.PER_STEP_VISION))

        proprio = np.stack([[r.proprio for r in w] for w in wins]).astype(np.float32)
        state_t = ag.reshape(ag.concat([pts3, Tensor(proprio)], axis=2),
                             (b, model.state_width))

        # next-state points: window slots shift left; only the newest image
        # needs a fresh encoding, and the TD target carries no gradient
        pts_np = pts_t.data.reshape(b, window, ag_mod.PER_STEP_VISION)
        new_pts = sap.points_np(new_imgs).reshape(b, 1, ag_mod.PER_STEP_VISION)
        next_vision = np.concatenate([pts_np[:, 1:], new_pts], axis=1)
        next_proprio = np.stack([[r.proprio for r in w] for w in nexts]).astype(np.float32)
        next_states = np.concatenate([next_vision, next_proprio], axis=2).reshape(
            b, model.state_width).astype(np.float32)

        q_next_main = model.policy.forward_np(next_states)
        q_next_target = model.target.forward_np(next_states)
        targets = td_targets(rewards, dones, q_next_main, q_next_target, cfg.gamma)

        q_s, p_hat = model.policy.forward(state_t)
        j_q_t = td_loss(q_s, actions, targets)
        j_p_t = point_loss(ag.reshape(pts3, (b, window * ag_mod.PER_STEP_VISION)), p_hat)

        # predicted points drive the heat maps that decode last step's
        # features into next step's image
        pred_pts = ag.reshape(p_hat, (b * window, ag_mod.PER_STEP_VISION // 2, 2))
        recon = sap.predict_image(pred_pts, feats_t)
        target_imgs = np.concatenate(
            [imgs.reshape(b, window, *IMAGE_SHAPE)[:, 1:], new_imgs[:, None]], axis=1)
        j_i_t = ag.mse(recon, target_imgs.reshape((b * window,) + IMAGE_SHAPE),
                       normalizer=float(recon.size))

        loss = total_loss(j_i_t, j_q_t, j_p_t, w_i=w_i, w_p=w_p)
        return self._finish(loss, float(j_i_t.data), float(j_q_t.data), float(j_p_t.data))


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------


def train(config, holemap, pretrained=None, out_dir=None, log_cb=None):
    """Run offline DRL per the configured variant; returns (model, report).

    pretrained: the frozen encoder for aerl/saprl (built by
    pretrain_encoder); banned for other variants.
    """
    t_start = time.perf_counter()
    if config.variant in ("aerl", "saprl") and pretrained is None:
        raise ConfigError(f"variant {config.variant!r} needs a pre-trained encoder")
    if config.variant in ("prl", "saprle") and pretrained is not None:
        raise ConfigError(f"variant {config.variant!r} does not take a pre-trained encoder")

    root = np.random.SeedSequence(config.seed)
    s_init, s_start, s_explore, s_sample, s_noise = root.spawn(5)
    model = build_variant(config.variant, seed=int(s_init.generate_state(1)[0]),
                          window=config.window, pretrained=pretrained)
    env = OfflineEnv(holemap, d_lim=config.d_lim, step_limit=config.step_limit,
                     r_found=config.r_found)
    starts = env.searching_positions()
    dists = np.hypot(starts[:, 0], starts[:, 1])
    starts = starts[dists < config.d_lim - 1e-9]   # keep Eq.-reward slope defined
    if len(starts) == 0:
        raise ConfigError("map has no interior searching cells to start from")

    rng_start = np.random.default_rng(s_start)
    rng_explore = np.random.default_rng(s_explore)
    rng_sample = np.random.default_rng(s_sample)
    rng_noise = np.random.default_rng(s_noise)

    buffer = ReplayBuffer(capacity=config.replay_capacity, window=config.window)
    noiser = ImageNoiseBank(config.image_noise, config.seed)
    updater = _Updater(model, holemap, config, noiser)
    grid_n = holemap.grid.points_per_axis

    rows = []
    rewards = []
    global_step = 0
    for episode in range(config.episodes):
        tau, w_i, w_p = anneal(episode, config.anneal)
        if episode > 0 and episode % config.target_sync_period == 0:
            model.sync_target()

        start = starts[rng_start.integers(len(starts))]
        obs = env.reset(start)
        cell = env.last_cell
        rec = observation_record(model, obs, noiser=noiser,
                                 proprio_sigma=config.proprio_noise,
                                 noise_rng=rng_noise,
                                 cell_index=cell.iy * grid_n + cell.ix)
        buffer.start_episode(episode, rec)
        records = [rec]

        ep_reward = 0.0
        losses = {"J_i": [], "J_Q": [], "J_p": []}
        while env.terminal is None:
            state = state_from_records(model, records)
            q = model.policy.forward_np(state[None])[0]
            a = select_action(q, tau, rng_explore)
            res = env.step(a)
            cell = env.last_cell
            rec = observation_record(model, res.observation, noiser=noiser,
                                     proprio_sigma=config.proprio_noise,
                                     noise_rng=rng_noise,
                                     cell_index=cell.iy * grid_n + cell.ix)
            buffer.add_transition(episode, a, res.reward, res.terminal is not None, rec)
            records.append(rec)
            ep_reward += res.reward
            global_step += 1
            if global_step % config.update_every == 0:
                out = updater.update(buffer, rng_sample, w_i, w_p)
                if out is not None:
                    for k, v in out.items():
                        if v is not None:
                            losses[k].append(v)

        rewards.append(ep_reward)
        roll = rewards[-100:]
        rows.append({
            "episode": episode,
            "steps": env.steps_taken,
            "cumulative_reward": ep_reward,
            "rolling100_reward": float(np.mean(roll)),
            "tau": tau, "w_i": w_i, "w_p": w_p,
            "J_i": float(np.mean(losses["J_i"])) if losses["J_i"] else None,
            "J_Q": float(np.mean(losses["J_Q"])) if losses["J_Q"] else None,
            "J_p": float(np.mean(losses["J_p"])) if losses["J_p"] else None,
        })
        if log_cb and (episode % 100 == 0 or episode == config.episodes - 1):
            log_cb(f"episode {episode}: rolling100 {rows[-1]['rolling100_reward']:.2f} "
                   f"steps {env.steps_taken} tau {tau:.2f}")
        if out_dir is not None and config.checkpoint_every > 0 \
                and episode > 0 and episode % config.checkpoint_every == 0:
            _save_model(model, f"{out_dir}/checkpoint_{episode:05d}.pegrl")

    report = TrainReport(
        rows=rows,
        convergence_episode=convergence_episode(
            rewards, threshold=config.convergence_threshold),
        wall_clock={"rl_train_s": time.perf_counter() - t_start},
    )
    if out_dir is not None:
        _save_model(model, f"{out_dir}/model.pegrl")
        report.write_csv(f"{out_dir}/train_log.csv")
        manifest = {
            "config": config.to_dict(),
            "map_hash": holemap.content_hash(),
            "convergence_episode": report.convergence_episode,
            "wall_clock": report.wall_clock,
        }
        with open(f"{out_dir}/manifest.json", "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
    return model, report


def _save_model(model, path):
    ag.save_checkpoint(path, model.kind, model.checkpoint_parameters())


def load_model(path, window=DEFAULT_WINDOW):
    """Rebuild a VariantModel from a checkpoint written by train()."""
    kind, params = ag.load_checkpoint(path)
    if kind == "saprl":
        pre = SapNetwork()
    elif kind == "aerl":
        pre = AutoEncoder()
    else:
        pre = None
    model = build_variant(kind, seed=0, window=window, pretrained=pre)
    ag.assign_parameters(model.checkpoint_parameters(), params)
    model.sync_target()
    return model
