"""Double-DQN agent: action space, reward, losses, exploration, replay.

The action space is 8 compass directions x 3 step sizes (1, 2, 3 mm) = 24
discrete options, indexed as direction*3 + (step_size - 1). Directions are
in the wall plane with x rightward and y upward; a diagonal step moves the
full step size along both axes.

Per-step state input is 23 scalars for vision variants (16 attention-point
or latent coordinates + 5 force/torque channels + wall displacement +
previous action index scaled to [0,1]) and 7 for the proprioceptive-only
variant, stacked over a window of 6 steps.
"""

from collections import OrderedDict, deque
from dataclasses import dataclass, field

import numpy as np

from pegrl import autograd as ag
from pegrl.autograd.tensor import Tensor
from pegrl.autoencoder import AutoEncoder, LATENT_WIDTH
from pegrl.errors import (
    ConfigError, DegenerateConfigError, DimensionError, NumericError, UsageError,
)
from pegrl.sap import SapNetwork
from pegrl.validation import DEFAULT_WINDOW, POINT_WIDTH

N_DIRECTIONS = 8
STEP_SIZES_MM = (1, 2, 3)
N_ACTIONS = N_DIRECTIONS * len(STEP_SIZES_MM)

DIRECTION_NAMES = ("up", "down", "left", "right",
                   "up_left", "up_right", "down_left", "down_right")
_DIR_VECTORS = np.array(
    [(0, 1), (0, -1), (-1, 0), (1, 0), (-1, 1), (1, 1), (-1, -1), (1, -1)],
    dtype=np.float64)

PER_STEP_PROPRIO = 7        # Fx Fy Fz Mx My Dz prev-action
PER_STEP_VISION = 16        # attention points or latent code

FORCE_SCALE_N = 30.0
MOMENT_SCALE_NM = 3.0
DZ_SCALE_MM = 10.0


@dataclass(frozen=True)
class Action:
    direction: int
    step_size: int

    def __post_init__(self):
        if not 0 <= self.direction < N_DIRECTIONS:
            raise UsageError(f"direction must be 0..{N_DIRECTIONS - 1}, got {self.direction}")
        if self.step_size not in STEP_SIZES_MM:
            raise UsageError(f"step size must be one of {STEP_SIZES_MM}, got {self.step_size}")

    @property
    def index(self):
        return self.direction * len(STEP_SIZES_MM) + (self.step_size - 1)

    @classmethod
    def from_index(cls, index):
        if not 0 <= index < N_ACTIONS:
            raise UsageError(f"action index must be 0..{N_ACTIONS - 1}, got {index}")
        return cls(index // len(STEP_SIZES_MM), index % len(STEP_SIZES_MM) + 1)

    @property
    def displacement_mm(self):
        return _DIR_VECTORS[self.direction] * self.step_size

    def __str__(self):
        return f"{DIRECTION_NAMES[self.direction]}:{self.step_size}mm"


# ---------------------------------------------------------------------------
# reward and schedules
# ---------------------------------------------------------------------------


def reward(found, terminal, d, d0, d_lim, r_fh=100.0):
    """Per-step reward: -1 while the episode continues; at the end, +r_fh on
    insertion, 0 when the peg ended no farther out than it started, and a
    penalty ramping to -r_fh at the distance limit otherwise. The penalty
    ratio is clamped to [0, 1] so the reward image stays within
    {-1} u [-r_fh, 0] u {r_fh} even for endings past the limit."""
    if not terminal:
        return -1.0
    if found:
        return float(r_fh)
    if d <= d0:
        return 0.0
    if d_lim == d0:
        raise DegenerateConfigError("distance limit equals the start distance; penalty slope undefined")
    ratio = min(1.0, max(0.0, (d - d0) / (d_lim - d0)))
    return float(-r_fh * ratio)


@dataclass(frozen=True)
class AnnealSchedule:
    tau_start: float = 100.0
    tau_end: float = 1.0
    tau_block: int = 50         # temperature held constant within a block
    tau_horizon: int = 2000     # episode at which tau reaches tau_end
    w_horizon: int = 1000       # loss weights move linearly over [0, w_horizon]
    wi_start: float = 0.0001
    wi_end: float = 0.1
    wp_start: float = 1.5
    wp_end: float = 1.0


def anneal(episode, schedule=AnnealSchedule()):
    """(tau, w_i, w_p) for a given episode index."""
    if episode < 0:
        raise UsageError(f"episode must be >= 0, got {episode}")
    s = schedule
    block = min(episode // s.tau_block * s.tau_block, s.tau_horizon)
    tau = s.tau_start * (s.tau_end / s.tau_start) ** (block / s.tau_horizon)
    frac = min(episode, s.w_horizon) / s.w_horizon
    w_i = s.wi_start + (s.wi_end - s.wi_start) * frac
    w_p = s.wp_start + (s.wp_end - s.wp_start) * frac
    return tau, w_i, w_p


# ---------------------------------------------------------------------------
# exploration
# ---------------------------------------------------------------------------


def boltzmann_probs(q, tau):
    """softmax(q / tau) with max subtraction."""
    if tau <= 0:
        raise UsageError(f"Boltzmann temperature must be > 0, got {tau}")
    q = np.asarray(q, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise NumericError("non-finite q values in Boltzmann policy")
    z = q / tau
    z -= z.max()
    p = np.exp(z)
    return p / p.sum()


def select_action(q, tau, rng):
    """Sample an action index from the Boltzmann distribution."""
    p = boltzmann_probs(q, tau)
    return int(rng.choice(len(p), p=p))


def greedy_action(q):
    """Argmax with lowest-index tie break."""
    q = np.asarray(q)
    if not np.all(np.isfinite(q)):
        raise NumericError("non-finite q values in greedy action selection")
    return int(np.argmax(q))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def td_targets(rewards, dones, q_next_main, q_next_target, gamma):
    """Double-DQN bootstrap targets: the main network picks the argmax
    action at s', the target network values it. Terminal transitions keep
    only the reward."""
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    a_star = np.argmax(q_next_main, axis=1)
    rows = np.arange(len(rewards))
    boot = q_next_target[rows, a_star]
    return rewards + gamma * np.where(dones, 0.0, boot)


def td_loss(q_s, action_indices, targets):
    """0.5 * mean squared TD error; targets carry no gradient."""
    if q_s.ndim != 2:
        raise DimensionError(f"td_loss expects q values [N,{N_ACTIONS}], got ndim={q_s.ndim}")
    n = q_s.shape[0]
    if n == 0:
        raise UsageError("td_loss needs a non-empty batch")
    picked = ag.gather_rows(q_s, action_indices)
    tgt = np.asarray(targets, dtype=q_s.dtype)
    return ag.mse(picked, tgt, normalizer=2.0 * n)


def point_loss(p, p_hat):
    """Mean squared distance between input points and predicted points,
    normalized by K*L (*batch)."""
    if p.shape != p_hat.shape:
        raise DimensionError(f"point loss shape mismatch {p.shape} vs {p_hat.shape}")
    return ag.mse(p_hat, p, normalizer=float(p.size))


def total_loss(j_i, j_q, j_p, w_i, w_p):
    """w_i * J_i + J_Q + w_p * J_p; missing heads pass None."""
    if w_i < 0 or w_p < 0:
        raise UsageError("loss weights must be >= 0")
    terms = [(1.0, j_q)]
    if j_i is not None:
        terms.insert(0, (float(w_i), j_i))
    if j_p is not None:
        terms.append((float(w_p), j_p))
    return ag.add_scalar_weighted(terms)


# ---------------------------------------------------------------------------
# proprioceptive encoding
# ---------------------------------------------------------------------------


def encode_proprio(ft, dz, prev_action):
    """Normalize one step of proprioceptive sensing to magnitudes <~ 1."""
    ft = np.asarray(ft, dtype=np.float32)
    if ft.shape != (5,):
        raise DimensionError(f"FT vector must have 5 channels, got {ft.shape}")
    out = np.empty(PER_STEP_PROPRIO, dtype=np.float32)
    out[0:3] = ft[0:3] / FORCE_SCALE_N
    out[3:5] = ft[3:5] / MOMENT_SCALE_NM
    out[5] = dz / DZ_SCALE_MM
    out[6] = prev_action / (N_ACTIONS - 1)
    return out


# ---------------------------------------------------------------------------
# replay buffer
# ---------------------------------------------------------------------------


@dataclass
class StepRecord:
    """One stored environment step: normalized proprio (7 floats), a frozen
    vision code for pre-trained encoders, and a key from which the noisy
    image can be re-materialized for end-to-end training."""
    proprio: np.ndarray
    vision: np.ndarray = None
    image_key: tuple = None


@dataclass
class Transition:
    episode_id: int
    step: int
    action: int
    reward: float
    done: bool


class ReplayBuffer:
    """FIFO transition store sampling uniformly with replacement.

    Observations are stored once per episode step; windows are assembled on
    demand and never straddle an episode boundary (the first observation is
    repeated to fill the left edge of early windows).
    """

    def __init__(self, capacity=50000, window=DEFAULT_WINDOW):
        self.capacity = capacity
        self.window = window
        self._episodes = {}
        self._refcount = {}
        self._transitions = deque()

    def __len__(self):
        return len(self._transitions)

    def start_episode(self, episode_id, first_record):
        if episode_id in self._episodes:
            raise UsageError(f"episode {episode_id} already started")
        # sweep episodes whose transitions were all evicted while they were live
        for eid in [e for e, n in self._refcount.items() if n == 0]:
            del self._episodes[eid]
            del self._refcount[eid]
        self._episodes[episode_id] = [first_record]
        self._refcount[episode_id] = 0

    def add_transition(self, episode_id, action, rew, done, next_record):
        records = self._episodes.get(episode_id)
        if records is None:
            raise UsageError(f"episode {episode_id} not started")
        t = len(records) - 1
        records.append(next_record)
        self._transitions.append(Transition(episode_id, t, action, rew, done))
        self._refcount[episode_id] += 1
        while len(self._transitions) > self.capacity:
            old = self._transitions.popleft()
            self._refcount[old.episode_id] -= 1
            if self._refcount[old.episode_id] == 0 and not self._is_live(old.episode_id):
                del self._episodes[old.episode_id]
                del self._refcount[old.episode_id]

    def _is_live(self, episode_id):
        # an episode still being written must keep its records
        return self._transitions and self._transitions[-1].episode_id == episode_id

    def window_indices(self, t):
        return [max(0, i) for i in range(t - self.window + 1, t + 1)]

    def window_records(self, episode_id, t):
        records = self._episodes[episode_id]
        return [records[i] for i in self.window_indices(t)]

    def sample(self, batch_size, rng):
        """batch_size transitions, uniform with replacement; None (a
        not-ready signal) while the buffer holds fewer than batch_size."""
        if len(self._transitions) < batch_size:
            return None
        idx = rng.integers(0, len(self._transitions), size=batch_size)
        return [self._transitions[int(i)] for i in idx]


# ---------------------------------------------------------------------------
# policy network and model variants
# ---------------------------------------------------------------------------


class PolicyNet:
    """Two hidden ReLU layers of 100 units; linear q head (24) and, for
    vision variants, a linear next-point prediction head (96)."""

    def __init__(self, in_width, point_width=None, hidden=100, seed=0,
                 dtype=np.float32, prefix="policy"):
        rng = np.random.default_rng(seed)
        self.in_width = in_width
        self.point_width = point_width

        def lin(shape, scale, name):
            return ag.Parameter((rng.standard_normal(shape) * scale).astype(dtype), name)

        self.w1 = lin((hidden, in_width), np.sqrt(2.0 / in_width), f"{prefix}.fc1.w")
        self.b1 = ag.Parameter(np.zeros(hidden, dtype=dtype), f"{prefix}.fc1.b")
        self.w2 = lin((hidden, hidden), np.sqrt(2.0 / hidden), f"{prefix}.fc2.w")
        self.b2 = ag.Parameter(np.zeros(hidden, dtype=dtype), f"{prefix}.fc2.b")
        self.wq = lin((N_ACTIONS, hidden), 0.01, f"{prefix}.q.w")
        self.bq = ag.Parameter(np.zeros(N_ACTIONS, dtype=dtype), f"{prefix}.q.b")
        if point_width is not None:
            self.wp = lin((point_width, hidden), 0.01, f"{prefix}.points.w")
            self.bp = ag.Parameter(np.full(point_width, 0.5, dtype=dtype), f"{prefix}.points.b")
        else:
            self.wp = self.bp = None

    def forward(self, state):
        """state: Tensor [N, in_width] -> (q [N,24], predicted points [N,point_width] | None)."""
        if state.shape[-1] != self.in_width:
            raise DimensionError(
                f"state width {state.shape[-1]} != expected {self.in_width} (feature axis)")
        h = ag.relu(ag.linear(state, self.w1, self.b1))
        h = ag.relu(ag.linear(h, self.w2, self.b2))
        q = ag.linear(h, self.wq, self.bq)
        pts = ag.linear(h, self.wp, self.bp) if self.wp is not None else None
        return q, pts

    def forward_np(self, state_np):
        q, _ = self.forward(Tensor(np.asarray(state_np, dtype=self.w1.dtype)))
        return q.data

    def parameters(self):
        ps = [self.w1, self.b1, self.w2, self.b2, self.wq, self.bq]
        if self.wp is not None:
            ps += [self.wp, self.bp]
        return ps

    def copy_from(self, other):
        for mine, theirs in zip(self.parameters(), other.parameters()):
            mine.data = theirs.data.copy()


VARIANTS = ("prl", "aerl", "saprl", "saprle")


class VariantModel:
    """One comparison model: an optional vision encoder plus the DDQN policy
    (main and target q networks)."""

    def __init__(self, kind, policy, target, sap=None, ae=None,
                 window=DEFAULT_WINDOW, vision_trainable=False):
        self.kind = kind
        self.policy = policy
        self.target = target
        self.sap = sap
        self.ae = ae
        self.window = window
        self.vision_trainable = vision_trainable

    @property
    def uses_vision(self):
        return self.kind != "prl"

    @property
    def per_step_width(self):
        return PER_STEP_PROPRIO + (PER_STEP_VISION if self.uses_vision else 0)

    @property
    def state_width(self):
        return self.per_step_width * self.window

    def vision_code_np(self, images):
        """[n,3,64,64] -> [n,16] without keeping a graph."""
        if self.sap is not None:
            return self.sap.points_np(images).reshape(len(images), PER_STEP_VISION)
        if self.ae is not None:
            return self.ae.latent_np(images)
        raise ConfigError(f"variant {self.kind!r} has no vision encoder")

    def q_values(self, state_np):
        return self.policy.forward_np(state_np)

    def trainable_parameters(self):
        ps = list(self.policy.parameters())
        if self.vision_trainable:
            ps += self.sap.parameters()
        return ps

    def checkpoint_parameters(self):
        """Everything needed to rebuild the model for evaluation/diagnostics."""
        ps = list(self.policy.parameters())
        if self.sap is not None:
            ps += self.sap.parameters()
        if self.ae is not None:
            ps += self.ae.parameters()
        return ps

    def sync_target(self):
        self.target.copy_from(self.policy)


def sync_target(model):
    """Copy the main q network's parameters into the target network."""
    model.sync_target()


class ImageNoiseBank:
    """Seeded bank of pre-scaled Gaussian noise patterns. Each training step
    stores a bank index with its observation, so the exact noisy image the
    agent saw can be rebuilt during replay updates without per-image RNG
    construction."""

    def __init__(self, sigma, seed, size=512):
        self.sigma = float(sigma)
        if sigma > 0:
            rng = np.random.default_rng(np.random.SeedSequence((int(seed), 424242)))
            from pegrl.validation import IMAGE_SHAPE
            self.patterns = sigma * rng.standard_normal(
                (size,) + IMAGE_SHAPE, dtype=np.float32)
        else:
            self.patterns = None

    def draw(self, rng):
        if self.patterns is None:
            return None
        return int(rng.integers(len(self.patterns)))

    def apply(self, base_image, idx):
        if idx is None or self.patterns is None:
            return base_image
        return np.clip(base_image + self.patterns[idx], 0.0, 1.0)


def observation_record(model, obs, noiser=None, proprio_sigma=0.0,
                       noise_rng=None, cell_index=None):
    """Turn an environment observation into the replay buffer's per-step
    record: normalized proprio (noise-augmented when training), the frozen
    or current vision code, and the (cell, noise-index) key from which the
    exact noisy image can be re-materialized during updates."""
    proprio = encode_proprio(obs.ft, obs.dz, obs.prev_action)
    image_key = None
    vision = None
    if model.uses_vision:
        img = obs.image
        if noiser is not None:
            idx = noiser.draw(noise_rng)
            image_key = (cell_index, idx)
            img = noiser.apply(obs.image, idx)
        elif cell_index is not None:
            image_key = (cell_index, None)
        vision = model.vision_code_np(img[None])[0].astype(np.float32)
    if proprio_sigma > 0:
        proprio = proprio.copy()
        proprio[:6] += proprio_sigma * noise_rng.standard_normal(6).astype(np.float32)
    return StepRecord(proprio=proprio, vision=vision, image_key=image_key)


def state_from_records(model, records):
    """Stack the last `window` step records into one state row; the first
    record is repeated to fill the left edge of young episodes."""
    window = model.window
    recs = list(records)[-window:]
    recs = [recs[0]] * (window - len(recs)) + recs
    parts = []
    for r in recs:
        if model.uses_vision:
            parts.append(r.vision)
        parts.append(r.proprio)
    return np.concatenate(parts).astype(np.float32)


def build_variant(kind, seed=0, window=DEFAULT_WINDOW, pretrained=None, dtype=np.float32):
    """Construct one of the four comparison models.

    prl     proprioceptive state only (7 x window inputs)
    aerl    frozen pre-trained autoencoder latent + proprio
    saprl   frozen pre-trained attention points + proprio
    saprle  fresh attention network wired into the policy graph, trained
            end to end by the composite loss
    """
    if kind not in VARIANTS:
        raise ConfigError(f"unknown variant {kind!r}; expected one of {VARIANTS}")
    sap = ae = None
    vision_trainable = False
    if kind == "prl":
        in_width = PER_STEP_PROPRIO * window
        point_width = None
    else:
        in_width = (PER_STEP_PROPRIO + PER_STEP_VISION) * window
        point_width = PER_STEP_VISION * window
        if kind == "saprle":
            sap = SapNetwork(seed=seed + 1, dtype=dtype)
            vision_trainable = True
        elif kind == "saprl":
            if not isinstance(pretrained, SapNetwork):
                raise ConfigError("saprl needs a pre-trained SapNetwork encoder")
            sap = pretrained
        elif kind == "aerl":
            if not isinstance(pretrained, AutoEncoder):
                raise ConfigError("aerl needs a pre-trained AutoEncoder")
            ae = pretrained
    assert PER_STEP_VISION == POINT_WIDTH == LATENT_WIDTH
    policy = PolicyNet(in_width, point_width=point_width, seed=seed, dtype=dtype)
    target = PolicyNet(in_width, point_width=point_width, seed=seed, dtype=dtype)
    model = VariantModel(kind, policy, target, sap=sap, ae=ae,
                         window=window, vision_trainable=vision_trainable)
    model.sync_target()
    return model
