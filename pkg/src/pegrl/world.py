"""Synthetic contact oracle standing in for the robot, wall, and camera.

Geometry lives in the wall plane, in millimetres, with the hole center at
the origin, x rightward and y upward. One search step is a hop: separate
from the wall, translate, press, sense. The camera rides the end effector,
so the peg silhouette is pinned to the image center and the hole disk moves
opposite the peg.

Every observation is a pure function of (world seed, episode key, step
index, peg position): there are no hidden RNG streams, which makes replays
and parallel evaluation bit-reproducible.
"""

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from pegrl.agent import Action, reward
from pegrl.errors import ConfigError, UsageError
from pegrl.validation import IMAGE_HW

LIGHTING_CONDITIONS = ("room", "left", "bottom")

TERMINAL_FOUND = "found"
TERMINAL_OUT_OF_BOUNDS = "out_of_bounds"
TERMINAL_STEP_LIMIT = "step_limit"


@dataclass(frozen=True)
class WorldSpec:
    hole_id: int = 1
    seed: int = 0
    lighting: str = "room"
    r_ins: float = 0.5            # insertion radius, mm
    r_ch: float = 2.5             # chamfer outer radius, mm
    d_lim: float = 4.5            # episode ends beyond this distance, mm
    step_limit: int = 100
    r_found: float = 100.0        # reward on insertion
    dz_max: float = 3.0           # wall displacement at the hole edge, mm
    dz_inserted: float = 10.0
    fz_contact: float = 25.0      # press force against the wall, N
    lateral_gain: float = 4.0     # N per mm of chamfer engagement
    lever_arm_m: float = 0.05     # moment arm for Mx/My
    pixel_scale: float = 3.0      # px per mm
    hole_radius_vis: float = 2.0  # visual hole radius, mm
    peg_radius_vis: float = 1.8
    hole_darkness: float = 0.12
    force_noise: float = 0.05     # log-normal sigma on FT channels
    texture_contrast: float = 1.0
    shadow_jitter: float = 0.0    # relative shadow-darkness offset, within +-0.1

    def __post_init__(self):
        if not 0 < self.r_ins < self.r_ch:
            raise ConfigError(f"need 0 < r_ins < r_ch, got {self.r_ins}, {self.r_ch}")
        if self.pixel_scale <= 0:
            raise ConfigError("pixel scale must be > 0")
        if self.lighting not in LIGHTING_CONDITIONS:
            raise ConfigError(f"lighting must be one of {LIGHTING_CONDITIONS}, got {self.lighting!r}")

    def with_lighting(self, lighting):
        return replace(self, lighting=lighting)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class PegState:
    pos: np.ndarray               # (x, y) mm relative to the hole center
    in_contact: bool = False
    inserted: bool = False

    @property
    def distance(self):
        return float(np.hypot(self.pos[0], self.pos[1]))


@dataclass
class Observation:
    image: np.ndarray             # [3,64,64] float32 in [0,1]
    ft: np.ndarray                # (Fx, Fy, Fz, Mx, My) N and N*m
    dz: float                     # wall-normal displacement, mm
    prev_action: int


@dataclass
class StepResult:
    observation: Observation
    reward: float
    terminal: str = None          # None | found | out_of_bounds | step_limit


# ---------------------------------------------------------------------------
# deterministic hashing / procedural texture
# ---------------------------------------------------------------------------

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xBF58476D1CE4E5B9)


def _hash01(ix, iy, seed):
    """Lattice hash -> floats in [0,1); vectorized, pure."""
    seed_mix = np.uint64((int(seed) * 0x94D049BB133111EB) % (1 << 64))
    h = (ix.astype(np.uint64) * _M1) ^ (iy.astype(np.uint64) * _M2)
    h ^= seed_mix
    h ^= h >> np.uint64(30)
    h *= _M2
    h ^= h >> np.uint64(27)
    h *= _M1
    h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def _value_noise(wx, wy, pitch, seed):
    """Smooth value noise over a world-anchored lattice."""
    gx = wx / pitch
    gy = wy / pitch
    ix = np.floor(gx)
    iy = np.floor(gy)
    fx = gx - ix
    fy = gy - iy
    ix = ix.astype(np.int64) + (1 << 20)    # keep lattice indices positive
    iy = iy.astype(np.int64) + (1 << 20)
    ux = fx * fx * (3.0 - 2.0 * fx)
    uy = fy * fy * (3.0 - 2.0 * fy)
    v00 = _hash01(ix, iy, seed)
    v10 = _hash01(ix + 1, iy, seed)
    v01 = _hash01(ix, iy + 1, seed)
    v11 = _hash01(ix + 1, iy + 1, seed)
    return (v00 * (1 - ux) + v10 * ux) * (1 - uy) + (v01 * (1 - ux) + v11 * ux) * uy


def _rng_for(spec_seed, salt, episode_key, step_index, pos):
    qx = int(round((pos[0] + 1000.0) * 1000.0))
    qy = int(round((pos[1] + 1000.0) * 1000.0))
    entropy = (spec_seed & 0xFFFFFFFF, salt, *episode_key, step_index, qx, qy)
    return np.random.default_rng(np.random.SeedSequence(entropy))


# ---------------------------------------------------------------------------
# sensing
# ---------------------------------------------------------------------------


def sense_proprio(spec, pos, inserted=False, step_index=0, episode_key=(), noise=True):
    """(FT, D_z) for a peg pressed against the wall at pos.

    Wall displacement rises linearly as the peg slides down the chamfer and
    jumps to dz_inserted on insertion; lateral force points from the peg
    toward the hole center inside the chamfer annulus and vanishes outside;
    moments follow the lateral force through a lever arm. FT channels carry
    multiplicative log-normal noise (concrete inconsistency).
    """
    pos = np.asarray(pos, dtype=np.float64)
    d = float(np.hypot(pos[0], pos[1]))
    if inserted:
        fz = spec.fz_contact
        ft = np.array([0.0, 0.0, fz, 0.0, 0.0])
        dz = spec.dz_inserted
    else:
        if d >= spec.r_ch:
            lat = np.zeros(2)
            dz = 0.0
        else:
            engage = spec.r_ch - d
            lat = spec.lateral_gain * engage * (-pos / d)
            dz = min(spec.dz_max, spec.dz_max * engage / (spec.r_ch - spec.r_ins))
        mx = -spec.lever_arm_m * lat[1]
        my = spec.lever_arm_m * lat[0]
        ft = np.array([lat[0], lat[1], spec.fz_contact, mx, my])
    if noise and spec.force_noise > 0:
        rng = _rng_for(spec.seed, 11, episode_key, step_index, pos)
        ft = ft * np.exp(spec.force_noise * rng.standard_normal(5))
        if inserted:
            # detection rule needs Fz > 20 N whenever the peg is in the hole
            ft[2] = max(ft[2], 21.0)
    return ft.astype(np.float32), float(dz)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

_TINT = np.array([1.00, 0.97, 0.92])        # warm concrete
_HOLE_TINT = np.array([0.92, 0.96, 1.06])   # cold dark hole
_PEG_TINT = np.array([0.97, 0.985, 1.0])

_pix = np.arange(IMAGE_HW, dtype=np.float64)
_CENTER = (IMAGE_HW - 1) / 2.0
_ROWS, _COLS = np.meshgrid(_pix, _pix, indexing="ij")
_OX = _COLS - _CENTER                        # px, rightward
_OY = _ROWS - _CENTER                        # px, downward


def _smooth01(x):
    return np.clip(x, 0.0, 1.0)


def _shadow_alpha(spec):
    """Fixed image-space crescent hugging the peg on the side away from the
    light; None under room lighting."""
    if spec.lighting == "room":
        return None
    # light from the left casts right; light from below casts up (row < center)
    dx, dy = (1.0, 0.0) if spec.lighting == "left" else (0.0, -1.0)
    s = spec.pixel_scale
    peg_px = spec.peg_radius_vis * s
    # shifted disk minus the peg disk, limited to the away half-plane
    cx, cy = dx * peg_px * 0.9, dy * peg_px * 0.9
    d_sh = np.hypot(_OX - cx, _OY - cy)
    d_peg = np.hypot(_OX, _OY)
    outer = _smooth01((peg_px * 1.55 - d_sh) / (0.12 * s))
    inner = _smooth01((d_peg - peg_px * 0.98) / (0.10 * s))
    along = _smooth01((_OX * dx + _OY * dy) / (0.5 * s))
    return (outer * inner * along).astype(np.float64)


def hole_center_px(spec, pos):
    """(col, row) image position of the hole center for a peg at pos."""
    return (_CENTER - pos[0] * spec.pixel_scale,
            _CENTER + pos[1] * spec.pixel_scale)


def render(spec, pos, inserted=False):
    """64x64 RGB view around the peg tip; deterministic in (spec, pos)."""
    pos = np.asarray(pos, dtype=np.float64)
    s = spec.pixel_scale
    wx = pos[0] + _OX / s                    # world mm per pixel
    wy = pos[1] - _OY / s

    tex = (0.55 * _value_noise(wx, wy, 2.1, spec.seed)
           + 0.30 * _value_noise(wx, wy, 0.73, spec.seed + 101)
           + 0.15 * _value_noise(wx, wy, 0.27, spec.seed + 202))
    gray = 0.52 + 0.20 * spec.texture_contrast * (2.0 * tex - 1.0)
    img = gray[None, :, :] * _TINT[:, None, None]

    dmm = np.hypot(wx, wy)                   # distance to hole center, mm

    # chamfer: brightness falls toward the hole edge
    ring = (dmm > spec.hole_radius_vis) & (dmm <= spec.r_ch)
    if ring.any():
        t = (dmm - spec.hole_radius_vis) / (spec.r_ch - spec.hole_radius_vis)
        shade = 0.55 + 0.45 * np.clip(t, 0.0, 1.0)
        img = img * np.where(ring, shade, 1.0)[None, :, :]

    # hole disk with a slightly soft edge
    hole_a = _smooth01((spec.hole_radius_vis - dmm) / 0.15)
    hole_rgb = (spec.hole_darkness * _HOLE_TINT)[:, None, None]
    img = img * (1.0 - hole_a) + hole_rgb * hole_a

    # misleading shadow, matched to the hole's darkness
    alpha = _shadow_alpha(spec)
    if alpha is not None:
        sh_rgb = (spec.hole_darkness * (1.0 + spec.shadow_jitter) * _HOLE_TINT)[:, None, None]
        a = 0.92 * alpha[None, :, :]
        img = img * (1.0 - a) + sh_rgb * a

    # peg silhouette, image-fixed, drawn last
    d_peg_mm = np.hypot(_OX, _OY) / s
    peg_a = _smooth01((spec.peg_radius_vis - d_peg_mm) / 0.12)
    dome = 1.0 - (np.clip(d_peg_mm / spec.peg_radius_vis, 0.0, 1.0)) ** 2
    peg_gray = 0.30 + 0.12 * dome
    peg_rgb = peg_gray[None, :, :] * _PEG_TINT[:, None, None]
    img = img * (1.0 - peg_a) + peg_rgb * peg_a

    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# environment
# ---------------------------------------------------------------------------


class PegWorld:
    """Stateful episode driver over the oracle; one instance per episode
    stream. Observations come from render() + sense_proprio()."""

    def __init__(self, spec, episode_key=(), frame_dump_dir=None):
        self.spec = spec
        self.episode_key = tuple(int(k) for k in episode_key)
        self.frame_dump_dir = frame_dump_dir
        self.peg = None
        self.steps_taken = 0
        self.d0 = None
        self._terminal = None

    def reset(self, start_pos):
        self.peg = PegState(pos=np.asarray(start_pos, dtype=np.float64).copy())
        self.steps_taken = 0
        self.d0 = self.peg.distance
        self._terminal = None
        obs = self._observe(prev_action=0)
        self._dump(obs)
        return obs

    @property
    def terminal(self):
        return self._terminal

    def step(self, action):
        """One hop: separate, translate, press, sense."""
        if self.peg is None:
            raise UsageError("step() before reset()")
        if self._terminal is not None:
            raise UsageError(f"episode already ended with {self._terminal!r}")
        if not isinstance(action, Action):
            action = Action.from_index(int(action))
        self.steps_taken += 1
        self.peg.pos = self.peg.pos + action.displacement_mm
        self.peg.in_contact = True
        d = self.peg.distance

        spec = self.spec
        if d <= spec.r_ins:
            self.peg.inserted = True
            self._terminal = TERMINAL_FOUND
        elif d > spec.d_lim:
            self._terminal = TERMINAL_OUT_OF_BOUNDS
        elif self.steps_taken > spec.step_limit:
            self._terminal = TERMINAL_STEP_LIMIT

        obs = self._observe(prev_action=action.index)
        self._dump(obs)
        r = reward(found=self._terminal == TERMINAL_FOUND,
                   terminal=self._terminal is not None,
                   d=d, d0=self.d0, d_lim=spec.d_lim, r_fh=spec.r_found)
        return StepResult(observation=obs, reward=r, terminal=self._terminal)

    def _observe(self, prev_action):
        ft, dz = sense_proprio(self.spec, self.peg.pos, inserted=self.peg.inserted,
                               step_index=self.steps_taken, episode_key=self.episode_key)
        img = render(self.spec, self.peg.pos, inserted=self.peg.inserted)
        return Observation(image=img, ft=ft, dz=dz, prev_action=prev_action)

    def _dump(self, obs):
        if self.frame_dump_dir is None:
            return
        from pegrl.viz import save_image_png
        import os
        os.makedirs(self.frame_dump_dir, exist_ok=True)
        save_image_png(obs.image,
                       f"{self.frame_dump_dir}/frame_{self.steps_taken:04d}.png")


def make_hole_set(n, master_seed):
    """n per-hole world specs; hole 1 is the training hole, the rest are the
    held-out evaluation holes. Texture, hole darkness, chamfer radius
    (+-20%), shadow darkness (+-10%) and force-noise scale vary per hole."""
    if n < 1:
        raise UsageError(f"need at least one hole, got {n}")
    base = WorldSpec()
    specs = []
    for i, child in enumerate(np.random.SeedSequence(master_seed).spawn(n)):
        rng = np.random.default_rng(child)
        specs.append(replace(
            base,
            hole_id=i + 1,
            seed=int(rng.integers(0, 2 ** 62)),
            r_ch=base.r_ch * (1.0 + rng.uniform(-0.2, 0.2)),
            hole_darkness=base.hole_darkness * (1.0 + rng.uniform(-0.25, 0.25)),
            force_noise=base.force_noise * (1.0 + rng.uniform(-0.4, 0.4)),
            texture_contrast=base.texture_contrast * (1.0 + rng.uniform(-0.25, 0.25)),
            shadow_jitter=float(rng.uniform(-0.1, 0.1)),
        ))
    return specs
