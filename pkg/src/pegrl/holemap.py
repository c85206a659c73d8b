"""Hole map: grid of insertion attempts that replaces the live environment.

Build once by pressing the peg at every grid point around one hole and
recording the observation plus the search result; train forever after
against the stored cells. The default grid covers +-5 mm at 0.25 mm pitch
(41 x 41 = 1681 cells).

Map file layout (little-endian):
    magic    7 bytes  b"PEGMAP\\0"
    version  u32
    hole id  u32
    lighting u8       (index into LIGHTING_CONDITIONS)
    half-extent f64, pitch f64, seed u64
    cells, row-major over (iy, ix), iy indexing y from -half to +half:
        label u8, FT 5 x f32, D_z f32, image 12288 x f32
"""

import hashlib
import io
import struct
from dataclasses import dataclass

import numpy as np

from pegrl.agent import Action, STEP_SIZES_MM, reward
from pegrl.errors import ConfigError, FormatError, UsageError
from pegrl.validation import IMAGE_SIZE, IMAGE_SHAPE
from pegrl.world import (
    LIGHTING_CONDITIONS, Observation, StepResult,
    TERMINAL_FOUND, TERMINAL_OUT_OF_BOUNDS, TERMINAL_STEP_LIMIT,
    render, sense_proprio,
)

MAP_MAGIC = b"PEGMAP\0"
MAP_VERSION = 1

LABEL_HOLE_FOUND = "hole_found"
LABEL_SEARCHING = "searching"
LABEL_OUT_OF_BOUNDS = "out_of_bounds"
LABELS = (LABEL_HOLE_FOUND, LABEL_SEARCHING, LABEL_OUT_OF_BOUNDS)
_LABEL_CODE = {name: i + 1 for i, name in enumerate(LABELS)}
_CODE_LABEL = {v: k for k, v in _LABEL_CODE.items()}


@dataclass(frozen=True)
class GridSpec:
    half_extent: float = 5.0
    pitch: float = 0.25

    def __post_init__(self):
        if self.pitch <= 0 or self.half_extent <= 0:
            raise ConfigError("grid pitch and half-extent must be > 0")
        ratio = self.half_extent / self.pitch
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError(
                f"half-extent {self.half_extent} must be an integer multiple of pitch {self.pitch}")

    @property
    def points_per_axis(self):
        return 2 * int(round(self.half_extent / self.pitch)) + 1

    @property
    def cell_count(self):
        return self.points_per_axis ** 2

    def coords(self):
        n = self.points_per_axis
        return -self.half_extent + self.pitch * np.arange(n)

    def index_of(self, value):
        """Nearest grid index along one axis, ties toward the negative
        coordinate; None when the value is farther than half a pitch from
        every grid point."""
        q = (value + self.half_extent) / self.pitch
        i = int(np.ceil(q - 0.5))
        if i < 0 or i >= self.points_per_axis:
            return None
        return i

    def snap(self, pos):
        ix = self.index_of(pos[0])
        iy = self.index_of(pos[1])
        if ix is None or iy is None:
            return None
        return ix, iy


@dataclass
class MapCell:
    ix: int
    iy: int
    pos: tuple
    label: str
    ft: np.ndarray
    dz: float
    image: np.ndarray


class HoleMap:
    def __init__(self, grid, hole_id, lighting, seed, labels, ft, dz, images, version=MAP_VERSION):
        n = grid.points_per_axis
        if labels.shape != (n, n):
            raise ConfigError(f"label grid must be {n}x{n}, got {labels.shape}")
        self.grid = grid
        self.hole_id = int(hole_id)
        self.lighting = lighting
        self.seed = int(seed)
        self.version = version
        self.labels = labels            # uint8 [n,n], indexed [iy, ix]
        self.ft = ft                    # float32 [n,n,5]
        self.dz = dz                    # float32 [n,n]
        self.images = images            # float32 [n,n,3,64,64]
        for arr in (self.labels, self.ft, self.dz, self.images):
            arr.setflags(write=False)

    def cell(self, ix, iy):
        c = self.grid.coords()
        return MapCell(ix=ix, iy=iy, pos=(float(c[ix]), float(c[iy])),
                       label=_CODE_LABEL[int(self.labels[iy, ix])],
                       ft=self.ft[iy, ix], dz=float(self.dz[iy, ix]),
                       image=self.images[iy, ix])

    def lookup(self, pos):
        """Cell at the nearest grid point, or None (out-of-grid signal)."""
        snapped = self.grid.snap(pos)
        if snapped is None:
            return None
        return self.cell(*snapped)

    def label_census(self):
        flat = self.labels.reshape(-1)
        return {name: int((flat == code).sum()) for name, code in _LABEL_CODE.items()}

    def positions_with_label(self, label):
        code = _LABEL_CODE[label]
        iy, ix = np.nonzero(self.labels == code)
        c = self.grid.coords()
        return np.stack([c[ix], c[iy]], axis=1)

    def content_hash(self):
        buf = io.BytesIO()
        _write_map(self, buf)
        return hashlib.sha256(buf.getvalue()).hexdigest()


def build_map(world_spec, grid=GridSpec()):
    """Press-and-sense at every grid point in a serpentine row sweep."""
    for ss in STEP_SIZES_MM:
        ratio = ss / grid.pitch
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError(f"grid pitch {grid.pitch} must divide the {ss} mm step size")
    n = grid.points_per_axis
    coords = grid.coords()
    labels = np.zeros((n, n), dtype=np.uint8)
    ft = np.zeros((n, n, 5), dtype=np.float32)
    dz = np.zeros((n, n), dtype=np.float32)
    images = np.zeros((n, n) + IMAGE_SHAPE, dtype=np.float32)
    for iy in range(n):
        xs = range(n) if iy % 2 == 0 else range(n - 1, -1, -1)
        for ix in xs:
            pos = (float(coords[ix]), float(coords[iy]))
            d = float(np.hypot(pos[0], pos[1]))
            if d <= world_spec.r_ins:
                label = LABEL_HOLE_FOUND
            elif d > world_spec.d_lim:
                label = LABEL_OUT_OF_BOUNDS
            else:
                label = LABEL_SEARCHING
            inserted = label == LABEL_HOLE_FOUND
            cell_ft, cell_dz = sense_proprio(world_spec, pos, inserted=inserted)
            labels[iy, ix] = _LABEL_CODE[label]
            ft[iy, ix] = cell_ft
            dz[iy, ix] = cell_dz
            images[iy, ix] = render(world_spec, pos, inserted=inserted)
    return HoleMap(grid, world_spec.hole_id, world_spec.lighting, world_spec.seed,
                   labels, ft, dz, images)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _write_map(holemap, f):
    g = holemap.grid
    f.write(MAP_MAGIC)
    f.write(struct.pack("<II", holemap.version, holemap.hole_id))
    f.write(struct.pack("<B", LIGHTING_CONDITIONS.index(holemap.lighting)))
    f.write(struct.pack("<ddQ", g.half_extent, g.pitch, holemap.seed))
    n = g.points_per_axis
    for iy in range(n):
        for ix in range(n):
            f.write(struct.pack("<B", int(holemap.labels[iy, ix])))
            f.write(holemap.ft[iy, ix].astype("<f4").tobytes())
            f.write(struct.pack("<f", float(holemap.dz[iy, ix])))
            f.write(holemap.images[iy, ix].astype("<f4").tobytes())


def serialize(holemap, path):
    with open(path, "wb") as f:
        _write_map(holemap, f)


def cell_bytes():
    return 1 + 5 * 4 + 4 + IMAGE_SIZE * 4


def header_bytes():
    return len(MAP_MAGIC) + 4 + 4 + 1 + 8 + 8 + 8


def deserialize(path):
    with open(path, "rb") as f:
        raw = f.read()
    off = 0

    def take(nb, what):
        nonlocal off
        if off + nb > len(raw):
            raise FormatError(f"truncated map file while reading {what}", offset=off)
        piece = raw[off:off + nb]
        off += nb
        return piece

    if take(len(MAP_MAGIC), "magic") != MAP_MAGIC:
        raise FormatError("bad map magic", offset=0)
    version, hole_id = struct.unpack("<II", take(8, "version/hole id"))
    if version != MAP_VERSION:
        raise FormatError(f"unsupported map version {version}", offset=7)
    (light_idx,) = struct.unpack("<B", take(1, "lighting"))
    if light_idx >= len(LIGHTING_CONDITIONS):
        raise FormatError(f"invalid lighting code {light_idx}", offset=off - 1)
    half, pitch, seed = struct.unpack("<ddQ", take(24, "grid header"))
    grid = GridSpec(half_extent=half, pitch=pitch)
    n = grid.points_per_axis
    labels = np.zeros((n, n), dtype=np.uint8)
    ft = np.zeros((n, n, 5), dtype=np.float32)
    dz = np.zeros((n, n), dtype=np.float32)
    images = np.zeros((n, n) + IMAGE_SHAPE, dtype=np.float32)
    for iy in range(n):
        for ix in range(n):
            (code,) = struct.unpack("<B", take(1, f"cell ({ix},{iy}) label"))
            if code not in _CODE_LABEL:
                raise FormatError(f"invalid cell label {code}", offset=off - 1)
            labels[iy, ix] = code
            ft[iy, ix] = np.frombuffer(take(20, "cell FT"), dtype="<f4")
            (dz[iy, ix],) = struct.unpack("<f", take(4, "cell D_z"))
            images[iy, ix] = np.frombuffer(
                take(IMAGE_SIZE * 4, "cell image"), dtype="<f4").reshape(IMAGE_SHAPE)
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes after last cell", offset=off)
    return HoleMap(grid, hole_id, LIGHTING_CONDITIONS[light_idx], seed,
                   labels, ft, dz, images, version=version)


# ---------------------------------------------------------------------------
# offline environment
# ---------------------------------------------------------------------------


class OfflineEnv:
    """Same step contract as PegWorld, but every observation is a stored
    cell. Termination mirrors the live rule exactly for grid-aligned
    trajectories: the hole_found / out_of_bounds labels were assigned from
    the same distances the live world checks."""

    def __init__(self, holemap, d_lim=4.5, step_limit=100, r_found=100.0):
        self.map = holemap
        self.d_lim = d_lim
        self.step_limit = step_limit
        self.r_found = r_found
        self.pos = None
        self.steps_taken = 0
        self.d0 = None
        self._terminal = None
        self.last_cell = None

    def searching_positions(self):
        return self.map.positions_with_label(LABEL_SEARCHING)

    def reset(self, start_pos):
        if self.map.grid.snap(start_pos) is None:
            raise UsageError(f"start position {start_pos} lies outside the mapped grid")
        self.pos = np.asarray(start_pos, dtype=np.float64).copy()
        self.steps_taken = 0
        self.d0 = float(np.hypot(*self.pos))
        self._terminal = None
        return self._observe(prev_action=0)

    @property
    def terminal(self):
        return self._terminal

    def step(self, action):
        if self.pos is None:
            raise UsageError("step() before reset()")
        if self._terminal is not None:
            raise UsageError(f"episode already ended with {self._terminal!r}")
        if not isinstance(action, Action):
            action = Action.from_index(int(action))
        self.steps_taken += 1
        self.pos = self.pos + action.displacement_mm

        cell = self.map.lookup(self.pos)
        if cell is None:
            # beyond the mapped area: necessarily past the distance limit
            self._terminal = TERMINAL_OUT_OF_BOUNDS
        elif cell.label == LABEL_HOLE_FOUND:
            self._terminal = TERMINAL_FOUND
        elif cell.label == LABEL_OUT_OF_BOUNDS:
            self._terminal = TERMINAL_OUT_OF_BOUNDS
        elif self.steps_taken > self.step_limit:
            self._terminal = TERMINAL_STEP_LIMIT

        obs = self._observe(prev_action=action.index)
        d = float(np.hypot(*self.pos))
        r = reward(found=self._terminal == TERMINAL_FOUND,
                   terminal=self._terminal is not None,
                   d=d, d0=self.d0, d_lim=self.d_lim, r_fh=self.r_found)
        return StepResult(observation=obs, reward=r, terminal=self._terminal)

    def _observe(self, prev_action):
        snapped = self.map.grid.snap(self.pos)
        if snapped is None:
            n = self.map.grid.points_per_axis
            q = (np.asarray(self.pos) + self.map.grid.half_extent) / self.map.grid.pitch
            snapped = tuple(int(np.clip(np.ceil(v - 0.5), 0, n - 1)) for v in q)
        cell = self.map.cell(*snapped)
        self.last_cell = cell
        return Observation(image=cell.image, ft=cell.ft.copy(),
                           dz=cell.dz, prev_action=prev_action)
