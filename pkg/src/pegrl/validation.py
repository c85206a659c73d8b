"""Input validation helpers and fixed data dimensions."""

import numpy as np

from pegrl.errors import DimensionError, WindowError

IMAGE_CHANNELS = 3
IMAGE_HW = 64
IMAGE_SHAPE = (IMAGE_CHANNELS, IMAGE_HW, IMAGE_HW)
IMAGE_SIZE = IMAGE_CHANNELS * IMAGE_HW * IMAGE_HW

ACTIVATION_HW = 16
N_POINTS = 8
POINT_WIDTH = 2 * N_POINTS          # K in the point-prediction loss
DEFAULT_WINDOW = 6                  # L, consecutive observations per state

FT_CHANNELS = 5                     # Fx, Fy, Fz, Mx, My


def check_image(arr, check_range=False):
    arr = np.asarray(arr)
    if arr.shape[-3:] != IMAGE_SHAPE:
        raise DimensionError(
            f"image trailing axes must be {IMAGE_SHAPE}, got {arr.shape} (channel/spatial axes)")
    if check_range and (arr.min() < 0.0 or arr.max() > 1.0):
        raise DimensionError("image values must lie in [0, 1]")
    return arr


def check_window(seq, window=DEFAULT_WINDOW):
    if len(seq) != window:
        raise WindowError(f"observation window must hold {window} entries, got {len(seq)}")
    return seq
