"""Spatial attention point network.

Three blocks, all convolutional and deliberately tiny:

  attention block   image -> conv(3->8, k5, s2) -> ReLU -> conv(8->8, k3, s2)
                    -> ReLU -> per-channel soft argmax -> 8 points in [0,1]^2
  feature block     same conv shape, separate weights -> 8x16x16 feature map
  prediction block  points -> Gaussian heat map -> elementwise product with
                    the feature map -> convT(8->8, k4, s2) -> ReLU ->
                    convT(8->3, k4, s2) -> logistic -> 64x64x3 image

Points are (x, y) in normalized image coordinates, origin top-left,
x rightward, y downward.
"""

import numpy as np

from pegrl import autograd as ag
from pegrl.autograd.tensor import Tensor
from pegrl.errors import DimensionError, UsageError
from pegrl.validation import (
    ACTIVATION_HW, IMAGE_CHANNELS, IMAGE_HW, N_POINTS, check_image, check_window,
)

SOFT_ARGMAX_TEMPERATURE = 1.0
HEATMAP_SIGMA = 0.1


def _cell_grids(h, w, dtype):
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return (xs / (w - 1)).astype(dtype), (ys / (h - 1)).astype(dtype)


def spatial_soft_argmax(activation, temperature=SOFT_ARGMAX_TEMPERATURE):
    """Softmax-weighted expected cell coordinate, per channel.

    activation: Tensor [N,C,H,W] (or [H,W] for a single map). Returns
    points [N,C,2] (or [2]) as (x, y) in [0,1]; always a convex combination
    of cell coordinates, so the output cannot leave the unit square.
    """
    if temperature <= 0:
        raise UsageError(f"soft argmax temperature must be > 0, got {temperature}")
    single = activation.ndim == 2
    a = activation.data[None, None] if single else activation.data
    if a.ndim != 4:
        raise DimensionError(f"soft argmax expects [N,C,H,W], got ndim={activation.ndim}")
    n, c, h, w = a.shape
    xg, yg = _cell_grids(h, w, a.dtype)

    z = a / temperature
    z = z - z.max(axis=(2, 3), keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=(2, 3), keepdims=True)
    ox = (p * xg).sum(axis=(2, 3))
    oy = (p * yg).sum(axis=(2, 3))
    out = np.stack([ox, oy], axis=-1)

    def backward(g):
        if not (activation.requires_grad or activation.parents):
            return
        gx = g[..., 0].reshape(n, c, 1, 1)
        gy = g[..., 1].reshape(n, c, 1, 1)
        ga = p * ((xg - ox.reshape(n, c, 1, 1)) * gx
                  + (yg - oy.reshape(n, c, 1, 1)) * gy) / temperature
        activation.accumulate_grad(ga[0, 0] if single else ga, own=not single)

    return Tensor(out[0, 0] if single else out,
                  requires_grad=activation.requires_grad or bool(activation.parents),
                  parents=(activation,), backward=backward, op="soft_argmax")


def gaussian_heatmap(points, sigma=HEATMAP_SIGMA, hw=(ACTIVATION_HW, ACTIVATION_HW)):
    """Differentiable inverse of the soft argmax: an unnormalized Gaussian
    bump per channel, value 1.0 where the point sits exactly on a cell.

    points: Tensor [N,C,2]; output [N,C,H,W].
    """
    if sigma <= 0:
        raise UsageError(f"heat map sigma must be > 0, got {sigma}")
    pd = points.data
    if pd.shape[-1] != 2:
        raise DimensionError(f"points last axis must be 2, got {pd.shape}")
    n, c = pd.shape[0], pd.shape[1]
    h, w = hw
    xg, yg = _cell_grids(h, w, pd.dtype)
    px = pd[..., 0].reshape(n, c, 1, 1)
    py = pd[..., 1].reshape(n, c, 1, 1)
    dx = xg - px
    dy = yg - py
    out = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))

    def backward(g):
        if not (points.requires_grad or points.parents):
            return
        common = g * out / (sigma * sigma)
        gp = np.stack([(common * dx).sum(axis=(2, 3)),
                       (common * dy).sum(axis=(2, 3))], axis=-1)
        points.accumulate_grad(gp, own=True)

    return Tensor(out, requires_grad=points.requires_grad or bool(points.parents),
                  parents=(points,), backward=backward, op="gaussian_heatmap")


def _he_conv(rng, shape, dtype, scale=2.0):
    fan_in = shape[1] * shape[2] * shape[3]
    return (rng.standard_normal(shape) * np.sqrt(scale / fan_in)).astype(dtype)


class ConvEncoder:
    """conv(3->8, k5, s2, p2) -> ReLU -> conv(8->8, k3, s2, p1) -> ReLU."""

    def __init__(self, rng, prefix, dtype=np.float32):
        self.w1 = ag.Parameter(_he_conv(rng, (N_POINTS, IMAGE_CHANNELS, 5, 5), dtype), f"{prefix}.conv1.w")
        self.b1 = ag.Parameter(np.zeros(N_POINTS, dtype=dtype), f"{prefix}.conv1.b")
        self.w2 = ag.Parameter(_he_conv(rng, (N_POINTS, N_POINTS, 3, 3), dtype), f"{prefix}.conv2.w")
        self.b2 = ag.Parameter(np.zeros(N_POINTS, dtype=dtype), f"{prefix}.conv2.b")

    def forward(self, images):
        h = ag.relu(ag.conv2d(images, self.w1, self.b1, stride=2, padding=2))
        return ag.relu(ag.conv2d(h, self.w2, self.b2, stride=2, padding=1))

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]


class ConvDecoder:
    """convT(8->8, k4, s2, p1) -> ReLU -> convT(8->3, k4, s2, p1) -> logistic."""

    def __init__(self, rng, prefix, dtype=np.float32):
        self.w1 = ag.Parameter(
            (rng.standard_normal((N_POINTS, N_POINTS, 4, 4)) * np.sqrt(2.0 / (N_POINTS * 4))).astype(dtype),
            f"{prefix}.deconv1.w")
        self.b1 = ag.Parameter(np.zeros(N_POINTS, dtype=dtype), f"{prefix}.deconv1.b")
        self.w2 = ag.Parameter(
            (rng.standard_normal((N_POINTS, IMAGE_CHANNELS, 4, 4)) * np.sqrt(1.0 / (N_POINTS * 4))).astype(dtype),
            f"{prefix}.deconv2.w")
        self.b2 = ag.Parameter(np.zeros(IMAGE_CHANNELS, dtype=dtype), f"{prefix}.deconv2.b")

    def forward(self, x):
        h = ag.relu(ag.conv2d_transposed(x, self.w1, self.b1, stride=2, padding=1))
        return ag.sigmoid(ag.conv2d_transposed(h, self.w2, self.b2, stride=2, padding=1))

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]


class SapNetwork:
    """Attention, feature, and image-prediction blocks with their own weights."""

    def __init__(self, seed=0, dtype=np.float32, sigma=HEATMAP_SIGMA,
                 temperature=SOFT_ARGMAX_TEMPERATURE, prefix="sap"):
        rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.sigma = float(sigma)
        self.temperature = float(temperature)
        self.attention = ConvEncoder(rng, f"{prefix}.attn", dtype)
        self.features = ConvEncoder(rng, f"{prefix}.feat", dtype)
        self.decoder = ConvDecoder(rng, f"{prefix}.dec", dtype)

    # -- blocks ------------------------------------------------------------

    def encode_attention(self, images):
        """images: Tensor or ndarray [(N,)3,64,64] -> (points [(N,)8,2], activations)."""
        images = self._as_tensor(images)
        act = self.attention.forward(images)
        pts = spatial_soft_argmax(act, self.temperature)
        return pts, act

    def encode_features(self, images):
        images = self._as_tensor(images)
        return self.features.forward(images)

    def predict_image(self, points, features):
        """Decode heat-mapped features back to an image in [0,1]."""
        pts = ag.clamp(points, 0.0, 1.0)
        heat = gaussian_heatmap(pts, self.sigma, (ACTIVATION_HW, ACTIVATION_HW))
        if heat.shape != features.shape:
            raise DimensionError(
                f"heat map {heat.shape} and feature map {features.shape} differ (channel axis)")
        return self.decoder.forward(ag.mul(heat, features))

    def forward_window(self, images, window=None):
        """Per-image application over a window; no cross-time mixing.

        images: ndarray [L,3,64,64]; returns (points Tensor [L,8,2],
        features Tensor [L,8,16,16]).
        """
        from pegrl.validation import DEFAULT_WINDOW
        check_window(images, DEFAULT_WINDOW if window is None else window)
        pts, _ = self.encode_attention(images)
        feats = self.encode_features(images)
        return pts, feats

    # -- plumbing ----------------------------------------------------------

    def _as_tensor(self, images):
        if isinstance(images, Tensor):
            check_image(images.data)
            return images
        arr = check_image(np.asarray(images, dtype=self.dtype))
        return Tensor(arr)

    def points_np(self, images):
        """Attention points as a plain array, no graph kept."""
        pts, _ = self.encode_attention(np.asarray(images, dtype=self.dtype))
        return pts.data

    def reconstruct_np(self, images):
        """Reconstruction of the *current* images from their own points."""
        images = np.asarray(images, dtype=self.dtype)
        pts, _ = self.encode_attention(images)
        feats = self.encode_features(images)
        return self.predict_image(pts, feats).data

    def parameters(self):
        return (self.attention.parameters() + self.features.parameters()
                + self.decoder.parameters())

    def parameter_count(self):
        return sum(p.data.size for p in self.parameters())
