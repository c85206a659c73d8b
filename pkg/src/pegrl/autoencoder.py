"""Convolutional autoencoder baseline.

Shares the SAP conv shapes but compresses through a 16-unit bottleneck, so
its latent has the same width as the flattened attention points (a fair
comparison input for the policy). The bottleneck is squashed to [0,1] to
match the points' range. Encoder stays tiny: the 8x16x16 activation is
average-pooled to 8x4x4 before the bottleneck projection.
"""

import numpy as np

from pegrl import autograd as ag
from pegrl.autograd.tensor import Tensor
from pegrl.sap import ConvDecoder, ConvEncoder
from pegrl.validation import ACTIVATION_HW, N_POINTS, check_image

LATENT_WIDTH = 16
_POOL = 4
_POOLED = N_POINTS * (ACTIVATION_HW // _POOL) ** 2      # 8 * 4 * 4
_UNPOOLED = N_POINTS * ACTIVATION_HW * ACTIVATION_HW    # 8 * 16 * 16


class AutoEncoder:
    def __init__(self, seed=0, dtype=np.float32, prefix="ae"):
        rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.encoder = ConvEncoder(rng, f"{prefix}.enc", dtype)
        self.w_bottleneck = ag.Parameter(
            (rng.standard_normal((LATENT_WIDTH, _POOLED)) * np.sqrt(1.0 / _POOLED)).astype(dtype),
            f"{prefix}.bottleneck.w")
        self.b_bottleneck = ag.Parameter(np.zeros(LATENT_WIDTH, dtype=dtype), f"{prefix}.bottleneck.b")
        self.w_expand = ag.Parameter(
            (rng.standard_normal((_UNPOOLED, LATENT_WIDTH)) * np.sqrt(2.0 / LATENT_WIDTH)).astype(dtype),
            f"{prefix}.expand.w")
        self.b_expand = ag.Parameter(np.zeros(_UNPOOLED, dtype=dtype), f"{prefix}.expand.b")
        self.decoder = ConvDecoder(rng, f"{prefix}.dec", dtype)

    def encode(self, images):
        if not isinstance(images, Tensor):
            images = Tensor(check_image(np.asarray(images, dtype=self.dtype)))
        act = self.encoder.forward(images)
        pooled = ag.avg_pool2d(act, _POOL)
        flat = ag.reshape(pooled, (act.shape[0], _POOLED))
        return ag.sigmoid(ag.linear(flat, self.w_bottleneck, self.b_bottleneck))

    def decode(self, latent):
        h = ag.relu(ag.linear(latent, self.w_expand, self.b_expand))
        maps = ag.reshape(h, (latent.shape[0], N_POINTS, ACTIVATION_HW, ACTIVATION_HW))
        return self.decoder.forward(maps)

    def reconstruct(self, images):
        return self.decode(self.encode(images))

    def latent_np(self, images):
        return self.encode(np.asarray(images, dtype=self.dtype)).data

    def reconstruct_np(self, images):
        return self.reconstruct(np.asarray(images, dtype=self.dtype)).data

    def parameters(self):
        return (self.encoder.parameters()
                + [self.w_bottleneck, self.b_bottleneck, self.w_expand, self.b_expand]
                + self.decoder.parameters())

    def encoder_parameters(self):
        return self.encoder.parameters() + [self.w_bottleneck, self.b_bottleneck]

    def parameter_count(self):
        return sum(p.data.size for p in self.parameters())
