"""PNG diagnostics: attention overlays, reconstructions, training curves.

Overlay convention: the input image is upscaled x4; current attention
points draw as cross-shaped marks, policy-predicted points as x-shaped
marks, one color per point channel. Marker pixel coordinates are
round(point * 63) * upscale.
"""

import os

import numpy as np
from PIL import Image

from pegrl.agent import state_from_records, observation_record
from pegrl.errors import ConfigError
from pegrl.sap import SapNetwork
from pegrl.validation import IMAGE_HW, N_POINTS

UPSCALE = 4

_COLORS = np.array([
    (230, 60, 60), (60, 200, 60), (70, 90, 235), (235, 180, 40),
    (200, 60, 200), (40, 200, 200), (250, 130, 30), (245, 245, 245),
], dtype=np.uint8)


def to_uint8(image):
    """[3,H,W] float in [0,1] -> [H,W,3] uint8."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    return (arr.transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)


def save_image_png(image, path, upscale=1):
    arr = to_uint8(image)
    im = Image.fromarray(arr)
    if upscale != 1:
        im = im.resize((arr.shape[1] * upscale, arr.shape[0] * upscale), Image.NEAREST)
    im.save(path)


def _draw_marker(canvas, col, row, color, shape, arm=5):
    h, w, _ = canvas.shape

    def put(r, c):
        if 0 <= r < h and 0 <= c < w:
            canvas[r, c] = color

    for d in range(-arm, arm + 1):
        if shape == "cross":
            put(row + d, col)
            put(row, col + d)
        else:  # "x"
            put(row + d, col + d)
            put(row + d, col - d)


def marker_px(point, upscale=UPSCALE):
    """Image pixel of a normalized point under the overlay convention."""
    col = int(round(float(point[0]) * (IMAGE_HW - 1))) * upscale
    row = int(round(float(point[1]) * (IMAGE_HW - 1))) * upscale
    return col, row


def attention_overlay(image, points, predicted_points=None, upscale=UPSCALE):
    """Upscaled RGB canvas with cross marks for current points and x marks
    for predicted points. Returns (canvas uint8 [H,W,3], marker records)."""
    base = to_uint8(image)
    canvas = np.repeat(np.repeat(base, upscale, axis=0), upscale, axis=1)
    markers = []
    for i, p in enumerate(np.asarray(points).reshape(-1, 2)):
        col, row = marker_px(p, upscale)
        _draw_marker(canvas, col, row, _COLORS[i % len(_COLORS)], "cross")
        markers.append({"shape": "cross", "channel": i, "col": col, "row": row})
    if predicted_points is not None:
        for i, p in enumerate(np.asarray(predicted_points).reshape(-1, 2)):
            col, row = marker_px(p, upscale)
            _draw_marker(canvas, col, row, _COLORS[i % len(_COLORS)], "x")
            markers.append({"shape": "x", "channel": i, "col": col, "row": row})
    return canvas, markers


def _predicted_window_points(model, obs):
    """Policy-predicted next points for a static window built from one
    observation; returns the newest slot's 8 points in [0,1]^2."""
    records = [observation_record(model, obs)] * model.window
    state = state_from_records(model, records)
    from pegrl.autograd.tensor import Tensor
    _, pts = model.policy.forward(Tensor(state[None].astype(np.float32)))
    if pts is None:
        return None
    last = pts.data[0].reshape(model.window, N_POINTS, 2)[-1]
    return np.clip(last, 0.0, 1.0)


def export_diagnostics(model, observations, out_dir, prefix="diag"):
    """Write input / reconstruction / overlay PNG triplets per lighting.

    model: a trained VariantModel (vision variants) or a bare SapNetwork.
    observations: {lighting: Observation}. Returns per-lighting metadata
    including marker records (8 cross marks; SAP-RL-E adds 8 x marks).
    """
    os.makedirs(out_dir, exist_ok=True)
    bare_sap = isinstance(model, SapNetwork)
    if not bare_sap and not model.uses_vision:
        raise ConfigError("diagnostics need a vision variant; the proprioceptive-only "
                          "model has no attention points to draw")
    meta = {}
    for lighting, obs in observations.items():
        img = obs.image if hasattr(obs, "image") else np.asarray(obs)
        if bare_sap:
            sap = model
            predicted = None
        else:
            sap = model.sap
            predicted = _predicted_window_points(model, obs)
        if sap is not None:
            points = sap.points_np(img[None])[0]
            recon = sap.reconstruct_np(img[None])[0]
        else:  # autoencoder variant: no points to draw, reconstruction only
            points = np.zeros((0, 2))
            recon = model.ae.reconstruct_np(img[None])[0]
            predicted = None
        canvas, markers = attention_overlay(img, points, predicted)
        save_image_png(img, f"{out_dir}/{prefix}_{lighting}_input.png", upscale=UPSCALE)
        save_image_png(recon, f"{out_dir}/{prefix}_{lighting}_recon.png", upscale=UPSCALE)
        Image.fromarray(canvas).save(f"{out_dir}/{prefix}_{lighting}_overlay.png")
        meta[lighting] = {"markers": markers, "points": points,
                          "predicted": predicted, "recon": recon}
    return meta


def reward_curve_png(rolling_by_variant, path, threshold=96.0):
    """Rolling-100 cumulative reward curves for the trained variants."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for name, series in rolling_by_variant.items():
        ax.plot(series, label=name)
    ax.axhline(threshold, color="gray", ls="--", lw=1)
    ax.set_xlabel("episode")
    ax.set_ylabel("cumulative reward (rolling 100)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def results_bar_png(results, path):
    """Per-lighting success-rate bars per model."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from pegrl.world import LIGHTING_CONDITIONS

    kinds = list(results.keys())
    x = np.arange(len(LIGHTING_CONDITIONS))
    width = 0.8 / max(1, len(kinds))
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, kind in enumerate(kinds):
        res = results[kind]
        srs = [res.success_rate(li) for li in LIGHTING_CONDITIONS]
        vals = [0.0 if v is None else 100.0 * v for v in srs]
        ax.bar(x + i * width, vals, width, label=kind)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(LIGHTING_CONDITIONS)
    ax.set_ylabel("success rate [%]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
