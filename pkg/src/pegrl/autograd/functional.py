"""Differentiable operations: exactly what the networks here need.

Convolutions (strided and transposed) are routed through a single fast
stride-1 correlation kernel by splitting arrays into stride-phases, so the
compiled inner loops stay simple and vectorizable. The naive reference
implementation lives in the tests.

Kernel layout conventions:
    conv2d            weight[C_out, C_in, kh, kw]
    conv2d_transposed weight[C_in, C_out, kh, kw]
and the two are exact adjoints for a shared weight array:
    <conv2d(x, K), y> == <x, conv2d_transposed(y, K)>.
"""

import numpy as np

from pegrl.errors import DimensionError, UsageError
from pegrl.autograd import _conv_kernels as _ck
from pegrl.autograd.tensor import Tensor

# ---------------------------------------------------------------------------
# raw array helpers (no graph)
# ---------------------------------------------------------------------------


def _contig(a):
    return np.ascontiguousarray(a)


def _embed(x, rows, cols, off_r, off_c, step):
    """out[..., m, n] = x[..., off_r + step*m, off_c + step*n], zero where
    the source index falls outside x. One zero-fill plus one strided copy;
    this is padding and stride-phase extraction fused."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, rows, cols), dtype=x.dtype)
    m0 = max(0, (-off_r + step - 1) // step)
    m1 = min(rows - 1, (h - 1 - off_r) // step)
    n0 = max(0, (-off_c + step - 1) // step)
    n1 = min(cols - 1, (w - 1 - off_c) // step)
    if m0 <= m1 and n0 <= n1:
        out[:, :, m0:m1 + 1, n0:n1 + 1] = x[
            :, :,
            off_r + step * m0: off_r + step * m1 + 1: step,
            off_c + step * n0: off_c + step * n1 + 1: step]
    return out


def _corr(x, w, stride, padding):
    """Batched cross-correlation, x[N,C,H,W] * w[O,C,kh,kw] -> [N,O,H',W']."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {hp}x{wp} (spatial axes)")
    if stride == 1:
        if padding:
            x = _embed(x, hp, wp, -padding, -padding, 1)
        return _ck.corr2d_s1(_contig(x), _contig(w))
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = None
    for r in range(stride):
        for s in range(stride):
            sub = w[:, :, r::stride, s::stride]
            a, b = sub.shape[2], sub.shape[3]
            if a == 0 or b == 0:
                continue
            ph = _embed(x, ho + a - 1, wo + b - 1, r - padding, s - padding, stride)
            y = _ck.corr2d_s1(ph, _contig(sub))
            out = y if out is None else out + y
    return out


def _corr_gw(x, gout, kh, kw, stride, padding):
    """Gradient of _corr w.r.t. the kernel."""
    ho, wo = gout.shape[2], gout.shape[3]
    gout = _contig(gout)
    if stride == 1:
        if padding:
            x = _embed(x, x.shape[2] + 2 * padding, x.shape[3] + 2 * padding,
                       -padding, -padding, 1)
        return _ck.corr2d_s1_gw(_contig(x), gout, kh, kw)
    gw = np.zeros((gout.shape[1], x.shape[1], kh, kw), dtype=x.dtype)
    for r in range(stride):
        for s in range(stride):
            a = len(range(r, kh, stride))
            b = len(range(s, kw, stride))
            if a == 0 or b == 0:
                continue
            ph = _embed(x, ho + a - 1, wo + b - 1, r - padding, s - padding, stride)
            gw[:, :, r::stride, s::stride] = _ck.corr2d_s1_gw(ph, gout, a, b)
    return gw


def _corr_t(y, w, stride, padding, out_hw):
    """Adjoint of _corr: scatter y[N,O,Hy,Wy] back through w[O,C,kh,kw]
    to an [N,C,H,W] array with (H, W) = out_hw."""
    n, o, hy, wy = y.shape
    _, c, kh, kw = w.shape
    h, wd = out_hw
    hp, wp = h + 2 * padding, wd + 2 * padding
    out = np.zeros((n, c, hp, wp), dtype=y.dtype)
    # _corr computed y[m] from x[stride*m + i], so x index u receives kernel
    # taps i with i ≡ u (mod stride) at m = (u - i) / stride.
    for r in range(stride):
        for s in range(stride):
            sub = w[:, :, r::stride, s::stride]  # taps i = stride*a + r
            a, b = sub.shape[2], sub.shape[3]
            if a == 0 or b == 0:
                continue
            u_cnt = len(range(r, hp, stride))
            v_cnt = len(range(s, wp, stride))
            # x_phase[u'] = sum_a y[u' - a] * sub[a]: full correlation
            ypad = _embed(y, u_cnt + a - 1, v_cnt + b - 1, -(a - 1), -(b - 1), 1)
            ksub = _contig(sub[:, :, ::-1, ::-1].swapaxes(0, 1))
            out[:, :, r::stride, s::stride] = _ck.corr2d_s1(ypad, ksub)
    if padding:
        out = _contig(out[:, :, padding:padding + h, padding:padding + wd])
    return out


def conv_output_hw(hw, k, stride, padding):
    h = (hw[0] + 2 * padding - k) // stride + 1
    w = (hw[1] + 2 * padding - k) // stride + 1
    return h, w


def convt_output_hw(hw, k, stride, padding):
    h = (hw[0] - 1) * stride - 2 * padding + k
    w = (hw[1] - 1) * stride - 2 * padding + k
    return h, w


# ---------------------------------------------------------------------------
# graph ops
# ---------------------------------------------------------------------------


def _as_batched(x, name):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"{name} must be [C,H,W] or [N,C,H,W], got ndim={x.ndim}")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of x[(N,)C,H,W] with weight[O,C,kh,kw]."""
    xd, squeezed = _as_batched(x, "conv2d input")
    wd = weight.data
    if wd.ndim != 4:
        raise DimensionError(f"conv2d kernel must be 4-D, got ndim={wd.ndim}")
    if xd.shape[1] != wd.shape[1]:
        raise DimensionError(
            f"conv2d channel axis mismatch: input C={xd.shape[1]} vs kernel C_in={wd.shape[1]}")
    ho, wo = conv_output_hw(xd.shape[2:], wd.shape[2], stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output would be {ho}x{wo} on the spatial axes")
    y = _corr(xd, wd, stride, padding)
    if bias is not None:
        if bias.data.shape != (wd.shape[0],):
            raise DimensionError(
                f"conv2d bias axis 0 must be {wd.shape[0]}, got {bias.data.shape}")
        y = y + bias.data[None, :, None, None]

    parents = (x, weight) + ((bias,) if bias is not None else ())

    def backward(g):
        if squeezed:
            g = g.reshape(y.shape)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)), own=True)
        if weight.requires_grad:
            weight.accumulate_grad(_corr_gw(xd, g, wd.shape[2], wd.shape[3], stride, padding), own=True)
        if x.requires_grad or x.parents:
            gx = _corr_t(g, wd, stride, padding, xd.shape[2:])
            x.accumulate_grad(gx[0] if squeezed else gx, own=not squeezed)

    out = y[0] if squeezed else y
    return Tensor(out, requires_grad=any(p.requires_grad or p.parents for p in parents),
                  parents=parents, backward=backward, op="conv2d")


def conv2d_transposed(x, weight, bias=None, stride=1, padding=0):
    """Adjoint of conv2d; weight[C_in, C_out, kh, kw]."""
    xd, squeezed = _as_batched(x, "conv2d_transposed input")
    wd = weight.data
    if wd.ndim != 4:
        raise DimensionError(f"conv2d_transposed kernel must be 4-D, got ndim={wd.ndim}")
    if xd.shape[1] != wd.shape[0]:
        raise DimensionError(
            "conv2d_transposed channel axis mismatch: "
            f"input C={xd.shape[1]} vs kernel C_in={wd.shape[0]}")
    ho, wo = convt_output_hw(xd.shape[2:], wd.shape[2], stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d_transposed output would be {ho}x{wo} on the spatial axes")
    y = _corr_t(xd, wd, stride, padding, (ho, wo))
    if bias is not None:
        if bias.data.shape != (wd.shape[1],):
            raise DimensionError(
                f"conv2d_transposed bias axis 0 must be {wd.shape[1]}, got {bias.data.shape}")
        y = y + bias.data[None, :, None, None]

    parents = (x, weight) + ((bias,) if bias is not None else ())

    def backward(g):
        if squeezed:
            g = g.reshape(y.shape)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)), own=True)
        if weight.requires_grad:
            # <convT(x, W), g> is linear in W with the same pairing as conv grad,
            # with the roles of input and output reversed.
            weight.accumulate_grad(_corr_gw(g, xd, wd.shape[2], wd.shape[3], stride, padding), own=True)
        if x.requires_grad or x.parents:
            gx = _corr(g, wd, stride, padding)
            x.accumulate_grad(gx[0] if squeezed else gx, own=not squeezed)

    out = y[0] if squeezed else y
    return Tensor(out, requires_grad=any(p.requires_grad or p.parents for p in parents),
                  parents=parents, backward=backward, op="conv2d_transposed")


def linear(x, weight, bias=None):
    """Affine map: x[(N,)F] @ weight[M,F].T + bias[M]."""
    xd = x.data
    wd = weight.data
    if xd.shape[-1] != wd.shape[1]:
        raise DimensionError(
            f"linear feature axis mismatch: input F={xd.shape[-1]} vs weights F={wd.shape[1]}")
    y = xd @ wd.T
    if bias is not None:
        if bias.data.shape != (wd.shape[0],):
            raise DimensionError(f"linear bias axis 0 must be {wd.shape[0]}")
        y = y + bias.data

    parents = (x, weight) + ((bias,) if bias is not None else ())

    def backward(g):
        g2 = g.reshape(-1, wd.shape[0])
        x2 = xd.reshape(-1, wd.shape[1])
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g2.sum(axis=0), own=True)
        if weight.requires_grad:
            weight.accumulate_grad(g2.T @ x2, own=True)
        if x.requires_grad or x.parents:
            x.accumulate_grad(np.ascontiguousarray((g2 @ wd).reshape(xd.shape)), own=True)

    return Tensor(y, requires_grad=any(p.requires_grad or p.parents for p in parents),
                  parents=parents, backward=backward, op="linear")


def relu(x):
    y = np.maximum(x.data, 0)

    def backward(g):
        if x.requires_grad or x.parents:
            x.accumulate_grad(g * (x.data > 0), own=True)

    return Tensor(y, requires_grad=x.requires_grad or bool(x.parents),
                  parents=(x,), backward=backward, op="relu")


def sigmoid(x):
    y = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        if x.requires_grad or x.parents:
            x.accumulate_grad(g * y * (1.0 - y), own=True)

    return Tensor(y, requires_grad=x.requires_grad or bool(x.parents),
                  parents=(x,), backward=backward, op="sigmoid")


def add(a, b):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add shape mismatch {a.data.shape} vs {b.data.shape}")
    y = a.data + b.data

    def backward(g):
        if a.requires_grad or a.parents:
            a.accumulate_grad(g)
        if b.requires_grad or b.parents:
            b.accumulate_grad(g)

    return Tensor(y, requires_grad=any(p.requires_grad or p.parents for p in (a, b)),
                  parents=(a, b), backward=backward, op="add")


def mul(a, b):
    """Elementwise product; b may be a python scalar."""
    if not isinstance(b, Tensor):
        s = float(b)
        y = a.data * s

        def backward_s(g):
            if a.requires_grad or a.parents:
                a.accumulate_grad(g * s, own=True)

        return Tensor(y, requires_grad=a.requires_grad or bool(a.parents),
                      parents=(a,), backward=backward_s, op="scale")

    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul shape mismatch {a.data.shape} vs {b.data.shape}")
    y = a.data * b.data

    def backward(g):
        if a.requires_grad or a.parents:
            a.accumulate_grad(g * b.data, own=True)
        if b.requires_grad or b.parents:
            b.accumulate_grad(g * a.data, own=True)

    return Tensor(y, requires_grad=any(p.requires_grad or p.parents for p in (a, b)),
                  parents=(a, b), backward=backward, op="mul")


def reshape(x, shape):
    y = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad or x.parents:
            x.accumulate_grad(g.reshape(x.data.shape))

    return Tensor(y, requires_grad=x.requires_grad or bool(x.parents),
                  parents=(x,), backward=backward, op="reshape")


def concat(tensors, axis=0):
    datas = [t.data for t in tensors]
    y = np.concatenate(datas, axis=axis)
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad or t.parents:
                t.accumulate_grad(p)

    return Tensor(y, requires_grad=any(t.requires_grad or t.parents for t in tensors),
                  parents=tuple(tensors), backward=backward, op="concat")


def gather_rows(x, idx):
    """Pick one column per row: x[N,M], idx[N] -> [N]."""
    if x.ndim != 2:
        raise DimensionError(f"gather_rows expects a 2-D tensor, got ndim={x.ndim}")
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.data.shape[0])
    y = x.data[rows, idx]

    def backward(g):
        if x.requires_grad or x.parents:
            gx = np.zeros_like(x.data)
            gx[rows, idx] = g
            x.accumulate_grad(gx, own=True)

    return Tensor(y, requires_grad=x.requires_grad or bool(x.parents),
                  parents=(x,), backward=backward, op="gather_rows")


def avg_pool2d(x, factor):
    """Non-overlapping mean pooling by an integer factor on [N,C,H,W]."""
    n, c, h, w = x.data.shape
    if h % factor or w % factor:
        raise DimensionError(f"avg_pool2d factor {factor} must divide spatial axes {h}x{w}")
    ho, wo = h // factor, w // factor
    y = x.data.reshape(n, c, ho, factor, wo, factor).mean(axis=(3, 5))

    def backward(g):
        if x.requires_grad or x.parents:
            gx = np.broadcast_to(
                g[:, :, :, None, :, None] / (factor * factor),
                (n, c, ho, factor, wo, factor)).reshape(n, c, h, w)
            x.accumulate_grad(gx.astype(x.data.dtype), own=True)

    return Tensor(y, requires_grad=x.requires_grad or bool(x.parents),
                  parents=(x,), backward=backward, op="avg_pool2d")


def clamp(x, lo, hi):
    """Clip values; gradient passes through wherever lo <= x <= hi."""
    y = np.clip(x.data, lo, hi)

    def backward(g):
        if x.requires_grad or x.parents:
            x.accumulate_grad(g * ((x.data >= lo) & (x.data <= hi)), own=True)

    return Tensor(y, requires_grad=x.requires_grad or bool(x.parents),
                  parents=(x,), backward=backward, op="clamp")


def mse(a, b, normalizer):
    """Squared error ||a - b||^2 / normalizer as a scalar tensor."""
    if normalizer <= 0:
        raise UsageError(f"mse normalizer must be > 0, got {normalizer}")
    bd = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=a.data.dtype)
    if a.data.shape != bd.shape:
        raise DimensionError(f"mse shape mismatch {a.data.shape} vs {bd.shape}")
    diff = a.data - bd
    y = np.array((diff * diff).sum() / normalizer, dtype=a.data.dtype)

    parents = (a, b) if isinstance(b, Tensor) else (a,)

    def backward(g):
        gd = (2.0 / normalizer) * diff * g
        if a.requires_grad or a.parents:
            a.accumulate_grad(gd.astype(a.data.dtype), own=True)
        if isinstance(b, Tensor) and (b.requires_grad or b.parents):
            b.accumulate_grad(-gd.astype(bd.dtype), own=True)

    return Tensor(y, requires_grad=any(p.requires_grad or p.parents for p in parents),
                  parents=parents, backward=backward, op="mse")


def add_scalar_weighted(terms):
    """Weighted sum of scalar tensors: sum(w_i * t_i)."""
    y = np.array(sum(float(w) * t.data for w, t in terms),
                 dtype=terms[0][1].data.dtype)

    def backward(g):
        for w, t in terms:
            if t.requires_grad or t.parents:
                t.accumulate_grad(np.asarray(g * float(w), dtype=t.data.dtype).reshape(t.data.shape))

    return Tensor(y, requires_grad=any(t.requires_grad or t.parents for _, t in terms),
                  parents=tuple(t for _, t in terms), backward=backward, op="weighted_sum")
