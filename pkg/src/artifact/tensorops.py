"""Dense float64 tensor algebra that everything else builds on.

Strided convolution plus its exact structural adjoint, ReLU with recorded
masks, pooling, the zero-mean projector, symmetric eigen / Cholesky
factorizations (implemented directly, no numpy.linalg), and finite
difference utilities. All reductions are plain numpy sums over fixed axes,
so results are bit-reproducible for identical inputs.
"""

from dataclasses import dataclass

import numpy as np


def check_finite(name, arr):
    """Reject NaN/Inf at construction boundaries."""
    a = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name}: non-finite values are not representable here")
    return a


@dataclass(frozen=True)
class ConvLayer:
    """A strided 2-d convolution: kernel (C_out, C_in, kH, kW), no bias.

    Kernel sides must be odd and stride must be 1 or 2; padding is explicit
    zero padding owned by the layer, not by call sites.
    """

    kernel: np.ndarray
    stride: int
    padding: int

    def __post_init__(self):
        k = check_finite("kernel", self.kernel)
        if k.ndim != 4:
            raise ValueError("kernel must have shape (C_out, C_in, kH, kW)")
        kh, kw = k.shape[2], k.shape[3]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel sides must be odd, got {kh}x{kw}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")
        object.__setattr__(self, "kernel", k)

    @property
    def c_out(self):
        return self.kernel.shape[0]

    @property
    def c_in(self):
        return self.kernel.shape[1]

    def out_hw(self, h, w):
        kh, kw = self.kernel.shape[2:]
        p, s = self.padding, self.stride
        if h + 2 * p < kh or w + 2 * p < kw:
            raise ValueError(
                f"spatial input {h}x{w} smaller than kernel {kh}x{kw} after padding {p}"
            )
        return (h + 2 * p - kh) // s + 1, (w + 2 * p - kw) // s + 1


def _window_view(xp, kh, kw, sh, sw):
    # (B, C, Hp, Wp) -> read-only view (B, Ho, Wo, C, kh, kw)
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    sb, sc, s0, s1 = xp.strides
    shape = (b, ho, wo, c, kh, kw)
    strides = (sb, s0 * sh, s1 * sw, sc, s0, s1)
    return np.lib.stride_tricks.as_strided(xp, shape, strides, writeable=False)


def _conv_batched(x, kernel, stride, pad_h, pad_w):
    b, c, h, w = x.shape
    co, ci, kh, kw = kernel.shape
    if c != ci:
        raise ValueError(f"channel axis mismatch: input has {c} channels, kernel expects {ci}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ValueError(
            f"spatial axes {h}x{w} too small for kernel {kh}x{kw} with padding {pad_h},{pad_w}"
        )
    win = _window_view(xp, kh, kw, stride, stride)
    ho, wo = win.shape[1], win.shape[2]
    cols = win.reshape(b * ho * wo, ci * kh * kw)
    out = cols @ kernel.reshape(co, ci * kh * kw).T
    return out.reshape(b, ho, wo, co).transpose(0, 3, 1, 2)


def conv2d(x, layer):
    """Strided convolution (cross-correlation form). Accepts (C,H,W) or (B,C,H,W)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ValueError("input must have a channel x spatial layout, (C,H,W) or (B,C,H,W)")
    out = _conv_batched(x, layer.kernel, layer.stride, layer.padding, layer.padding)
    return out[0] if single else out


def conv2d_adjoint(g, layer, input_hw):
    """Apply the transpose of conv2d's Jacobian to g.

    Structural form: scatter g onto the stride lattice of the full stride-1
    output grid (zero insertion), then run a stride-1 convolution with the
    spatially flipped, channel-swapped kernel. The spike lattice a stride-2
    boundary imprints on gradients is physically present in the scattered
    canvas rather than hidden inside a matrix transpose.
    """
    g = np.asarray(g, dtype=np.float64)
    single = g.ndim == 3
    if single:
        g = g[None]
    h, w = input_hw
    kh, kw = layer.kernel.shape[2:]
    p, s = layer.padding, layer.stride
    if p > kh - 1 or p > kw - 1:
        raise ValueError("padding exceeding kernel-1 is not supported by the adjoint")
    ho, wo = layer.out_hw(h, w)
    if g.shape[1:] != (layer.c_out, ho, wo):
        raise ValueError(
            f"gradient shaped {g.shape[1:]} but conv2d would produce "
            f"({layer.c_out}, {ho}, {wo}) from input {input_hw}"
        )
    h1 = h + 2 * p - kh + 1
    w1 = w + 2 * p - kw + 1
    canvas = np.zeros((g.shape[0], layer.c_out, h1, w1))
    canvas[:, :, ::s, ::s] = g
    flipped = layer.kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).copy()
    out = _conv_batched(canvas, flipped, 1, kh - 1 - p, kw - 1 - p)
    return out[0] if single else out


def relu(x):
    """Returns (max(x,0), activity mask). The mask is strict: x == 0 stays off."""
    x = np.asarray(x, dtype=np.float64)
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(g, mask):
    # subgradient at exactly 0 is 0: dead units transmit nothing backward
    return np.where(mask, np.asarray(g, dtype=np.float64), 0.0)


def gap(x):
    """Per-channel spatial mean over the last two axes."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 3:
        raise ValueError("need a channel x spatial layout")
    return x.mean(axis=(-2, -1))


def project_zero_mean(v):
    """Orthogonal projection onto the zero-mean hyperplane of the flattened array."""
    v = np.asarray(v, dtype=np.float64)
    return v - v.mean()


def sym_eigen(m, tol=1e-14, max_sweeps=60):
    """Eigen decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues descending, eigenvectors as columns). Vectors are
    orthonormal; each column's sign is fixed so its largest-magnitude entry
    is positive, keeping the factorization deterministic.
    """
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise ValueError("matrix must be symmetric")
    a = (a + a.T) / 2.0
    n = a.shape[0]
    v = np.eye(n)
    if n == 1:
        return a.diagonal().copy(), v
    scale = max(np.abs(a).max(), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * scale * n:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= tol * scale:
                    continue
                # symmetric Schur 2x2 rotation zeroing a[p,q]
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    lam = a.diagonal().copy()
    order = np.argsort(-lam, kind="stable")
    lam = lam[order]
    v = v[:, order]
    for j in range(n):
        k = np.argmax(np.abs(v[:, j]))
        if v[k, j] < 0:
            v[:, j] = -v[:, j]
    return lam, v


def cholesky_lower(m):
    """Unblocked Cholesky. Raises on a non-positive pivot."""
    a = np.asarray(m, dtype=np.float64)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n:
        raise ValueError("matrix must be square")
    low = np.zeros((n, n))
    for j in range(n):
        d = a[j, j] - low[j, :j] @ low[j, :j]
        if d <= 0.0:
            raise ValueError(f"matrix is not positive definite: pivot {j} is {d:.3e}")
        low[j, j] = np.sqrt(d)
        if j + 1 < n:
            low[j + 1 :, j] = (a[j + 1 :, j] - low[j + 1 :, :j] @ low[j, :j]) / low[j, j]
    return low


def logdet_psd(m):
    """log det of a positive definite matrix, as twice the log pivot sum."""
    low = cholesky_lower(m)
    return float(2.0 * np.sum(np.log(low.diagonal())))


def orthonormal_complement(c):
    """Columns spanning the orthogonal complement of a nonzero vector.

    Built from the Householder reflector sending c to a coordinate axis, so
    the basis is deterministic and exactly orthogonal to working precision.
    """
    c = np.asarray(c, dtype=np.float64).ravel()
    n = c.size
    nrm = np.sqrt(c @ c)
    if nrm == 0.0:
        raise ValueError("cannot complement the zero vector")
    v = c / nrm
    # reflect v onto -sign(v[0]) * e0; sign choice avoids cancellation
    alpha = -1.0 if v[0] >= 0 else 1.0
    u = v.copy()
    u[0] -= alpha
    u /= np.sqrt(u @ u)
    h = np.eye(n) - 2.0 * np.outer(u, u)
    # column 0 of h is +-v; the remaining columns are an orthonormal basis of c-perp
    return h[:, 1:]


def angle_collapse_bound(k):
    """Guaranteed direction displacement once the orthogonal error dominates.

    For w = v + e with ||e_perp|| >= ||v|| and ||e_par|| <= k*||v||, the unit
    vectors of w and v are at least this far apart.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    return 1.0 / np.sqrt((1.0 + k) ** 2 + 1.0)


def finite_diff_gradient(f, x, h=1e-6):
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    xw = x.copy()
    xf = xw.ravel()
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        fp = f(xw)
        xf[i] = orig - h
        fm = f(xw)
        xf[i] = orig
        flat[i] = (fp - fm) / (2.0 * h)
    return grad
