"""Ray sampling and unbiased SDF volume rendering.

Opacity comes from consecutive sample SDFs through the logistic CDF
Phi_s(x) = sigmoid(s x):

    alpha_i = max((Phi_s(f_i) - Phi_s(f_{i+1})) / Phi_s(f_i), 0)

so a ray marching front-to-back turns opaque exactly where f crosses zero
from outside to inside, independently of where samples land (first-order
unbiasedness). Transmittance T_i = prod_{j<i} (1 - alpha_j), weights
w_i = T_i alpha_i, color = sum w_i c_i + (1 - sum w_i) * background.

Sampling: N_coarse stratified samples in [near, far], then `up_rounds`
rounds of importance resampling against provisional weights computed with
a fixed sharpness that doubles per round (graph-free forward passes); the
final depth set is the sorted union. Rays whose provisional weights are
all zero fall back to stratified draws for that round.

``render_rays`` needs only a small model surface: ``normalize``,
``sdf_with_grad``, ``sdf_values``, ``colors``, ``s_tensor``; anything
providing those (e.g. an analytic wrapper in tests) renders.
"""

import numpy as np
from scipy.special import expit

from . import autodiff as ad

PHI_FLOOR = 1e-12
ALPHA_CEIL = 1.0 - 1e-6
WEIGHT_EPS = 1e-5
DEGENERATE_SUM = 1e-8


class SampleConfig:
    """Sampling + compositing knobs (desk-scale defaults)."""

    def __init__(self, n_coarse=32, n_importance=16, up_rounds=2, jitter=True,
                 base_sharpness=32.0, background=(0.0, 0.0, 0.0)):
        if n_coarse < 2:
            raise ValueError("n_coarse must be at least 2")
        if up_rounds < 0 or n_importance < 0:
            raise ValueError("negative sampling counts")
        if up_rounds > 0 and n_importance % up_rounds != 0:
            raise ValueError("n_importance must divide evenly across up_rounds")
        self.n_coarse = n_coarse
        self.n_importance = n_importance if up_rounds > 0 else 0
        self.up_rounds = up_rounds if n_importance > 0 else 0
        self.jitter = jitter
        self.base_sharpness = base_sharpness
        self.background = np.asarray(background, dtype=np.float64)

    @property
    def n_total(self):
        return self.n_coarse + self.n_importance


class SampleSet:
    """Per-ray ordered depths plus derived positions.

    t: (R, N) strictly increasing within each row, inside [near, far].
    midpoints: (R, N-1) section midpoints.
    positions: (R, N, 3) world points o + t d.
    """

    def __init__(self, t, origins, dirs):
        self.t = t
        self.midpoints = (t[:, :-1] + t[:, 1:]) / 2.0
        self.positions = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]


class RenderOutput:
    """Tape-valued render results for the valid rays of a batch.

    Per-valid-ray tensors: color (Rv,3), opacity (Rv,), weights (Rv,N-1),
    f (Rv,N), grad_f/n_hat (Rv,N,3). ``valid`` maps rows back to the
    original batch; invalid rays are background by definition.
    """

    def __init__(self, valid, samples, color, opacity, weights, f,
                 grad_f, n_hat, background):
        self.valid = valid
        self.samples = samples
        self.color = color
        self.opacity = opacity
        self.weights = weights
        self.f = f
        self.grad_f = grad_f
        self.n_hat = n_hat
        self.background = background

    def full_color(self):
        """(R, 3) ndarray with background rows for invalid rays."""
        n = self.valid.shape[0]
        out = np.tile(self.background, (n, 1))
        if self.color is not None:
            out[self.valid] = self.color.data.astype(np.float64)
        return out

    def full_opacity(self):
        n = self.valid.shape[0]
        out = np.zeros(n, dtype=np.float64)
        if self.opacity is not None:
            out[self.valid] = self.opacity.data.astype(np.float64)
        return out


def stratified_samples(near, far, n, rng, jitter):
    """(R, n) stratified-uniform depths; midpoints when jitter is off."""
    near = np.asarray(near, dtype=np.float64)[:, None]
    far = np.asarray(far, dtype=np.float64)[:, None]
    r = near.shape[0]
    if jitter:
        u = rng.uniform(size=(r, n))
    else:
        u = np.full((r, n), 0.5)
    frac = (np.arange(n)[None, :] + u) / n
    return near + (far - near) * frac


def alpha_np(f_i, f_next, s):
    """Raw ndarray twin of alpha_from_sdf, for sampling and oracles."""
    phi_i = expit(s * f_i)
    phi_n = expit(s * f_next)
    ratio = (phi_i - phi_n) / np.maximum(phi_i, PHI_FLOOR)
    out = np.clip(ratio, 0.0, ALPHA_CEIL)
    return np.where(phi_i < PHI_FLOOR, 0.0, out)


def sample_pdf(t, weights, n_new, rng, jitter):
    """Inverse-CDF draw of n_new depths per ray from section weights.

    t: (R, M) bin edges; weights: (R, M-1) nonnegative. Rays whose weight
    row sums below 1e-8 fall back to stratified draws over [t_0, t_last];
    the count of such rays is returned alongside the samples.
    """
    t = np.asarray(t, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    r, m = t.shape
    degenerate = w.sum(axis=1) < DEGENERATE_SUM
    n_deg = int(degenerate.sum())

    w = w + WEIGHT_EPS
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((r, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0

    if jitter:
        u = rng.uniform(size=(r, n_new))
    else:
        u = np.tile((np.arange(n_new) + 0.5) / n_new, (r, 1))

    # row-wise searchsorted via offsetting each row into its own band
    band = 2.0 * np.arange(r)[:, None]
    pos = np.searchsorted((cdf + band).ravel(), (u + band).ravel(), side="right")
    idx = pos.reshape(r, n_new) - np.arange(r)[:, None] * m - 1
    idx = np.clip(idx, 0, m - 2)

    cdf_lo = np.take_along_axis(cdf, idx, axis=1)
    cdf_hi = np.take_along_axis(cdf, idx + 1, axis=1)
    t_lo = np.take_along_axis(t, idx, axis=1)
    t_hi = np.take_along_axis(t, idx + 1, axis=1)
    frac = (u - cdf_lo) / np.maximum(cdf_hi - cdf_lo, 1e-12)
    out = t_lo + frac * (t_hi - t_lo)

    if n_deg:
        near_d = t[degenerate, 0]
        far_d = t[degenerate, -1]
        out[degenerate] = stratified_samples(near_d, far_d, n_new, rng, jitter)
    return out, n_deg


def _strictly_increasing(t, near, far):
    span = (np.asarray(far) - np.asarray(near))[:, None]
    eps = np.maximum(span * 1e-9, 1e-12)
    for i in range(1, t.shape[1]):
        t[:, i] = np.maximum(t[:, i], t[:, i - 1] + eps[:, 0])
    return t


def sample_rays(origins, dirs, near, far, sdf_values, config, rng):
    """(R, N_total) ordered depths per ray.

    ``sdf_values`` maps (P, 3) world points to (P,) SDF numbers and is only
    consulted during importance rounds (graph-free).
    """
    t = stratified_samples(near, far, config.n_coarse, rng, config.jitter)
    if config.up_rounds == 0:
        return t
    per_round = config.n_importance // config.up_rounds
    for k in range(config.up_rounds):
        pts = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
        f = sdf_values(pts.reshape(-1, 3)).reshape(t.shape)
        s = config.base_sharpness * (2.0 ** k)
        alphas = alpha_np(f[:, :-1], f[:, 1:], s)
        trans = np.cumprod(np.concatenate(
            [np.ones((t.shape[0], 1)), 1.0 - alphas[:, :-1]], axis=1), axis=1)
        w = trans * alphas
        t_new, _ = sample_pdf(t, w, per_round, rng, config.jitter)
        t = np.sort(np.concatenate([t, t_new], axis=1), axis=1)
        t = _strictly_increasing(t, near, far)
    return t


def alpha_from_sdf(f_i, f_next, s):
    """Tape alpha from consecutive sample SDFs; s a positive scalar Tensor.

    Zero (with zero gradient) where Phi_s(f_i) underflows the 1e-12 floor
    or where the surface recedes (numerator <= 0); capped just under 1 so
    transmittance stays differentiable.
    """
    phi_i = ad.sigmoid(f_i * s)
    phi_n = ad.sigmoid(f_next * s)
    ratio = (phi_i - phi_n) / ad.clamp(phi_i, lo=PHI_FLOOR)
    alpha = ad.clamp(ad.relu(ratio), hi=ALPHA_CEIL)
    dead = phi_i.data < PHI_FLOOR
    if dead.any():
        alpha = ad.where_mask(dead, 0.0, alpha)
    return alpha


def composite(alphas, colors, background):
    """(color, opacity, weights, trans) from per-section alphas and colors.

    alphas: (R, M) Tensor; colors: (R, M, 3) Tensor; background: (3,) const.
    """
    trans = ad.exclusive_cumprod_one_minus(alphas)
    weights = trans * alphas
    opacity = weights.sum(axis=1)
    fg = (weights.reshape(*weights.shape, 1) * colors).sum(axis=1)
    bg = np.asarray(background, dtype=np.float64)
    color = fg + (1.0 - opacity).reshape(-1, 1) * ad.constant(
        np.broadcast_to(bg, (fg.shape[0], 3)).astype(fg.dtype))
    return color, opacity, weights, trans


def render_rays(batch, model, config, rng, need_grads=True):
    """Full differentiable pipeline over a RayBatch.

    Rays flagged invalid (bounding-box misses) contribute background color
    and zero opacity; they consume no samples. Per-sample f, grad f, and
    n_hat for the valid rays are retained on the output for the losses.
    """
    valid = np.asarray(batch.valid, dtype=bool)
    bg = config.background
    if not valid.any():
        return RenderOutput(valid, None, None, None, None, None, None, None, bg)

    o = np.ascontiguousarray(batch.origins[valid], dtype=np.float64)
    d = np.ascontiguousarray(batch.dirs[valid], dtype=np.float64)
    near = np.asarray(batch.near[valid], dtype=np.float64)
    far = np.asarray(batch.far[valid], dtype=np.float64)

    t = sample_rays(o, d, near, far, model.sdf_values, config, rng)
    samples = SampleSet(t, o, d)
    rv, n = t.shape

    p_norm = model.normalize(samples.positions.reshape(-1, 3))
    f_flat, grad_flat, nhat_flat, z_flat, _ = model.sdf_with_grad(
        p_norm, need_jac=True)

    f = f_flat.reshape(rv, n)
    grad_f = grad_flat.reshape(rv, n, 3)
    n_hat = nhat_flat.reshape(rv, n, 3)

    # color at the leading sample of each section, paired with alpha_i
    sec = rv * (n - 1)
    keep = (np.arange(rv * n).reshape(rv, n)[:, :-1]).reshape(-1)
    x_sec = p_norm[keep].astype(model.dtype)
    d_sec = np.repeat(d, n - 1, axis=0)
    grad_sec = grad_f[:, :-1, :].reshape(sec, 3)
    z_sec = ad.gather(z_flat, keep)
    colors_flat = model.colors(ad.constant(x_sec), d_sec, grad_sec, z_sec)
    colors = colors_flat.reshape(rv, n - 1, 3)

    alphas = alpha_from_sdf(f[:, :-1], f[:, 1:], model.s_tensor())
    color, opacity, weights, _ = composite(alphas, colors, bg)

    return RenderOutput(valid, samples, color, opacity, weights, f,
                        grad_f, n_hat, bg)
