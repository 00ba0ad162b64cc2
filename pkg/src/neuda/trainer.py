"""The four-term objective and the optimization loop.

Total loss: L = L_color + 0.1 L_eik + 3e-5 L_norm + 0.1 L_mask, where
L_color is the mean absolute error over rays and channels, L_eik the mean
squared deviation of |grad f| from 1 over all samples, L_norm the
weight-summed distance between the SDF gradient and the predicted normal
head averaged over rays, and L_mask binary cross-entropy between the
silhouette and accumulated opacity (clamped to [1e-5, 1-1e-5]); the mask
term is dropped when supervision is off.

Rays invalid for rendering (bounding-box misses) still count in the color
and mask denominators: their prediction is background / zero opacity by
construction, so they enter those losses as constants without gradients.
Eikonal and normal terms average over valid rays' samples only.

Optimizer: Adam with a cosine learning-rate schedule
lr(t) = lr_end + 0.5 (lr_start - lr_end)(1 + cos(pi t / T)). Anchor
offsets are re-projected onto their per-level clamp radius after each
step. A non-finite loss aborts training, naming the offending term and
reporting the iteration; the last checkpoint on disk is left in place.

Determinism: with a fixed seed and a single worker, the ray draw, jitter,
and gradient reduction order are all derived from per-iteration seed
sequences, so runs repeat bit-for-bit. With several workers, rays fan out
in contiguous chunks whose gradients are reduced in submit order.
"""

import csv
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import renderer
from .model import ModelConfig, NeudaModel
from .scene import RayBatch, generate_rays

CSV_HEADER = ["iter", "loss_c", "loss_eik", "loss_norm", "loss_mask",
              "total", "inv_s", "lr"]
MASK_EPS = 1e-5


class LossWeights:
    def __init__(self, eik=0.1, norm=3e-5, mask=0.1):
        if min(eik, norm, mask) < 0:
            raise ValueError("loss weights must be nonnegative")
        self.eik = eik
        self.norm = norm
        self.mask = mask


class TrainConfig:
    FIELDS = {
        "iterations": 3000,
        "rays_per_batch": 256,
        "lr_start": 5e-4,
        "lr_end": 2.5e-5,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "seed": 0,
        "checkpoint_every": 1000,
        "log_every": 50,
        "mask_supervision": True,
        "warmup_iters": 0,
        "n_coarse": 32,
        "n_importance": 16,
        "up_rounds": 2,
        "jitter": True,
        "background": (0.0, 0.0, 0.0),
        "pretrain_steps": 600,
        "pretrain_radius": 0.5,
    }

    def __init__(self, **kw):
        unknown = set(kw) - set(self.FIELDS) - {"weights"}
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        for k, v in self.FIELDS.items():
            setattr(self, k, kw.get(k, v))
        self.weights = kw.get("weights") or LossWeights()
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if not (self.lr_start >= self.lr_end > 0):
            raise ValueError("need lr_start >= lr_end > 0")

    def sample_config(self, jitter=None):
        return renderer.SampleConfig(
            n_coarse=self.n_coarse, n_importance=self.n_importance,
            up_rounds=self.up_rounds,
            jitter=self.jitter if jitter is None else jitter,
            background=self.background)


class TrainAbort(RuntimeError):
    """Raised when the loss goes non-finite; carries the iteration index."""

    def __init__(self, iteration, cause, checkpoint_path=None):
        super().__init__(
            f"training aborted at iteration {iteration}: {cause}"
            + (f" (last checkpoint: {checkpoint_path})" if checkpoint_path else ""))
        self.iteration = iteration
        self.cause = cause
        self.checkpoint_path = checkpoint_path


class TrainResult:
    def __init__(self, model, metrics, checkpoint_path, csv_path):
        self.model = model
        self.metrics = metrics
        self.checkpoint_path = checkpoint_path
        self.csv_path = csv_path


# -- losses (sum forms; denominators supplied by the caller) --------------

def color_loss(render, batch):
    """Mean |C - C_hat| over rays and channels, background for misses."""
    n = batch.colors.shape[0]
    total = _color_sum(render, batch)
    if isinstance(total, float):
        return ad.constant(np.array(total / (3.0 * n)))
    return total / (3.0 * n)


def _color_sum(render, batch):
    v = render.valid
    const = 0.0
    if (~v).any():
        bg = render.background
        const = float(np.abs(bg[None, :] - batch.colors[~v]).sum())
    if render.color is None:
        return const
    gt = batch.colors[v].astype(render.color.dtype)
    return ad.absolute(render.color - ad.constant(gt)).sum() + const


def eikonal_loss(render):
    """Mean (|grad f| - 1)^2 over every sample of every valid ray."""
    if render.grad_f is None:
        return ad.constant(np.array(0.0))
    count = render.grad_f.shape[0] * render.grad_f.shape[1]
    return _eikonal_sum(render) / float(count)


def _eikonal_sum(render):
    g = render.grad_f
    nrm = ad.sqrt((g * g).sum(axis=2) + 1e-12)
    return ((nrm - 1.0) ** 2).sum()


def normal_loss(render):
    """Sum_i w_i |grad f_i - n_hat_i| per ray, averaged over valid rays."""
    if render.weights is None:
        return ad.constant(np.array(0.0))
    return _normal_sum(render) / float(render.weights.shape[0])


def _normal_sum(render):
    m = render.weights.shape[1]
    d = render.grad_f[:, :m, :] - render.n_hat[:, :m, :]
    dist = ad.sqrt((d * d).sum(axis=2) + 1e-12)
    return (render.weights * dist).sum()


def mask_loss(render, batch):
    """Mean BCE(mask, opacity), opacity clamped to [1e-5, 1-1e-5]."""
    n = batch.masks.shape[0]
    total = _mask_sum(render, batch)
    if isinstance(total, float):
        return ad.constant(np.array(total / n))
    return total / float(n)


def _mask_sum(render, batch):
    m_all = batch.masks.astype(np.float64)
    v = render.valid
    const = 0.0
    if (~v).any():
        m_inv = m_all[~v]
        # invalid rays render zero opacity, clamped to the epsilon floor
        const = float(-(m_inv * np.log(MASK_EPS)
                        + (1 - m_inv) * np.log(1 - MASK_EPS)).sum())
    if render.opacity is None:
        return const
    m = m_all[v].astype(render.opacity.dtype)
    o = ad.clamp(render.opacity, lo=MASK_EPS, hi=1.0 - MASK_EPS)
    bce = -(m * ad.log(o) + (1.0 - m) * ad.log(1.0 - o))
    return bce.sum() + const


def total_loss(parts, weights, mask_supervision=True):
    """Weighted sum of the loss parts dict; rejects non-finite terms."""
    for name, t in parts.items():
        val = t.data if isinstance(t, ad.Tensor) else t
        if not np.isfinite(val):
            raise ad.NonFiniteError(f"loss term {name!r} is non-finite")
    out = parts["color"] + weights.eik * parts["eikonal"] \
        + weights.norm * parts["normal"]
    if mask_supervision and "mask" in parts:
        out = out + weights.mask * parts["mask"]
    return out


# -- batching --------------------------------------------------------------

def draw_ray_batch(scn, n_rays, rng):
    """Uniform draw over all pixels of all views, assembled in draw order."""
    h, w = scn.image_size
    views = rng.integers(0, scn.n_views, size=n_rays)
    us = rng.integers(0, w, size=n_rays)
    vs = rng.integers(0, h, size=n_rays)

    fields = {k: None for k in
              ("origins", "dirs", "colors", "masks", "near", "far", "valid")}
    no_masks = not scn.has_masks
    for view in np.unique(views):
        rows = np.nonzero(views == view)[0]
        sub = generate_rays(scn, int(view), np.stack([us[rows], vs[rows]], axis=1))
        for k in fields:
            part = getattr(sub, k)
            if part is None:
                continue
            if fields[k] is None:
                shape = (n_rays,) + part.shape[1:]
                fields[k] = np.zeros(shape, dtype=part.dtype)
            fields[k][rows] = part
    if no_masks:
        fields["masks"] = None
    return RayBatch(**fields)


def _slice_batch(batch, rows):
    masks = None if batch.masks is None else batch.masks[rows]
    return RayBatch(origins=batch.origins[rows], dirs=batch.dirs[rows],
                    colors=batch.colors[rows], masks=masks,
                    near=batch.near[rows], far=batch.far[rows],
                    valid=batch.valid[rows])


# -- optimizer --------------------------------------------------------------

def lr_at(t, total, cfg):
    lr = cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) \
        * (1.0 + np.cos(np.pi * t / total))
    if cfg.warmup_iters > 0 and t < cfg.warmup_iters:
        lr *= (t + 1) / cfg.warmup_iters
    return float(lr)


class Adam:
    def __init__(self, store, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {n: np.zeros_like(store[n].data)
                  for n in store.trainable_names()}
        self.v = {n: np.zeros_like(store[n].data)
                  for n in store.trainable_names()}

    def step(self, lr):
        self.step_count += 1
        t = self.step_count
        for name in sorted(self.m):
            g = self.store.grad(name)
            m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            mh = m / (1 - self.b1 ** t)
            vh = v / (1 - self.b2 ** t)
            p = self.store[name]
            p.data -= (lr * mh / (np.sqrt(vh) + self.eps)).astype(p.data.dtype)

    def state_tensors(self):
        out = {"opt/step": np.array(float(self.step_count))}
        for n in self.m:
            out[f"opt/m/{n}"] = self.m[n]
            out[f"opt/v/{n}"] = self.v[n]
        return out

    def load_state_tensors(self, tensors):
        self.step_count = int(tensors["opt/step"])
        for n in self.m:
            self.m[n] = tensors[f"opt/m/{n}"].astype(self.m[n].dtype)
            self.v[n] = tensors[f"opt/v/{n}"].astype(self.v[n].dtype)


# -- checkpoint plumbing -----------------------------------------------------

def save_training_checkpoint(path, model, opt, iteration):
    tensors = dict(model.store.state_dict())
    tensors.update(opt.state_tensors())
    meta = {"iteration": iteration,
            "model_config": model.config.to_dict(),
            "bbox": model.bbox.tolist()}
    return ckpt.save_checkpoint(path, tensors, meta)


def load_training_checkpoint(path):
    """-> (model, opt, iteration); a fresh Adam when moments are absent."""
    tensors, meta = ckpt.load_checkpoint(path)
    if meta is None or "model_config" not in meta:
        raise ckpt.CheckpointError("checkpoint lacks model metadata")
    model = NeudaModel(ModelConfig.from_dict(meta["model_config"]),
                       np.asarray(meta["bbox"]))
    params = {k: v for k, v in tensors.items() if not k.startswith("opt/")}
    model.store.load_state_dict(params)
    opt = Adam(model.store)
    if "opt/step" in tensors:
        opt.load_state_tensors(tensors)
    return model, opt, int(meta.get("iteration", 0))


# -- the loop ----------------------------------------------------------------

def _chunk_losses(model, batch, tc, denoms, rng, mask_on):
    """Render one ray chunk and return (value sums, gradient map)."""
    out = renderer.render_rays(batch, model, tc.sample_config(), rng)
    sums = {}
    sums["color"] = _color_sum(out, batch)
    sums["eikonal"] = _eikonal_sum(out) if out.grad_f is not None else 0.0
    sums["normal"] = _normal_sum(out) if out.weights is not None else 0.0
    if mask_on:
        sums["mask"] = _mask_sum(out, batch)

    w = tc.weights
    scaled = []
    if isinstance(sums["color"], ad.Tensor):
        scaled.append(sums["color"] / denoms["color"])
    if isinstance(sums["eikonal"], ad.Tensor):
        scaled.append(w.eik * sums["eikonal"] / denoms["eikonal"])
        scaled.append(w.norm * sums["normal"] / denoms["normal"])
    if mask_on and isinstance(sums["mask"], ad.Tensor):
        scaled.append(w.mask * sums["mask"] / denoms["mask"])

    gradmap = {}
    if scaled:
        loss = scaled[0]
        for term in scaled[1:]:
            loss = loss + term
        gradmap = ad.backward(loss)
    values = {k: (float(v.data) if isinstance(v, ad.Tensor) else float(v))
              for k, v in sums.items()}
    return values, gradmap


def train(scn, model_config=None, train_config=None, out_dir=None,
          workers=1, resume=None, verbose=False):
    """Optimize a model against a scene; returns a TrainResult.

    ``resume`` continues from a training checkpoint (the lr schedule picks
    up from the stored iteration). ``workers`` fans ray chunks out to
    threads; gradients are reduced in submit order either way.
    """
    mc = model_config or ModelConfig()
    tc = train_config or TrainConfig()
    if workers < 1:
        raise ValueError("workers must be >= 1")

    start_iter = 0
    if resume is not None:
        model, opt, start_iter = load_training_checkpoint(resume)
    else:
        model = NeudaModel(mc, scn.bbox)
        if tc.pretrain_steps > 0:
            model.geometric_init(radius=tc.pretrain_radius,
                                 steps=tc.pretrain_steps)
        opt = Adam(model.store, tc.beta1, tc.beta2, tc.eps)

    total_iters = tc.iterations
    n_rays = tc.rays_per_batch
    n_samples = tc.n_coarse + (tc.n_importance if tc.up_rounds > 0 else 0)
    mask_on = tc.mask_supervision and scn.has_masks
    csv_path = ckpt_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, "metrics.csv")

    metrics = []
    csv_fh = None
    writer = None
    if csv_path:
        fresh = start_iter == 0 or not os.path.exists(csv_path)
        csv_fh = open(csv_path, "w" if fresh else "a", newline="")
        writer = csv.writer(csv_fh)
        if fresh:
            writer.writerow(CSV_HEADER)

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        if start_iter >= total_iters and out_dir is not None:
            # nothing to run (e.g. iterations=0): persist the initialized model
            ckpt_path = os.path.join(out_dir, "model.ckpt")
            save_training_checkpoint(ckpt_path, model, opt, start_iter)
        for it in range(start_iter, total_iters):
            lr = lr_at(it, total_iters, tc)
            ss_draw = np.random.SeedSequence([tc.seed, 1000 + it])
            batch = draw_ray_batch(scn, n_rays, np.random.default_rng(ss_draw))

            n_valid = int(batch.valid.sum())
            denoms = {"color": 3.0 * n_rays,
                      "eikonal": max(n_valid * n_samples, 1),
                      "normal": max(n_valid, 1),
                      "mask": float(n_rays)}

            chunks = np.array_split(np.arange(n_rays), workers)
            chunk_rngs = [np.random.default_rng(
                np.random.SeedSequence([tc.seed, 1000 + it, 77 + c]))
                for c in range(len(chunks))]

            model.store.zero_grad()
            jobs = []
            try:
                if pool is not None:
                    for rows, crng in zip(chunks, chunk_rngs):
                        jobs.append(pool.submit(
                            _chunk_losses, model, _slice_batch(batch, rows),
                            tc, denoms, crng, mask_on))
                    results = [j.result() for j in jobs]
                else:
                    results = [_chunk_losses(model, _slice_batch(batch, rows),
                                             tc, denoms, crng, mask_on)
                               for rows, crng in zip(chunks, chunk_rngs)]
            except ad.NonFiniteError as e:
                # backward refuses non-finite losses; surface it as an abort
                raise TrainAbort(it, str(e), ckpt_path) from e

            part_vals = {k: 0.0 for k in
                         ("color", "eikonal", "normal", "mask")}
            for values, gradmap in results:
                for k, v in values.items():
                    part_vals[k] += v
                model.store.accumulate(gradmap)

            loss_c = part_vals["color"] / denoms["color"]
            loss_e = part_vals["eikonal"] / denoms["eikonal"]
            loss_n = part_vals["normal"] / denoms["normal"]
            loss_m = part_vals["mask"] / denoms["mask"] if mask_on else 0.0
            w = tc.weights
            total = loss_c + w.eik * loss_e + w.norm * loss_n \
                + (w.mask * loss_m if mask_on else 0.0)

            if not np.isfinite(total):
                bad = next((k for k, v in
                            {"color": loss_c, "eikonal": loss_e,
                             "normal": loss_n, "mask": loss_m}.items()
                            if not np.isfinite(v)), "total")
                raise TrainAbort(it, f"loss term {bad!r} is non-finite",
                                 ckpt_path)

            opt.step(lr)
            model.grid.clamp_offsets(model.store)

            last = it == total_iters - 1
            if it % tc.log_every == 0 or last:
                row = {"iter": it, "loss_c": loss_c, "loss_eik": loss_e,
                       "loss_norm": loss_n, "loss_mask": loss_m,
                       "total": total, "inv_s": model.inv_s(), "lr": lr}
                metrics.append(row)
                if writer:
                    writer.writerow([row["iter"]] + [repr(row[k])
                                    for k in CSV_HEADER[1:]])
                    csv_fh.flush()
                if verbose:
                    print(f"iter {it:6d}  total {total:.5f}  color {loss_c:.5f}"
                          f"  inv_s {model.inv_s():.4f}  lr {lr:.2e}")

            if out_dir is not None and (
                    last or (tc.checkpoint_every > 0
                             and (it + 1) % tc.checkpoint_every == 0)):
                ckpt_path = os.path.join(out_dir, "model.ckpt")
                save_training_checkpoint(ckpt_path, model, opt, it + 1)
    finally:
        if pool is not None:
            pool.shutdown()
        if csv_fh:
            csv_fh.close()

    return TrainResult(model, metrics, ckpt_path, csv_path)
