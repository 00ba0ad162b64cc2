"""Model assembly: anchor grid + SDF/color nets + sharpness under one ParamStore.

World coordinates are mapped into the grid's canonical cube by
``normalize``: x_n = (x - center) / scale with center/scale taken from the
scene bounding box (largest half-extent, kept isotropic so SDF values stay
metric up to the single scale factor). All field evaluation, including the
Eikonal constraint, happens in normalized coordinates.

The NeuS sharpness s is stored as log(s) and exponentiated on read so it
stays positive without constraints.

``geometric_init`` pretrains the SDF branch toward the signed distance of
a sphere (radius 0.5 in normalized coordinates) so volume rendering starts
from a well-formed surface. Anchor offsets stay frozen at zero during this
phase; only MLP weights (and grid features, in feature mode) move.
"""

import numpy as np

from . import autodiff as ad
from . import anchors, nets


class ModelConfig:
    """Validated bag of architecture hyper-parameters.

    Defaults are the desk-scale configuration; tests shrink them.
    """

    FIELDS = {
        "levels": 4,
        "base_res": 8,
        "growth": 1.38,
        "encoding": "hpe",            # hpe | mlpe
        "representation": "anchor",   # anchor | feature
        "feature_dim": 6,
        "mlpe_frequencies": 8,
        "deform": True,
        "offset_clamp_factor": 1.5,
        "max_grid_vertices": 20_000_000,
        "width": 64,
        "hidden_layers": 4,
        "skip": False,
        "inv_s_init": 0.3,
        "dtype": "float32",
        "seed": 0,
    }

    def __init__(self, **kw):
        unknown = set(kw) - set(self.FIELDS)
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        for k, v in self.FIELDS.items():
            setattr(self, k, kw.get(k, v))
        if self.encoding not in ("hpe", "mlpe"):
            raise ValueError(f"encoding must be hpe or mlpe, got {self.encoding!r}")
        if self.representation not in ("anchor", "feature"):
            raise ValueError(
                f"representation must be anchor or feature, got {self.representation!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.inv_s_init <= 0:
            raise ValueError("inv_s_init must be positive")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.FIELDS}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class NeudaModel:
    def __init__(self, config, bbox):
        self.config = config
        bbox = np.asarray(bbox, dtype=np.float64)
        if bbox.shape != (2, 3) or not np.all(bbox[1] > bbox[0]):
            raise ValueError("bbox must be (2,3) with max > min per axis")
        self.bbox = bbox
        self.center = (bbox[0] + bbox[1]) / 2.0
        self.scale = float(np.max(bbox[1] - bbox[0]) / 2.0)

        dt = np.float32 if config.dtype == "float32" else np.float64
        self.dtype = dt
        self.store = ad.ParamStore()
        res = anchors.level_resolutions(
            config.base_res, config.growth, config.levels,
            max_vertices=config.max_grid_vertices)
        self.grid = anchors.init_grid(
            self.store, res,
            encoding=config.encoding,
            representation=config.representation,
            feature_dim=config.feature_dim,
            mlpe_frequencies=config.mlpe_frequencies,
            offset_clamp_factor=config.offset_clamp_factor,
            deform=config.deform,
            dtype=dt,
            seed=config.seed,
        )
        self.sdf_plan = nets.init_sdf_net(
            self.store, in_dim=self.grid.embed_dim, width=config.width,
            hidden_layers=config.hidden_layers, skip=config.skip,
            dtype=dt, seed=config.seed)
        self.color_plan = nets.init_color_net(
            self.store, feature_width=config.width, width=config.width,
            hidden_layers=config.hidden_layers, dtype=dt, seed=config.seed)
        self.store.add("render/log_s",
                       np.array(np.log(1.0 / config.inv_s_init), dtype=dt))

    # -- coordinates -----------------------------------------------------

    def normalize(self, p_world):
        return (np.asarray(p_world, dtype=np.float64) - self.center) / self.scale

    def denormalize(self, p_norm):
        return np.asarray(p_norm, dtype=np.float64) * self.scale + self.center

    # -- sharpness -------------------------------------------------------

    def s_tensor(self):
        return ad.exp(self.store["render/log_s"])

    def inv_s(self):
        return float(np.exp(-self.store["render/log_s"].data))

    # -- field evaluation ------------------------------------------------

    def sdf_with_grad(self, p_norm, need_jac=True):
        """Tape evaluation at normalized points: (f, grad_f, n_hat, z, enc).

        grad_f is the spatial gradient of f w.r.t. the normalized
        coordinate, assembled from the grid Jacobian and the unrolled
        network input gradient; None when need_jac is False.
        """
        enc = self.grid.encode(p_norm, self.store, need_jac=need_jac)
        f, n_hat, z, dfdH = nets.sdf_forward(
            self.store, enc.H, self.sdf_plan, need_input_grad=need_jac)
        grad_f = None
        if need_jac:
            n = enc.H.shape[0]
            grad_f = (enc.dHdp @ dfdH.reshape(n, self.grid.embed_dim, 1)).reshape(n, 3)
        return f, grad_f, n_hat, z, enc

    def sdf_values(self, p_world, chunk=65536):
        """Plain SDF numbers at world points, graph-free, chunked."""
        p = self.normalize(p_world).reshape(-1, 3)
        out = np.empty(p.shape[0], dtype=np.float64)
        with ad.no_grad():
            for lo in range(0, p.shape[0], chunk):
                part = p[lo:lo + chunk]
                f, _, _, _, _ = self.sdf_with_grad(part, need_jac=False)
                out[lo:lo + chunk] = f.data.astype(np.float64)
        return out

    def colors(self, p_norm_t, dirs_world, grad_f, z):
        d_enc = nets.view_encode(dirs_world).astype(self.dtype)
        return nets.color_forward(self.store, p_norm_t, d_enc, grad_f, z,
                                  self.color_plan)

    # -- initialization --------------------------------------------------

    def geometric_init(self, radius=0.5, steps=600, batch=512, lr=3e-3, seed=None):
        """Pretrain the SDF branch toward sphere(radius) in normalized coords.

        Returns the final fit loss. Offsets are excluded so anchors start
        on the lattice; log_s and the color net are untouched. The learning
        rate decays on a cosine from ``lr`` to lr/30.
        """
        seed = self.config.seed if seed is None else seed
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E0]))
        exclude = {f"grid/l{l}/offsets" for l in range(len(self.grid.levels))}
        exclude |= {n for n in self.store.names() if n.startswith("net/color/")}
        exclude.add("render/log_s")
        names = [n for n in self.store.trainable_names() if n not in exclude]
        opt_m = {n: np.zeros_like(self.store[n].data) for n in names}
        opt_v = {n: np.zeros_like(self.store[n].data) for n in names}
        b1, b2, eps = 0.9, 0.999, 1e-8
        lr_end = lr / 30.0
        last = None
        for step in range(1, steps + 1):
            lr_t = lr_end + 0.5 * (lr - lr_end) * (1 + np.cos(np.pi * (step - 1) / steps))
            half = batch // 2
            p_unif = rng.uniform(-1.0, 1.0, size=(half, 3))
            sph = rng.normal(size=(batch - half, 3))
            sph /= np.maximum(np.linalg.norm(sph, axis=1, keepdims=True), 1e-12)
            r = radius + rng.normal(0.0, 0.1, size=(batch - half, 1))
            pts = np.concatenate([p_unif, sph * r], axis=0)
            target = np.linalg.norm(pts, axis=1) - radius

            f, grad_f, _, _, _ = self.sdf_with_grad(pts, need_jac=True)
            gn = ad.sqrt((grad_f * grad_f).sum(axis=1) + 1e-12)
            loss = ((f - target.astype(self.dtype)) ** 2).mean() \
                + 0.1 * ((gn - 1.0) ** 2).mean()
            grads = ad.backward(loss)
            last = float(loss.data)
            for n in names:
                t = self.store[n]
                g = grads.get(t)
                if g is None:
                    continue
                opt_m[n] = b1 * opt_m[n] + (1 - b1) * g
                opt_v[n] = b2 * opt_v[n] + (1 - b2) * g * g
                mh = opt_m[n] / (1 - b1 ** step)
                vh = opt_v[n] / (1 - b2 ** step)
                t.data -= (lr_t * mh / (np.sqrt(vh) + eps)).astype(t.data.dtype)
        return last
