"""The SDF network and the color network, as shallow softplus MLPs.

The SDF net maps the grid embedding H(p) to a signed distance f, a
predicted normal head, and a geometric feature vector; hidden layers use
softplus with beta = 100 (numerically a smooth relu), heads are linear.
Because training losses need the spatial gradient of f, ``sdf_forward``
can also emit df/dH as a tape expression: the chain of layer Jacobians is
unrolled in reverse with sigmoid(beta z) factors reusing the forward
pre-activations, so one reverse pass over the loss differentiates through
the gradient itself without second-order support.

The color net consumes the raw normalized point, the frequency-encoded
view direction, the (renormalized) gradient normal, and the feature
vector; its output passes through a sigmoid per channel.
"""

import numpy as np

from . import autodiff as ad

SOFTPLUS_BETA = 100.0
VIEW_FREQS = 4
VIEW_DIM = 3 + 6 * VIEW_FREQS


def view_encode(d):
    """(N, 3) unit directions -> (N, 27): raw d then sin/cos per frequency."""
    d = np.asarray(d)
    parts = [d]
    for k in range(VIEW_FREQS):
        ang = (2 ** k * np.pi) * d
        parts.append(np.sin(ang))
        parts.append(np.cos(ang))
    return np.concatenate(parts, axis=1)


def _he_normal(rng, fan_in, shape, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def init_sdf_net(store, in_dim, width=64, hidden_layers=4, skip=False,
                 dtype=np.float32, seed=0):
    """Register SDF net parameters; returns the static layer plan."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5DF]))
    skip_at = hidden_layers // 2 if skip and hidden_layers >= 2 else -1
    widths = []
    d = in_dim
    for i in range(hidden_layers):
        if i == skip_at:
            d += in_dim
        widths.append(d)
        store.add(f"net/sdf/W{i}", _he_normal(rng, d, (d, width), dtype))
        store.add(f"net/sdf/b{i}", np.zeros(width, dtype=dtype))
        d = width
    for head, hdim in (("f", 1), ("n", 3), ("z", width)):
        store.add(f"net/sdf/head_{head}_W",
                  (rng.standard_normal((width, hdim)) * 0.05).astype(dtype))
        store.add(f"net/sdf/head_{head}_b", np.zeros(hdim, dtype=dtype))
    return {"in_dim": in_dim, "width": width, "hidden_layers": hidden_layers,
            "skip_at": skip_at, "layer_in_widths": widths}


def sdf_forward(store, H, plan, need_input_grad=False):
    """(f, n_hat, z, df/dH); the last is None unless requested.

    ``H``: (P, D) Tensor with D equal to the registered input width.
    """
    if H.shape[1] != plan["in_dim"]:
        raise ValueError(
            f"embedding dim mismatch: expected {plan['in_dim']}, got {H.shape[1]}")
    h = H
    pre = []
    for i in range(plan["hidden_layers"]):
        if i == plan["skip_at"]:
            h = ad.concat([h, H], axis=1)
        zi = h @ store[f"net/sdf/W{i}"] + store[f"net/sdf/b{i}"]
        pre.append(zi)
        h = ad.softplus(zi, beta=SOFTPLUS_BETA)
    f = (h @ store["net/sdf/head_f_W"] + store["net/sdf/head_f_b"]).reshape(-1)
    n_hat = h @ store["net/sdf/head_n_W"] + store["net/sdf/head_n_b"]
    z = h @ store["net/sdf/head_z_W"] + store["net/sdf/head_z_b"]
    dfdH = None
    if need_input_grad:
        u = store["net/sdf/head_f_W"].transpose()        # (1, W)
        skip_part = None
        for i in reversed(range(plan["hidden_layers"])):
            u = u * ad.sigmoid(pre[i] * SOFTPLUS_BETA)
            u = u @ store[f"net/sdf/W{i}"].transpose()
            if i == plan["skip_at"]:
                skip_part = u[:, -plan["in_dim"]:]
                u = u[:, :-plan["in_dim"]]
        dfdH = u if skip_part is None else u + skip_part
    return f, n_hat, z, dfdH


def init_color_net(store, feature_width, width=64, hidden_layers=4,
                   dtype=np.float32, seed=0):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0109]))
    in_dim = 3 + VIEW_DIM + 3 + feature_width
    d = in_dim
    for i in range(hidden_layers):
        store.add(f"net/color/W{i}", _he_normal(rng, d, (d, width), dtype))
        store.add(f"net/color/b{i}", np.zeros(width, dtype=dtype))
        d = width
    store.add("net/color/out_W",
              (rng.standard_normal((width, 3)) * 0.05).astype(dtype))
    store.add("net/color/out_b", np.zeros(3, dtype=dtype))
    return {"in_dim": in_dim, "width": width, "hidden_layers": hidden_layers}


def color_forward(store, x, d_encoded, n, z, plan):
    """RGB in (0,1): sigmoid MLP over (x, encoded view, unit normal, feature)."""
    nn = n / ad.sqrt(ad.clamp((n * n).sum(axis=1, keepdims=True), lo=1e-16))
    h = ad.concat([x, d_encoded, nn, z], axis=1)
    if h.shape[1] != plan["in_dim"]:
        raise ValueError(
            f"color input dim mismatch: expected {plan['in_dim']}, got {h.shape[1]}")
    for i in range(plan["hidden_layers"]):
        h = ad.softplus(h @ store[f"net/color/W{i}"] + store[f"net/color/b{i}"],
                        beta=SOFTPLUS_BETA)
    return ad.sigmoid(h @ store["net/color/out_W"] + store["net/color/out_b"])
