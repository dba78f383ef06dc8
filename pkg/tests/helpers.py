"""Independent oracles shared by the test modules."""

import numpy as np

from bootmae import tensor as T


def central_difference(loss_fn, arrays, h=1e-5, max_coords=None, rng=None):
    """Numerical gradient of ``loss_fn()`` w.r.t. each array (mutated in place).

    With ``max_coords`` only that many random coordinates per array are
    probed; the rest of the returned gradient is NaN.
    """
    grads = []
    for arr in arrays:
        g = np.full(arr.shape, np.nan)
        flat_idx = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            flat_idx = rng.choice(arr.size, size=max_coords, replace=False)
        for i in flat_idx:
            idx = np.unravel_index(i, arr.shape)
            old = arr[idx]
            arr[idx] = old + h
            up = loss_fn()
            arr[idx] = old - h
            down = loss_fn()
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_error(analytic, numeric):
    mask = ~np.isnan(numeric)
    a, n = analytic[mask], numeric[mask]
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-10)
    return float(np.linalg.norm(a - n) / denom)


def check_op_gradients(op, arrays, rng, h=1e-5):
    """Norm-wise relative error between backward() and central differences.

    Measured over all inputs at once: some inputs (a key bias, say) have an
    identically zero gradient, where a per-input ratio compares noise.

    The scalar checked is ``sum(op(*inputs) * W)`` for a fixed random ``W``
    so that every output adjoint entry is exercised.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = {}

    def loss_value():
        out = op(*[T.Tensor(a) for a in arrays])
        if "w" not in probe:
            probe["w"] = rng.standard_normal(out.shape)
        return float(np.sum(out.data * probe["w"]))

    loss_value()
    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*tensors)
    T.sum(T.mul(out, probe["w"])).backward()
    numeric = central_difference(loss_value, arrays, h)
    return rel_error(np.concatenate([t.grad.ravel() for t in tensors]),
                     np.concatenate([n.ravel() for n in numeric]))


def softmax_rows(x):
    """Straight-line row softmax with plain Python arithmetic."""
    out = []
    for row in x:
        m = max(row)
        e = [np.exp(v - m) for v in row]
        s = sum(e)
        out.append([v / s for v in e])
    return np.array(out)


def attention_loops(q, k, v, scale):
    """softmax(q k^T * scale) v with explicit loops."""
    scores = [[scale * sum(q[i][c] * k[j][c] for c in range(len(q[i]))) for j in range(len(k))]
              for i in range(len(q))]
    w = softmax_rows(scores)
    return np.array([[sum(w[i][j] * v[j][c] for j in range(len(k))) for c in range(len(v[0]))]
                     for i in range(len(q))]), w


def layer_norm_loops(x, g, b, eps=1e-6):
    out = []
    for row in x:
        mu = sum(row) / len(row)
        var = sum((r - mu) ** 2 for r in row) / len(row)
        out.append([(r - mu) / np.sqrt(var + eps) * gi + bi for r, gi, bi in zip(row, g, b)])
    return np.array(out)


def largest_component_bfs(grid):
    """4-connected largest component by breadth-first search."""
    h, w = grid.shape
    seen = np.zeros_like(grid, dtype=bool)
    best = 0
    for sy in range(h):
        for sx in range(w):
            if not grid[sy, sx] or seen[sy, sx]:
                continue
            queue, size = [(sy, sx)], 0
            seen[sy, sx] = True
            while queue:
                y, x = queue.pop()
                size += 1
                for ny, nx in ((y + 1, x), (y - 1, x), (y, x + 1), (y, x - 1)):
                    if 0 <= ny < h and 0 <= nx < w and grid[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            best = max(best, size)
    return best


def gelu_scalar(x):
    from math import erf, sqrt
    return 0.5 * x * (1.0 + erf(x / sqrt(2.0)))


def linear_loops(x, w, b=None):
    out = [[sum(row[i] * w[i][j] for i in range(len(row))) for j in range(len(w[0]))] for row in x]
    if b is not None:
        out = [[v + b[j] for j, v in enumerate(row)] for row in out]
    return np.array(out)


def cross_attention_loops(z, inject, wq, wk, wv):
    """Decoder tokens plus single-head attention over injected features."""
    q, k, v = linear_loops(z, wq), linear_loops(inject, wk), linear_loops(inject, wv)
    attended, _ = attention_loops(q, k, v, 1.0 / np.sqrt(len(z[0])))
    return np.array(z) + attended


def decoder_block_loops(x, inject, p, prefix, heads):
    """Straight-line pre-norm block: self-attention, cross-attention, MLP.

    ``p`` maps parameter names to float64 arrays.
    """
    def P(name):
        return p[f"{prefix}.{name}"]

    x = np.array(x, dtype=np.float64)
    d = x.shape[1]
    dh = d // heads
    h = layer_norm_loops(x.tolist(), P("norm1.g"), P("norm1.b"))
    q = linear_loops(h, P("attn.q.w"), P("attn.q.b"))
    k = linear_loops(h, P("attn.k.w"), P("attn.k.b"))
    v = linear_loops(h, P("attn.v.w"), P("attn.v.b"))
    merged = np.concatenate([attention_loops(q[:, s:s + dh], k[:, s:s + dh], v[:, s:s + dh],
                                             1.0 / np.sqrt(dh))[0]
                             for s in range(0, d, dh)], axis=1)
    x = x + linear_loops(merged, P("attn.proj.w"), P("attn.proj.b"))
    src = layer_norm_loops(x.tolist(), P("cross.norm.g"), P("cross.norm.b")) \
        if f"{prefix}.cross.norm.g" in p else x
    cq = linear_loops(src, P("cross.q.w"))
    ck, cv = linear_loops(inject, P("cross.k.w")), linear_loops(inject, P("cross.v.w"))
    att, _ = attention_loops(cq, ck, cv, 1.0 / np.sqrt(d))
    if f"{prefix}.cross.proj.w" in p:
        att = linear_loops(att, P("cross.proj.w"), P("cross.proj.b"))
    x = x + att
    h = layer_norm_loops(x.tolist(), P("norm2.g"), P("norm2.b"))
    hidden = np.vectorize(gelu_scalar)(linear_loops(h, P("mlp.fc1.w"), P("mlp.fc1.b")))
    return x + linear_loops(hidden, P("mlp.fc2.w"), P("mlp.fc2.b"))


def randomize(params, rng, std=0.3):
    """Replace every parameter with noise so no zero-initialized path hides."""
    for p in params.values():
        p.data = (rng.standard_normal(p.shape) * std).astype(p.dtype)
    return params


def composed_loss_check(cfg, seed=0, batch=2, coords=4):
    """Relative error of the full two-branch loss gradient in float64.

    Every parameter is randomized; momentum-encoder targets come from a
    perturbed copy of the encoder and are constants. ``coords`` random
    entries per parameter tensor are probed by central differences.
    """
    from bootmae.masking import make_plan, patchify
    from bootmae.model import BatchIndex, BootMAEModel
    from bootmae.momentum import target_features
    from bootmae.objectives import masked_mse, normalize_patches

    rng = np.random.default_rng(seed)
    model = BootMAEModel(cfg, seed=seed).astype(np.float64)
    randomize(model.params, rng)
    shadow = {k: v.data + 0.05 * rng.standard_normal(v.shape)
              for k, v in model.params.items() if k.startswith("encoder.")}
    images = rng.random((batch, cfg.img_size, cfg.img_size, cfg.in_chans))
    lo, hi = cfg.block_bounds()
    plans = [make_plan(cfg.mask, cfg.grid, cfg.grid, cfg.mask_ratio, rng, lo, hi) for _ in range(batch)]
    index = BatchIndex.from_plans(plans)
    patches = patchify(images, cfg.patch_size)
    pix = normalize_patches(np.take_along_axis(patches, index.masked[..., None], axis=1))
    feats, rows, weights = target_features(model, patches, index, shadow)

    def loss():
        art = model.forward_patches(patches, index)
        return T.add(masked_mse(art.x_bar, pix, index.masked, index.weights),
                     T.scale(masked_mse(art.f_bar, feats, rows, weights), cfg.lam))

    for p in model.params.values():
        p.zero_grad()
    loss().backward()
    names = sorted(model.params)
    arrays = [model.params[n].data for n in names]
    with T.no_grad():
        numeric = central_difference(lambda: loss().item(), arrays, max_coords=coords, rng=rng)
    analytic = np.concatenate([model.params[n].grad.ravel() for n in names])
    return rel_error(analytic, np.concatenate([g.ravel() for g in numeric]))
