"""Slow, obviously-correct reference implementations used only by tests."""

from __future__ import annotations

import numpy as np

from rfdamp.model import ArchSpec, arch_geometry, build
from rfdamp.rf import max_rf


def naive_conv2d(x, w, b=None, stride=(1, 1), padding=(0, 0)):
    """Six nested loops; cross-correlation in float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, t, f = x.shape
    o, _, kt, kf = w.shape
    st, sf = stride
    pt, pf = padding
    xp = np.zeros((n, c, t + 2 * pt, f + 2 * pf))
    xp[:, :, pt:pt + t, pf:pf + f] = x
    to = (t + 2 * pt - kt) // st + 1
    fo = (f + 2 * pf - kf) // sf + 1
    out = np.zeros((n, o, to, fo))
    for i in range(n):
        for j in range(o):
            for u in range(to):
                for v in range(fo):
                    acc = 0.0
                    for ci in range(c):
                        for a in range(kt):
                            for bb in range(kf):
                                acc += xp[i, ci, u * st + a, v * sf + bb] * w[j, ci, a, bb]
                    out[i, j, u, v] = acc + (0.0 if b is None else b[j])
    return out


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def to_float64(module):
    """Switch every parameter and buffer of ``module`` to float64 in place."""
    for _, t in list(module.named_parameters()) + list(module.named_buffers()):
        t.data = t.data.astype(np.float64)
    return module


def rf_by_gradient_support(network, input_shape):
    """Extent of the input region influencing the central output unit.

    The network must be in linear mode with strictly positive weights so no
    gradient cancels; the support of d(out)/d(input) is then exactly the
    theoretical receptive field (clipped at the input border).
    """
    x = np.zeros((1, *input_shape))
    network.eval()
    feats = network.forward_features(x)
    ct, cf = feats.shape[2] // 2, feats.shape[3] // 2
    g = np.zeros_like(feats)
    g[0, 0, ct, cf] = 1.0
    gx = np.abs(network.backward_features(g)).sum(axis=(0, 1))
    rows = np.flatnonzero(gx.any(axis=1))
    cols = np.flatnonzero(gx.any(axis=0))
    return (int(rows[0]), int(rows[-1])), (int(cols[0]), int(cols[-1])), (ct, cf)


def hz_to_mel_htk(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def support_matches(spec: ArchSpec) -> tuple[bool, str]:
    """Gradient support of a positive linear net equals the computed RF box."""
    net = build(spec, seed=0)
    for _, p in net.named_parameters():
        p.data[...] = np.abs(p.data) + 0.1
    net.set_linear(True)
    r = max_rf(arch_geometry(spec))
    # input big enough that the central unit's RF box is fully inside
    size = 2 * r.rf_t + 4 * r.jump_t
    (t0, t1), (f0, f1), (ct, cf) = rf_by_gradient_support(net, (1, size, size))
    (et0, et1), (ef0, ef1) = r.span(ct, cf)
    ok = (t1 - t0 + 1, f1 - f0 + 1) == (r.rf_t, r.rf_f) and (t0, t1, f0, f1) == (et0, et1, ef0, ef1)
    return ok, f"spec={spec} support=({t0},{t1})x({f0},{f1}) expected=({et0},{et1})x({ef0},{ef1})"
