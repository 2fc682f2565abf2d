"""Compiled kernels for the coupled reduced dynamics.

Mirrors :class:`romsuite.closure.CoupledDynamics` (the numpy reference) and the
generic RK4 / checkpointed-adjoint loops of :mod:`romsuite.odeint`, fused so a
whole rollout or reverse sweep is a single call. The network lives in the flat
parameter layout; ``widths`` lists the layer sizes, ``w_pos`` the offset of
each layer's weights in ``flat`` and ``a_off`` the offset of each layer's
activations in the per-row activation buffer.

``model`` below is the tuple
``(L, A_flat, Wv, bv, flat, widths, w_pos, a_off, in_shift, in_scale,
out_shift, out_scale, horizons, rates, flat_t)`` where ``flat_t`` holds each
weight matrix transposed at the same offsets.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _speeds(c0, amps, t, out):
    for b in range(c0.shape[0]):
        value = c0[b]
        for j in range(amps.shape[1]):
            value += amps[b, j] * math.sin(2.0 * math.pi * t / (2.0 ** (j + 4)))
        out[b] = value


@njit(cache=True)
def _stage(z, S, model, au, Aa, acts, out):
    """Right-hand side for every row of ``z``; fills the caches used by ``_stage_vjp``."""
    (L, A_flat, Wv, bv, flat, widths, w_pos, a_off, in_shift, in_scale,
     out_shift, out_scale, horizons, rates, flat_t) = model
    B = z.shape[0]
    n_T = L.shape[0]
    n_u = Wv.shape[0]
    m = z.shape[1] - n_T
    d = n_T + 1
    for b in range(B):
        for k in range(n_u):
            acc = bv[k] + Wv[k, n_T] * S[b]
            for i in range(n_T):
                acc += Wv[k, i] * z[b, i]
            au[b, k] = acc
        for r in range(n_u * n_T):
            acc = 0.0
            for i in range(n_T):
                acc += A_flat[r, i] * z[b, i]
            Aa[b, r] = acc
        for i in range(n_T):
            acts[b, i] = (z[b, i] - in_shift[i]) / in_scale[i]
        for k in range(n_u):
            acts[b, n_T + k] = (au[b, k] - in_shift[n_T + k]) / in_scale[n_T + k]
        c = n_T + n_u
        acts[b, c] = (S[b] - in_shift[c]) / in_scale[c]
        for i in range(m):
            acts[b, c + 1 + i] = (z[b, n_T + i] - in_shift[c + 1 + i]) / in_scale[c + 1 + i]

    n_layers = widths.shape[0] - 1
    pre = np.empty(widths.max())
    for layer in range(n_layers):
        n_in = widths[layer]
        n_out = widths[layer + 1]
        p0 = w_pos[layer]
        WT = flat_t[p0:p0 + n_in * n_out].reshape((n_in, n_out))
        bias = flat[p0 + n_in * n_out:p0 + n_in * n_out + n_out]
        lo = a_off[layer]
        hi = a_off[layer + 1]
        last = layer == n_layers - 1
        # explicit loops keep every row independent of the batch size; each
        # output still sums its inputs in order i = 0, 1, ...
        # (slice views indexed by the loop counter let the loops vectorize)
        for b in range(B):
            for j in range(n_out):
                pre[j] = 0.0
            for i in range(n_in):
                h = acts[b, lo + i]
                w = WT[i]
                for j in range(n_out):
                    pre[j] += w[j] * h
            dst = acts[b, hi:hi + n_out]
            for j in range(n_out):
                v = pre[j] + bias[j]
                dst[j] = v if last else math.tanh(v)

    off = a_off[n_layers]
    for b in range(B):
        for j in range(n_T):
            acc = 0.0
            for i in range(n_T):
                acc += L[j, i] * z[b, i]
            for k in range(n_u):
                acc -= au[b, k] * Aa[b, k * n_T + j]
            out[b, j] = acc + (acts[b, off + j] * out_scale[j] + out_shift[j])
        for h in range(horizons):
            for i in range(d):
                ch = h * d + i
                x = z[b, i] if i < n_T else S[b]
                out[b, n_T + ch] = -rates[ch] * z[b, n_T + ch] + x


@njit(cache=True)
def _stage_vjp(z, cot, model, au, Aa, acts, gz, gp):
    """``gz = cot^T d rhs/dz``; adds the batch-summed parameter gradient to ``gp``.

    Uses the caches written by ``_stage`` at the same ``z``.
    """
    (L, A_flat, Wv, bv, flat, widths, w_pos, a_off, in_shift, in_scale,
     out_shift, out_scale, horizons, rates, flat_t) = model
    B = z.shape[0]
    n_T = L.shape[0]
    n_u = Wv.shape[0]
    m = z.shape[1] - n_T
    d = n_T + 1
    n_layers = widths.shape[0] - 1

    g_h = np.empty((B, n_T))
    for b in range(B):
        for j in range(n_T):
            g_h[b, j] = cot[b, j] * out_scale[j]
    for layer in range(n_layers - 1, -1, -1):
        n_in = widths[layer]
        n_out = widths[layer + 1]
        if layer != n_layers - 1:
            out_lo = a_off[layer + 1]
            for b in range(B):
                for j in range(n_out):
                    h = acts[b, out_lo + j]
                    g_h[b, j] *= 1.0 - h * h
        p0 = w_pos[layer]
        lo = a_off[layer]
        # rows are reduced in order b = 0, 1, ... for run-to-run determinism
        for b in range(B):
            a = acts[b, lo:lo + n_in]
            for j in range(n_out):
                gj = g_h[b, j]
                row = gp[p0 + j * n_in:p0 + (j + 1) * n_in]
                for i in range(n_in):
                    row[i] += gj * a[i]
                gp[p0 + n_in * n_out + j] += gj
        W = flat[p0:p0 + n_in * n_out].reshape((n_out, n_in))
        g_in = np.zeros((B, n_in))
        for b in range(B):
            gi = g_in[b]
            for j in range(n_out):
                gj = g_h[b, j]
                w = W[j]
                for i in range(n_in):
                    gi[i] += gj * w[i]
        g_h = g_in

    theta0 = gp.shape[0] - m
    for b in range(B):
        # network input: [a, a_u, S, y] normalized
        g_au = np.empty(n_u)
        for i in range(n_T):
            gz[b, i] = g_h[b, i] / in_scale[i]
        for k in range(n_u):
            g_au[k] = g_h[b, n_T + k] / in_scale[n_T + k]
        c = n_T + n_u + 1
        for i in range(m):
            gz[b, n_T + i] = g_h[b, c + i] / in_scale[c + i]
        # reducible part R = L a - sum_k a_u[k] A_k a
        for i in range(n_T):
            acc = 0.0
            for j in range(n_T):
                ga = cot[b, j]
                acc += ga * L[j, i]
                for k in range(n_u):
                    acc -= au[b, k] * ga * A_flat[k * n_T + j, i]
            gz[b, i] += acc
        for k in range(n_u):
            acc = 0.0
            for j in range(n_T):
                acc += cot[b, j] * Aa[b, k * n_T + j]
            g_au[k] -= acc
        # memory dy = -rates * y + tile([a, S])
        for h in range(horizons):
            for i in range(d):
                ch = h * d + i
                gy = cot[b, n_T + ch]
                gz[b, n_T + ch] -= rates[ch] * gy
                gp[theta0 + ch] -= rates[ch] * z[b, n_T + ch] * gy
                if i < n_T:
                    gz[b, i] += gy
        # velocity map a_u = Wv [a; S] + bv
        for i in range(n_T):
            acc = 0.0
            for k in range(n_u):
                acc += g_au[k] * Wv[k, i]
            gz[b, i] += acc


def caches(B, model):
    """Scratch buffers ``(au, Aa, acts)`` for ``rhs`` and ``vjp``."""
    n_u = model[2].shape[0]
    n_T = model[0].shape[0]
    return (np.empty((B, n_u)), np.empty((B, n_u * n_T)), np.empty((B, int(model[5].sum()))))


@njit(cache=True)
def rhs(z, S, model, au, Aa, acts, out):
    _stage(z, S, model, au, Aa, acts, out)


@njit(cache=True)
def vjp(z, S, cot, model, au, Aa, acts, gz, gp):
    tmp = np.empty_like(z)
    _stage(z, S, model, au, Aa, acts, tmp)
    gp[:] = 0.0
    _stage_vjp(z, cot, model, au, Aa, acts, gz, gp)


@njit(cache=True)
def rk4_forward(z0, c0, amps, t0, dt, n_steps, stride, seg, model, samples, checkpoints):
    """Returns -1 on success or the step index at which the state became non-finite."""
    B, n = z0.shape
    n_T = model[0].shape[0]
    n_u = model[2].shape[0]
    n_acts = 0
    for w in model[5]:
        n_acts += w
    au = np.empty((B, n_u))
    Aa = np.empty((B, n_u * n_T))
    acts = np.empty((B, n_acts))
    k1 = np.empty((B, n))
    k2 = np.empty((B, n))
    k3 = np.empty((B, n))
    k4 = np.empty((B, n))
    S1 = np.empty(B)
    S2 = np.empty(B)
    S4 = np.empty(B)
    half = 0.5 * dt
    z = z0.copy()
    samples[0] = z
    for step in range(n_steps):
        if step % seg == 0:
            checkpoints[step // seg] = z
        t = t0 + step * dt
        _speeds(c0, amps, t, S1)
        _speeds(c0, amps, t + half, S2)
        _speeds(c0, amps, t + dt, S4)
        _stage(z, S1, model, au, Aa, acts, k1)
        _stage(z + half * k1, S2, model, au, Aa, acts, k2)
        _stage(z + half * k2, S2, model, au, Aa, acts, k3)
        _stage(z + dt * k3, S4, model, au, Aa, acts, k4)
        z = z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        for b in range(B):
            for i in range(n):
                if not math.isfinite(z[b, i]):
                    return step
        if (step + 1) % stride == 0:
            samples[(step + 1) // stride] = z
    return -1


@njit(cache=True)
def rk4_backward(checkpoints, cots, c0, amps, t0, dt, n_steps, stride, seg, model, gz0, gp):
    """Reverse sweep over checkpointed RK4 segments; writes ``gz0`` and ``gp``."""
    B = cots.shape[1]
    n = cots.shape[2]
    n_T = model[0].shape[0]
    n_u = model[2].shape[0]
    n_acts = 0
    for w in model[5]:
        n_acts += w
    zs = np.empty((seg, 4, B, n))
    c_au = np.empty((seg, 4, B, n_u))
    c_Aa = np.empty((seg, 4, B, n_u * n_T))
    c_acts = np.empty((seg, 4, B, n_acts))
    k = np.empty((4, B, n))
    S = np.empty((3, B))
    g = np.empty((4, B, n))
    half = 0.5 * dt
    gp[:] = 0.0
    adj = cots[cots.shape[0] - 1].copy()
    n_seg = (n_steps + seg - 1) // seg
    for s in range(n_seg - 1, -1, -1):
        start = s * seg
        stop = min(start + seg, n_steps)
        z = checkpoints[s].copy()
        for step in range(start, stop):
            i = step - start
            t = t0 + step * dt
            _speeds(c0, amps, t, S[0])
            _speeds(c0, amps, t + half, S[1])
            _speeds(c0, amps, t + dt, S[2])
            zs[i, 0] = z
            _stage(zs[i, 0], S[0], model, c_au[i, 0], c_Aa[i, 0], c_acts[i, 0], k[0])
            zs[i, 1] = z + half * k[0]
            _stage(zs[i, 1], S[1], model, c_au[i, 1], c_Aa[i, 1], c_acts[i, 1], k[1])
            zs[i, 2] = z + half * k[1]
            _stage(zs[i, 2], S[1], model, c_au[i, 2], c_Aa[i, 2], c_acts[i, 2], k[2])
            zs[i, 3] = z + dt * k[2]
            _stage(zs[i, 3], S[2], model, c_au[i, 3], c_Aa[i, 3], c_acts[i, 3], k[3])
            z = z + (dt / 6.0) * (k[0] + 2.0 * k[1] + 2.0 * k[2] + k[3])
        for step in range(stop - 1, start - 1, -1):
            i = step - start
            _stage_vjp(zs[i, 3], (dt / 6.0) * adj, model, c_au[i, 3], c_Aa[i, 3],
                       c_acts[i, 3], g[3], gp)
            _stage_vjp(zs[i, 2], (dt / 3.0) * adj + dt * g[3], model, c_au[i, 2], c_Aa[i, 2],
                       c_acts[i, 2], g[2], gp)
            _stage_vjp(zs[i, 1], (dt / 3.0) * adj + half * g[2], model, c_au[i, 1], c_Aa[i, 1],
                       c_acts[i, 1], g[1], gp)
            _stage_vjp(zs[i, 0], (dt / 6.0) * adj + half * g[1], model, c_au[i, 0], c_Aa[i, 0],
                       c_acts[i, 0], g[0], gp)
            adj = adj + g[3] + g[2] + g[1] + g[0]
            if step % stride == 0:
                adj = adj + cots[step // stride]
    gz0[:] = adj
