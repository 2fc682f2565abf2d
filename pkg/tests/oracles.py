"""Independent extended-precision restatements used as finite-difference oracles.

The dynamics are rewritten from scratch over a pluggable number type. With
``np.longdouble`` (64-bit mantissa on x86) central differences at step 1e-6 carry
about 1e-13 relative noise; with ``mpmath`` at 40 digits the noise is negligible,
which matters for gradient entries near 1e-8.
"""

import mpmath
import numpy as np

LD = np.longdouble
mpmath.mp.dps = 40


class Arith:
    """Number type plus the elementwise functions the dynamics need."""

    def __init__(self, kind):
        self.kind = kind
        if kind == "ld":
            self.cast = lambda x: np.asarray(x, dtype=np.float64).astype(LD)
            self.tanh, self.exp, self.sin = np.tanh, np.exp, np.sin
            self.pi = LD(np.pi)
        else:
            to_mp = np.vectorize(lambda v: mpmath.mpf(float(v)), otypes=[object])
            self.cast = lambda x: to_mp(np.asarray(x, dtype=np.float64))
            self.tanh = np.vectorize(mpmath.tanh, otypes=[object])
            self.exp = np.vectorize(mpmath.exp, otypes=[object])
            self.sin = mpmath.sin
            self.pi = mpmath.pi

    def scalar(self, x):
        return LD(x) if self.kind == "ld" else mpmath.mpf(x)


MP = Arith("mp")
LDA = Arith("ld")


class OracleModel:
    """Coupled ROM + closure in extended precision, parameters taken from a flat vector."""

    def __init__(self, rom, vmap, closure, arith=LDA):
        ar = self.ar = arith
        self.L = ar.cast(rom.L_red)
        self.A = ar.cast(rom.A_red)
        self.Wv = ar.cast(vmap.W)
        self.bv = ar.cast(vmap.b)
        n = closure.normalizer
        self.in_shift, self.in_scale = ar.cast(n.in_shift), ar.cast(n.in_scale)
        self.out_shift, self.out_scale = ar.cast(n.out_shift), ar.cast(n.out_scale)
        self.widths = closure.mlp.widths
        self.k = closure.memory.horizons
        self.n_T = rom.n_T

    def unpack(self, flat):
        layers, pos = [], 0
        for n_in, n_out in zip(self.widths[:-1], self.widths[1:]):
            W = flat[pos:pos + n_in * n_out].reshape(n_out, n_in)
            pos += n_in * n_out
            b = flat[pos:pos + n_out]
            pos += n_out
            layers.append((W, b))
        return layers, flat[pos:]

    def rhs(self, z, S, flat):
        layers, theta = self.unpack(flat)
        a, y = z[:self.n_T], z[self.n_T:]
        x = np.concatenate([a, np.array([S], dtype=a.dtype)])
        au = self.Wv.dot(x) + self.bv
        R = self.L.dot(a)
        for k in range(self.A.shape[0]):
            R = R - au[k] * self.A[k].dot(a)
        h = (np.concatenate([a, au, np.array([S], dtype=a.dtype), y]) - self.in_shift) / self.in_scale
        for i, (W, b) in enumerate(layers):
            h = W.dot(h) + b
            if i < len(layers) - 1:
                h = self.ar.tanh(h)
        da = R + h * self.out_scale + self.out_shift
        dy = -self.ar.exp(theta) * y + np.tile(x, self.k)
        return np.concatenate([da, dy])

    def init_state(self, a0, S0, flat):
        _, theta = self.unpack(flat)
        x0 = np.concatenate([a0, np.array([S0], dtype=a0.dtype)])
        return np.concatenate([a0, np.tile(x0, self.k) / self.ar.exp(theta)])

    def signal(self, coeffs, t):
        ar = self.ar
        out = ar.scalar(coeffs.c0)
        for i, c in enumerate(coeffs.c):
            out += ar.scalar(c) * ar.sin(2 * ar.pi * t / ar.scalar(2.0 ** (i + 4)))
        return out

    def trajectory_loss(self, flat, records, dt, stride, n_samples):
        """Batch-mean squared-error loss of an RK4 rollout in extended precision."""
        ar = self.ar
        dt = ar.scalar(dt)
        half = dt / 2
        total = ar.scalar(0)
        for r in records:
            tgt = ar.cast(r.targets)
            t0 = ar.scalar(r.times[0])
            z = self.init_state(tgt[0], self.signal(r.coeffs, t0), flat)
            d = z[:self.n_T] - tgt[0]
            err = d.dot(d)
            step = 0
            for i in range(1, n_samples):
                for _ in range(stride):
                    t = t0 + step * dt
                    S0, Sh, S1 = (self.signal(r.coeffs, t + s) for s in (0, half, dt))
                    k1 = self.rhs(z, S0, flat)
                    k2 = self.rhs(z + half * k1, Sh, flat)
                    k3 = self.rhs(z + half * k2, Sh, flat)
                    k4 = self.rhs(z + dt * k3, S1, flat)
                    z = z + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
                    step += 1
                d = z[:self.n_T] - tgt[i]
                err += d.dot(d)
            total += err / n_samples
        return total / len(records)


def central_difference(f, x, i, h=1e-6, arith=LDA):
    """Central difference of ``f`` along coordinate ``i`` of the float64 point ``x``."""
    xp = arith.cast(x)
    xm = arith.cast(x)
    xp[i] += arith.scalar(h)
    xm[i] -= arith.scalar(h)
    return (f(xp) - f(xm)) / (2 * arith.scalar(h))


def trajectory_fd_errors(rom, vmap, closure, records, n_snapshots, grad, rom_dt=0.05, stride=5,
                         h=1e-6, threshold=1e-8, arith=MP):
    """Relative errors of ``grad`` against central differences of the full rollout loss.

    Only entries with ``|grad| > threshold`` are compared. Returns ``(errors, n_checked)``.
    """
    model = OracleModel(rom, vmap, closure, arith)
    flat = closure.to_flat()
    errors = []
    for i in np.flatnonzero(np.abs(grad) > threshold):
        fd = central_difference(
            lambda p: model.trajectory_loss(p, records, rom_dt, stride, n_snapshots), flat, i, h,
            arith)
        errors.append(float(abs(fd - grad[i]) / abs(grad[i])))
    return np.array(errors), len(errors)
