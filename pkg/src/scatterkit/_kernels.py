"""Compiled photon-transport kernels for the slab renderer.

Random numbers come from a SplitMix64 counter hash: draw ``k`` of packet
``i`` is ``mix(key(seed, i) + (k + 1) * GOLDEN)``, so every packet owns a
fixed stream and bounce ``b`` always consumes draws ``4b .. 4b + 3``.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
M1 = np.uint64(0xBF58476D1CE4E5B9)
M2 = np.uint64(0x94D049BB133111EB)
S30 = np.uint64(30)
S27 = np.uint64(27)
S31 = np.uint64(31)
S11 = np.uint64(11)
INV53 = 1.0 / 9007199254740992.0
DRAWS_PER_BOUNCE = 4

CHUNK = 2048


@njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> S30)) * M1
    z = (z ^ (z >> S27)) * M2
    return z ^ (z >> S31)


@njit(cache=True, inline="always")
def packet_key(seed, index):
    return mix64(mix64(seed) ^ (np.uint64(index) * GOLDEN + GOLDEN))


@njit(cache=True, inline="always")
def uniform(key, k):
    """k-th uniform in [0, 1) of the stream ``key``."""
    return float(mix64(key + np.uint64(k + 1) * GOLDEN) >> S11) * INV53


def uniforms(seed: int, index: int, count: int) -> np.ndarray:
    """First ``count`` draws of one packet stream (for tests and debugging)."""
    return _uniforms(np.uint64(seed), index, count)


@njit(cache=True)
def _uniforms(seed, index, count):
    key = packet_key(seed, index)
    out = np.empty(count)
    for k in range(count):
        out[k] = uniform(key, k)
    return out


@njit(cache=True, inline="always")
def _disk_h(x):
    # integral of sqrt(1 - t^2) from -1 to x
    s = math.sqrt(max(0.0, 1.0 - x * x))
    return 0.5 * (x * s + math.asin(x)) + 0.25 * math.pi


@njit(cache=True)
def disk_corner(x, y):
    """Area of the unit disk with X <= x and Y <= y."""
    if x <= -1.0 or y <= -1.0:
        return 0.0
    if x > 1.0:
        x = 1.0
    if y >= 1.0:
        return 2.0 * _disk_h(x)
    c = math.sqrt(1.0 - y * y)
    pos = 2.0 if y > 0.0 else 0.0
    area = pos * _disk_h(min(x, -c))
    if x > -c:
        hi = min(x, c)
        area += y * (hi + c) + _disk_h(hi) - _disk_h(-c)
    if x > c:
        area += pos * (_disk_h(x) - _disk_h(c))
    return area


@njit(cache=True)
def disk_rect(x1, x2, y1, y2):
    """Area of the unit disk inside the rectangle [x1, x2] x [y1, y2]."""
    if x2 <= x1 or y2 <= y1:
        return 0.0
    return (disk_corner(x2, y2) - disk_corner(x1, y2)
            - disk_corner(x2, y1) + disk_corner(x1, y1))


@njit(cache=True, inline="always")
def _interp(mu, xs, ys):
    n = xs.size
    if mu <= xs[0]:
        return ys[0]
    if mu >= xs[n - 1]:
        return ys[n - 1]
    lo = 0
    hi = n - 1
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if xs[mid] <= mu:
            lo = mid
        else:
            hi = mid
    t = (mu - xs[lo]) / (xs[hi] - xs[lo])
    return ys[lo] + t * (ys[hi] - ys[lo])


@njit(cache=True, inline="always")
def _scatter(dx, dy, dz, cos_t, phi):
    sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
    cp = math.cos(phi)
    sp = math.sin(phi)
    if abs(dz) > 0.99999:
        sgn = 1.0 if dz > 0 else -1.0
        return sin_t * cp, sin_t * sp, sgn * cos_t
    den = math.sqrt(1.0 - dz * dz)
    nx = sin_t * (dx * dz * cp - dy * sp) / den + dx * cos_t
    ny = sin_t * (dy * dz * cp + dx * sp) / den + dy * cos_t
    nz = -sin_t * cp * den + dz * cos_t
    norm = math.sqrt(nx * nx + ny * ny + nz * nz)
    return nx / norm, ny / norm, nz / norm


@njit(cache=True, inline="always")
def _corner_fast(x, hx, y, c, h_neg, h_pos):
    # disk_corner(x, y) given H(x), c = sqrt(1 - y^2), H(-c), H(c)
    if y <= -1.0 or x <= -1.0:
        return 0.0
    if y >= 1.0:
        return 2.0 * hx
    pos = 2.0 if y > 0.0 else 0.0
    if x <= -c:
        return pos * hx
    if x <= c:
        return pos * h_neg + y * (x + c) + hx - h_neg
    return pos * h_neg + y * 2.0 * c + h_pos - h_neg + pos * (hx - h_pos)


@njit(cache=True)
def _splat_disk(acc, lo_k, hi_k, vx, vy, value, xc, ax, ay, edge0, pitch, count):
    """Spread ``value`` over pixels for a vertex of a pencil entering at 0.

    The beam footprint is the ellipse centred at ``(xc, 0)`` with
    semi-axes ``(ax, ay)``; the fraction of beam power whose vertex lands
    in each pixel is the footprint area inside the back-shifted pixel.
    """
    half = 0.5 * pitch
    y1 = (-half - vy) / ay
    y2 = (half - vy) / ay
    if y2 <= -1.0 or y1 >= 1.0:
        return lo_k, hi_k
    k0 = int(math.floor((xc - ax + vx - edge0) / pitch))
    k1 = int(math.floor((xc + ax + vx - edge0) / pitch))
    if k0 < 0:
        k0 = 0
    if k1 > count - 1:
        k1 = count - 1
    if k0 > k1:
        return lo_k, hi_k
    c1 = math.sqrt(max(0.0, 1.0 - y1 * y1)) if abs(y1) < 1.0 else 0.0
    c2 = math.sqrt(max(0.0, 1.0 - y2 * y2)) if abs(y2) < 1.0 else 0.0
    h1n = _disk_h(-c1)
    h1p = _disk_h(c1)
    h2n = _disk_h(-c2)
    h2p = _disk_h(c2)
    scale = value / (math.pi * pitch * pitch)
    xl = (edge0 + k0 * pitch - vx - xc) / ax
    xl = min(max(xl, -1.0), 1.0)
    hl = _disk_h(xl)
    prev = _corner_fast(xl, hl, y2, c2, h2n, h2p) - _corner_fast(xl, hl, y1, c1, h1n, h1p)
    for k in range(k0, k1 + 1):
        xr = (edge0 + (k + 1) * pitch - vx - xc) / ax
        xr = min(max(xr, -1.0), 1.0)
        hr = _disk_h(xr)
        cur = _corner_fast(xr, hr, y2, c2, h2n, h2p) - _corner_fast(xr, hr, y1, c1, h1n, h1p)
        area = cur - prev
        if area > 0.0:
            acc[k] += scale * area
        prev = cur
    if k0 < lo_k:
        lo_k = k0
    if k1 > hi_k:
        hi_k = k1
    return lo_k, hi_k


@njit(cache=True)
def _splat_point(acc, lo_k, hi_k, x, y, value, edge0, pitch, count):
    half = 0.5 * pitch
    if y < -half or y >= half:
        return lo_k, hi_k
    k = int(math.floor((x - edge0) / pitch))
    if k < 0 or k >= count:
        return lo_k, hi_k
    acc[k] += value / (pitch * pitch)
    if k < lo_k:
        lo_k = k
    if k > hi_k:
        hi_k = k
    return lo_k, hi_k


@njit(cache=True)
def _sample_cell(cdf, u):
    lo = 0
    hi = cdf.size - 1
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if cdf[mid] <= u:
            lo = mid
        else:
            hi = mid
    return lo


@njit(cache=True)
def _trace_chunk(seed, first, last, thickness, sigma_t, albedo, d0x, d0y, d0z,
                 z0, tab_mu, tab_cdf, tab_p, edge0, pitch, count, xc, ax, ay,
                 pattern_cdf, pattern_u, pattern_v, pattern_du, pattern_dv,
                 rr_start, max_bounces, sums, sqs, tally):
    """Trace packets ``first .. last - 1`` into one chunk's accumulators.

    tally: [reflected, transmitted, absorbed, roulette, truncated, collisions]
    """
    acc = np.zeros(count)
    use_pattern = pattern_cdf.size > 0
    inv_dz0 = 1.0 / abs(d0z)
    for i in range(first, last):
        key = packet_key(seed, i)
        draw = 0
        ex = 0.0
        ey = 0.0
        if use_pattern:
            # entry offset sampled from the measured source pattern
            cell = _sample_cell(pattern_cdf, uniform(key, 1_000_000))
            u = pattern_u[cell] + (uniform(key, 1_000_001) - 0.5) * pattern_du
            ex = xc + u * inv_dz0
            ey = pattern_v[cell] + (uniform(key, 1_000_002) - 0.5) * pattern_dv
        x = 0.0
        y = 0.0
        z = z0
        dx = d0x
        dy = d0y
        dz = d0z
        w = 1.0
        lo_k = count
        hi_k = -1
        bounce = 0
        while True:
            u_free = uniform(key, draw)
            u_cos = uniform(key, draw + 1)
            u_phi = uniform(key, draw + 2)
            u_rr = uniform(key, draw + 3)
            draw += DRAWS_PER_BOUNCE
            if dz > 0.0:
                d_exit = (thickness - z) / dz
            elif dz < 0.0:
                d_exit = -z / dz
            else:
                d_exit = math.inf
            if sigma_t > 0.0:
                s = -math.log1p(-u_free) / sigma_t
            else:
                s = math.inf
            if s >= d_exit:
                if dz > 0.0:
                    tally[1] += w
                else:
                    tally[0] += w
                break
            x += s * dx
            y += s * dy
            z += s * dz
            tally[5] += 1.0
            # next-event estimate toward the orthographic camera (+z)
            contrib = w * albedo * _interp(dz, tab_mu, tab_p) * math.exp(-sigma_t * (thickness - z))
            if contrib > 0.0:
                if use_pattern:
                    lo_k, hi_k = _splat_point(acc, lo_k, hi_k, x + ex, y + ey, contrib,
                                              edge0, pitch, count)
                else:
                    lo_k, hi_k = _splat_disk(acc, lo_k, hi_k, x, y, contrib, xc, ax, ay,
                                             edge0, pitch, count)
            tally[2] += w * (1.0 - albedo)
            w *= albedo
            bounce += 1
            if w <= 0.0:
                break
            if bounce >= max_bounces:
                tally[4] += w
                break
            if bounce > rr_start and w < 1.0:
                # throughput roulette: survive with probability w, then
                # carry unit weight (keeps weights bounded)
                if u_rr >= w:
                    tally[3] += w
                    break
                tally[3] -= 1.0 - w
                w = 1.0
            cos_t = _interp(u_cos, tab_cdf, tab_mu)
            dx, dy, dz = _scatter(dx, dy, dz, cos_t, 2.0 * math.pi * u_phi)
        if hi_k >= lo_k:
            for k in range(lo_k, hi_k + 1):
                v = acc[k]
                sums[k] += v
                sqs[k] += v * v
                acc[k] = 0.0


@njit(cache=True, parallel=True)
def trace(seed, n_packets, thickness, sigma_t, albedo, d0x, d0y, d0z, z0,
          tab_mu, tab_cdf, tab_p, edge0, pitch, count, xc, ax, ay,
          pattern_cdf, pattern_u, pattern_v, pattern_du, pattern_dv,
          rr_start, max_bounces):
    """Trace ``n_packets`` packets in fixed chunks.

    Per-chunk partial sums are combined in index order afterwards, so the
    result does not depend on the number of threads.
    """
    n_chunks = (n_packets + CHUNK - 1) // CHUNK
    sums = np.zeros((n_chunks, count))
    sqs = np.zeros((n_chunks, count))
    tally = np.zeros((n_chunks, 6))
    for c in prange(n_chunks):
        first = c * CHUNK
        last = min(n_packets, first + CHUNK)
        _trace_chunk(seed, first, last, thickness, sigma_t, albedo, d0x, d0y, d0z,
                     z0, tab_mu, tab_cdf, tab_p, edge0, pitch, count, xc, ax, ay,
                     pattern_cdf, pattern_u, pattern_v, pattern_du, pattern_dv,
                     rr_start, max_bounces, sums[c], sqs[c], tally[c])
    return sums, sqs, tally
