"""Counter-based random numbers (Philox4x32-10) evaluated on numpy arrays.

Every draw is a pure function of ``(seed, stream, position, lane, tag)``, so a
particle's noise does not depend on how many particles are simulated, in what
order they are processed, or how the work is split across threads.

Counter layout (four 32-bit words)::

    c0 = stream id (particle index)
    c1 = position (time-step index, or 0 for horizon-level draws)
    c2 = lane (which block of four words inside one position)
    c3 = tag (draw domain: Brownian, jump count, jump time, ...)
"""

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK = np.uint64(0xFFFFFFFF)
_SHIFT = np.uint64(32)

TAG_BROWNIAN = 1
TAG_JUMP_COUNT = 2
TAG_JUMP_TIME = 3
TAG_JUMP_MARK = 4
TAG_INITIAL = 5
TAG_COMPENSATOR = 6
TAG_BRIDGE = 7
TAG_GENERIC = 8

_TWO53 = 9007199254740992.0


def split_seed(seed):
    """Return the two 32-bit key words of a 64-bit master seed."""
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    return seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF


def philox4x32(counter, key, rounds=10):
    """Philox4x32 block function.

    Parameters
    ----------
    counter : sequence of four integer arrays (or scalars), each < 2**32
    key : pair of integers < 2**32

    Returns
    -------
    tuple of four uint64 arrays holding 32-bit outputs
    """
    c0, c1, c2, c3 = np.broadcast_arrays(*[np.asarray(c, dtype=np.uint64) for c in counter])
    c0, c1, c2, c3 = (c & _MASK for c in (c0, c1, c2, c3))
    k0, k1 = int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF
    p0 = np.empty_like(c0)
    p1 = np.empty_like(c0)
    for r in range(rounds):
        if r:
            k0 = (k0 + _W0) & 0xFFFFFFFF
            k1 = (k1 + _W1) & 0xFFFFFFFF
        np.multiply(c0, _M0, out=p0)
        np.multiply(c2, _M1, out=p1)
        n0 = np.right_shift(p1, _SHIFT)
        n0 ^= c1
        n0 ^= np.uint64(k0)
        n2 = np.right_shift(p0, _SHIFT)
        n2 ^= c3
        n2 ^= np.uint64(k1)
        c0, c1, c2, c3 = n0, p1 & _MASK, n2, p0 & _MASK
    return c0, c1, c2, c3


def _to_unit(a, b):
    # 53-bit mantissa from two words; result lies strictly inside (0, 1)
    return ((a >> np.uint64(5)).astype(np.float64) * 67108864.0
            + (b >> np.uint64(6)).astype(np.float64) + 0.5) / _TWO53


def uniforms(seed, streams, position, tag, n_lanes=1, lane_offset=0):
    """Uniform (0, 1) draws, two per lane.

    ``streams``, ``position`` and ``lane_offset`` broadcast against each
    other; the result has their broadcast shape plus a trailing axis of length
    ``2 * n_lanes``.
    """
    key = split_seed(seed)
    streams = np.asarray(streams, dtype=np.uint64)
    position = np.asarray(position, dtype=np.uint64)
    lane_offset = np.asarray(lane_offset, dtype=np.uint64)
    streams, position, lane_offset = np.broadcast_arrays(streams, position, lane_offset)
    out = np.empty(streams.shape + (2 * n_lanes,))
    for lane in range(n_lanes):
        w = philox4x32((streams, position, lane_offset + np.uint64(lane), np.uint64(tag)), key)
        out[..., 2 * lane] = _to_unit(w[0], w[1])
        out[..., 2 * lane + 1] = _to_unit(w[2], w[3])
    return out


def normals(seed, streams, position, tag, n, lane_offset=0):
    """Standard normal draws (Box-Muller), ``n`` per (stream, position)."""
    n_lanes = (n + 1) // 2
    u = uniforms(seed, streams, position, tag, n_lanes, lane_offset)
    r = np.sqrt(-2.0 * np.log(u[..., 0::2]))
    theta = (2.0 * np.pi) * u[..., 1::2]
    z = np.empty(u.shape)
    z[..., 0::2] = r * np.cos(theta)
    z[..., 1::2] = r * np.sin(theta)
    return z[..., :n]


class Stream:
    """Sequential view of one counter-based stream.

    Each draw call consumes one position and advances it, so two streams with
    the same ``(seed, stream_id, position)`` produce identical output.
    """

    def __init__(self, seed, stream_id, position=0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.position = int(position)

    def normals(self, n, tag=TAG_GENERIC):
        z = normals(self.seed, self.stream_id, self.position, tag, n)
        self.position += 1
        return z

    def uniforms(self, n, tag=TAG_GENERIC):
        u = uniforms(self.seed, self.stream_id, self.position, tag, (n + 1) // 2)[..., :n]
        self.position += 1
        return u

    def __repr__(self):
        return f"Stream(seed={self.seed}, stream_id={self.stream_id}, position={self.position})"
