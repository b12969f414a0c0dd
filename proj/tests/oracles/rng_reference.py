"""Reference splitmix64 -> xoshiro256++ -> Box-Muller stream.

Independent of the C++ implementation; prints the values frozen into
tests/test_tensor.cpp.
"""
import math

MASK = (1 << 64) - 1


def splitmix64(state):
    state = (state + 0x9E3779B97F4A7C15) & MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return state, z ^ (z >> 31)


def rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK


class Xoshiro:
    def __init__(self, seed):
        st = seed
        self.s = []
        for _ in range(4):
            st, v = splitmix64(st)
            self.s.append(v)

    def next(self):
        s = self.s
        result = (rotl((s[0] + s[3]) & MASK, 23) + s[0]) & MASK
        t = (s[1] << 17) & MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
        return result

    def uniform(self):
        return (self.next() >> 11) * 2.0 ** -53


def gaussians(seed, count):
    return gaussians_from(Xoshiro(seed), count)


def gaussians_from(rng, count):
    """Box-Muller pairs; an odd trailing sample discards its twin."""
    out = []
    while len(out) < count:
        u1 = rng.uniform()
        u2 = rng.uniform()
        r = math.sqrt(-2.0 * math.log(1.0 - u1))
        out.append(r * math.cos(2.0 * math.pi * u2))
        out.append(r * math.sin(2.0 * math.pi * u2))
    return out[:count]


if __name__ == "__main__":
    st, v = splitmix64(0)
    print("splitmix64(0) first:", hex(v))
    for seed in (0, 42):
        r = Xoshiro(seed)
        print(f"xoshiro seed {seed}:", [hex(r.next()) for _ in range(4)])
    print("gaussian seed 7:", [repr(x) for x in gaussians(7, 5)])
