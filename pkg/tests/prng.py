"""Scalar PRNG oracles written from the published constants, independent of the package."""

M64 = (1 << 64) - 1


def splitmix64_reference(seed, count):
    out, state = [], seed & M64
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) & M64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
        out.append(z ^ (z >> 31))
    return out


def fnv1a_reference(name):
    h = 14695981039346656037
    for b in name.encode():
        h = ((h ^ b) * 1099511628211) % 2**64
    return h


DARE_SALT = int.from_bytes(b"DARE", "big") << 32


def dare_keep_reference(seed, name, n, p):
    """Survival flags: the top 53 bits of each output as a [0, 1) uniform; drop if below p."""
    stream = splitmix64_reference(seed ^ fnv1a_reference(name) ^ DARE_SALT, n)
    return [(x >> 11) / 2**53 >= p for x in stream]
