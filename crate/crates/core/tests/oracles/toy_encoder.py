"""Independent re-implementation of the toy text encoder.

Prints the golden values frozen into toy_encoder.rs tests.
"""
import math

M64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & M64
    return h


def splitmix(state):
    while True:
        state = (state + 0x9E3779B97F4A7C15) & M64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
        yield z ^ (z >> 31)


def text_encode(tokens, dim, seed):
    acc = [0.0] * dim
    for t in tokens:
        g = splitmix(fnv1a64(t.encode()) ^ seed)
        for k in range(dim):
            acc[k] += (next(g) >> 40) / float(1 << 23) - 1.0
    n = math.sqrt(sum(x * x for x in acc))
    return [x / n for x in acc]


if __name__ == "__main__":
    g = splitmix(0)
    print("splitmix(0):", [hex(next(g)) for _ in range(3)])
    cat = text_encode(["cat"], 64, 7)
    dog = text_encode(["dog"], 64, 7)
    print("cos(cat, dog) = %r" % sum(a * b for a, b in zip(cat, dog)))
    print("cat[:4] =", [repr(x) for x in cat[:4]])
