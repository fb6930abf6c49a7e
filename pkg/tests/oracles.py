"""Independent reference implementations shared by the test modules."""
from fractions import Fraction


def admissible_oracle(iq, ir, ip, ia, d):
    """Exact rational evaluation of the defining relations on inverse exponents."""
    if 2 * ir != d * (iq - ip) or 2 * ia != ip + iq:
        return False
    if ia <= Fraction(d, d + 1):          # a >= (d+1)/d
        iqs, ips = Fraction(d + 1, d) * ia, Fraction(d - 1, d) * ia
    else:
        iqs, ips = Fraction(1), 2 * ia - 1
    if not (ia <= iq <= iqs and ips <= ip <= ia):
        return False
    if d == 1 and ir == ia and ip == 0 and iq == 2 * ia:
        return False
    return True


def random_inverse_tuples(rng, d, n):
    """Yield n rational inverse-exponent tuples (1/q, 1/r, 1/p, 1/a) in [0, 1].

    Most tuples satisfy both scaling relations, so the range conditions are
    exercised; the rest are unconstrained.
    """
    dens = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12, 18, 22]
    out = 0
    while out < n:
        ia = Fraction(int(rng.integers(0, 13)), 12)
        if rng.random() < 0.6:
            den = int(rng.choice(dens))
            delta = Fraction(int(rng.integers(0, den + 1)), den) * min(ia, 1 - ia)
            iq, ip = ia + delta, ia - delta
            ir = Fraction(d, 2) * (iq - ip)
            if rng.random() < 0.2:
                ir += Fraction(int(rng.integers(-2, 3)), 24)
        else:
            iq, ip, ir = (Fraction(int(rng.integers(0, 25)), 24) for _ in range(3))
        if all(0 <= x <= 1 for x in (iq, ip, ir)):
            out += 1
            yield iq, ir, ip, ia
