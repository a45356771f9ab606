"""Additively homomorphic encryption: a self-contained Paillier backend and
a mock backend with the same API for protocol-level work at full speed.

Both backends move opaque ciphertext envelopes through the same code paths,
so message counts and transcript records are identical whichever one a run
selects; only the arithmetic inside the envelope differs.
"""

import math
import random
from dataclasses import dataclass, field

PAILLIER = "paillier"
MOCK = "mock"
_ALLOWED_BITS = (512, 1024, 2048)

# deterministic Miller-Rabin witnesses, sufficient below 3.3e24
_SMALL_WITNESSES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


class IntegrityError(ValueError):
    """A ciphertext was handed to a key that did not produce it."""


def _is_probable_prime(n, rng, rounds=40):
    if n < 2:
        return False
    for p in _SMALL_WITNESSES:
        if n % p == 0:
            return n == p
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    if n < 3317044064679887385961981:
        witnesses = _SMALL_WITNESSES
    else:
        witnesses = [rng.randrange(2, n - 1) for _ in range(rounds)]
    for a in witnesses:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = pow(x, 2, n)
            if x == n - 1:
                break
        else:
            return False
    return True


def _random_prime(bits, rng):
    while True:
        cand = rng.getrandbits(bits) | (1 << (bits - 1)) | 1
        while cand.bit_length() == bits:
            if _is_probable_prime(cand, rng):
                return cand
            cand += 2


@dataclass
class HEPublicKey:
    backend: str
    bits: int
    key_id: int
    n: int = None  # Paillier modulus; unused by the mock backend

    @property
    def ciphertext_bytes(self):
        # a Paillier ciphertext lives mod n^2, i.e. twice the key size
        return self.bits // 4


@dataclass
class HECiphertext:
    value: int
    key_id: int
    backend: str


@dataclass
class HEKeypair:
    public: HEPublicKey
    _lam: int = field(default=0, repr=False)
    _mu: int = field(default=0, repr=False)
    _rng: random.Random = field(default=None, repr=False)


def he_keygen(bits=512, backend=PAILLIER, seed=None):
    """Generate a keypair.

    The real backend draws two primes of bits/2 each; the mock backend only
    mints a key identity so mismatched keys are still caught.
    """
    rng = random.Random(seed)
    key_id = rng.getrandbits(63)
    if backend == MOCK:
        return HEKeypair(public=HEPublicKey(backend=MOCK, bits=bits, key_id=key_id))
    if backend != PAILLIER:
        raise ValueError(f"unknown HE backend '{backend}'")
    if bits not in _ALLOWED_BITS:
        raise ValueError(f"key size must be one of {_ALLOWED_BITS}")
    half = bits // 2
    p = _random_prime(half, rng)
    q = _random_prime(half, rng)
    while q == p:
        q = _random_prime(half, rng)
    n = p * q
    lam = math.lcm(p - 1, q - 1)
    mu = pow(lam, -1, n)
    return HEKeypair(public=HEPublicKey(backend=PAILLIER, bits=bits, key_id=key_id, n=n),
                     _lam=lam, _mu=mu, _rng=rng)


def he_encrypt(keypair, m):
    """Encrypt a non-negative integer under the keypair's public key."""
    pub = keypair.public
    m = int(m)
    if m < 0:
        raise ValueError("plaintexts must be non-negative integers")
    if pub.backend == MOCK:
        return HECiphertext(value=m, key_id=pub.key_id, backend=MOCK)
    n = pub.n
    if m >= n:
        raise ValueError("plaintext too large for the modulus")
    n_sq = n * n
    r = keypair._rng.randrange(1, n)
    while math.gcd(r, n) != 1:
        r = keypair._rng.randrange(1, n)
    c = (1 + m * n) % n_sq * pow(r, n, n_sq) % n_sq
    return HECiphertext(value=c, key_id=pub.key_id, backend=PAILLIER)


def _check_pair(pub, *cts):
    for ct in cts:
        if ct.key_id != pub.key_id or ct.backend != pub.backend:
            raise IntegrityError("ciphertext does not belong to this key")


def he_add(pub, a, b):
    """Homomorphic addition: Dec(a (+) b) = Dec(a) + Dec(b) mod n."""
    _check_pair(pub, a, b)
    if pub.backend == MOCK:
        return HECiphertext(value=a.value + b.value, key_id=pub.key_id, backend=MOCK)
    return HECiphertext(value=a.value * b.value % (pub.n * pub.n),
                        key_id=pub.key_id, backend=PAILLIER)


def he_scalar_mul(pub, ct, k):
    """Homomorphic scaling: Dec(ct (x) k) = k * Dec(ct) mod n."""
    _check_pair(pub, ct)
    k = int(k)
    if k < 0:
        raise ValueError("scalars must be non-negative integers")
    if pub.backend == MOCK:
        return HECiphertext(value=ct.value * k, key_id=pub.key_id, backend=MOCK)
    return HECiphertext(value=pow(ct.value, k, pub.n * pub.n),
                        key_id=pub.key_id, backend=PAILLIER)


def he_sum(pub, cts):
    """Sum an iterable of ciphertexts (the zero-length sum encrypts 0)."""
    cts = list(cts)
    if pub.backend == MOCK:
        _check_pair(pub, *cts)
        return HECiphertext(value=sum(ct.value for ct in cts), key_id=pub.key_id,
                            backend=MOCK)
    _check_pair(pub, *cts)
    n_sq = pub.n * pub.n
    acc = 1  # (1+n)^0 * 1^n: encryption of 0; products rerandomize it
    for ct in cts:
        acc = acc * ct.value % n_sq
    return HECiphertext(value=acc, key_id=pub.key_id, backend=PAILLIER)


def he_decrypt(keypair, ct):
    """Recover the plaintext; raises IntegrityError under the wrong key."""
    pub = keypair.public
    _check_pair(pub, ct)
    if pub.backend == MOCK:
        return ct.value
    n = pub.n
    x = pow(ct.value, keypair._lam, n * n)
    return (x - 1) // n * keypair._mu % n


def ciphertext_hex(ct, pub):
    """Opaque base-16 rendering used by transcript dumps."""
    width = pub.ciphertext_bytes * 2
    return format(ct.value % (1 << (pub.bits * 2)), "x").zfill(width)[-width:] \
        if pub.backend == PAILLIER else format(ct.value, "x")
