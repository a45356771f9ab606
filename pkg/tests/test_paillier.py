import numpy as np
import pytest

from treeleak.idlmid import (decrypt_purity, encrypt_onehot_labels,
                             secure_node_purity)
from treeleak.paillier import (IntegrityError, ciphertext_hex, he_add,
                               he_decrypt, he_encrypt, he_keygen,
                               he_scalar_mul, he_sum)


@pytest.fixture(scope="module")
def kp():
    return he_keygen(bits=512, backend="paillier", seed=42)


def test_roundtrip_random_plaintexts(kp):
    rng = np.random.default_rng(0)
    for m in rng.integers(0, 10 ** 9, size=30):
        ct = he_encrypt(kp, int(m))
        assert he_decrypt(kp, ct) == int(m)


def test_additive_homomorphism(kp):
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = (int(v) for v in rng.integers(0, 10 ** 6, size=2))
        ct = he_add(kp.public, he_encrypt(kp, a), he_encrypt(kp, b))
        assert he_decrypt(kp, ct) == a + b


def test_scalar_multiplication(kp):
    ct = he_scalar_mul(kp.public, he_encrypt(kp, 7), 13)
    assert he_decrypt(kp, ct) == 91


def test_sum_of_many(kp):
    values = list(range(25))
    total = he_sum(kp.public, [he_encrypt(kp, v) for v in values])
    assert he_decrypt(kp, total) == sum(values)


def test_ciphertext_randomization(kp):
    # same plaintext, fresh randomness: ciphertexts differ, decrypts agree
    c1, c2 = he_encrypt(kp, 5), he_encrypt(kp, 5)
    assert c1.value != c2.value
    assert he_decrypt(kp, c1) == he_decrypt(kp, c2) == 5


def test_cross_key_operations_raise(kp):
    other = he_keygen(bits=512, backend="paillier", seed=43)
    with pytest.raises(IntegrityError):
        he_add(kp.public, he_encrypt(kp, 1), he_encrypt(other, 1))
    with pytest.raises(IntegrityError):
        he_decrypt(other, he_encrypt(kp, 1))


def test_negative_plaintext_rejected(kp):
    with pytest.raises(ValueError):
        he_encrypt(kp, -1)


def test_key_size_whitelist():
    with pytest.raises(ValueError):
        he_keygen(bits=100, backend="paillier")
    with pytest.raises(ValueError):
        he_keygen(bits=512, backend="rsa")


def test_ciphertext_wire_size(kp):
    assert kp.public.ciphertext_bytes == 128  # 512-bit key, mod n^2
    blob = ciphertext_hex(he_encrypt(kp, 3), kp.public)
    assert len(blob) == 256
    int(blob, 16)


def test_mock_backend_same_api_and_key_checks():
    mk = he_keygen(bits=512, backend="mock", seed=7)
    ct = he_add(mk.public, he_encrypt(mk, 4), he_encrypt(mk, 6))
    assert he_decrypt(mk, he_scalar_mul(mk.public, ct, 2)) == 20
    other = he_keygen(bits=512, backend="mock", seed=8)
    with pytest.raises(IntegrityError):
        he_decrypt(other, ct)


def test_secure_purity_mock_equals_paillier():
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 3, size=50)
    left = np.sort(rng.choice(50, size=20, replace=False))
    right = np.setdiff1d(np.arange(50), left)
    got = {}
    for backend in ("mock", "paillier"):
        pair = he_keygen(bits=512, backend=backend, seed=11)
        enc = encrypt_onehot_labels(pair, labels, 3)
        msg = secure_node_purity([(left, right)], enc, pair.public)[0]
        got[backend] = decrypt_purity(pair, msg)
    for side in ("left", "right", "comp_left", "comp_right"):
        np.testing.assert_allclose(got["mock"][side], got["paillier"][side])
    # and both match plain class-frequency counting
    np.testing.assert_allclose(
        got["mock"]["left"], np.bincount(labels[left], minlength=3) / 20)
    np.testing.assert_allclose(
        got["mock"]["comp_left"],
        np.bincount(labels[right], minlength=3) / 30)
