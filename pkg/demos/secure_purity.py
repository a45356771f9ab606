"""The encrypted leg of the bound-filter defense, in isolation.

To veto a leaky split the active party needs class counts inside instance
spaces proposed by passive parties, without revealing labels. Labels travel
once as additively homomorphic one-hot ciphertexts; each purity query comes
back as four encrypted per-class sums (left child, right child, and their
complements). The mock backend does the same arithmetic in the clear and
must agree ciphertext for ciphertext. Run from the repository root:

    python3 demos/secure_purity.py
"""

import numpy as np

from treeleak.idlmid import (decrypt_purity, encrypt_onehot_labels,
                             secure_node_purity)
from treeleak.paillier import ciphertext_hex, he_keygen

rng = np.random.default_rng(0)
labels = rng.integers(0, 3, size=40)
left = np.sort(rng.choice(40, size=15, replace=False))
right = np.setdiff1d(np.arange(40), left)
print(f"40 training rows, 3 classes; candidate split: "
      f"{len(left)} rows left, {len(right)} rows right")

reports = {}
for backend in ("paillier", "mock"):
    pair = he_keygen(bits=512, backend=backend, seed=7)
    enc = encrypt_onehot_labels(pair, labels, 3)
    msgs = secure_node_purity([(left, right)], enc, pair.public)
    reports[backend] = decrypt_purity(pair, msgs[0])
    print(f"\n{backend} backend:")
    print(f"  label broadcast: {len(enc)} rows x 3 ciphertexts")
    print(f"  purity reply:    {msgs[0].ciphertext_count} ciphertexts")
    if backend == "paillier":
        sample = ciphertext_hex(enc[0][0], pair.public)
        print(f"  first ciphertext: {sample[:48]}...")
    for side in ("left", "right"):
        vec = np.round(reports[backend][side], 3)
        print(f"  {side:5s} class mix: {vec}")

agree = all(np.allclose(reports["mock"][k], reports["paillier"][k])
            for k in ("left", "right", "comp_left", "comp_right"))
truth = np.bincount(labels[left], minlength=3) / len(left)
print(f"\nbackends agree: {agree}")
print(f"clear-text check (left): {np.round(truth, 3)}")
print("the active party learns class mixes; passive parties learn nothing.")
