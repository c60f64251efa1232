"""Independent reference vectors for the Rust test suite.

AES-128-CBC comes from the `cryptography` package; payload wire bytes are
packed with `struct` and summed in plain Python.
"""
import json
import os
import random
import struct
import sys

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

out = sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/data"
rng = random.Random(20240611)


def rbytes(n):
    return bytes(rng.getrandbits(8) for _ in range(n))


vectors = []
for i in range(128):
    key = rbytes(16)
    iv = bytes(16) if i % 4 else rbytes(16)
    pt = rbytes(16 * rng.randint(1, 16))
    enc = Cipher(algorithms.AES(key), modes.CBC(iv)).encryptor()
    ct = enc.update(pt) + enc.finalize()
    vectors.append({"key": key.hex(), "iv": iv.hex(), "plaintext": pt.hex(), "ciphertext": ct.hex()})
with open(os.path.join(out, "aes_cbc_vectors.json"), "w") as f:
    json.dump(vectors, f, indent=1)
    f.write("\n")


def wire(entry, ids, code):
    body = struct.pack("<6I", entry, len(code), *ids) + code
    return body + struct.pack("<I", (~sum(body)) & 0xFFFFFFFF)


payloads = [
    {"entry": 0, "ids": [0, 0, 0, 0], "code": ""},
    {"entry": 0, "ids": [0, 0, 0, 0], "code": "0102"},
]
for _ in range(64):
    code = rbytes(rng.randint(0, 300))
    payloads.append({
        "entry": rng.getrandbits(32),
        "ids": [rng.getrandbits(32) for _ in range(4)],
        "code": code.hex(),
    })
for p in payloads:
    w = wire(p["entry"], p["ids"], bytes.fromhex(p["code"]))
    p["wire"] = w.hex()
    p["checksum"] = struct.unpack("<I", w[-4:])[0]
with open(os.path.join(out, "payload_vectors.json"), "w") as f:
    json.dump(payloads, f, indent=1)
    f.write("\n")
