"""Weight files: magic "LFT1", self-describing header, fp32 blobs, FNV-1a tail.

Layout:  b"LFT1" | u32 version | u32 header_len | header json (utf-8)
         | raw little-endian float32 row-major parameter blobs, model then
         heads in ascending layer order | u64 FNV-1a over all blob bytes.

Round trips are bit exact because parameters are stored as their raw bytes.
"""

import json
import struct

import numpy as np

from .errors import ChecksumMismatch, CorruptFile, InvalidArchitecture, VersionMismatch
from .models import LogitsHead, ModelGraph, build_head, build_resnet_small
from .tensor import Tensor

MAGIC = b"LFT1"
VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data):
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def _param_bytes(t):
    return np.ascontiguousarray(t.data, dtype="<f4").tobytes()


def model_checksum(model):
    """FNV-1a over the model's own parameter bytes (heads excluded)."""
    return fnv1a64(b"".join(_param_bytes(p) for p in model.parameters()))


def _layer_entries(arch):
    """(name, kind, stride) per parameter, in the builder's draw order."""
    entries = [("stem.conv", "conv", 1), ("stem.scale", "affine", None), ("stem.shift", "affine", None)]
    for l in range(1, arch["blocks"] + 1):
        p = f"block{l}"
        stride = 1 if l == 1 else 2
        entries += [
            (f"{p}.conv1", "conv", stride), (f"{p}.scale1", "affine", None), (f"{p}.shift1", "affine", None),
            (f"{p}.conv2", "conv", 1), (f"{p}.scale2", "affine", None), (f"{p}.shift2", "affine", None),
        ]
        if l > 1:
            entries += [
                (f"{p}.skip.conv", "conv", stride),
                (f"{p}.skip.scale", "affine", None), (f"{p}.skip.shift", "affine", None),
            ]
    return entries + [("head.linear", "linear", None), ("head.bias", "linear", None)]


def save_model(path, model, heads=None):
    if model.arch is None or model.arch.get("kind") != "resnet_small":
        raise InvalidArchitecture("only builder-produced models are serializable")
    params = model.parameters()
    entries = _layer_entries(model.arch)
    if len(entries) != len(params):
        raise InvalidArchitecture("parameter list does not match architecture")

    records = []
    for (name, kind, stride), p in zip(entries, params):
        rec = {"name": name, "kind": kind, "shape": list(p.data.shape)}
        if stride is not None:
            rec["stride"] = stride
        records.append(rec)

    head_entries = {}
    blobs = [_param_bytes(p) for p in params]
    if heads:
        for layer in sorted(heads):
            head = heads[layer]
            head_entries[str(layer)] = {
                "params": [
                    {"name": f"head{layer}.linear", "kind": "linear", "shape": list(head.phi.data.shape)},
                    {"name": f"head{layer}.bias", "kind": "linear", "shape": list(head.eta.data.shape)},
                ]
            }
            blobs += [_param_bytes(head.phi), _param_bytes(head.eta)]

    header = {
        "arch": model.arch,
        "dtype": "<f4",
        "params": records,
        "heads": head_entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(blobs)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
        fh.write(struct.pack("<Q", fnv1a64(payload)))


def load_model(path):
    """Returns (model, heads dict).  Rejects wrong magic, version, checksum."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CorruptFile(f"{path}: not a weight file")
    version, header_len = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {VERSION}")
    if len(blob) < 12 + header_len + 8:
        raise CorruptFile(f"{path}: truncated header")
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: bad header ({exc})")

    arch = header["arch"]
    if arch.get("kind") != "resnet_small":
        raise CorruptFile(f"{path}: unknown architecture {arch.get('kind')!r}")
    records = list(header["params"])
    head_entries = header.get("heads", {})
    sizes = [int(np.prod(rec["shape"])) * 4 for rec in records]
    head_sizes = {}
    for layer, entry in head_entries.items():
        head_sizes[int(layer)] = [int(np.prod(rec["shape"])) * 4 for rec in entry["params"]]
    total = sum(sizes) + sum(sum(v) for v in head_sizes.values())
    expected_len = 12 + header_len + total + 8
    if len(blob) != expected_len:
        raise CorruptFile(f"{path}: expected {expected_len} bytes, found {len(blob)}")

    payload = blob[12 + header_len : -8]
    (stored_sum,) = struct.unpack_from("<Q", blob, len(blob) - 8)
    actual = fnv1a64(payload)
    if actual != stored_sum:
        raise ChecksumMismatch(f"{path}: checksum {actual:#x} != stored {stored_sum:#x}")

    model = build_resnet_small(
        arch["blocks"], arch["widths"], arch["num_classes"], arch["input_shape"],
        seed=arch.get("seed", 0),
    )
    offset = 0

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape)) * 4
        arr = np.frombuffer(payload[offset : offset + n], dtype="<f4").reshape(shape)
        offset += n
        return arr.astype(np.float32)

    for rec, p in zip(records, model.parameters()):
        if list(p.data.shape) != list(rec["shape"]):
            raise CorruptFile(f"{path}: shape mismatch for {rec['name']}")
        p.data = take(rec["shape"])

    heads = {}
    for layer in sorted(int(v) for v in head_entries):
        entry = head_entries[str(layer)]
        phi = Tensor(take(entry["params"][0]["shape"]), requires_grad=True)
        eta = Tensor(take(entry["params"][1]["shape"]), requires_grad=True)
        heads[layer] = LogitsHead(phi, eta)
    return model, heads
