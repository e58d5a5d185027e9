"""Self-describing binary container for checkpoints and datasets.

Layout: 4-byte magic, little-endian u32 schema version, u32 section count,
then per section a length-prefixed utf-8 name and a length-prefixed
payload, and finally a sha256 checksum of every preceding byte.  Numeric
payloads are little-endian 64-bit floats.
"""

import hashlib
import json
import struct

import numpy as np

from .latent_models import LatentModel, freeze
from .toy_world import Dataset, PROPRIO_DIM, ReferenceClip, ToyState

MAGIC = b"MQPC"
SCHEMA_VERSION = 1


class CheckpointError(Exception):
    """Raised for any malformed, corrupted, or mismatched container."""


# ---------------------------------------------------------------------------
# container


def write_container(path, sections, version=SCHEMA_VERSION):
    """Write named byte sections; order is preserved on read."""
    body = bytearray()
    body += MAGIC
    body += struct.pack("<II", version, len(sections))
    for name, payload in sections:
        name_b = name.encode("utf-8")
        body += struct.pack("<I", len(name_b)) + name_b
        body += struct.pack("<Q", len(payload)) + bytes(payload)
    body += hashlib.sha256(bytes(body)).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def read_container(path, expect_version=SCHEMA_VERSION):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 + 8 + 32 or data[:4] != MAGIC:
        raise CheckpointError("bad magic")
    if hashlib.sha256(data[:-32]).digest() != data[-32:]:
        raise CheckpointError("checksum mismatch")
    version, n_sections = struct.unpack_from("<II", data, 4)
    if version != expect_version:
        raise CheckpointError(
            f"schema version mismatch: got {version} expected {expect_version}"
        )
    ofs = 12
    sections = {}
    for _ in range(n_sections):
        (name_len,) = struct.unpack_from("<I", data, ofs)
        ofs += 4
        name = data[ofs : ofs + name_len].decode("utf-8")
        ofs += name_len
        (payload_len,) = struct.unpack_from("<Q", data, ofs)
        ofs += 8
        sections[name] = data[ofs : ofs + payload_len]
        ofs += payload_len
    if ofs != len(data) - 32:
        raise CheckpointError("checksum mismatch")
    return sections


_DTYPES = {0: "<f8", 1: "<i8"}
_DTYPE_TAGS = {np.dtype(np.float64): 0, np.dtype(np.int64): 1}


def encode_array(a):
    a = np.ascontiguousarray(a)
    tag = _DTYPE_TAGS[a.dtype]
    header = struct.pack("<BI", tag, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + a.astype(_DTYPES[tag]).tobytes()


def decode_array(b):
    tag, ndim = struct.unpack_from("<BI", b, 0)
    shape = struct.unpack_from(f"<{ndim}Q", b, 5)
    data = np.frombuffer(b, dtype=_DTYPES[tag], offset=5 + 8 * ndim)
    return data.reshape(shape).copy()


def _encode_json(obj):
    return json.dumps(obj, sort_keys=True, default=list).encode("utf-8")


def checkpoint_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# ---------------------------------------------------------------------------
# model checkpoints


def save_model(path, model, config_text="", step=0):
    meta = {
        "kind": model.kind,
        "latent_dim": model.latent_dim,
        "hidden": list(model.hidden),
        "n_books_arg": model.n_books_arg,
        "total_codes": model.total_codes_arg,
        "code_scale": model.code_scale,
        "frozen": model.frozen,
        "step": int(step),
    }
    sections = [
        ("meta", _encode_json(meta)),
        ("config", config_text.encode("utf-8")),
        ("params", encode_array(model.params.values)),
    ]
    if model.quantizer is not None:
        for i, book in enumerate(model.quantizer.books):
            sections.append((f"book{i}.codes", encode_array(book.codes)))
            sections.append((f"book{i}.ema_count", encode_array(book.ema_count)))
            sections.append((f"book{i}.ema_sum", encode_array(book.ema_sum)))
            sections.append((f"book{i}.usage_epoch", encode_array(book.usage_epoch)))
            sections.append((f"book{i}.decay", struct.pack("<d", book.decay)))
    write_container(path, sections)


def load_model(path):
    """Returns (model, step, config echo); bit-exact forward reproduction."""
    sections = read_container(path)
    meta = json.loads(sections["meta"].decode("utf-8"))
    model = LatentModel(
        meta["kind"],
        np.random.default_rng(0),
        latent_dim=meta["latent_dim"],
        hidden=tuple(meta["hidden"]),
        n_books=meta["n_books_arg"],
        total_codes=meta["total_codes"],
        code_scale=meta["code_scale"],
    )
    params = decode_array(sections["params"])
    if params.shape != model.params.values.shape:
        raise CheckpointError("parameter size mismatch")
    model.params.values[:] = params
    if model.quantizer is not None:
        for i, book in enumerate(model.quantizer.books):
            book.codes[:] = decode_array(sections[f"book{i}.codes"])
            book.ema_count[:] = decode_array(sections[f"book{i}.ema_count"])
            book.ema_sum[:] = decode_array(sections[f"book{i}.ema_sum"])
            book.usage_epoch[:] = decode_array(sections[f"book{i}.usage_epoch"])
            (book.decay,) = struct.unpack("<d", sections[f"book{i}.decay"])
    if meta["frozen"]:
        freeze(model)
    return model, meta["step"], sections["config"].decode("utf-8")


# ---------------------------------------------------------------------------
# dataset persistence


def save_dataset(path, dataset):
    meta = {
        "seed": dataset.seed,
        "config": dataset.config,
        "clips": [
            {"family": c.family, "params": c.params, "clip_id": c.clip_id}
            for c in dataset.clips
        ],
    }
    sections = [
        ("meta", _encode_json(meta)),
        ("mean", encode_array(dataset.mean)),
        ("std", encode_array(dataset.std)),
    ]
    for i, clip in enumerate(dataset.clips):
        rows = np.stack([s.as_row() for s in clip.states])
        sections.append((f"clip{i}.states", encode_array(rows)))
    write_container(path, sections)


def load_dataset(path):
    sections = read_container(path)
    meta = json.loads(sections["meta"].decode("utf-8"))
    clips = []
    for i, cm in enumerate(meta["clips"]):
        rows = decode_array(sections[f"clip{i}.states"])
        states = [ToyState.from_row(r) for r in rows]
        clips.append(ReferenceClip(states, cm["family"], cm["params"], cm["clip_id"]))
    return Dataset(
        clips=clips,
        mean=decode_array(sections["mean"]),
        std=decode_array(sections["std"]),
        seed=meta["seed"],
        config=meta["config"],
    )


def empty_dataset(seed=0):
    """Clip-less dataset with identity normalization stats."""
    return Dataset(
        clips=[], mean=np.zeros(PROPRIO_DIM), std=np.ones(PROPRIO_DIM), seed=seed
    )
