"""Checkpoints and cross-model parameter transplantation.

A checkpoint is a single file: an ascii magic line, an ascii header-length
line, a JSON header (model kind, role, config, vocabulary, per-parameter
table with offsets and sha256 digests), then the raw little-endian
float64 payload. Digests make silent corruption loud, and the fixed
serialization makes identical models produce identical files.

Transplantation builds a new model whose encoder-side parameters come
from one checkpoint and whose decoder-side parameters come from another.
It demands identical vocabularies (by content hash) and exact shape
agreement, and it copies bits rather than re-deriving anything, so a
model transplanted from itself is indistinguishable from the original.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, Vocabulary, build_model, _Seq2Seq

MAGIC = b"SPEECHSUM-CKPT v1"
FORMAT_VERSION = 1

ROLES = ("asr", "lm", "ssum", "tsum", "transferred")

# Transplant recipes: system id -> (encoder source role, decoder source role).
VARIANTS = {
    "P-1": ("ssum", "tsum"),
    "P-2": ("asr", "tsum"),
    "P-3": ("ssum", "lm"),
}


class CheckpointError(RuntimeError):
    """A checkpoint file is malformed, corrupt, or mismatched."""


class TransferError(RuntimeError):
    """Two checkpoints cannot be combined into one model."""


def _array_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(path: str, model: _Seq2Seq, role: str,
                    train_log_digest: str | None = None,
                    sources: dict | None = None) -> str:
    """Serialize a model; returns the sha256 of the written file.

    The write goes to a temporary file in the same directory and is
    moved into place afterwards, so readers never see a partial file.
    """
    if role not in ROLES:
        raise CheckpointError(f"unknown checkpoint role {role!r}; expected one of {ROLES}")
    entries = []
    blobs = []
    offset = 0
    for name, tensor in model.params.items():
        raw = _array_bytes(tensor.data)
        entries.append({
            "name": name,
            "shape": list(tensor.shape),
            "offset": offset,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "role": role,
        "config": model.config.to_dict(),
        "vocab_words": model.vocab.words,
        "vocab_hash": model.vocab.content_hash(),
        "train_log_digest": train_log_digest,
        "sources": sources,
        "params": entries,
    }
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    payload = b"".join(blobs)
    parent = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(parent, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=parent, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC + b"\n")
            fh.write(str(len(header_bytes)).encode("ascii") + b"\n")
            fh.write(header_bytes)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return file_digest(path)


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Checkpoint:
    """A parsed checkpoint: metadata plus parameter arrays."""

    kind: str
    role: str
    config: ModelConfig
    vocab_words: list[str]
    vocab_hash: str
    train_log_digest: str | None
    sources: dict | None
    arrays: dict[str, np.ndarray]
    file_sha: str

    def build_vocab(self) -> Vocabulary:
        vocab = Vocabulary(self.vocab_words)
        if vocab.content_hash() != self.vocab_hash:
            raise CheckpointError("vocabulary hash does not match its word list")
        return vocab

    def build_model(self) -> _Seq2Seq:
        model = build_model(self.kind, self.config, self.build_vocab(), seed=0)
        model.load_param_arrays(self.arrays)
        return model


def load_checkpoint(path: str) -> Checkpoint:
    """Parse and verify a checkpoint file (structure plus digests)."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    sha = hashlib.sha256(blob).hexdigest()
    magic_end = blob.find(b"\n")
    if magic_end < 0 or blob[:magic_end] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    len_end = blob.find(b"\n", magic_end + 1)
    if len_end < 0:
        raise CheckpointError(f"{path} is truncated before its header")
    try:
        header_len = int(blob[magic_end + 1:len_end])
    except ValueError:
        raise CheckpointError(f"{path} has a malformed header length") from None
    header_start = len_end + 1
    header_bytes = blob[header_start:header_start + header_len]
    if len(header_bytes) != header_len:
        raise CheckpointError(f"{path} is truncated inside its header")
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has an unparseable header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path} has format version {header.get('format_version')}, expected {FORMAT_VERSION}"
        )
    if header.get("role") not in ROLES:
        raise CheckpointError(f"{path} has unknown role {header.get('role')!r}")
    payload = blob[header_start + header_len:]
    expected = sum(e["nbytes"] for e in header["params"])
    if len(payload) != expected:
        raise CheckpointError(
            f"{path} payload is {len(payload)} bytes, header promises {expected}"
        )
    arrays: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"{path}: parameter {entry['name']} fails its digest check")
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(entry["shape"])
        arrays[entry["name"]] = arr
    try:
        config = ModelConfig.from_dict(header["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path} carries an invalid model config: {exc}") from exc
    return Checkpoint(
        kind=header["kind"],
        role=header["role"],
        config=config,
        vocab_words=list(header["vocab_words"]),
        vocab_hash=header["vocab_hash"],
        train_log_digest=header.get("train_log_digest"),
        sources=header.get("sources"),
        arrays=arrays,
        file_sha=sha,
    )


def transplant(encoder_ckpt: Checkpoint, decoder_ckpt: Checkpoint) -> tuple[_Seq2Seq, dict]:
    """Combine one checkpoint's encoder with another's decoder.

    The result has the encoder checkpoint's kind and config. Every
    parameter is a bit-exact copy from its source; nothing is freshly
    initialized, which is why transplanting a checkpoint with itself
    reproduces the original model exactly.

    Returns the model and a source record {encoder: file sha,
    decoder: file sha, ...roles} for checkpoint provenance.
    """
    if encoder_ckpt.vocab_hash != decoder_ckpt.vocab_hash:
        raise TransferError(
            "vocabulary mismatch: encoder and decoder checkpoints index tokens differently"
        )
    model = build_model(encoder_ckpt.kind, encoder_ckpt.config, encoder_ckpt.build_vocab(), seed=0)
    target_names = set(model.params)
    target_decoder = {n for n in target_names if n.startswith("decoder.")}
    source_decoder = {n for n in decoder_ckpt.arrays if n.startswith("decoder.")}
    if source_decoder != target_decoder:
        leftover = sorted(source_decoder ^ target_decoder)
        raise TransferError(
            f"decoder architectures disagree; mismatched parameters start at {leftover[:3]}"
        )
    merged: dict[str, np.ndarray] = {}
    for name in target_names:
        source = decoder_ckpt if name.startswith("decoder.") else encoder_ckpt
        side = "decoder" if name.startswith("decoder.") else "encoder"
        if name not in source.arrays:
            raise TransferError(f"{side} checkpoint is missing parameter {name}")
        arr = source.arrays[name]
        want = model.params[name].shape
        if tuple(arr.shape) != want:
            raise TransferError(
                f"parameter {name} has shape {tuple(arr.shape)} in the {side} checkpoint, "
                f"target needs {want}"
            )
        merged[name] = arr
    model.load_param_arrays(merged)
    sources = {
        "encoder": encoder_ckpt.file_sha,
        "decoder": decoder_ckpt.file_sha,
        "encoder_role": encoder_ckpt.role,
        "decoder_role": decoder_ckpt.role,
    }
    return model, sources


def build_variant(variant: str, checkpoint_paths: dict[str, str]) -> tuple[_Seq2Seq, dict]:
    """Assemble one of the transplant systems (P-1, P-2, P-3) from the
    role-keyed checkpoint files of the earlier stages.

    Each source checkpoint must carry the role the recipe expects;
    refusing mislabeled files here catches the easiest wiring mistakes.
    """
    if variant not in VARIANTS:
        raise TransferError(f"unknown transplant variant {variant!r}; expected one of {sorted(VARIANTS)}")
    enc_role, dec_role = VARIANTS[variant]
    for role in (enc_role, dec_role):
        if role not in checkpoint_paths:
            raise TransferError(f"variant {variant} needs a checkpoint for role {role!r}")
    enc_ckpt = load_checkpoint(checkpoint_paths[enc_role])
    dec_ckpt = load_checkpoint(checkpoint_paths[dec_role])
    if enc_ckpt.role != enc_role:
        raise TransferError(
            f"variant {variant} expects an encoder from a {enc_role!r} checkpoint, got {enc_ckpt.role!r}"
        )
    if dec_ckpt.role != dec_role:
        raise TransferError(
            f"variant {variant} expects a decoder from a {dec_role!r} checkpoint, got {dec_ckpt.role!r}"
        )
    return transplant(enc_ckpt, dec_ckpt)
