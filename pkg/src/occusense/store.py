"""Envelope encryption-at-rest for recorded artifacts.

Two-stage scheme: each record gets a fresh random 256-bit data key; the
payload is sealed with AES-256-GCM under that key, and the data key itself
is wrapped to the recipient's RSA public key with OAEP(SHA-256).  The data
key never touches disk in plaintext.  Cipher primitives come from the
``cryptography`` package; this module only defines the envelope format and
its contracts.

Envelope layout (all integers little-endian)::

    magic   8 bytes  b"SEALREC1"
    version u8       1
    wrap_id u8       1 = RSA-OAEP-SHA256
    ciph_id u8       1 = AES-256-GCM
    tag_len u16, tag utf-8          plaintext type tag
    stamp   f64                     caller-supplied timestamp (metadata)
    key_len u32, wrapped data key
    nonce_len u16, nonce
    ct_len  u64, ciphertext (includes the GCM tag)

The header and metadata are authenticated as GCM associated data, so any
bit-flip anywhere in the record is detected at unseal time.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import DataError

MAGIC = b"SEALREC1"
VERSION = 1
WRAP_RSA_OAEP_SHA256 = 1
CIPHER_AES256_GCM = 1

SEALED_SUFFIX = ".sealed"

_OAEP = padding.OAEP(
    mgf=padding.MGF1(algorithm=hashes.SHA256()),
    algorithm=hashes.SHA256(),
    label=None,
)


@dataclass(frozen=True)
class SealedRecord:
    wrapped_key: bytes
    nonce: bytes
    ciphertext: bytes
    type_tag: str = "blob"
    timestamp: float = 0.0

    def to_bytes(self) -> bytes:
        return _header(self.type_tag, self.timestamp) + _body(self.wrapped_key, self.nonce, self.ciphertext)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SealedRecord":
        try:
            if blob[:8] != MAGIC:
                raise DataError(f"not a sealed record (magic {blob[:8]!r})")
            version, wrap_id, ciph_id = struct.unpack_from("<BBB", blob, 8)
            if version != VERSION:
                raise DataError(f"unsupported envelope version {version}")
            if wrap_id != WRAP_RSA_OAEP_SHA256 or ciph_id != CIPHER_AES256_GCM:
                raise DataError(f"unsupported algorithm ids wrap={wrap_id} cipher={ciph_id}")
            off = 11
            (tag_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            type_tag = blob[off:off + tag_len].decode("utf-8")
            off += tag_len
            (timestamp,) = struct.unpack_from("<d", blob, off)
            off += 8
            (key_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            wrapped_key = blob[off:off + key_len]
            off += key_len
            (nonce_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            nonce = blob[off:off + nonce_len]
            off += nonce_len
            (ct_len,) = struct.unpack_from("<Q", blob, off)
            off += 8
            ciphertext = blob[off:off + ct_len]
            if len(wrapped_key) != key_len or len(nonce) != nonce_len or len(ciphertext) != ct_len:
                raise DataError("truncated sealed record")
        except struct.error as exc:
            raise DataError(f"malformed sealed record: {exc}") from exc
        return cls(wrapped_key, nonce, ciphertext, type_tag, timestamp)


def _header(type_tag: str, timestamp: float) -> bytes:
    tag = type_tag.encode("utf-8")
    return (
        MAGIC
        + struct.pack("<BBB", VERSION, WRAP_RSA_OAEP_SHA256, CIPHER_AES256_GCM)
        + struct.pack("<H", len(tag)) + tag
        + struct.pack("<d", timestamp)
    )


def _body(wrapped_key: bytes, nonce: bytes, ciphertext: bytes) -> bytes:
    return (
        struct.pack("<I", len(wrapped_key)) + wrapped_key
        + struct.pack("<H", len(nonce)) + nonce
        + struct.pack("<Q", len(ciphertext)) + ciphertext
    )


def generate_keypair(key_size: int = 3072):
    """Fresh RSA recipient keypair; returns (private_key, public_key)."""
    private = rsa.generate_private_key(public_exponent=65537, key_size=key_size)
    return private, private.public_key()


def save_private_key(path: str | Path, private_key) -> None:
    Path(path).write_bytes(
        private_key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )
    )


def save_public_key(path: str | Path, public_key) -> None:
    Path(path).write_bytes(
        public_key.public_bytes(
            serialization.Encoding.PEM,
            serialization.PublicFormat.SubjectPublicKeyInfo,
        )
    )


def load_private_key(path: str | Path):
    return serialization.load_pem_private_key(Path(path).read_bytes(), password=None)


def load_public_key(path: str | Path):
    return serialization.load_pem_public_key(Path(path).read_bytes())


def seal(payload: bytes, public_key, type_tag: str = "blob", timestamp: float = 0.0) -> SealedRecord:
    """Encrypt a payload to a recipient: fresh data key per record.

    The 32-byte AES key and 12-byte nonce come from the OS CSPRNG; the key
    exists only in memory and leaves this function RSA-wrapped.
    """
    data_key = os.urandom(32)
    nonce = os.urandom(12)
    header = _header(type_tag, timestamp)
    ciphertext = AESGCM(data_key).encrypt(nonce, payload, header)
    wrapped = public_key.encrypt(data_key, _OAEP)
    return SealedRecord(wrapped, nonce, ciphertext, type_tag, timestamp)


def unseal(record: SealedRecord, private_key) -> bytes:
    """Recover the exact payload, or fail with an authentication error.

    Never returns silently corrupted data: a wrong key, tampered ciphertext,
    nonce, wrapped key, or metadata all raise ``DataError``.
    """
    try:
        data_key = private_key.decrypt(record.wrapped_key, _OAEP)
    except ValueError as exc:
        raise DataError("cannot unwrap data key: wrong private key or tampered record") from exc
    header = _header(record.type_tag, record.timestamp)
    try:
        return AESGCM(data_key).decrypt(record.nonce, record.ciphertext, header)
    except InvalidTag as exc:
        raise DataError("authentication failed: record was tampered with") from exc


def seal_file(src: str | Path, dst: str | Path, public_key, type_tag: str | None = None) -> None:
    src = Path(src)
    record = seal(src.read_bytes(), public_key, type_tag=type_tag or src.suffix.lstrip(".") or "blob")
    Path(dst).write_bytes(record.to_bytes())


def unseal_file(src: str | Path, dst: str | Path, private_key) -> None:
    record = SealedRecord.from_bytes(Path(src).read_bytes())
    Path(dst).write_bytes(unseal(record, private_key))
