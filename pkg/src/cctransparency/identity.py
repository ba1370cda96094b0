"""Ed25519 identities, trust anchors, and key files."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .encoding import EncodingError, b64d, b64e

KEY_SIZE = 32
KEY_FILE_MAGIC = "cct-ed25519"


class Role(str, Enum):
    CODE_OWNER = "code_owner"
    FIRST_PARTY = "first_party"
    THIRD_PARTY = "third_party"
    COMMUNITY = "community"
    BUILDER = "builder"
    LOG_OPERATOR = "log_operator"
    MONITOR = "monitor"


def _public_bytes(key: Ed25519PublicKey) -> bytes:
    return key.public_bytes(Encoding.Raw, PublicFormat.Raw)


def verify_signature(public_key: bytes, message: bytes, signature: bytes) -> bool:
    """Ed25519 verification that never raises on bad input."""
    if len(public_key) != KEY_SIZE or len(signature) != 64:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


@dataclass(frozen=True)
class Identity:
    name: str
    role: Role
    public_key: bytes
    private_key: Optional[bytes] = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("identity name must be non-empty")
        object.__setattr__(self, "role", Role(self.role))
        if len(self.public_key) != KEY_SIZE:
            raise ValueError("public key must be 32 bytes")
        if self.private_key is not None:
            derived = _public_bytes(Ed25519PrivateKey.from_private_bytes(self.private_key).public_key())
            if derived != self.public_key:
                raise ValueError(f"private key of {self.name!r} does not match its public key")

    @classmethod
    def generate(cls, name: str, role: Role | str, seed: bytes | None = None) -> "Identity":
        """New key pair; ``seed`` makes it deterministic (hashed with the name)."""
        if seed is None:
            secret = os.urandom(KEY_SIZE)
        else:
            secret = hashlib.sha256(b"cct-key\x00" + seed + b"\x00" + name.encode("utf-8")).digest()
        sk = Ed25519PrivateKey.from_private_bytes(secret)
        return cls(name, Role(role), _public_bytes(sk.public_key()), secret)

    @property
    def can_sign(self) -> bool:
        return self.private_key is not None

    def sign(self, message: bytes) -> bytes:
        if self.private_key is None:
            raise PermissionError(f"identity {self.name!r} holds no private key")
        return Ed25519PrivateKey.from_private_bytes(self.private_key).sign(message)

    def public(self) -> "Identity":
        return replace(self, private_key=None)

    def to_dict(self) -> dict:
        return {"name": self.name, "role": self.role.value, "public_key": b64e(self.public_key)}

    @classmethod
    def from_dict(cls, d: dict) -> "Identity":
        try:
            return cls(d["name"], Role(d["role"]), b64d(d["public_key"]))
        except (KeyError, TypeError) as exc:
            raise EncodingError(f"malformed identity: {exc}") from exc


class TrustStore:
    """Public keys a verifier is willing to attribute signatures to."""

    def __init__(self, identities: Iterable[Identity] = ()) -> None:
        self._by_key: dict[bytes, Identity] = {}
        for ident in identities:
            self.add(ident)

    def add(self, identity: Identity) -> None:
        self._by_key[identity.public_key] = identity.public()

    def get(self, public_key: bytes) -> Identity | None:
        return self._by_key.get(public_key)

    def __contains__(self, public_key: object) -> bool:
        return public_key in self._by_key

    def __iter__(self) -> Iterator[Identity]:
        return iter(self._by_key.values())

    def __len__(self) -> int:
        return len(self._by_key)

    def keys_with_role(self, *roles: Role) -> frozenset[bytes]:
        return frozenset(k for k, ident in self._by_key.items() if ident.role in roles)


# Key file layout (two lines):
#   cct-ed25519-{private|public} <role> <name>
#   <base64 of the raw 32-byte key>


def save_key(identity: Identity, path: str | os.PathLike, *, private: bool = True) -> None:
    kind = "private" if private else "public"
    raw = identity.private_key if private else identity.public_key
    if raw is None:
        raise PermissionError(f"identity {identity.name!r} holds no private key")
    header = f"{KEY_FILE_MAGIC}-{kind} {identity.role.value} {identity.name}"
    p = Path(path)
    p.write_text(f"{header}\n{b64e(raw)}\n", encoding="utf-8")
    if private:
        os.chmod(p, 0o600)


def load_key(path: str | os.PathLike) -> Identity:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) != 2:
        raise EncodingError(f"{path}: expected a header line and a key line")
    parts = lines[0].split(" ", 2)
    if len(parts) != 3 or parts[0] not in (f"{KEY_FILE_MAGIC}-private", f"{KEY_FILE_MAGIC}-public"):
        raise EncodingError(f"{path}: bad key file header {lines[0]!r}")
    magic, role, name = parts
    raw = b64d(lines[1].strip())
    if len(raw) != KEY_SIZE:
        raise EncodingError(f"{path}: key must be 32 bytes")
    if magic.endswith("private"):
        sk = Ed25519PrivateKey.from_private_bytes(raw)
        return Identity(name, Role(role), _public_bytes(sk.public_key()), raw)
    return Identity(name, Role(role), raw)
