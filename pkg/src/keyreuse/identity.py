"""Node identities: key pairs, node records and their textual address forms.

Two address encodings are supported::

    enode://<128 hex pubkey>@<ip>:<tcp_port>?discport=<udp_port>
    /ip4/<ip>/tcp/<tcp_port>/p2p/<64 hex node id>
"""
from __future__ import annotations

import hashlib
import ipaddress
import re
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ec

# secp256k1 group order
_CURVE_ORDER = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141


class AddressError(ValueError):
    pass


class PublicKey(bytes):
    """64-byte uncompressed secp256k1 point (without the 0x04 prefix)."""

    def __new__(cls, value: bytes) -> "PublicKey":
        if len(value) != 64:
            raise ValueError(f"public key must be 64 bytes, got {len(value)}")
        return super().__new__(cls, value)

    @classmethod
    def from_hex(cls, text: str) -> "PublicKey":
        return cls(bytes.fromhex(text))

    def __repr__(self) -> str:
        return f"PublicKey({self.hex()[:12]}…)"


class NodeId(bytes):
    """32-byte digest of a public key; the coordinate used for XOR distance."""

    def __new__(cls, value: bytes) -> "NodeId":
        if len(value) != 32:
            raise ValueError(f"node id must be 32 bytes, got {len(value)}")
        return super().__new__(cls, value)

    @classmethod
    def from_hex(cls, text: str) -> "NodeId":
        return cls(bytes.fromhex(text))

    @classmethod
    def from_int(cls, value: int) -> "NodeId":
        return cls(value.to_bytes(32, "big"))

    def __int__(self) -> int:
        return int.from_bytes(self, "big")

    def __repr__(self) -> str:
        return f"NodeId({self.hex()[:12]}…)"


@dataclass(frozen=True)
class KeyPair:
    private_key: bytes = field(repr=False)
    public_key: PublicKey


@lru_cache(maxsize=None)
def node_id(pk: PublicKey) -> NodeId:
    return NodeId(hashlib.sha3_256(pk).digest())


def generate_keypair(rng_seed: int, index: int) -> KeyPair:
    """Derive a secp256k1 key pair deterministically from ``(rng_seed, index)``."""
    material = hashlib.sha256(f"keyreuse/keypair/{rng_seed}/{index}".encode()).digest()
    scalar = int.from_bytes(material, "big") % (_CURVE_ORDER - 1) + 1
    private = ec.derive_private_key(scalar, ec.SECP256K1())
    point = private.public_key().public_bytes(
        serialization.Encoding.X962, serialization.PublicFormat.UncompressedPoint
    )
    return KeyPair(scalar.to_bytes(32, "big"), PublicKey(point[1:]))


def _check_port(name: str, port: int) -> None:
    if not isinstance(port, int) or not 1 <= port <= 65535:
        raise ValueError(f"{name} out of range: {port!r}")


@dataclass(frozen=True)
class NodeRecord:
    """Discovery-layer self description of a node (an ENR without signature).

    Two records describe the same identity iff their public keys are equal;
    endpoint fields do not take part in that decision.
    """

    public_key: PublicKey
    ip: str
    udp_port: int
    tcp_port: int
    seq: int = 1

    def __post_init__(self) -> None:
        if not isinstance(self.public_key, PublicKey):
            object.__setattr__(self, "public_key", PublicKey(self.public_key))
        object.__setattr__(self, "ip", str(ipaddress.IPv4Address(self.ip)))
        _check_port("udp_port", self.udp_port)
        _check_port("tcp_port", self.tcp_port)
        if self.seq < 1:
            raise ValueError(f"seq must be >= 1, got {self.seq}")

    @property
    def node_id(self) -> NodeId:
        return node_id(self.public_key)

    @cached_property
    def id_int(self) -> int:
        return int(node_id(self.public_key))

    @property
    def udp_endpoint(self) -> tuple[str, int]:
        return (self.ip, self.udp_port)

    @property
    def tcp_endpoint(self) -> tuple[str, int]:
        return (self.ip, self.tcp_port)

    def same_identity(self, other: "NodeRecord") -> bool:
        return self.public_key == other.public_key

    def same_endpoint(self, other: "NodeRecord") -> bool:
        return (self.ip, self.udp_port, self.tcp_port) == (other.ip, other.udp_port, other.tcp_port)


_ENODE_RE = re.compile(
    r"^enode://(?P<pk>[0-9a-f]{128})@(?P<ip>[0-9.]+):(?P<tcp>\d{1,5})\?discport=(?P<udp>\d{1,5})$"
)
_MULTIADDR_RE = re.compile(
    r"^/ip4/(?P<ip>[0-9.]+)/tcp/(?P<tcp>\d{1,5})/p2p/(?P<id>[0-9a-f]{64})$"
)


def encode_enr_url_v4(record: NodeRecord) -> str:
    return f"enode://{record.public_key.hex()}@{record.ip}:{record.tcp_port}?discport={record.udp_port}"


def decode_enr_url_v4(text: str) -> NodeRecord:
    m = _ENODE_RE.match(text)
    if m is None:
        raise AddressError(f"not an enode url: {text!r}")
    try:
        return NodeRecord(PublicKey.from_hex(m["pk"]), m["ip"], int(m["udp"]), int(m["tcp"]))
    except ValueError as exc:
        raise AddressError(f"bad enode url {text!r}: {exc}") from None


def encode_multiaddr(record: NodeRecord) -> str:
    return f"/ip4/{record.ip}/tcp/{record.tcp_port}/p2p/{record.node_id.hex()}"


def decode_multiaddr(text: str) -> tuple[str, int, NodeId]:
    """Parse a multiaddr back into ``(ip, tcp_port, node_id)``."""
    m = _MULTIADDR_RE.match(text)
    if m is None:
        raise AddressError(f"not a multiaddr: {text!r}")
    try:
        ip = str(ipaddress.IPv4Address(m["ip"]))
        port = int(m["tcp"])
        _check_port("tcp_port", port)
    except ValueError as exc:
        raise AddressError(f"bad multiaddr {text!r}: {exc}") from None
    return ip, port, NodeId.from_hex(m["id"])
