"""Hash-chain token ledger: verifiable ownership records, transfer wallet,
and a peer record-propagation service."""

from .hashing import EncodingError, HashConfig, canonical_hash, is_digest
from .chain import (
    ChainReport,
    LinkVerdict,
    Record,
    RecordFormatError,
    TokenChain,
    TokenMismatchError,
    expected_fields,
    fields_from_keys,
    key_cascade,
    parse_record,
    serialize_record,
    verify_chain,
    verify_link,
)
from .wallet import (
    CounterMessage,
    KeyMaterial,
    OfferMessage,
    OwnershipError,
    TransferAborted,
    TransferPending,
    TransferProtocolError,
    TransferSession,
    derive_key,
    genesis_record,
    owns,
    recipient_counter,
    recipient_finish,
    recipient_offer,
    self_extend,
    sender_publish_half,
    sender_publish_next,
    parse_transfer_message,
)
from .store import AppendResult, Ledger, LoadError, PRUNED, StoreConfig, load
from .network import LedgerServer, PeerTable, WireClient, WireError

__version__ = "0.1.0"

__all__ = [
    "AppendResult",
    "ChainReport",
    "CounterMessage",
    "EncodingError",
    "HashConfig",
    "KeyMaterial",
    "Ledger",
    "LedgerServer",
    "LinkVerdict",
    "LoadError",
    "OfferMessage",
    "OwnershipError",
    "PRUNED",
    "PeerTable",
    "Record",
    "RecordFormatError",
    "StoreConfig",
    "TokenChain",
    "TokenMismatchError",
    "TransferAborted",
    "TransferPending",
    "TransferProtocolError",
    "TransferSession",
    "WireClient",
    "WireError",
    "canonical_hash",
    "derive_key",
    "expected_fields",
    "fields_from_keys",
    "genesis_record",
    "is_digest",
    "key_cascade",
    "load",
    "owns",
    "parse_record",
    "parse_transfer_message",
    "recipient_counter",
    "recipient_finish",
    "recipient_offer",
    "self_extend",
    "sender_publish_half",
    "sender_publish_next",
    "serialize_record",
    "verify_chain",
    "verify_link",
    "__version__",
]
