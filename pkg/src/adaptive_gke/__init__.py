"""Adaptive two-round group key exchange for fleets of weakly-connected devices.

The querier and the online devices agree on a contributory group key in two
communication rounds through an untrusted relay; devices that were offline
can derive the same key later because every device of a manufacturer can
recompute its manufacturer's contribution deterministically.
"""

from .algebra import (
    GroupParams,
    decode_element,
    decode_exponent,
    encode_element,
    encode_fixed,
    generate_group_params,
    group_preset,
    hash_to_exponent,
    is_subgroup_member,
    mod_exp,
    xor_mask,
)
from .crypto_suite import (
    ManufacturerKeyPair,
    QuerierKeyPair,
    compute_shared_key,
    derive_contribution_exponent,
    new_session_id,
    sign_broadcast,
    sign_contribution,
    verify_broadcast,
    verify_contribution,
)
from .errors import GkeError
from .metrics import OpCounts, cost_comparison_report
from .protocol import (
    BroadcastMessage,
    ContributionMessage,
    QuerierSession,
    TdsState,
    check_contribution_chain,
    querier_finalize,
    querier_open_session,
    querier_rekey_join,
    querier_rekey_leave,
    tds_contribute,
    tds_derive_key,
)

__version__ = "0.1.0"

__all__ = [
    "BroadcastMessage",
    "ContributionMessage",
    "GkeError",
    "GroupParams",
    "ManufacturerKeyPair",
    "OpCounts",
    "QuerierKeyPair",
    "QuerierSession",
    "TdsState",
    "check_contribution_chain",
    "compute_shared_key",
    "decode_element",
    "decode_exponent",
    "derive_contribution_exponent",
    "encode_element",
    "encode_fixed",
    "generate_group_params",
    "group_preset",
    "hash_to_exponent",
    "is_subgroup_member",
    "mod_exp",
    "new_session_id",
    "querier_finalize",
    "querier_open_session",
    "querier_rekey_join",
    "querier_rekey_leave",
    "sign_broadcast",
    "sign_contribution",
    "cost_comparison_report",
    "tds_contribute",
    "tds_derive_key",
    "verify_broadcast",
    "verify_contribution",
    "xor_mask",
]
