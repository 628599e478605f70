"""Confidential federated learning on simulated enclaves.

Local and global training run inside software-simulated trusted-execution
enclaves; a policy manager releases secrets only to attested code; all
model exchange travels over mutually attested encrypted channels; sealed
storage is rollback-protected by a signed monotonic counter service; and a
clone-and-sample guard flags poisoning clients by their influence on
validation utility.
"""

from .attestation import (
    AttestationPolicy,
    AttestationVerdict,
    ChannelBinding,
    SecureChannel,
    attested_handshake,
    binding_report_data,
    verify_quote,
)
from .audit import AuditLog, verify_audit
from .counters import CounterService, CounterToken, verify_token
from .enclave import (
    Enclave,
    EnclaveIdentity,
    Platform,
    Quote,
    SealedBlob,
    generate_platform,
    measure,
    spawn_enclave,
)
from .fl import (
    Dataset,
    GlobalModel,
    ModelUpdate,
    aggregate,
    converged,
    evaluate,
    local_train,
    synthetic_dataset,
)
from .orchestrator import ClientAgent, Coordinator, RoundRecord
from .outliers import CloneRun, InfluenceScore, clone_aggregate, flag_outliers, score_clients
from .policy import (
    InjectionBundle,
    InjectionRule,
    Policy,
    PolicyManager,
    SecretSpec,
    SessionConfig,
    parse_policy,
    render_template,
)
from .shield import ShieldedFile, shield_decrypt, shield_encrypt

__version__ = "0.1.0"

__all__ = [
    "AttestationPolicy",
    "AttestationVerdict",
    "AuditLog",
    "ChannelBinding",
    "ClientAgent",
    "CloneRun",
    "Coordinator",
    "CounterService",
    "CounterToken",
    "Dataset",
    "Enclave",
    "EnclaveIdentity",
    "GlobalModel",
    "InfluenceScore",
    "InjectionBundle",
    "InjectionRule",
    "ModelUpdate",
    "Platform",
    "Policy",
    "PolicyManager",
    "Quote",
    "RoundRecord",
    "SealedBlob",
    "SecretSpec",
    "SecureChannel",
    "SessionConfig",
    "ShieldedFile",
    "aggregate",
    "attested_handshake",
    "binding_report_data",
    "clone_aggregate",
    "converged",
    "evaluate",
    "flag_outliers",
    "generate_platform",
    "local_train",
    "measure",
    "parse_policy",
    "render_template",
    "score_clients",
    "shield_decrypt",
    "shield_encrypt",
    "spawn_enclave",
    "synthetic_dataset",
    "verify_audit",
    "verify_quote",
    "verify_token",
]
