"""Deterministic simulator for blockchains with verifiable external calls."""

from vecsim.execution import ContractState, Transaction, apply_transaction, state_root
from vecsim.ledger import Block, Chain, ChainParams, complete_block, validate_block
from vecsim.network import NetworkConfig, OracleMode, World
from vecsim.oracle import OracleDirectory, OracleEndpoint
from vecsim.scenario import MetricsReport, Scenario, load_scenario, run_scenario
from vecsim.verifiable_call import (
    ExternalCallRequest,
    Freshness,
    SignedResponse,
    VerifiableExternalCall,
    verify_external_call,
)

__version__ = "0.1.0"

__all__ = [
    "Block",
    "Chain",
    "ChainParams",
    "ContractState",
    "ExternalCallRequest",
    "Freshness",
    "MetricsReport",
    "NetworkConfig",
    "OracleDirectory",
    "OracleEndpoint",
    "OracleMode",
    "Scenario",
    "SignedResponse",
    "Transaction",
    "VerifiableExternalCall",
    "World",
    "apply_transaction",
    "complete_block",
    "load_scenario",
    "run_scenario",
    "state_root",
    "validate_block",
    "verify_external_call",
]
