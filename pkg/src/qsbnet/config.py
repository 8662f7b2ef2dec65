"""Scenario documents: JSON schema, defaults and semantic checks."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import jsonschema

from .errors import ConfigError
from .qkd import ChannelModel, SessionParams
from .topology import SPEED_IN_FIBER_KM_S, Topology, load_topology

ATTACK_KINDS = ("Eavesdrop", "Sybil", "TamperLedger", "NodeFailure")

_number = {"type": "number"}
_nonneg = {"type": "number", "minimum": 0}
_positive = {"type": "number", "exclusiveMinimum": 0}
_probability = {"type": "number", "minimum": 0, "maximum": 1}
_count = {"type": "integer", "minimum": 0}

_channel = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "loss_probability": _probability,
        "flip_probability": _probability,
        "eavesdrop_fraction": _probability,
    },
}

SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["topology"],
    "properties": {
        # Node and link structure is checked by load_topology, which reports finer paths.
        "topology": {"type": "object"},
        "traffic": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda": _nonneg,
                "mu": _positive,
                "secure_fraction": _probability,
                "required_key_bits": _count,
            },
        },
        "qkd": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "session_qubits": {"type": "integer", "minimum": 1},
                "sample_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "qber_threshold": {"type": "number", "minimum": 0, "maximum": 0.5},
                "security_parameter": _count,
                "ec_efficiency": {"type": "number", "minimum": 1},
                "qubit_rate": _nonneg,
                "watermark_bits": _count,
                "retry_interval": _positive,
                "channel": _channel,
                "links": {"type": "object", "additionalProperties": _channel},
            },
        },
        "crypto": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tx_tag_bits": {"type": "integer", "minimum": 1, "maximum": 256},
                "consensus_tag_bits": {"type": "integer", "minimum": 1, "maximum": 256},
                "bootstrap_bits": _count,
                "e2e_watermark_bits": _count,
                "e2e_refill_bits": {"type": "integer", "minimum": 1},
            },
        },
        "consensus": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "validators": {"type": "integer", "minimum": 1},
                "timeout": _positive,
                "block_interval": _nonneg,
                "max_block_txs": {"type": "integer", "minimum": 1},
                "processing_delay": _nonneg,
                "jitter": _nonneg,
            },
        },
        "attacks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["kind", "time"],
                "properties": {
                    "kind": {"enum": list(ATTACK_KINDS)},
                    "time": _nonneg,
                    "link": {"type": "string"},
                    "fraction": _probability,
                    "count": {"type": "integer"},
                    "interval": _positive,
                    "node": {"type": "string"},
                    "height": {"type": "integer"},
                    "bit": {"type": "integer"},
                },
            },
        },
        "sim": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "duration": _nonneg,
                "drain": _nonneg,
                "seed": {"type": "integer", "minimum": 0},
            },
        },
    },
}


@dataclass(frozen=True)
class TrafficConfig:
    lam: float = 0.0
    mu: float = 1.0
    secure_fraction: float = 0.5
    required_key_bits: int = 256


@dataclass(frozen=True)
class QkdConfig:
    session_qubits: int = 100_000
    sample_fraction: float = 0.1
    qber_threshold: float = 0.11
    security_parameter: int = 64
    ec_efficiency: float = 1.2
    qubit_rate: float = 1.0e6  # qubits per second on one QSCh; 0 disables key production
    watermark_bits: int = 65_536
    retry_interval: float = 1.0
    channel: ChannelModel = ChannelModel(0.5, 0.01, 0.0)
    links: Mapping[str, ChannelModel] = field(default_factory=dict)

    @property
    def session_params(self) -> SessionParams:
        return SessionParams(
            self.session_qubits, self.sample_fraction, self.qber_threshold, self.security_parameter, self.ec_efficiency
        )

    @property
    def session_duration(self) -> float:
        return self.session_qubits / self.qubit_rate if self.qubit_rate > 0 else math.inf

    def channel_for(self, link_id: str) -> ChannelModel:
        return self.links.get(link_id, self.channel)


@dataclass(frozen=True)
class CryptoConfig:
    tx_tag_bits: int = 32
    consensus_tag_bits: int = 32
    bootstrap_bits: int = 1024
    e2e_watermark_bits: int = 8192
    e2e_refill_bits: int = 8192


@dataclass(frozen=True)
class ConsensusConfig:
    validators: int | None = None  # default: every controller
    timeout: float = 0.5
    block_interval: float = 0.05
    max_block_txs: int = 32
    processing_delay: float = 1.0e-4
    jitter: float = 1.0e-4


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    time: float
    params: Mapping[str, Any]
    index: int

    @property
    def path(self) -> str:
        return f"attacks[{self.index}]"


@dataclass(frozen=True)
class SimConfig:
    duration: float = 10.0
    drain: float | None = None  # default: ten mean holding times
    seed: int = 0


@dataclass(frozen=True)
class Scenario:
    topology: Topology
    traffic: TrafficConfig
    qkd: QkdConfig
    crypto: CryptoConfig
    consensus: ConsensusConfig
    attacks: tuple[AttackSpec, ...]
    sim: SimConfig
    validators: tuple[str, ...]

    @property
    def horizon(self) -> float:
        return self.sim.duration

    @property
    def end_time(self) -> float:
        drain = self.sim.drain if self.sim.drain is not None else 10.0 / self.traffic.mu
        return self.sim.duration + drain


def _path_of(error: jsonschema.ValidationError) -> str:
    out = ""
    for part in error.absolute_path:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out or "<root>"


def _channel(raw: Mapping | None, base: ChannelModel) -> ChannelModel:
    raw = raw or {}
    return ChannelModel(
        raw.get("loss_probability", base.loss_probability),
        raw.get("flip_probability", base.flip_probability),
        raw.get("eavesdrop_fraction", base.eavesdrop_fraction),
    )


def max_control_latency(topology: Topology, consensus: ConsensusConfig) -> float:
    """Upper bound on one control message: every link, every hop, worst jitter."""
    total_km = sum(link.length_km for link in topology.links.values())
    hops = max(len(topology.links), 1)
    return total_km / SPEED_IN_FIBER_KM_S + hops * consensus.processing_delay + consensus.jitter


def load_scenario(document: Mapping) -> Scenario:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(document), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        err = errors[0]
        raise ConfigError(_path_of(err), err.message)

    topology = load_topology(document["topology"])
    t = document.get("traffic", {})
    traffic = TrafficConfig(
        float(t.get("lambda", 0.0)),
        float(t.get("mu", 1.0)),
        float(t.get("secure_fraction", 0.5)),
        int(t.get("required_key_bits", 256)),
    )

    q = document.get("qkd", {})
    base = _channel(q.get("channel"), QkdConfig.channel)
    link_channels = {}
    for link_id, raw in q.get("links", {}).items():
        if link_id not in topology.links:
            raise ConfigError(f"qkd.links.{link_id}", "unknown link")
        link_channels[link_id] = _channel(raw, base)
    defaults = QkdConfig()
    qkd = QkdConfig(
        q.get("session_qubits", defaults.session_qubits),
        q.get("sample_fraction", defaults.sample_fraction),
        q.get("qber_threshold", defaults.qber_threshold),
        q.get("security_parameter", defaults.security_parameter),
        q.get("ec_efficiency", defaults.ec_efficiency),
        float(q.get("qubit_rate", defaults.qubit_rate)),
        q.get("watermark_bits", defaults.watermark_bits),
        float(q.get("retry_interval", defaults.retry_interval)),
        base,
        link_channels,
    )

    crypto = CryptoConfig(**document.get("crypto", {}))
    consensus = ConsensusConfig(**document.get("consensus", {}))

    controllers = topology.controllers()
    if not controllers:
        raise ConfigError("topology.nodes", "at least one controller is required")
    n_val = consensus.validators if consensus.validators is not None else len(controllers)
    if n_val > len(controllers):
        raise ConfigError("consensus.validators", f"{n_val} validators but only {len(controllers)} controllers")
    validators = tuple(controllers[:n_val])

    # No view changes: a round must comfortably outlast any message delay.
    bound = max_control_latency(topology, consensus)
    if consensus.timeout < 4 * bound:
        raise ConfigError("consensus.timeout", f"must be at least 4x the worst control latency ({4 * bound:.6f} s)")

    s = document.get("sim", {})
    sim = SimConfig(float(s.get("duration", 10.0)), s.get("drain"), int(s.get("seed", 0)))

    attacks = []
    for i, raw in enumerate(document.get("attacks", [])):
        where = f"attacks[{i}]"
        kind = raw["kind"]
        params = {k: v for k, v in raw.items() if k not in ("kind", "time")}
        if raw["time"] > sim.duration:
            raise ConfigError(f"{where}.time", "trigger after the simulation horizon")
        if kind == "Eavesdrop":
            if params.get("link") not in topology.links:
                raise ConfigError(f"{where}.link", f"unknown link {params.get('link')!r}")
            params.setdefault("fraction", 1.0)
        elif kind == "Sybil":
            if params.get("count", 0) < 1:
                raise ConfigError(f"{where}.count", "at least one sybil node is required")
            params.setdefault("interval", 1.0)
        elif kind in ("TamperLedger", "NodeFailure"):
            node = params.get("node")
            if node not in topology.nodes:
                raise ConfigError(f"{where}.node", f"unknown node {node!r}")
            if kind == "TamperLedger":
                if node not in validators:
                    raise ConfigError(f"{where}.node", "only validators hold a ledger")
                for key in ("height", "bit"):
                    if not isinstance(params.get(key), int) or params[key] < 0:
                        raise ConfigError(f"{where}.{key}", "must be a non-negative integer")
        attacks.append(AttackSpec(kind, float(raw["time"]), params, i))

    return Scenario(topology, traffic, qkd, crypto, consensus, tuple(attacks), sim, validators)


def load_scenario_file(path: str | Path) -> Scenario:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read: {exc.strerror}") from exc
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return load_scenario(document)
