"""Deterministic synthetic flow scenarios with planted attack motifs.

Benign traffic is random client-server pairs; attacks are structural
motifs (Bot star to a C2 host, DDoS fan-in, Infiltration chains,
BruteForce hammering) with class-specific lognormal feature models, so
detection and explanation claims are testable at desk scale. Fixed seed
gives byte-identical output.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .flowdata import FlowDataset, FlowRecord, FlowSchema

PROTO_CATEGORIES = ["icmp", "tcp", "udp"]
NUMERIC_COLUMNS = ["in_bytes", "out_bytes", "in_pkts", "out_pkts", "duration"]
BASE_FEATURE_DIM = len(PROTO_CATEGORIES) + len(NUMERIC_COLUMNS)

# Lognormal (mu, sigma) per numeric column plus protocol weights. Benign
# in_bytes has raw-space std ~182; every attack mean sits >= 2 sigma away.
FEATURE_MODELS: dict[str, dict] = {
    "Benign": {
        "in_bytes": (6.0, 0.4),
        "out_bytes": (6.3, 0.4),
        "in_pkts": (1.6, 0.4),
        "out_pkts": (1.8, 0.4),
        "duration": (0.5, 0.5),
        "proto_p": [0.05, 0.70, 0.25],
    },
    "Bot": {
        "in_bytes": (3.5, 0.3),
        "out_bytes": (3.6, 0.3),
        "in_pkts": (0.5, 0.3),
        "out_pkts": (0.5, 0.3),
        "duration": (-1.0, 0.3),
        "proto_p": [0.0, 1.0, 0.0],
    },
    "DDoS": {
        "in_bytes": (8.0, 0.3),
        "out_bytes": (4.0, 0.3),
        "in_pkts": (4.5, 0.4),
        "out_pkts": (1.0, 0.3),
        "duration": (-1.5, 0.4),
        "proto_p": [0.0, 0.0, 1.0],
    },
    "Infiltration": {
        "in_bytes": (8.0, 0.5),
        "out_bytes": (8.2, 0.5),
        "in_pkts": (3.5, 0.4),
        "out_pkts": (3.6, 0.4),
        "duration": (2.5, 0.4),
        "proto_p": [0.0, 1.0, 0.0],
    },
    "BruteForce": {
        "in_bytes": (3.2, 0.3),
        "out_bytes": (3.0, 0.3),
        "in_pkts": (0.8, 0.3),
        "out_pkts": (0.8, 0.3),
        "duration": (-0.5, 0.3),
        "proto_p": [0.0, 1.0, 0.0],
    },
}

ATTACK_KINDS = ("Bot", "Infiltration", "DDoS", "BruteForce")


@dataclass
class AttackSpec:
    kind: str
    count: int
    params: dict = field(default_factory=dict)


@dataclass
class ScenarioConfig:
    n_benign: int
    attacks: list[AttackSpec]
    n_hosts: int = 60
    feature_dim: int = BASE_FEATURE_DIM
    seed: int = 0
    attack_fraction: float = 0.12


def synth_schema(feature_dim: int = BASE_FEATURE_DIM) -> FlowSchema:
    """Schema matching the CSV emitted by :func:`write_scenario`."""
    extra = [f"noise_{i}" for i in range(feature_dim - BASE_FEATURE_DIM)]
    return FlowSchema(
        numeric=NUMERIC_COLUMNS + extra,
        categorical={"proto": list(PROTO_CATEGORIES)},
        src="src",
        dst="dst",
        label="Label",
    )


def feature_names(feature_dim: int = BASE_FEATURE_DIM) -> list[str]:
    names = [f"proto={c}" for c in PROTO_CATEGORIES] + NUMERIC_COLUMNS
    names += [f"noise_{i}" for i in range(feature_dim - BASE_FEATURE_DIM)]
    return names


def balanced_scenario(
    attacks: list[AttackSpec],
    n_hosts: int = 60,
    seed: int = 0,
    attack_fraction: float = 0.12,
    feature_dim: int = BASE_FEATURE_DIM,
) -> ScenarioConfig:
    """Auto-size n_benign so the attack share hits the target fraction."""
    total_attack = sum(a.count for a in attacks)
    n_benign = int(round(total_attack * (1.0 - attack_fraction) / attack_fraction))
    return ScenarioConfig(
        n_benign=n_benign,
        attacks=attacks,
        n_hosts=n_hosts,
        feature_dim=feature_dim,
        seed=seed,
        attack_fraction=attack_fraction,
    )


def preset_scenario(
    name: str, n_flows: int = 20_000, seed: int = 0, n_hosts: int | None = None
) -> ScenarioConfig:
    """Named scenarios used by the CLI and the benchmark suite."""
    if name == "bot-infiltration":
        n_attack = int(round(0.12 * n_flows))
        hosts = n_hosts if n_hosts is not None else max(40, n_flows // 40)
        bot = int(round(n_attack * 0.40))
        infil = int(round(n_attack * 0.25))
        ddos = int(round(n_attack * 0.25))
        brute = n_attack - bot - infil - ddos
        chain_len = 10
        n_chains = max(1, infil // chain_len)
        attacks = [
            AttackSpec("Bot", bot - bot // 2),
            AttackSpec("Bot", bot // 2),
        ]
        for i in range(n_chains):
            extra = infil - chain_len * n_chains if i == 0 else 0
            attacks.append(AttackSpec("Infiltration", chain_len + extra))
        attacks.append(AttackSpec("DDoS", ddos - ddos // 2))
        attacks.append(AttackSpec("DDoS", ddos // 2))
        attacks.append(AttackSpec("BruteForce", brute))
        return balanced_scenario(attacks, n_hosts=hosts, seed=seed)
    if name == "bot":
        n_attack = int(round(0.12 * n_flows))
        hosts = n_hosts if n_hosts is not None else max(20, n_flows // 40)
        return balanced_scenario([AttackSpec("Bot", n_attack)], n_hosts=hosts, seed=seed)
    raise DataError(f"unknown scenario preset '{name}'")


def _host_names(n_hosts: int) -> list[str]:
    return [f"10.{i // 65025}.{(i // 255) % 255}.{i % 255 + 1}" for i in range(n_hosts)]


def _sample_features(rng: np.random.Generator, label: str, feature_dim: int) -> np.ndarray:
    model = FEATURE_MODELS[label]
    proto = rng.choice(len(PROTO_CATEGORIES), p=model["proto_p"])
    onehot = [1.0 if i == proto else 0.0 for i in range(len(PROTO_CATEGORIES))]
    numeric = [rng.lognormal(*model[col]) for col in NUMERIC_COLUMNS]
    noise = list(rng.normal(0.0, 1.0, size=feature_dim - BASE_FEATURE_DIM))
    return np.array(onehot + numeric + noise, dtype=np.float64)


def generate(config: ScenarioConfig) -> tuple[FlowDataset, dict[str, list[int]]]:
    """Generate a labeled dataset plus a ground-truth motif map.

    Returns (dataset, ground_truth) where ground_truth maps an attack
    instance id like "bot_0" to the flow_ids of its planted edges.
    """
    if config.n_hosts < 4:
        raise DataError(f"n_hosts must be >= 4, got {config.n_hosts}")
    if config.feature_dim < BASE_FEATURE_DIM:
        raise DataError(
            f"feature_dim must be >= {BASE_FEATURE_DIM}, got {config.feature_dim}"
        )
    for spec in config.attacks:
        if spec.kind not in ATTACK_KINDS:
            raise DataError(f"unknown attack kind '{spec.kind}'")
        if spec.count < 0:
            raise DataError(f"negative attack count for {spec.kind}")

    rng = np.random.default_rng(config.seed)
    hosts = _host_names(config.n_hosts)
    n_infra = max(2, config.n_hosts // 8)
    n_servers = max(1, config.n_hosts // 4)
    clients = hosts[: config.n_hosts - n_servers - n_infra]
    servers = hosts[len(clients) : len(clients) + n_servers]
    infra = hosts[len(clients) + n_servers :]
    if not clients:
        clients = hosts[:1]

    records: list[FlowRecord] = []
    names = feature_names(config.feature_dim)

    def emit(src: str, dst: str, label: str) -> int:
        fid = len(records)
        records.append(
            FlowRecord(
                flow_id=fid,
                src=src,
                dst=dst,
                features=_sample_features(rng, label, config.feature_dim),
                label=label,
            )
        )
        return fid

    for _ in range(config.n_benign):
        src = clients[rng.integers(len(clients))]
        dst = servers[rng.integers(len(servers))]
        emit(src, dst, "Benign")

    ground_truth: dict[str, list[int]] = {}
    infra_cursor = 0
    kind_counter: dict[str, int] = {}
    for spec in config.attacks:
        idx = kind_counter.get(spec.kind, 0)
        kind_counter[spec.kind] = idx + 1
        key = f"{spec.kind.lower()}_{idx}"
        ids: list[int] = []
        if spec.count == 0:
            ground_truth[key] = ids
            continue
        if spec.kind in ("Bot", "DDoS"):
            hub = spec.params.get("hub")
            if hub is None:
                hub = infra[infra_cursor % len(infra)]
                infra_cursor += 1
            replace = spec.count > len(clients)
            sources = rng.choice(clients, size=spec.count, replace=replace)
            for src in sources:
                ids.append(emit(str(src), hub, spec.kind))
        elif spec.kind == "Infiltration":
            # lateral movement: the chain walks a small pool of compromised
            # workstations, so each one accumulates several chain edges
            if len(clients) < 2:
                raise DataError("infiltration chains need at least 2 hosts")
            pool_size = int(spec.params.get("pool", max(2, min(spec.count // 2, 8))))
            pool_size = min(pool_size, len(clients))
            pool = [
                clients[i]
                for i in rng.choice(len(clients), size=pool_size, replace=False)
            ]
            entry = spec.params.get("entry")
            current = entry if entry is not None else pool[rng.integers(len(pool))]
            for _ in range(spec.count):
                nxt = pool[rng.integers(len(pool))]
                while nxt == current:
                    nxt = pool[rng.integers(len(pool))]
                ids.append(emit(current, nxt, "Infiltration"))
                current = nxt
        elif spec.kind == "BruteForce":
            src = spec.params.get("src", clients[rng.integers(len(clients))])
            dst = spec.params.get("dst")
            if dst is None:
                dst = infra[infra_cursor % len(infra)]
                infra_cursor += 1
            for _ in range(spec.count):
                ids.append(emit(str(src), str(dst), "BruteForce"))
        ground_truth[key] = ids

    dataset = FlowDataset(records=records, feature_names=names)
    n_attack = sum(len(v) for v in ground_truth.values())
    if len(records):
        frac = n_attack / len(records)
        if abs(frac - config.attack_fraction) > 0.02:
            warnings.warn(
                f"attack fraction {frac:.3f} deviates more than 2% from "
                f"target {config.attack_fraction:.3f}"
            )
    return dataset, ground_truth


def write_scenario(
    dataset: FlowDataset,
    ground_truth: dict[str, list[int]],
    csv_path: str | Path,
    truth_path: str | Path,
) -> None:
    """Emit the CSV in the raw synth schema plus the ground-truth sidecar."""
    n_onehot = len(PROTO_CATEGORIES)
    with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
        extra = len(dataset.feature_names) - BASE_FEATURE_DIM
        noise_cols = [f"noise_{i}" for i in range(extra)]
        fh.write(",".join(["src", "dst", "proto", *NUMERIC_COLUMNS, *noise_cols, "Label"]))
        fh.write("\r\n")
        for rec in dataset.records:
            proto = PROTO_CATEGORIES[int(np.argmax(rec.features[:n_onehot]))]
            numeric = [repr(float(v)) for v in rec.features[n_onehot:]]
            fh.write(",".join([rec.src, rec.dst, proto, *numeric, rec.label or ""]))
            fh.write("\r\n")
    Path(truth_path).write_text(json.dumps(ground_truth, sort_keys=True, indent=1))


def load_ground_truth(path: str | Path) -> dict[str, list[int]]:
    return json.loads(Path(path).read_text())
