"""Host profiles, environment files, the CVE catalog and action catalogs.

Environment files are strict JSON: every required key must be present, no
unknown key is accepted, and ``serialize_environment`` emits one canonical
byte form (sorted keys, two-space indent, trailing newline) so that byte
equality between files is meaningful.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from typing import Any, Iterable, Sequence

import numpy as np

SCHEMA_VERSION = "1"
CVE_PATTERN = re.compile(r"^CVE-\d{4}-\d{4,}$")
_VERSION_RE = re.compile(r"^(\d+(?:\.\d+)*)(.*)$")

DEFAULT_SCAN_COST = 1.0
DEFAULT_EXPLOIT_COST = 5.0


class SchemaError(ValueError):
    """Missing, extra or mistyped field in an environment document."""


class InvariantError(ValueError):
    """Structurally valid document that violates a host invariant."""


class PoolTooSmall(ValueError):
    pass


# ---------------------------------------------------------------------------
# versions

def parse_version(text: str) -> tuple[tuple[int, ...], str]:
    m = _VERSION_RE.match(text.strip())
    if m is None:
        return (), text.strip()
    nums = tuple(int(p) for p in m.group(1).split("."))
    return nums, m.group(2)


def compare_versions(a: str, b: str) -> int:
    """Three-way compare of dotted versions.

    Numeric components compare as integers (missing trailing components
    count as zero); whatever follows the numeric prefix (``-rc1``, ``p1``)
    breaks ties lexically, with an empty tag sorting first.
    """
    na, ta = parse_version(a)
    nb, tb = parse_version(b)
    width = max(len(na), len(nb))
    na = na + (0,) * (width - len(na))
    nb = nb + (0,) * (width - len(nb))
    if na != nb:
        return -1 if na < nb else 1
    if ta != tb:
        return -1 if ta < tb else 1
    return 0


@dataclass(frozen=True)
class VersionRange:
    """``start`` is always inclusive; ``end`` inclusive iff ``end_inclusive``."""

    start: str
    end: str
    end_inclusive: bool = False

    def contains(self, version: str) -> bool:
        if compare_versions(version, self.start) < 0:
            return False
        c = compare_versions(version, self.end)
        return c < 0 or (c == 0 and self.end_inclusive)

    def is_empty(self) -> bool:
        c = compare_versions(self.start, self.end)
        return c > 0 or (c == 0 and not self.end_inclusive)

    def to_dict(self) -> dict:
        return {"start": self.start, "end": self.end, "end_inclusive": self.end_inclusive}


# ---------------------------------------------------------------------------
# host model

@dataclass(frozen=True)
class OSInfo:
    name: str
    version: str


@dataclass(frozen=True)
class PortEntry:
    number: int
    protocol: str
    service: str
    product: str
    version: str
    banner: str

    def __post_init__(self):
        if not 1 <= self.number <= 65535:
            raise InvariantError(f"port {self.number} outside [1, 65535]")
        if self.protocol not in ("tcp", "udp"):
            raise InvariantError(f"port {self.number}: protocol must be tcp or udp")
        if not self.service:
            raise InvariantError(f"port {self.number}: empty service")


@dataclass(frozen=True)
class VulnerabilityTruth:
    cve_id: str
    vulnerable_product: str
    vulnerable_version_range: VersionRange
    exposing_port: int
    description: str

    def __post_init__(self):
        if not CVE_PATTERN.match(self.cve_id):
            raise InvariantError(f"malformed CVE id {self.cve_id!r}")
        if self.vulnerable_version_range.is_empty():
            raise InvariantError(f"{self.cve_id}: empty vulnerable version range")


@dataclass(frozen=True)
class HostProfile:
    host_id: str
    os: OSInfo
    ports: tuple[PortEntry, ...]
    web_fingerprints: tuple[str, ...]
    vulnerability: VulnerabilityTruth

    def __post_init__(self):
        # canonical port order, so equal hosts serialize to equal bytes
        object.__setattr__(self, "ports", tuple(sorted(self.ports, key=lambda p: p.number)))
        object.__setattr__(self, "web_fingerprints", tuple(self.web_fingerprints))
        numbers = [p.number for p in self.ports]
        if len(set(numbers)) != len(numbers):
            raise InvariantError(f"{self.host_id}: duplicate port numbers")
        exposing = self.port(self.vulnerability.exposing_port)
        if exposing is None:
            raise InvariantError(
                f"{self.host_id}: exposing port {self.vulnerability.exposing_port} not in ports"
            )
        if exposing.product != self.vulnerability.vulnerable_product:
            raise InvariantError(
                f"{self.host_id}: port {exposing.number} runs {exposing.product!r}, "
                f"expected {self.vulnerability.vulnerable_product!r}"
            )

    def port(self, number: int) -> PortEntry | None:
        for p in self.ports:
            if p.number == number:
                return p
        return None


@dataclass(frozen=True)
class Provenance:
    kind: str  # captured | randomized
    engine: str | None = None  # rule | llm
    seed: int | None = None
    prompt_hash: str | None = None

    def __post_init__(self):
        if self.kind not in ("captured", "randomized"):
            raise SchemaError(f"provenance.kind must be captured or randomized, got {self.kind!r}")
        if self.kind == "randomized" and self.engine not in ("rule", "llm"):
            raise SchemaError("randomized provenance needs engine rule or llm")


@dataclass(frozen=True)
class EnvironmentFile:
    host: HostProfile
    provenance: Provenance = field(default_factory=lambda: Provenance("captured"))
    parent_id: str | None = None
    schema_version: str = SCHEMA_VERSION

    def __post_init__(self):
        if self.provenance.kind == "randomized" and not self.parent_id:
            raise InvariantError("randomized environment files must carry a parent_id")

    @property
    def cve_id(self) -> str:
        return self.host.vulnerability.cve_id


# ---------------------------------------------------------------------------
# strict JSON <-> dataclasses

def _obj(value: Any, path: str, required: Sequence[str], optional: Sequence[str] = ()) -> dict:
    if not isinstance(value, dict):
        raise SchemaError(f"{path}: expected object")
    missing = [k for k in required if k not in value]
    if missing:
        raise SchemaError(f"{path}: missing field(s) {', '.join(missing)}")
    extra = sorted(set(value) - set(required) - set(optional))
    if extra:
        raise SchemaError(f"{path}: unknown field(s) {', '.join(extra)}")
    return value


def _str(value: Any, path: str, nullable: bool = False) -> str | None:
    if value is None and nullable:
        return None
    if not isinstance(value, str):
        raise SchemaError(f"{path}: expected string")
    return value


def _int(value: Any, path: str, nullable: bool = False) -> int | None:
    if value is None and nullable:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(f"{path}: expected integer")
    return value


def _list(value: Any, path: str) -> list:
    if not isinstance(value, list):
        raise SchemaError(f"{path}: expected array")
    return value


def version_range_from_dict(d: Any, path: str = "range") -> VersionRange:
    _obj(d, path, ("start", "end", "end_inclusive"))
    if not isinstance(d["end_inclusive"], bool):
        raise SchemaError(f"{path}.end_inclusive: expected boolean")
    return VersionRange(_str(d["start"], path + ".start"), _str(d["end"], path + ".end"), d["end_inclusive"])


def host_from_dict(d: Any, path: str = "host") -> HostProfile:
    _obj(d, path, ("host_id", "os", "ports", "web_fingerprints", "vulnerability"))
    os_d = _obj(d["os"], path + ".os", ("name", "version"))
    ports = []
    for i, p in enumerate(_list(d["ports"], path + ".ports")):
        pp = f"{path}.ports[{i}]"
        _obj(p, pp, ("number", "protocol", "service", "product", "version", "banner"))
        ports.append(
            PortEntry(
                number=_int(p["number"], pp + ".number"),
                protocol=_str(p["protocol"], pp + ".protocol"),
                service=_str(p["service"], pp + ".service"),
                product=_str(p["product"], pp + ".product"),
                version=_str(p["version"], pp + ".version"),
                banner=_str(p["banner"], pp + ".banner"),
            )
        )
    fps = tuple(_str(f, f"{path}.web_fingerprints[{i}]") for i, f in enumerate(_list(d["web_fingerprints"], path + ".web_fingerprints")))
    vp = path + ".vulnerability"
    v = _obj(d["vulnerability"], vp, ("cve_id", "vulnerable_product", "vulnerable_version_range", "exposing_port", "description"))
    vuln = VulnerabilityTruth(
        cve_id=_str(v["cve_id"], vp + ".cve_id"),
        vulnerable_product=_str(v["vulnerable_product"], vp + ".vulnerable_product"),
        vulnerable_version_range=version_range_from_dict(v["vulnerable_version_range"], vp + ".vulnerable_version_range"),
        exposing_port=_int(v["exposing_port"], vp + ".exposing_port"),
        description=_str(v["description"], vp + ".description"),
    )
    return HostProfile(
        host_id=_str(d["host_id"], path + ".host_id"),
        os=OSInfo(_str(os_d["name"], path + ".os.name"), _str(os_d["version"], path + ".os.version")),
        ports=tuple(ports),
        web_fingerprints=fps,
        vulnerability=vuln,
    )


def host_to_dict(host: HostProfile) -> dict:
    v = host.vulnerability
    return {
        "host_id": host.host_id,
        "os": {"name": host.os.name, "version": host.os.version},
        "ports": [
            {
                "number": p.number,
                "protocol": p.protocol,
                "service": p.service,
                "product": p.product,
                "version": p.version,
                "banner": p.banner,
            }
            for p in host.ports
        ],
        "web_fingerprints": list(host.web_fingerprints),
        "vulnerability": {
            "cve_id": v.cve_id,
            "vulnerable_product": v.vulnerable_product,
            "vulnerable_version_range": v.vulnerable_version_range.to_dict(),
            "exposing_port": v.exposing_port,
            "description": v.description,
        },
    }


def environment_from_dict(doc: Any) -> EnvironmentFile:
    _obj(doc, "$", ("schema_version", "host", "provenance", "parent_id"))
    version = _str(doc["schema_version"], "schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {version!r}")
    prov = _obj(doc["provenance"], "provenance", ("kind", "engine", "seed", "prompt_hash"))
    provenance = Provenance(
        kind=_str(prov["kind"], "provenance.kind"),
        engine=_str(prov["engine"], "provenance.engine", nullable=True),
        seed=_int(prov["seed"], "provenance.seed", nullable=True),
        prompt_hash=_str(prov["prompt_hash"], "provenance.prompt_hash", nullable=True),
    )
    return EnvironmentFile(
        host=host_from_dict(doc["host"]),
        provenance=provenance,
        parent_id=_str(doc["parent_id"], "parent_id", nullable=True),
        schema_version=version,
    )


def environment_to_dict(env: EnvironmentFile) -> dict:
    p = env.provenance
    return {
        "schema_version": env.schema_version,
        "host": host_to_dict(env.host),
        "provenance": {"kind": p.kind, "engine": p.engine, "seed": p.seed, "prompt_hash": p.prompt_hash},
        "parent_id": env.parent_id,
    }


def canonical_json(doc: Any) -> bytes:
    return (json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n").encode("utf-8")


def parse_environment(data: bytes | str) -> EnvironmentFile:
    """Parse and validate an environment file.

    Raises SchemaError for malformed JSON or missing/unknown/mistyped
    fields and InvariantError when a host invariant does not hold.
    """
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SchemaError(f"not UTF-8: {exc}") from None
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from None
    return environment_from_dict(doc)


def serialize_environment(env: EnvironmentFile) -> bytes:
    return canonical_json(environment_to_dict(env))


def load_environment(path) -> EnvironmentFile:
    with open(path, "rb") as fh:
        return parse_environment(fh.read())


def save_environment(env: EnvironmentFile, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_environment(env))


def env_id(env: EnvironmentFile) -> str:
    return env.host.host_id


# ---------------------------------------------------------------------------
# CVE knowledge catalog

@dataclass(frozen=True)
class CVEEntry:
    cve_id: str
    name: str
    vulnerable_product: str
    vulnerable_version_range: VersionRange
    description: str
    versions: tuple[str, ...]  # known product releases, in and around the range

    def versions_in_range(self) -> list[str]:
        return [v for v in self.versions if self.vulnerable_version_range.contains(v)]


def _read_data(name: str) -> str:
    return (resources.files("gaplab") / "data" / name).read_text(encoding="utf-8")


def load_cve_catalog(text: str | None = None) -> dict[str, CVEEntry]:
    """Bundled catalog (or ``text``) keyed by CVE id, in file order."""
    doc = json.loads(text if text is not None else _read_data("cve_catalog.json"))
    out = {}
    for i, e in enumerate(_list(doc, "catalog")):
        path = f"catalog[{i}]"
        _obj(e, path, ("cve_id", "vulnerable_product", "vulnerable_version_range", "description"), ("name", "versions"))
        entry = CVEEntry(
            cve_id=_str(e["cve_id"], path + ".cve_id"),
            name=e.get("name", ""),
            vulnerable_product=_str(e["vulnerable_product"], path + ".vulnerable_product"),
            vulnerable_version_range=version_range_from_dict(e["vulnerable_version_range"], path + ".vulnerable_version_range"),
            description=_str(e["description"], path + ".description"),
            versions=tuple(e.get("versions", ())),
        )
        if not CVE_PATTERN.match(entry.cve_id):
            raise InvariantError(f"{path}: malformed CVE id")
        out[entry.cve_id] = entry
    return out


def bundled_environment_ids() -> list[str]:
    """CVE ids that have a bundled reference environment, sorted."""
    folder = resources.files("gaplab") / "data" / "environments"
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


def load_bundled_environment(cve_id: str) -> EnvironmentFile:
    return parse_environment((resources.files("gaplab") / "data" / "environments" / f"{cve_id}.json").read_bytes())


def bundled_environment_path(cve_id: str):
    return resources.files("gaplab") / "data" / "environments" / f"{cve_id}.json"


# ---------------------------------------------------------------------------
# action catalog

class ScanType(str, Enum):
    PORT_SCAN = "PortScan"
    OS_SCAN = "OSScan"
    SERVICE_SCAN = "ServiceScan"
    WEB_FINGERPRINT_SCAN = "WebFingerprintScan"
    BANNER_GRAB = "BannerGrab"


SCANS: tuple[ScanType, ...] = tuple(ScanType)


@dataclass(frozen=True)
class ActionSpec:
    action_id: int
    kind: str  # "scan" | "exploit"
    target: str  # ScanType value or cve_id
    cost: float

    @property
    def is_scan(self) -> bool:
        return self.kind == "scan"

    def label(self) -> str:
        return self.target if self.is_scan else f"Exploit({self.target})"


@dataclass(frozen=True)
class ActionCatalog:
    """Five fixed scans (ids 0-4) followed by the exploit list (ids 5..)."""

    exploits: tuple[str, ...]
    scan_cost: float = DEFAULT_SCAN_COST
    exploit_cost: float = DEFAULT_EXPLOIT_COST
    scans: tuple[ScanType, ...] = SCANS

    def __post_init__(self):
        if len(set(self.exploits)) != len(self.exploits):
            raise InvariantError("duplicate exploit in catalog")
        if self.scan_cost < 0 or self.exploit_cost < 0:
            raise InvariantError("action costs must be nonnegative")

    @property
    def size(self) -> int:
        return len(self.scans) + len(self.exploits)

    def __len__(self) -> int:
        return self.size

    def action(self, action_id: int) -> ActionSpec:
        if not 0 <= action_id < self.size:
            raise IndexError(f"action {action_id} outside catalog of size {self.size}")
        n = len(self.scans)
        if action_id < n:
            return ActionSpec(action_id, "scan", self.scans[action_id].value, self.scan_cost)
        return ActionSpec(action_id, "exploit", self.exploits[action_id - n], self.exploit_cost)

    @property
    def actions(self) -> list[ActionSpec]:
        return [self.action(i) for i in range(self.size)]

    def scan_id(self, scan: ScanType) -> int:
        return self.scans.index(scan)

    def exploit_id(self, cve_id: str) -> int:
        return len(self.scans) + self.exploits.index(cve_id)

    def to_dict(self) -> dict:
        return {
            "scans": [s.value for s in self.scans],
            "exploits": list(self.exploits),
            "scan_cost": self.scan_cost,
            "exploit_cost": self.exploit_cost,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActionCatalog":
        _obj(d, "catalog", ("scans", "exploits", "scan_cost", "exploit_cost"))
        scans = tuple(ScanType(s) for s in d["scans"])
        if scans != SCANS:
            raise SchemaError("catalog scans must be the fixed scan list")
        return cls(tuple(d["exploits"]), float(d["scan_cost"]), float(d["exploit_cost"]))


def default_distractor_pool(size: int = 2400) -> list[str]:
    """Deterministic pool of exploit ids standing in for a Metasploit module list.

    Starts with the bundled catalog CVEs, then pseudo-random ids drawn with a
    pinned generator seed.
    """
    pool = list(load_cve_catalog())
    seen = set(pool)
    rng = np.random.default_rng(0x6A9)
    while len(pool) < size:
        year = int(rng.integers(2008, 2024))
        number = int(rng.integers(1000, 50000))
        cve = f"CVE-{year}-{number:04d}"
        if cve not in seen:
            seen.add(cve)
            pool.append(cve)
    return pool


def build_catalog(
    truth_cves: Iterable[str],
    distractor_pool: Sequence[str],
    target_size: int,
    seed: int,
    scan_cost: float = DEFAULT_SCAN_COST,
    exploit_cost: float = DEFAULT_EXPLOIT_COST,
) -> ActionCatalog:
    """Catalog of exactly ``target_size`` actions containing every truth CVE.

    Distractor exploits are sampled without replacement from the pool with a
    seeded generator; the exploit list is stored sorted.
    """
    truth = sorted(set(truth_cves))
    n_scans = len(SCANS)
    if target_size < n_scans + len(truth):
        raise PoolTooSmall(f"target size {target_size} below {n_scans} scans + {len(truth)} truth exploits")
    candidates = [c for c in dict.fromkeys(distractor_pool) if c not in truth]
    need = target_size - n_scans - len(truth)
    if need > len(candidates):
        raise PoolTooSmall(f"need {need} distractors, pool has {len(candidates)}")
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(candidates), size=need, replace=False) if need else []
    exploits = sorted(truth + [candidates[i] for i in picked])
    return ActionCatalog(tuple(exploits), scan_cost, exploit_cost)


def with_host(env: EnvironmentFile, **changes) -> EnvironmentFile:
    """Copy of ``env`` with host fields replaced (re-validated)."""
    return replace(env, host=replace(env.host, **changes))
