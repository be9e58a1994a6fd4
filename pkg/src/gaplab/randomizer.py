"""Environment augmentation: rule engine, LLM generator and the validator.

Field census used by ``validate`` (each entry counts once when it differs
from the original):

    os.name, os.version, exposing.port, exposing.version, exposing.banner,
    other_ports (the set of non-exposing port entries), web_fingerprints

Violation ids:

    schema         document does not parse (structure, types, unknown fields)
    lineage        provenance is not "randomized" or parent_id is not the original
    cve-changed    vulnerability.cve_id differs from the original
    vp-changed     vulnerable_product differs from the original
    range-changed  vulnerable_version_range differs from the original
    vp-missing     no port at exposing_port runs the vulnerable product
    version-range  exposing product version outside the vulnerable range
    port-unique    two entries share a port number
    port-range     a port number outside [1, 65535]
    invariant      any other host invariant failure
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
import re
import time
import warnings
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Any, Callable

import numpy as np

from .envmodel import (
    CVEEntry,
    EnvironmentFile,
    InvariantError,
    SchemaError,
    canonical_json,
    environment_from_dict,
    environment_to_dict,
    env_id,
    load_cve_catalog,
    serialize_environment,
    version_range_from_dict,
)

CENSUS = (
    "os.name",
    "os.version",
    "exposing.port",
    "exposing.version",
    "exposing.banner",
    "other_ports",
    "web_fingerprints",
)


class PolicyUnsatisfiable(ValueError):
    pass


class EndpointError(RuntimeError):
    pass


class ExtractionError(ValueError):
    pass


class ShortfallWarning(UserWarning):
    def __init__(self, requested: int, produced: int):
        super().__init__(f"requested {requested} variants, {produced} passed validation")
        self.requested = requested
        self.produced = produced
        self.shortfall = requested - produced


@dataclass(frozen=True)
class RandomizationPolicy:
    vary_ports: bool = True
    port_range: tuple[int, int] = (1, 65535)
    vary_os_version: bool = True
    vary_service_versions: bool = True
    add_distractor_ports: tuple[int, int] = (0, 4)
    vary_fingerprints: bool = True
    min_fields_changed: int = 2

    def __post_init__(self):
        if self.min_fields_changed < 1:
            raise ValueError("min_fields_changed must be >= 1")
        lo, hi = self.add_distractor_ports
        if lo < 0 or hi < lo:
            raise ValueError("distractor count range must satisfy 0 <= lo <= hi")
        plo, phi = self.port_range
        if not 1 <= plo <= phi <= 65535:
            raise ValueError("port_range must lie within [1, 65535]")

    def mutable_fields(self) -> int:
        n = 0
        if self.vary_os_version:
            n += 2  # name and version
        if self.vary_ports:
            n += 1
        if self.vary_service_versions:
            n += 2  # version and banner
        if self.add_distractor_ports[1] > 0:
            n += 1
        if self.vary_fingerprints:
            n += 1
        return n


@lru_cache(maxsize=1)
def service_table() -> dict:
    return json.loads((resources.files("gaplab") / "data" / "services.json").read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# validator

@dataclass(frozen=True)
class ValidationReport:
    valid: bool
    violations: tuple[str, ...]
    fields_changed: int


def _census(host: dict) -> dict:
    v = host.get("vulnerability", {})
    ports = host.get("ports", [])
    exp_no = v.get("exposing_port")
    exposing = next((p for p in ports if p.get("number") == exp_no and p.get("product") == v.get("vulnerable_product")), None)
    exposing = exposing or next((p for p in ports if p.get("number") == exp_no), {})
    others = sorted(
        json.dumps(p, sort_keys=True) for p in ports if p is not exposing
    )
    os_d = host.get("os", {})
    return {
        "os.name": os_d.get("name"),
        "os.version": os_d.get("version"),
        "exposing.port": exp_no,
        "exposing.version": exposing.get("version"),
        "exposing.banner": exposing.get("banner"),
        "other_ports": tuple(others),
        "web_fingerprints": tuple(sorted(host.get("web_fingerprints", []))),
    }


def fields_changed(variant_host: dict, original_host: dict) -> int:
    a, b = _census(variant_host), _census(original_host)
    return sum(a[k] != b[k] for k in CENSUS)


def _as_doc(x: EnvironmentFile | dict | bytes | str) -> Any:
    if isinstance(x, EnvironmentFile):
        return environment_to_dict(x)
    if isinstance(x, (bytes, str)):
        return json.loads(x)
    return x


def validate(variant, original: EnvironmentFile, policy: RandomizationPolicy | None = None) -> ValidationReport:
    """Check a candidate variant (file, dict or bytes) against its original."""
    policy = policy or RandomizationPolicy()
    orig = environment_to_dict(original)
    ov = orig["host"]["vulnerability"]
    try:
        doc = _as_doc(variant)
    except (ValueError, UnicodeDecodeError):
        return ValidationReport(False, ("schema",), 0)
    violations: list[str] = []
    try:
        environment_from_dict(doc)
        structural_ok = True
    except SchemaError:
        violations.append("schema")
        structural_ok = False
    except InvariantError:
        structural_ok = False
    if not isinstance(doc, dict) or not isinstance(doc.get("host"), dict):
        return ValidationReport(False, ("schema",), 0)
    host = doc["host"]
    v = host.get("vulnerability") if isinstance(host.get("vulnerability"), dict) else {}
    ports = [p for p in host.get("ports", []) if isinstance(p, dict)] if isinstance(host.get("ports"), list) else []

    prov = doc.get("provenance") if isinstance(doc.get("provenance"), dict) else {}
    if prov.get("kind") != "randomized" or doc.get("parent_id") != env_id(original):
        violations.append("lineage")
    if v.get("cve_id") != ov["cve_id"]:
        violations.append("cve-changed")
    if v.get("vulnerable_product") != ov["vulnerable_product"]:
        violations.append("vp-changed")
    if v.get("vulnerable_version_range") != ov["vulnerable_version_range"]:
        violations.append("range-changed")
    exposing = [p for p in ports if p.get("number") == v.get("exposing_port") and p.get("product") == ov["vulnerable_product"]]
    if not exposing:
        violations.append("vp-missing")
    else:
        rng = version_range_from_dict(ov["vulnerable_version_range"])
        ver = exposing[0].get("version")
        if not isinstance(ver, str) or not rng.contains(ver):
            violations.append("version-range")
    numbers = [p.get("number") for p in ports]
    if len(set(map(repr, numbers))) != len(numbers):
        violations.append("port-unique")
    if any(not isinstance(n, int) or isinstance(n, bool) or not 1 <= n <= 65535 for n in numbers):
        violations.append("port-range")
    if not structural_ok and not violations:
        violations.append("invariant")
    changed = fields_changed(host, orig["host"]) if "schema" not in violations else 0
    valid = not violations and changed >= policy.min_fields_changed
    return ValidationReport(valid, tuple(dict.fromkeys(violations)), changed)


# ---------------------------------------------------------------------------
# rule engine

def _cve_entry(cve_id: str) -> CVEEntry | None:
    return load_cve_catalog().get(cve_id)


def _replace_version(text: str, old: str, new: str) -> str:
    if not old or old == new:
        return text
    return re.sub(r"(?<![\w.])" + re.escape(old) + r"(?![\w])", new, text)


def _variant_host(base: dict, policy: RandomizationPolicy, rng: np.random.Generator, in_range: list[str]) -> dict:
    table = service_table()
    host = copy.deepcopy(base)
    vuln = host["vulnerability"]
    exp_no = vuln["exposing_port"]
    exposing = next(p for p in host["ports"] if p["number"] == exp_no)
    old_os = dict(host["os"])

    if policy.vary_os_version:
        names = sorted(table["os_versions"])
        name = old_os["name"] if rng.random() < 0.5 else names[int(rng.integers(len(names)))]
        choices = [v for v in table["os_versions"].get(name, []) if (name, v) != (old_os["name"], old_os["version"])]
        if choices:
            host["os"] = {"name": name, "version": choices[int(rng.integers(len(choices)))]}

    used = {p["number"] for p in host["ports"] if p is not exposing}
    if policy.vary_ports:
        lo, hi = policy.port_range
        alts = [n for n in table["alternate_ports"].get(exposing["service"], []) if lo <= n <= hi]
        alts = [n for n in alts if n != exp_no and n not in used]
        if alts and rng.random() < 0.8:
            new_no = alts[int(rng.integers(len(alts)))]
        else:
            new_no = exp_no
            while new_no == exp_no or new_no in used:
                new_no = int(rng.integers(max(lo, 1024) if hi >= 1024 else lo, hi + 1))
        exposing["number"] = new_no
        vuln["exposing_port"] = new_no

    old_ver = exposing["version"]
    if policy.vary_service_versions:
        options = [v for v in in_range if v != old_ver]
        if options:
            exposing["version"] = options[int(rng.integers(len(options)))]
    new_ver = exposing["version"]
    for p in host["ports"]:
        banner = _replace_version(p["banner"], old_ver, new_ver) if p is exposing else p["banner"]
        if policy.vary_os_version:
            banner = banner.replace(f"({old_os['name']})", f"({host['os']['name']})")
        p["banner"] = banner
    if new_ver != old_ver and exposing["banner"] == base_port_banner(base, exp_no):
        # make the banner carry the new version so the change is observable
        exposing["banner"] = f"{exposing['banner']} {exposing['product']}/{new_ver}".strip()

    if policy.vary_fingerprints:
        fps = [_replace_version(f, old_ver, new_ver) for f in host["web_fingerprints"]]
        pool = [f for f in table["fingerprints"] if f not in fps]
        k = int(rng.integers(1, 4))
        extra = [pool[i] for i in sorted(rng.choice(len(pool), size=min(k, len(pool)), replace=False))]
        host["web_fingerprints"] = fps + extra

    lo, hi = policy.add_distractor_ports
    k = int(rng.integers(lo, hi + 1))
    if k:
        services = [d for d in table["distractors"] if d["service"] != exposing["service"]]
        order = rng.permutation(len(services))
        taken = {p["number"] for p in host["ports"]}
        added = 0
        for j in order:
            if added == k:
                break
            d = services[int(j)]
            free = [n for n in d["ports"] if n not in taken]
            if not free:
                continue
            number = free[int(rng.integers(len(free)))]
            version = d["versions"][int(rng.integers(len(d["versions"])))]
            host["ports"].append({
                "number": number,
                "protocol": d.get("protocol", "tcp"),
                "service": d["service"],
                "product": d["product"],
                "version": version,
                "banner": d["banner"].format(version=version),
            })
            taken.add(number)
            added += 1
    host["ports"].sort(key=lambda p: p["number"])
    return host


def base_port_banner(base: dict, number: int) -> str | None:
    for p in base["ports"]:
        if p["number"] == number:
            return p["banner"]
    return None


def randomize_rule(
    env: EnvironmentFile,
    policy: RandomizationPolicy | None = None,
    n: int = 1,
    seed: int = 0,
    max_tries: int = 64,
) -> list[EnvironmentFile]:
    """``n`` validated, pairwise-distinct variants; deterministic in (env, policy, n, seed)."""
    policy = policy or RandomizationPolicy()
    if policy.min_fields_changed > policy.mutable_fields():
        raise PolicyUnsatisfiable(
            f"min_fields_changed={policy.min_fields_changed} exceeds the {policy.mutable_fields()} fields the policy may change"
        )
    if n <= 0:
        return []
    base = environment_to_dict(env)["host"]
    entry = _cve_entry(env.cve_id)
    rng_range = env.host.vulnerability.vulnerable_version_range
    known = list(entry.versions) if entry else []
    in_range = [v for v in dict.fromkeys(known + [p.version for p in env.host.ports if p.product == env.host.vulnerability.vulnerable_product]) if rng_range.contains(v)]
    rng = np.random.default_rng(seed)
    parent = env_id(env)
    out, seen = [], {canonical_json(base)}
    for i in range(n):
        for _ in range(max_tries):
            host = _variant_host(base, policy, rng, in_range)
            host["host_id"] = f"{parent}-r{seed}-{i}"
            key = canonical_json({**host, "host_id": ""})
            if key in seen or fields_changed(host, base) < policy.min_fields_changed:
                continue
            doc = {
                "schema_version": env.schema_version,
                "host": host,
                "provenance": {"kind": "randomized", "engine": "rule", "seed": seed, "prompt_hash": None},
                "parent_id": parent,
            }
            report = validate(doc, env, policy)
            if not report.valid:
                continue
            seen.add(key)
            out.append(environment_from_dict(doc))
            break
        else:
            raise PolicyUnsatisfiable(f"could not produce variant {i} within {max_tries} attempts")
    return out


# ---------------------------------------------------------------------------
# mutation corruptor (test generator: breaks exactly one rule)

CORRUPTIONS = (
    "cve-changed",
    "vp-changed",
    "range-changed",
    "vp-missing",
    "version-range",
    "port-unique",
    "port-range",
    "lineage",
    "schema",
    "unchanged",
)


def _out_of_range_version(env: EnvironmentFile) -> str:
    vr = env.host.vulnerability.vulnerable_version_range
    entry = _cve_entry(env.cve_id)
    for v in (entry.versions if entry else ()):
        if not vr.contains(v):
            return v
    if not vr.end_inclusive and not vr.contains(vr.end):
        return vr.end
    return vr.end + ".999"


def corrupt(variant: EnvironmentFile, original: EnvironmentFile, rule: str) -> dict:
    """Copy of ``variant`` (as a dict) with exactly the named rule broken."""
    doc = environment_to_dict(variant)
    host = doc["host"]
    v = host["vulnerability"]
    exposing = next(p for p in host["ports"] if p["number"] == v["exposing_port"])
    if rule == "cve-changed":
        others = [c for c in load_cve_catalog() if c != v["cve_id"]]
        v["cve_id"] = others[0]
    elif rule == "vp-changed":
        v["vulnerable_product"] = v["vulnerable_product"] + "-fork"
    elif rule == "range-changed":
        v["vulnerable_version_range"] = dict(v["vulnerable_version_range"], end_inclusive=not v["vulnerable_version_range"]["end_inclusive"])
        # keep the exposing version inside both ranges
        rng = version_range_from_dict(v["vulnerable_version_range"])
        if not rng.contains(exposing["version"]):
            exposing["version"] = v["vulnerable_version_range"]["start"]
    elif rule == "vp-missing":
        exposing["product"] = "nginx"
    elif rule == "version-range":
        exposing["version"] = _out_of_range_version(original)
    elif rule == "port-unique":
        host["ports"].append(dict(host["ports"][-1]))
    elif rule == "port-range":
        others = [p for p in host["ports"] if p is not exposing]
        if others:
            others[0]["number"] = 70000
        else:
            host["ports"].append({"number": 70000, "protocol": "tcp", "service": "ssh", "product": "OpenSSH", "version": "8.2p1", "banner": "SSH-2.0-OpenSSH_8.2p1"})
    elif rule == "lineage":
        doc["parent_id"] = "not-" + str(doc["parent_id"])
    elif rule == "schema":
        host["unexpected_field"] = True
    elif rule == "unchanged":
        orig = environment_to_dict(original)
        doc["host"] = orig["host"]
    else:
        raise ValueError(f"unknown corruption {rule!r}")
    return doc


# ---------------------------------------------------------------------------
# LLM path

@dataclass(frozen=True)
class PromptBundle:
    background: str
    example: str
    instruction: str
    n_variants: int

    @property
    def text(self) -> str:
        return (
            "### Background\n" + self.background.strip() + "\n\n"
            "### Example environment\n```json\n" + self.example.rstrip("\n") + "\n```\n\n"
            "### Task\n" + self.instruction.strip() + "\n"
        )

    @property
    def prompt_hash(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    def messages(self) -> list[dict]:
        return [
            {"role": "system", "content": SYSTEM_MESSAGE},
            {"role": "user", "content": self.text},
        ]


SYSTEM_MESSAGE = (
    "You generate host configurations for a penetration-testing simulator. "
    "Answer only with JSON that follows the schema of the example."
)


def build_prompt(env: EnvironmentFile, cve_description: str, n: int) -> PromptBundle:
    if not cve_description.strip():
        raise ValueError("CVE description must be nonempty")
    v = env.host.vulnerability
    vr = v.vulnerable_version_range
    end_word = "up to and including" if vr.end_inclusive else "before"
    instruction = (
        f"Produce {n} new host configurations in the same JSON format as the example. "
        f"Each one must still expose {v.vulnerable_product} with a version from {vr.start} {end_word} {vr.end}, "
        f"so that {v.cve_id} stays exploitable. "
        "Vary the operating system version, the port the vulnerable service listens on, "
        "the versions of the web server and other components, and add unrelated services where plausible. "
        "Keep the vulnerability block unchanged apart from exposing_port. "
        f"Return a JSON array of {n} objects inside a single ```json code block."
    )
    return PromptBundle(cve_description, serialize_environment(env).decode("utf-8"), instruction, n)


def estimate_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


@dataclass(frozen=True)
class LLMClientConfig:
    endpoint: str | None = None  # falls back to $GAP_LLM_ENDPOINT
    model: str = "glm-4"
    temperature: float = 0.7
    timeout: float = 60.0
    max_retries: int = 3
    backoff: tuple[float, ...] = (1.0, 2.0, 4.0)
    api_key_env: str = "GAP_LLM_API_KEY"
    max_prompt_tokens: int = 8192

    def resolved_endpoint(self) -> str:
        url = self.endpoint or os.environ.get("GAP_LLM_ENDPOINT")
        if not url:
            raise EndpointError("no LLM endpoint configured (set endpoint or GAP_LLM_ENDPOINT)")
        return url


class ChatClient:
    """Chat-completion client with a fixed retry schedule."""

    def __init__(self, config: LLMClientConfig, transport=None, sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self.transport = transport
        self.sleep = sleep

    def complete(self, messages: list[dict]) -> str:
        import httpx

        cfg = self.config
        key = os.environ.get(cfg.api_key_env)
        if not key:
            raise EndpointError(f"API key missing: set {cfg.api_key_env}")
        body = {"model": cfg.model, "messages": messages, "temperature": cfg.temperature}
        headers = {"Authorization": f"Bearer {key}"}
        url = cfg.resolved_endpoint()
        last = None
        with httpx.Client(timeout=cfg.timeout, transport=self.transport) as client:
            for attempt in range(cfg.max_retries + 1):
                if attempt:
                    self.sleep(cfg.backoff[min(attempt - 1, len(cfg.backoff) - 1)])
                try:
                    resp = client.post(url, json=body, headers=headers)
                except httpx.TransportError as exc:
                    last = f"transport error: {exc}"
                    continue
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = f"HTTP {resp.status_code}"
                    continue
                if resp.status_code >= 400:
                    raise EndpointError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                try:
                    return resp.json()["choices"][0]["message"]["content"]
                except (ValueError, KeyError, IndexError, TypeError) as exc:
                    raise EndpointError(f"malformed completion response: {exc}") from exc
        raise EndpointError(f"gave up after {cfg.max_retries} retries ({last})")


_FENCE_RE = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)


def extract_json(text: str) -> list[Any]:
    """JSON values from fenced code blocks first, then bare top-level values, in document order."""
    decoder = json.JSONDecoder()
    values: list[Any] = []
    for m in _FENCE_RE.finditer(text):
        try:
            values.append(json.loads(m.group(1)))
        except json.JSONDecodeError:
            continue
    rest = _FENCE_RE.sub(" ", text)
    i = 0
    while i < len(rest):
        if rest[i] in "{[":
            try:
                value, end = decoder.raw_decode(rest, i)
            except json.JSONDecodeError:
                i += 1
                continue
            values.append(value)
            i = end
        else:
            i += 1
    if not values:
        raise ExtractionError("no parseable JSON in the response")
    return values


def _candidates(values: list[Any]) -> list[Any]:
    out = []
    for v in values:
        if isinstance(v, list):
            out.extend(v)
        else:
            out.append(v)
    return out


def randomize_llm(
    env: EnvironmentFile,
    cve_description: str,
    n: int,
    client_config: LLMClientConfig | None = None,
    policy: RandomizationPolicy | None = None,
    transport=None,
    sleep: Callable[[float], None] = time.sleep,
) -> list[EnvironmentFile]:
    """Ask the model for ``n`` variants and keep those that validate.

    Warns ShortfallWarning when fewer than ``n`` survive.
    """
    if n <= 0:
        return []
    cfg = client_config or LLMClientConfig()
    bundle = build_prompt(env, cve_description, n)
    if estimate_tokens(bundle.text) > cfg.max_prompt_tokens:
        raise EndpointError("prompt exceeds the configured token limit")
    reply = ChatClient(cfg, transport, sleep).complete(bundle.messages())
    parent = env_id(env)
    out: list[EnvironmentFile] = []
    for i, cand in enumerate(_candidates(extract_json(reply))):
        if len(out) == n:
            break
        if not isinstance(cand, dict):
            continue
        host = copy.deepcopy(cand.get("host", cand))
        if isinstance(host, dict) and "host_id" in host:
            host["host_id"] = f"{parent}-llm-{len(out)}"
        doc = {
            "schema_version": env.schema_version,
            "host": host,
            "provenance": {"kind": "randomized", "engine": "llm", "seed": None, "prompt_hash": bundle.prompt_hash},
            "parent_id": parent,
        }
        if validate(doc, env, policy).valid:
            out.append(environment_from_dict(doc))
    if len(out) < n:
        warnings.warn(ShortfallWarning(n, len(out)), stacklevel=2)
    return out
