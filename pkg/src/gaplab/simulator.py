"""Single-host penetration-testing MDP.

The agent starts knowing nothing about the target.  Scans reveal facts
(all-or-nothing per scan type, over every port found so far), an exploit
compromises the host only when it matches the host's CVE *and* the exposing
service was fingerprinted first.  Per-step reward is the event value minus
the action cost:

    compromise        compromise_value - cost        (episode ends)
    first new fact    info_value - cost              (rewarded categories)
                      -cost                          (other categories)
    repeat / invalid  -invalid_penalty - cost

The episode also ends when ``max_steps`` actions have been taken.
"""

from __future__ import annotations

import json
import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

from .envmodel import (
    ActionCatalog,
    CVEEntry,
    EnvironmentFile,
    HostProfile,
    OSInfo,
    PortEntry,
    ScanType,
    environment_from_dict,
    serialize_environment,
)

CATEGORIES = ("ports", "os", "services", "fingerprints", "banners")
WEB_SERVICES = ("http", "https")


class CatalogMismatch(ValueError):
    pass


class EpisodeFinished(RuntimeError):
    pass


class IncompleteCapture(UserWarning):
    """Capture finished without revealing the exposing service."""


class Event(str, Enum):
    INFO_GAINED = "InfoGained"
    COMPROMISED = "Compromised"
    INVALID_ACTION = "InvalidAction"
    NO_OP = "NoOp"


@dataclass(frozen=True)
class RewardSpec:
    compromise_value: float = 1000.0
    info_value: float = 100.0
    invalid_penalty: float = 10.0
    # info categories that pay info_value; the others only reveal facts
    rewarded_categories: tuple[str, ...] = ("ports", "services")

    def __post_init__(self):
        if not self.compromise_value > self.info_value > 0:
            raise ValueError("need compromise_value > info_value > 0")
        if self.invalid_penalty <= 0:
            raise ValueError("invalid_penalty must be positive")
        unknown = set(self.rewarded_categories) - set(CATEGORIES)
        if unknown:
            raise ValueError(f"unknown reward categories {sorted(unknown)}")


@dataclass(frozen=True)
class EpisodeBudget:
    max_steps: int = 100
    max_episodes: int = 500

    def __post_init__(self):
        if self.max_steps <= 0 or self.max_episodes <= 0:
            raise ValueError("budgets must be positive")


@dataclass(frozen=True)
class PortView:
    """What the agent knows about one port; unrevealed fields are None."""

    number: int
    protocol: str
    service: str
    product: str | None = None
    version: str | None = None


@dataclass(frozen=True)
class Observation:
    discovered_ports: tuple[PortView, ...] = ()
    os_known: OSInfo | None = None
    fingerprints_known: tuple[str, ...] = ()
    banners_known: tuple[tuple[int, str], ...] = ()
    compromised: bool = False

    @property
    def text(self) -> str:
        return render_observation(self)

    def facts(self) -> frozenset:
        """Flat set of known facts, used for monotonicity checks."""
        out = set()
        for p in self.discovered_ports:
            out.add(("port", p.number, p.protocol, p.service))
            if p.product is not None:
                out.add(("service", p.number, p.product, p.version))
        if self.os_known is not None:
            out.add(("os", self.os_known.name, self.os_known.version))
        out.update(("fp", f) for f in self.fingerprints_known)
        out.update(("banner", n, b) for n, b in self.banners_known)
        if self.compromised:
            out.add(("compromised",))
        return frozenset(out)


def render_observation(obs: Observation) -> str:
    lines = []
    for p in sorted(obs.discovered_ports, key=lambda v: v.number):
        line = f"open port {p.number}/{p.protocol} service {p.service}"
        if p.product is not None:
            line += f" product {p.product} version {p.version}"
        lines.append(line)
    if obs.os_known is not None:
        lines.append(f"os {obs.os_known.name} {obs.os_known.version}")
    if obs.fingerprints_known:
        lines.append("web " + " ".join(obs.fingerprints_known))
    for number, banner in obs.banners_known:
        lines.append(f"banner {number} {banner}")
    if obs.compromised:
        lines.append("shell obtained")
    return "\n".join(lines)


@dataclass(frozen=True)
class StepOutcome:
    observation: Observation
    reward: float
    done: bool
    event: Event
    category: str | None = None
    # reward split used by the decomposition check: event value and action cost
    event_value: float = 0.0
    cost: float = 0.0


class PentestEnvironment(ABC):
    """reset / step / action_space contract shared by every backend."""

    @abstractmethod
    def reset(self, seed: int | None = None) -> Observation: ...

    @abstractmethod
    def step(self, action_id: int) -> StepOutcome: ...

    @abstractmethod
    def action_space(self) -> ActionCatalog: ...


class ExternalToolBackend(PentestEnvironment):
    """Seam for driving real scanners and exploit frameworks.

    No implementation ships with this package; subclasses map catalog actions
    to tool invocations and parse tool output into an Observation.
    """

    def __init__(self, catalog: ActionCatalog):
        self.catalog = catalog

    def reset(self, seed=None):
        raise NotImplementedError("external tool execution is not bundled")

    def step(self, action_id):
        raise NotImplementedError("external tool execution is not bundled")

    def action_space(self):
        return self.catalog


# internal state: (ports, os, services, fingerprints, banners, compromised)
_FLAGS = 6


class LocalSimBackend(PentestEnvironment):
    def __init__(
        self,
        profile: HostProfile | EnvironmentFile,
        catalog: ActionCatalog,
        reward_spec: RewardSpec | None = None,
        budget: EpisodeBudget | None = None,
    ):
        if isinstance(profile, EnvironmentFile):
            profile = profile.host
        self.profile = profile
        self.catalog = catalog
        self.reward_spec = reward_spec or RewardSpec()
        self.budget = budget or EpisodeBudget()
        self.truth = profile.vulnerability.cve_id
        if self.truth not in catalog.exploits:
            raise CatalogMismatch(f"catalog has no exploit for {self.truth}")
        self._has_web = any(p.service in WEB_SERVICES for p in profile.ports)
        self._obs_cache: dict[tuple, Observation] = {}
        self._flags = [False] * _FLAGS
        self.steps = 0
        self.done = False
        self.rng = np.random.default_rng(0)

    # -- interface ---------------------------------------------------------

    def action_space(self) -> ActionCatalog:
        return self.catalog

    def reset(self, seed: int | None = None) -> Observation:
        self._flags = [False] * _FLAGS
        self.steps = 0
        self.done = False
        self.rng = np.random.default_rng(seed)
        return self.observation()

    def step(self, action_id: int) -> StepOutcome:
        if self.done:
            raise EpisodeFinished("episode is over; call reset()")
        action = self.catalog.action(int(action_id))
        rs = self.reward_spec
        f = self._flags
        category = None
        if action.is_scan:
            scan = ScanType(action.target)
            if scan is ScanType.PORT_SCAN:
                category, idx, allowed = "ports", 0, True
            elif scan is ScanType.OS_SCAN:
                category, idx, allowed = "os", 1, True
            elif scan is ScanType.SERVICE_SCAN:
                category, idx, allowed = "services", 2, f[0]
            elif scan is ScanType.WEB_FINGERPRINT_SCAN:
                category, idx, allowed = "fingerprints", 3, f[0] and self._has_web
            else:
                category, idx, allowed = "banners", 4, f[0]
            if not allowed:
                event, value = Event.INVALID_ACTION, -rs.invalid_penalty
            elif f[idx]:
                event, value = Event.NO_OP, -rs.invalid_penalty
            else:
                f[idx] = True
                event = Event.INFO_GAINED
                value = rs.info_value if category in rs.rewarded_categories else 0.0
        elif action.target == self.truth and f[2]:
            f[5] = True
            event, value = Event.COMPROMISED, rs.compromise_value
        else:
            event, value = Event.INVALID_ACTION, -rs.invalid_penalty
        self.steps += 1
        self.done = f[5] or self.steps >= self.budget.max_steps
        return StepOutcome(
            observation=self.observation(),
            reward=value - action.cost,
            done=self.done,
            event=event,
            category=category if event is Event.INFO_GAINED else None,
            event_value=value,
            cost=action.cost,
        )

    # -- helpers -------------------------------------------------------------

    def state_key(self) -> tuple:
        return (tuple(self._flags), self.steps, self.done)

    def snapshot(self) -> tuple:
        return (list(self._flags), self.steps, self.done)

    def restore(self, snap: tuple) -> None:
        flags, self.steps, self.done = snap
        self._flags = list(flags)

    def observation(self) -> Observation:
        key = tuple(self._flags)
        obs = self._obs_cache.get(key)
        if obs is None:
            obs = self._build_observation(key)
            self._obs_cache[key] = obs
        return obs

    def _build_observation(self, flags) -> Observation:
        ports_known, os_known, services_known, fp_known, banners_known, compromised = flags
        host = self.profile
        ports = ()
        if ports_known:
            ports = tuple(
                PortView(
                    p.number,
                    p.protocol,
                    p.service,
                    p.product if services_known else None,
                    p.version if services_known else None,
                )
                for p in sorted(host.ports, key=lambda q: q.number)
            )
        banners = ()
        if banners_known:
            banners = tuple((p.number, p.banner) for p in sorted(host.ports, key=lambda q: q.number))
        return Observation(
            discovered_ports=ports,
            os_known=host.os if os_known else None,
            fingerprints_known=tuple(host.web_fingerprints) if fp_known else (),
            banners_known=banners,
            compromised=bool(compromised),
        )


def optimal_actions(profile: HostProfile, catalog: ActionCatalog) -> list[int]:
    """PortScan, ServiceScan, Exploit(truth): the shortest compromising sequence."""
    return [
        catalog.scan_id(ScanType.PORT_SCAN),
        catalog.scan_id(ScanType.SERVICE_SCAN),
        catalog.exploit_id(profile.vulnerability.cve_id),
    ]


def episode_return(rewards: Iterable, gamma: float = 1.0) -> float:
    """Discounted sum of per-step rewards (StepOutcomes are accepted too)."""
    values = [r.reward if isinstance(r, StepOutcome) else float(r) for r in rewards]
    if not values:
        raise ValueError("empty trajectory")
    total = 0.0
    discount = 1.0
    for r in values:
        total += discount * r
        discount *= gamma
    return total


def run_actions(env: LocalSimBackend, actions: Sequence[int], seed: int | None = 0) -> list[StepOutcome]:
    env.reset(seed)
    out = []
    for a in actions:
        if env.done:
            break
        out.append(env.step(a))
    return out


def exhaustive_best_return(env: LocalSimBackend, max_depth: int) -> tuple[float, list[int], int]:
    """Enumerate every action sequence of length <= max_depth.

    Returns (best undiscounted return, a best sequence, number of sequences
    enumerated).  Sequences stop early when the episode ends.
    """
    env.reset(0)
    n_actions = env.catalog.size
    best = [-np.inf, []]
    count = 0
    path: list[int] = []

    def visit(ret: float, depth: int) -> None:
        nonlocal count
        count += 1
        if ret > best[0]:
            best[0], best[1] = ret, list(path)
        if depth == max_depth or env.done:
            return
        snap = env.snapshot()
        for a in range(n_actions):
            out = env.step(a)
            path.append(a)
            visit(ret + out.reward, depth + 1)
            path.pop()
            env.restore(snap)

    snap0 = env.snapshot()
    for a in range(n_actions):
        out = env.step(a)
        path.append(a)
        visit(out.reward, 1)
        path.pop()
        env.restore(snap0)
    return float(best[0]), best[1], count


# ---------------------------------------------------------------------------
# trajectory log

class TrajectoryLog:
    """JSON-lines writer: one record per step."""

    def __init__(self, path):
        self._fh = open(path, "w", encoding="utf-8")

    def write(self, episode: int, t: int, action_id: int, outcome: StepOutcome) -> None:
        rec = {
            "episode": episode,
            "t": t,
            "action_id": int(action_id),
            "reward": outcome.reward,
            "event": outcome.event.value,
            "done": outcome.done,
        }
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# real-to-sim capture

@dataclass
class CaptureResult:
    document: dict
    env: EnvironmentFile | None
    incomplete: bool
    missing: list[str] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        if self.env is not None:
            return serialize_environment(self.env)
        return (json.dumps(self.document, sort_keys=True, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def full_scan_script(catalog: ActionCatalog) -> list[int]:
    return [catalog.scan_id(s) for s in ScanType]


def capture(
    backend: PentestEnvironment,
    scanner: Sequence[int] | Callable[[Observation], int],
    cve: CVEEntry,
    host_id: str,
    budget: EpisodeBudget | None = None,
    seed: int | None = 0,
) -> CaptureResult:
    """Interact with ``backend`` and write down exactly what was revealed.

    ``scanner`` is a fixed action script or a policy callable.  The
    vulnerability block comes from ``cve`` (the environment's known CVE); the
    exposing port is the revealed port running the vulnerable product.  When
    no such port was revealed the result is flagged incomplete and an
    IncompleteCapture warning is issued.
    """
    budget = budget or EpisodeBudget()
    obs = backend.reset(seed)
    if callable(scanner):
        for _ in range(budget.max_steps):
            out = backend.step(scanner(obs))
            obs = out.observation
            if out.done:
                break
    else:
        for a in list(scanner)[: budget.max_steps]:
            out = backend.step(a)
            obs = out.observation
            if out.done:
                break

    ports = [
        PortEntry(p.number, p.protocol, p.service, p.product or "", p.version or "", dict(obs.banners_known).get(p.number, ""))
        for p in obs.discovered_ports
    ]
    os_info = obs.os_known or OSInfo("", "")
    exposing = next((p.number for p in ports if p.product == cve.vulnerable_product), None)
    document = {
        "schema_version": "1",
        "host": {
            "host_id": host_id,
            "os": {"name": os_info.name, "version": os_info.version},
            "ports": [
                {
                    "number": p.number,
                    "protocol": p.protocol,
                    "service": p.service,
                    "product": p.product,
                    "version": p.version,
                    "banner": p.banner,
                }
                for p in ports
            ],
            "web_fingerprints": list(obs.fingerprints_known),
            "vulnerability": {
                "cve_id": cve.cve_id,
                "vulnerable_product": cve.vulnerable_product,
                "vulnerable_version_range": cve.vulnerable_version_range.to_dict(),
                "exposing_port": exposing,
                "description": cve.description,
            },
        },
        "provenance": {"kind": "captured", "engine": None, "seed": None, "prompt_hash": None},
        "parent_id": None,
    }
    missing = []
    if not ports:
        missing.append("ports")
    if exposing is None:
        missing.append("exposing service")
    if obs.os_known is None:
        missing.append("os")
    env = None
    if exposing is not None:
        env = environment_from_dict(document)
    if exposing is None:
        warnings.warn(f"capture of {host_id}: exposing service never revealed", IncompleteCapture, stacklevel=2)
    return CaptureResult(document=document, env=env, incomplete=exposing is None, missing=missing)
