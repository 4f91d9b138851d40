"""Four-layer network model: node inventories, parent links, backhaul pipes, device groups.

The layer order is fixed (cloud above fog above edge above device) and every
parent link must go exactly one tier up. Device-to-device groups are stars
around a master: slaves sit one hop below and never master a group themselves.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import IntEnum

from .errors import (
    CrossApD2dGroup,
    CycleInHierarchy,
    D2dDepthExceeded,
    ScenarioSchemaError,
    UnknownNodeReference,
)

logger = logging.getLogger(__name__)


class Tier(IntEnum):
    """Network layer; larger value = higher layer, more compute."""

    DEVICE = 0
    EDGE = 1
    FOG = 2
    CLOUD = 3

    @property
    def label(self) -> str:
        return self.name.lower()


SERVER_TIERS = (Tier.CLOUD, Tier.FOG, Tier.EDGE)


@dataclass(frozen=True)
class ServerNode:
    """Compute node at the cloud, fog, or edge layer."""

    id: str
    tier: Tier
    compute_rate: float  # cycles/second
    energy_per_cycle: float  # joules/cycle
    parent: str | None = None


@dataclass(frozen=True)
class UeProfile:
    """End device: battery-limited compute plus an uplink radio profile."""

    id: str
    battery: float  # joules at run start
    compute_rate: float  # cycles/second
    energy_per_cycle: float  # joules/cycle
    tx_power: float  # watts
    channel_gain: float  # linear mean
    channel_variance: float  # log-gain variance; 0 = static channel
    mobile: bool
    attached_ap: str
    dataset_size: int

    @property
    def tier(self) -> Tier:
        return Tier.DEVICE


@dataclass(frozen=True)
class D2dGroup:
    """Single-hop star of devices around a master."""

    master: str
    slaves: tuple[str, ...]
    link_rate: float  # bits/second
    link_energy_per_bit: float  # joules/bit

    def members(self) -> tuple[str, ...]:
        return (self.master,) + self.slaves


@dataclass(frozen=True)
class LinkSpec:
    """Fixed-rate, fixed-latency backhaul pipe between two servers."""

    src: str
    dst: str
    rate: float  # bits/second
    latency: float  # seconds
    energy_per_bit: float  # joules/bit


@dataclass(frozen=True)
class SpanViolation:
    """Result of a failed layer-span check; carries the offending tier set."""

    tiers: frozenset[Tier]

    def __str__(self) -> str:
        names = ", ".join(t.label for t in sorted(self.tiers, reverse=True))
        return f"plan touches {len(self.tiers)} layers ({names}); at most 3 allowed"


class NetworkTopology:
    """Immutable view of the built network; safe to share across runs."""

    def __init__(self, servers, ues, d2d_groups, links, warnings):
        self.servers: dict[str, ServerNode] = servers
        self.ues: dict[str, UeProfile] = ues
        self.d2d_groups: tuple[D2dGroup, ...] = tuple(d2d_groups)
        self.links: dict[tuple[str, str], LinkSpec] = links
        self.warnings: tuple[str, ...] = tuple(warnings)
        self._children: dict[str, tuple[str, ...]] = {}
        kids: dict[str, list[str]] = {}
        for node in servers.values():
            if node.parent is not None:
                kids.setdefault(node.parent, []).append(node.id)
        for ue in ues.values():
            kids.setdefault(ue.attached_ap, []).append(ue.id)
        self._children = {k: tuple(v) for k, v in kids.items()}
        self._group_of: dict[str, D2dGroup] = {}
        for group in self.d2d_groups:
            for member in group.members():
                self._group_of[member] = group

    # -- lookups -------------------------------------------------------

    def has_node(self, node_id: str) -> bool:
        return node_id in self.servers or node_id in self.ues

    def tier_of(self, node_id: str) -> Tier:
        if node_id in self.servers:
            return self.servers[node_id].tier
        if node_id in self.ues:
            return Tier.DEVICE
        raise UnknownNodeReference(f"unknown node id {node_id!r}")

    def children_of(self, node_id: str) -> tuple[str, ...]:
        return self._children.get(node_id, ())

    def ues_of_ap(self, ap_id: str) -> tuple[str, ...]:
        return tuple(u for u in self.children_of(ap_id) if u in self.ues)

    def group_containing(self, ue_id: str) -> D2dGroup | None:
        return self._group_of.get(ue_id)

    def d2d_link(self, a: str, b: str) -> LinkSpec | None:
        """Direct single-hop link between a and b, if their group has one.

        Direct hops exist only between a master and one of its slaves;
        slave-to-slave traffic has to bounce through the master.
        """
        group = self._group_of.get(a)
        if group is None or self._group_of.get(b) is not group:
            return None
        if (group.master == a and b in group.slaves) or (group.master == b and a in group.slaves):
            return LinkSpec(src=a, dst=b, rate=group.link_rate, latency=0.0,
                            energy_per_bit=group.link_energy_per_bit)
        return None

    def link_between(self, src: str, dst: str) -> LinkSpec | None:
        return self.links.get((src, dst))

    @property
    def node_count(self) -> int:
        return len(self.servers) + len(self.ues)

    def all_node_ids(self) -> tuple[str, ...]:
        return tuple(self.servers) + tuple(self.ues)


# ---------------- construction ---------------- #

_TIER_KEYS = (("cloud", Tier.CLOUD), ("fog", Tier.FOG), ("edge", Tier.EDGE))


def build_topology(doc: dict) -> NetworkTopology:
    """Build and validate a topology from a parsed scenario document.

    Raises UnknownNodeReference / CycleInHierarchy / D2dDepthExceeded /
    CrossApD2dGroup on structural violations. Soft issues (a lower-tier node
    outcomputing an upper-tier one) are collected as warnings only.
    """
    nodes_doc = doc.get("nodes", {})
    servers: dict[str, ServerNode] = {}
    ues: dict[str, UeProfile] = {}
    seen: set[str] = set()

    def claim(node_id):
        if not isinstance(node_id, str) or not node_id:
            raise ScenarioSchemaError(f"node id must be a non-empty string, got {node_id!r}")
        if node_id in seen:
            raise ScenarioSchemaError(f"duplicate node id {node_id!r}")
        seen.add(node_id)

    for key, tier in _TIER_KEYS:
        for entry in nodes_doc.get(key, []):
            claim(entry["id"])
            servers[entry["id"]] = ServerNode(
                id=entry["id"],
                tier=tier,
                compute_rate=float(entry["compute_rate"]),
                energy_per_cycle=float(entry["energy_per_cycle"]),
                parent=entry.get("parent"),
            )
    for entry in nodes_doc.get("ue", []):
        claim(entry["id"])
        ues[entry["id"]] = UeProfile(
            id=entry["id"],
            battery=float(entry["battery"]),
            compute_rate=float(entry["compute_rate"]),
            energy_per_cycle=float(entry["energy_per_cycle"]),
            tx_power=float(entry["tx_power"]),
            channel_gain=float(entry["channel_gain"]),
            channel_variance=float(entry.get("channel_variance", 0.0)),
            mobile=bool(entry.get("mobile", False)),
            attached_ap=entry["attached_ap"],
            dataset_size=int(entry["dataset_size"]),
        )

    _check_numeric_ranges(servers, ues)
    _check_hierarchy(servers, ues)
    links = _build_links(doc.get("links", []), servers)
    groups = _build_d2d_groups(doc.get("d2d_groups", []), ues)
    warnings = _compute_warnings(servers, ues)
    return NetworkTopology(servers, ues, groups, links, warnings)


def _check_numeric_ranges(servers, ues):
    for node in servers.values():
        if node.compute_rate <= 0:
            raise ScenarioSchemaError(f"{node.id}: compute_rate must be > 0")
        if node.energy_per_cycle < 0:
            raise ScenarioSchemaError(f"{node.id}: energy_per_cycle must be >= 0")
    for ue in ues.values():
        if ue.battery < 0:
            raise ScenarioSchemaError(f"{ue.id}: battery must be >= 0")
        if ue.compute_rate <= 0:
            raise ScenarioSchemaError(f"{ue.id}: compute_rate must be > 0")
        if ue.channel_gain <= 0:
            raise ScenarioSchemaError(f"{ue.id}: channel_gain must be > 0")
        if ue.channel_variance < 0:
            raise ScenarioSchemaError(f"{ue.id}: channel_variance must be >= 0")
        if ue.dataset_size < 0:
            raise ScenarioSchemaError(f"{ue.id}: dataset_size must be >= 0")
        if ue.tx_power < 0:
            raise ScenarioSchemaError(f"{ue.id}: tx_power must be >= 0")


def _check_hierarchy(servers, ues):
    for node in servers.values():
        if node.tier is Tier.CLOUD:
            if node.parent is not None:
                raise CycleInHierarchy(f"cloud node {node.id!r} must not declare a parent")
            continue
        if node.parent is None:
            raise CycleInHierarchy(f"{node.tier.label} node {node.id!r} has no parent")
        parent = servers.get(node.parent)
        if parent is None:
            raise UnknownNodeReference(f"{node.id}: parent {node.parent!r} does not exist")
        if parent.tier != node.tier + 1:
            raise CycleInHierarchy(
                f"{node.id}: parent {node.parent!r} is at tier {parent.tier.label}, "
                f"expected {Tier(node.tier + 1).label}"
            )
    for ue in ues.values():
        ap = servers.get(ue.attached_ap)
        if ap is None:
            raise UnknownNodeReference(f"{ue.id}: attached_ap {ue.attached_ap!r} does not exist")
        if ap.tier is not Tier.EDGE:
            raise CycleInHierarchy(
                f"{ue.id}: attached_ap {ue.attached_ap!r} is a {ap.tier.label} node, not edge"
            )


def _build_links(link_entries, servers):
    links: dict[tuple[str, str], LinkSpec] = {}
    for entry in link_entries:
        src, dst = entry["src"], entry["dst"]
        for end in (src, dst):
            if end not in servers:
                raise UnknownNodeReference(f"link endpoint {end!r} is not a server node")
        rate = float(entry["rate"])
        if rate <= 0:
            raise ScenarioSchemaError(f"link {src}-{dst}: rate must be > 0")
        spec = LinkSpec(
            src=src,
            dst=dst,
            rate=rate,
            latency=float(entry.get("latency", 0.0)),
            energy_per_bit=float(entry.get("energy_per_bit", 0.0)),
        )
        # pipes are symmetric; register both directions
        links[(src, dst)] = spec
        links[(dst, src)] = LinkSpec(dst, src, spec.rate, spec.latency, spec.energy_per_bit)
    return links


def _build_d2d_groups(group_entries, ues):
    groups: list[D2dGroup] = []
    masters: set[str] = set()
    slaves: set[str] = set()
    for entry in group_entries:
        master = entry["master"]
        group_slaves = tuple(entry["slaves"])
        for member in (master,) + group_slaves:
            if member not in ues:
                raise UnknownNodeReference(f"d2d group member {member!r} is not a device node")
        if not group_slaves:
            raise ScenarioSchemaError(f"d2d group of {master!r} has no slaves")
        if master in group_slaves:
            raise ScenarioSchemaError(f"d2d group master {master!r} listed among its own slaves")
        rate = float(entry["link_rate"])
        if rate <= 0:
            raise ScenarioSchemaError(f"d2d group of {master!r}: link_rate must be > 0")
        groups.append(
            D2dGroup(
                master=master,
                slaves=group_slaves,
                link_rate=rate,
                link_energy_per_bit=float(entry.get("link_energy_per_bit", 0.0)),
            )
        )
        masters.add(master)
        for s in group_slaves:
            if s in slaves:
                raise ScenarioSchemaError(f"device {s!r} is a slave in more than one d2d group")
            slaves.add(s)
    deep = masters & slaves
    if deep:
        worst = sorted(deep)[0]
        raise D2dDepthExceeded(
            f"device {worst!r} is both a slave and a master; groups must stay single-hop"
        )
    for group in groups:
        aps = {ues[m].attached_ap for m in group.members()}
        if len(aps) > 1:
            raise CrossApD2dGroup(
                f"d2d group of {group.master!r} spans access points {sorted(aps)}"
            )
    return groups


def _compute_warnings(servers, ues):
    warnings = []
    by_tier: dict[Tier, list[float]] = {}
    for node in servers.values():
        by_tier.setdefault(node.tier, []).append(node.compute_rate)
    by_tier.setdefault(Tier.DEVICE, []).extend(u.compute_rate for u in ues.values())
    for tier in (Tier.CLOUD, Tier.FOG, Tier.EDGE):
        upper = by_tier.get(tier)
        lower = by_tier.get(Tier(tier - 1))
        if upper and lower and min(upper) < max(lower):
            warnings.append(
                f"compute-monotonic: some {tier.label} node is slower than a "
                f"{Tier(tier - 1).label} node ({min(upper):g} < {max(lower):g} cycles/s)"
            )
    return warnings


# ---------------- layer-span rule ---------------- #

def validate_layer_span(plan, topo: NetworkTopology) -> SpanViolation | None:
    """Check that a plan touches at most three of the four layers.

    A plan touches every tier between its lowest and highest role node,
    because traffic between them climbs the hierarchy through each tier in
    between (a cloud server training device clients works the whole stack).
    Returns None when the plan is fine, otherwise a SpanViolation with the
    touched tier set. Used as a filter, so violations are values, not
    exceptions.
    """
    role_tiers = [topo.tier_of(node_id) for node_id in plan.roles]
    touched = frozenset(Tier(t) for t in range(min(role_tiers), max(role_tiers) + 1))
    if len(touched) <= 3:
        return None
    return SpanViolation(tiers=touched)
