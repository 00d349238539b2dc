"""Cluster split: building the two-phase configuration entries and parsing
operator split requests.

The protocol itself runs inside the node engine; a split commits exactly
two configuration entries.  Phase one (joint mode) swaps the election rule
to joint majorities of every target subcluster while commits keep the
pre-split majority.  Phase two extracts each subcluster: the completion
entry commits against the proposer's own subcluster majority, the commit
is announced to every pre-split member, and only then does the epoch
advance.
"""

from __future__ import annotations

from typing import Iterable

from .types import (
    ClusterConfig,
    ConfigError,
    KeyRange,
    SubCluster,
    split_joint_config,
    split_new_config,
)


def build_joint(base: ClusterConfig, subs: Iterable[SubCluster], config_id: str) -> ClusterConfig:
    """Validate the requested partition and produce the joint-mode config."""
    return split_joint_config(config_id, base, tuple(subs))


def derive_completion(joint: ClusterConfig, config_id: str) -> ClusterConfig:
    """The completion entry carries the same partition the joint entry did."""
    return split_new_config(config_id, joint)


def parse_split_spec(spec: str, base_range: KeyRange) -> list[SubCluster]:
    """Parse the operator form ``id=members:lo..hi[,id=members:lo..hi...]``.

    Members are ``+``-joined node ids; ``hi`` may be ``*`` for an unbounded
    top.  The subcluster id may be omitted (``members:lo..hi``), in which
    case ids are assigned positionally by the caller.
    """
    subs: list[SubCluster] = []
    for i, part in enumerate(spec.split(",")):
        part = part.strip()
        if not part:
            continue
        cluster_id = ""
        if "=" in part:
            cluster_id, part = part.split("=", 1)
        try:
            members_s, range_s = part.split(":", 1)
            lo, hi = range_s.split("..", 1)
        except ValueError as exc:
            raise ConfigError(f"bad subcluster spec {part!r}") from exc
        members = [mm for mm in members_s.split("+") if mm]
        subs.append(SubCluster(
            cluster_id=cluster_id or f"sub{i + 1}",
            members=tuple(members),
            key_range=KeyRange.single(lo, None if hi == "*" else hi),
        ))
    if len(subs) < 2:
        raise ConfigError("a split needs at least two subclusters")
    return subs
