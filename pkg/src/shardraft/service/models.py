"""Request/response models for the HTTP surface."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class PutRequest(BaseModel):
    key: str
    value: str


class DeleteRequest(BaseModel):
    key: str


class KvResponse(BaseModel):
    status: str
    value: Optional[str] = None


class SubClusterSpec(BaseModel):
    id: str
    nodes: list[str]
    range: list  # [lo, hi]; hi null = unbounded


class SplitRequest(BaseModel):
    cluster: str
    subclusters: list[SubClusterSpec]


class MergeRequest(BaseModel):
    clusters: list[str]
    coordinator: str
    resume_members: list[str] = Field(default_factory=list)


class MemberRequest(BaseModel):
    cluster: str
    nodes: list[str]


class ResizeRequest(BaseModel):
    cluster: str


class AdminResponse(BaseModel):
    ok: bool
    detail: dict = Field(default_factory=dict)


class NodeStatus(BaseModel):
    node: str
    cluster: str
    role: str
    epoch: int
    term: int
    commit_index: int
    applied_index: int
    last_index: int
    members: list[str]
    range: str
    config_kind: str
    election_rule: str
    commit_rule: str
    leader_hint: str
    keys: int


class ClusterStatus(BaseModel):
    cluster: str
    epoch: int
    members: list[str]
    range: str
    leader: str
    config_kind: str
    nodes: list[str]


class NamingEntryModel(BaseModel):
    cluster_id: str
    members: list[str]
    range: list
    epoch: int


class StatusResponse(BaseModel):
    nodes: dict[str, NodeStatus]
    clusters: list[ClusterStatus]
    naming: list[NamingEntryModel]


class HeatmapResponse(BaseModel):
    max_n: int
    vs_best: list[list[int]]
    vs_worst: list[list[int]]
