"""FastAPI application wrapping a running deployment.

The service hosts every node in-process (see ``ServiceRuntime``); the CLI
acts as a thin client of these endpoints.  ``POST /v1/kv/raw`` speaks the
length-prefixed binary KV client protocol; the JSON endpoints mirror it
for convenience.
"""

from __future__ import annotations

from fastapi import FastAPI, Query, Request, Response

from .. import membership
from ..recovery import range_to_obj
from . import models
from .runtime import ServiceRuntime


def create_app(runtime: ServiceRuntime) -> FastAPI:
    app = FastAPI(title="shardraft", version="0.1.0")
    app.state.runtime = runtime

    @app.get("/v1/status", response_model=models.StatusResponse)
    def status():
        return runtime.status()

    # ---- KV ----------------------------------------------------------

    @app.post("/v1/kv/put", response_model=models.KvResponse)
    def kv_put(req: models.PutRequest):
        return runtime.kv("put", req.key, req.value)

    @app.get("/v1/kv/get", response_model=models.KvResponse)
    def kv_get(key: str):
        return runtime.kv("get", key)

    @app.post("/v1/kv/delete", response_model=models.KvResponse)
    def kv_delete(req: models.DeleteRequest):
        return runtime.kv("delete", req.key)

    @app.post("/v1/kv/raw")
    async def kv_raw(request: Request):
        frame = await request.body()
        return Response(content=runtime.kv_raw(frame),
                        media_type="application/octet-stream")

    # ---- Admin -------------------------------------------------------

    @app.post("/v1/admin/split", response_model=models.AdminResponse)
    def admin_split(req: models.SplitRequest):
        args = {"cluster": req.cluster,
                "subclusters": [{"id": s.id, "nodes": s.nodes,
                                 "range": s.range}
                                for s in req.subclusters]}
        result = runtime.admin("split", args)
        return {"ok": result.pop("ok", False), "detail": result}

    @app.post("/v1/admin/merge", response_model=models.AdminResponse)
    def admin_merge(req: models.MergeRequest):
        args = {"clusters": req.clusters, "coordinator": req.coordinator,
                "resume": req.resume_members}
        result = runtime.admin("merge", args)
        return {"ok": result.pop("ok", False), "detail": result}

    @app.post("/v1/admin/member/add", response_model=models.AdminResponse)
    def member_add(req: models.MemberRequest):
        result = runtime.admin("member_add",
                               {"cluster": req.cluster, "nodes": req.nodes})
        return {"ok": result.pop("ok", False), "detail": result}

    @app.post("/v1/admin/member/remove", response_model=models.AdminResponse)
    def member_remove(req: models.MemberRequest):
        result = runtime.admin("member_remove",
                               {"cluster": req.cluster, "nodes": req.nodes})
        return {"ok": result.pop("ok", False), "detail": result}

    @app.post("/v1/admin/member/resize-quorum", response_model=models.AdminResponse)
    def resize_quorum(req: models.ResizeRequest):
        result = runtime.admin("resize_quorum", {"cluster": req.cluster})
        return {"ok": result.pop("ok", False), "detail": result}

    # ---- Naming and history ------------------------------------------

    @app.get("/v1/naming")
    def naming_list():
        return runtime.status()["naming"]

    @app.get("/v1/naming/lookup")
    def naming_lookup(lo: str = Query(""), hi: str = Query("")):
        return runtime.naming_lookup(lo, hi or None)

    @app.get("/v1/history/{node_id}")
    def node_history(node_id: str):
        return runtime.node_history(node_id)

    # ---- Analytics ----------------------------------------------------

    @app.get("/v1/analyze/heatmap", response_model=models.HeatmapResponse)
    def heatmap(max_n: int = Query(10, ge=2, le=40)):
        vs_best, vs_worst = membership.heatmap_diffs(max_n)
        return {"max_n": max_n, "vs_best": vs_best, "vs_worst": vs_worst}

    return app
