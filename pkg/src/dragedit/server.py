"""HTTP service over the editing pipeline.

Endpoints (bodies are JSON unless noted):

    GET    /healthz                                liveness + model info
    GET    /schema/edit-spec                       the EditSpec JSON schema
    POST   /sessions                               create session; optional PNG body
    POST   /sessions/{sid}/image                   upload/replace input (PNG body)
    POST   /sessions/{sid}/mask                    upload object mask (PNG body)
    POST   /sessions/{sid}/assets/{name}           upload extra payload (PNG body)
    POST   /sessions/{sid}/invert                  run/reuse inversion
    POST   /sessions/{sid}/jobs                    submit EditSpec -> 202 + job id
    GET    /jobs/{jid}                             status + summary metrics
    GET    /jobs/{jid}/events?cursor=N             incremental progress events
    GET    /jobs/{jid}/result/{branch}             result PNG (ETag, immutable)
    GET    /sessions/{sid}/attention?token=&t=     attention map as grayscale PNG
    DELETE /sessions/{sid}                         drop the session directory

Errors: 404 unknown ids, 422 spec violations (JSON-pointer paths),
409 inverting before an image is uploaded.
"""
from __future__ import annotations

import io
import json
import os
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from PIL import Image

from . import __version__
from .backbone import ToyBackbone
from .errors import EditSpecError, VocabularyError
from .pipeline import EDIT_SPEC_SCHEMA, EditSpec
from .sessions import JobRunner, SessionStore, etag_for, load_attention_map

DEFAULT_SESSIONS_DIR = "~/.dragedit/sessions"


def _png_response(arr: np.ndarray, etag: Optional[str] = None) -> Response:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    headers = {}
    if etag:
        headers = {"ETag": etag, "Cache-Control": "public, max-age=31536000, immutable"}
    return Response(buf.getvalue(), media_type="image/png", headers=headers)


def create_app(backbone: ToyBackbone, sessions_dir: Optional[str] = None,
               max_jobs: int = 2) -> FastAPI:
    store = SessionStore(Path(os.path.expanduser(
        sessions_dir or os.environ.get("DRAGEDIT_SESSIONS", DEFAULT_SESSIONS_DIR))))
    runner = JobRunner(store, backbone, max_jobs=max_jobs)
    app = FastAPI(title="dragedit", version=__version__)
    # the browser frontend is served as static files from wherever is handy,
    # so the API must answer cross-origin requests
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
        allow_headers=["*"], expose_headers=["ETag"])
    app.state.store = store
    app.state.runner = runner
    app.state.backbone = backbone

    def get_session_dir(sid: str) -> Path:
        try:
            d = store.session_dir(sid)
        except KeyError:
            raise HTTPException(404, f"unknown session {sid!r}")
        if not (d / "session.json").exists():
            raise HTTPException(404, f"unknown session {sid!r}")
        return d

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok", "version": __version__,
                "model": {"T": backbone.config.T,
                          "resolution": backbone.config.resolution,
                          "vocab": list(backbone.config.vocab)}}

    @app.get("/schema/edit-spec")
    def edit_spec_schema() -> dict:
        return EDIT_SPEC_SCHEMA

    @app.post("/sessions", status_code=201)
    async def create_session(request: Request) -> dict:
        sid = store.create_session()
        body = await request.body()
        has_image = False
        if body:
            store.store_image(sid, body, "image.png")
            has_image = True
        return {"session_id": sid, "has_image": has_image}

    @app.post("/sessions/{sid}/image")
    async def upload_image(sid: str, request: Request) -> dict:
        get_session_dir(sid)
        body = await request.body()
        if not body:
            raise HTTPException(422, "empty body; send PNG bytes")
        store.store_image(sid, body, "image.png")
        return {"session_id": sid, "stored": "image.png"}

    @app.post("/sessions/{sid}/mask")
    async def upload_mask(sid: str, request: Request) -> dict:
        get_session_dir(sid)
        body = await request.body()
        if not body:
            raise HTTPException(422, "empty body; send PNG bytes")
        store.store_image(sid, body, "mask.png")
        return {"session_id": sid, "stored": "mask.png"}

    @app.post("/sessions/{sid}/assets/{name}")
    async def upload_asset(sid: str, name: str, request: Request) -> dict:
        get_session_dir(sid)
        body = await request.body()
        if not body:
            raise HTTPException(422, "empty body; send PNG bytes")
        try:
            store.store_image(sid, body, name)
        except ValueError as exc:
            raise HTTPException(422, str(exc))
        return {"session_id": sid, "stored": name}

    @app.post("/sessions/{sid}/invert")
    def invert(sid: str, body: dict) -> dict:
        d = get_session_dir(sid)
        if not (d / "image.png").exists():
            raise HTTPException(409, "no image uploaded for this session yet")
        prompt = body.get("prompt")
        if not isinstance(prompt, str) or not prompt:
            raise HTTPException(422, "body must carry a non-empty 'prompt'")
        try:
            traj, cached = store.invert(
                sid, backbone, prompt, seed=int(body.get("seed", 0)),
                cfg_scale=float(body.get("cfg_scale", 3.5)))
        except VocabularyError as exc:
            raise HTTPException(422, str(exc))
        return {"session_id": sid, "cached": cached,
                "trajectory": {"T": traj.T, "prompt": traj.prompt,
                               "seed": traj.seed, "cfg_scale": traj.cfg_scale}}

    @app.post("/sessions/{sid}/jobs", status_code=202)
    def submit_job(sid: str, body: dict) -> dict:
        d = get_session_dir(sid)
        try:
            spec = EditSpec.from_json(body)
        except EditSpecError as exc:
            raise HTTPException(422, detail={
                "violations": [{"pointer": p, "message": m}
                               for p, m in exc.violations]})
        if spec.image_ref is None and not (d / "image.png").exists():
            raise HTTPException(409, "no image uploaded for this session yet")
        if spec.mask_ref is None and not (d / "mask.png").exists():
            raise HTTPException(409, "no mask uploaded for this session yet")
        jid = store.create_job(sid, spec)
        runner.submit(sid, jid)
        return {"job_id": jid, "session_id": sid, "status": "queued"}

    @app.get("/jobs/{jid}")
    def job_status(jid: str) -> dict:
        try:
            return store.job_status(jid, running_ids=runner.running_ids())
        except KeyError as exc:
            raise HTTPException(404, str(exc))

    @app.get("/jobs/{jid}/events")
    def job_events(jid: str, cursor: int = Query(0, ge=0)) -> dict:
        try:
            _, d = store.find_job(jid)
        except KeyError as exc:
            raise HTTPException(404, str(exc))
        events = []
        log = d / "log.jsonl"
        if log.exists():
            with open(log) as f:
                for i, line in enumerate(f):
                    if i >= cursor and line.strip():
                        events.append(json.loads(line))
        status = store.job_status(jid, running_ids=runner.running_ids())
        return {"events": events, "cursor": cursor + len(events),
                "status": status["status"]}

    @app.get("/jobs/{jid}/result/{branch}")
    def job_result(jid: str, branch: str, request: Request) -> Response:
        if branch not in ("branch1", "branch2"):
            raise HTTPException(404, "branch must be 'branch1' or 'branch2'")
        try:
            _, d = store.find_job(jid)
        except KeyError as exc:
            raise HTTPException(404, str(exc))
        path = d / f"{branch}.png"
        if not path.exists():
            raise HTTPException(404, f"job {jid} has no {branch} result (not done?)")
        etag = etag_for(path)
        if request.headers.get("if-none-match") == etag:
            return Response(status_code=304)
        return Response(path.read_bytes(), media_type="image/png",
                        headers={"ETag": etag,
                                 "Cache-Control": "public, max-age=31536000, immutable"})

    @app.get("/jobs/{jid}/preview/{name}")
    def job_preview(jid: str, name: str) -> Response:
        try:
            _, d = store.find_job(jid)
        except KeyError as exc:
            raise HTTPException(404, str(exc))
        path = d / "previews" / name
        if not path.exists() or not path.resolve().is_relative_to(d.resolve()):
            raise HTTPException(404, f"no preview {name!r}")
        return Response(path.read_bytes(), media_type="image/png")

    @app.get("/sessions/{sid}/attention")
    def attention_map(sid: str, token: int = Query(..., ge=0),
                      t: int = Query(..., ge=1),
                      job: Optional[str] = None) -> Response:
        d = get_session_dir(sid)
        jobs_dir = d / "jobs"
        candidates = ([jobs_dir / job] if job else
                      sorted(jobs_dir.iterdir(), key=lambda p: p.stat().st_mtime,
                             reverse=True))
        for jd in candidates:
            arr = load_attention_map(jd, token, t)
            if arr is not None:
                lo, hi = float(arr.min()), float(arr.max())
                scaled = (np.zeros_like(arr) if hi <= lo
                          else (arr - lo) / (hi - lo))
                return _png_response(np.round(scaled * 255).astype(np.uint8))
        raise HTTPException(404, f"no attention map for token={token} t={t}")

    @app.delete("/sessions/{sid}", status_code=204)
    def delete_session(sid: str) -> Response:
        get_session_dir(sid)
        store.delete_session(sid)
        return Response(status_code=204)

    return app


def load_backbone_from_env(checkpoint: Optional[str] = None) -> ToyBackbone:
    path = checkpoint or os.environ.get("DRAGEDIT_CHECKPOINT")
    if not path:
        raise SystemExit(
            "no checkpoint: pass --checkpoint or set DRAGEDIT_CHECKPOINT")
    if not Path(path).exists():
        raise SystemExit(f"checkpoint not found: {path}")
    return ToyBackbone.load(path)
