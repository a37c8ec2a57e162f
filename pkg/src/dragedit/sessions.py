"""On-disk editing sessions and the bounded concurrent job runner.

Layout (one directory per session):

    <root>/<session_id>/
        session.json            id, timestamps, inversion metadata
        image.png               uploaded input
        mask.png                uploaded object mask
        assets/<name>.png       extra uploads (paste payloads)
        trajectory.npz          inversion archive, reused across jobs
        jobs/<job_id>/
            spec.json           the validated EditSpec
            status.json         queued | running | done | failed | interrupted
            log.jsonl           progress events
            previews/           periodic denoised previews
            attention.npz       branch-1 object attention maps
            branch1.png, branch2.png

Every byte of state lives in the directory: a server restart reconstructs
sessions and finished jobs losslessly; jobs caught mid-run are reported as
interrupted.
"""
from __future__ import annotations

import hashlib
import json
import re
import threading
import time
import uuid
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .backbone import ToyBackbone
from .errors import StageError
from .images import load_image, load_mask, save_image
from .inversion import NoiseTrajectory, ddpm_invert, load_trajectory, save_trajectory
from .npml import aggregate_object_attention
from .pipeline import EditSpec, run_edit

PREVIEW_EVERY = 10
_NAME_RE = re.compile(r"^[A-Za-z0-9_.-]{1,64}$")


def _now() -> float:
    return time.time()


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def _write_json(path: Path, obj: dict) -> None:
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True).encode())


class SessionStore:
    """Directory-backed session registry; safe for concurrent access."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    # -- sessions ---------------------------------------------------------

    def create_session(self) -> str:
        sid = uuid.uuid4().hex[:12]
        d = self.session_dir(sid)
        d.mkdir(parents=True)
        (d / "jobs").mkdir()
        (d / "assets").mkdir()
        _write_json(d / "session.json", {
            "id": sid, "created_at": _now(), "inversion": None})
        return sid

    def session_dir(self, sid: str) -> Path:
        if not _NAME_RE.match(sid):
            raise KeyError(f"invalid session id {sid!r}")
        return self.root / sid

    def session_meta(self, sid: str) -> dict:
        path = self.session_dir(sid) / "session.json"
        if not path.exists():
            raise KeyError(f"unknown session {sid!r}")
        return json.loads(path.read_text())

    def update_session(self, sid: str, **fields) -> dict:
        with self._lock:
            meta = self.session_meta(sid)
            meta.update(fields)
            _write_json(self.session_dir(sid) / "session.json", meta)
            return meta

    def delete_session(self, sid: str) -> None:
        import shutil
        d = self.session_dir(sid)
        if not (d / "session.json").exists():
            raise KeyError(f"unknown session {sid!r}")
        shutil.rmtree(d)

    def list_sessions(self) -> List[str]:
        return sorted(p.name for p in self.root.iterdir()
                      if (p / "session.json").exists())

    # -- uploads ----------------------------------------------------------

    def store_image(self, sid: str, png_bytes: bytes, name: str = "image.png") -> Path:
        if not _NAME_RE.match(name):
            raise ValueError(f"invalid asset name {name!r}")
        d = self.session_dir(sid)
        if not (d / "session.json").exists():
            raise KeyError(f"unknown session {sid!r}")
        path = d / name if name in ("image.png", "mask.png") else d / "assets" / name
        _atomic_write(path, png_bytes)
        if name == "image.png":
            # a new input invalidates any stored inversion
            traj = d / "trajectory.npz"
            if traj.exists():
                traj.unlink()
            self.update_session(sid, inversion=None)
        return path

    def resolve_ref(self, sid: str, ref: str) -> Path:
        """Resolve a spec ref to a file inside the session directory."""
        d = self.session_dir(sid)
        for candidate in (d / ref, d / "assets" / ref):
            if candidate.exists() and candidate.resolve().is_relative_to(d.resolve()):
                return candidate
        raise FileNotFoundError(f"no session file for ref {ref!r}")

    # -- inversion --------------------------------------------------------

    def invert(self, sid: str, backbone: ToyBackbone, prompt: str, seed: int = 0,
               cfg_scale: float = 3.5) -> Tuple[NoiseTrajectory, bool]:
        """Invert the session image (cached); returns (trajectory, was_cached)."""
        d = self.session_dir(sid)
        image_path = d / "image.png"
        if not image_path.exists():
            raise FileNotFoundError("session has no uploaded image")
        meta = self.session_meta(sid)
        inv = meta.get("inversion")
        traj_path = d / "trajectory.npz"
        if (inv and traj_path.exists() and inv["prompt"] == prompt
                and inv["seed"] == seed and inv["cfg_scale"] == cfg_scale):
            return load_trajectory(traj_path), True
        image = load_image(image_path)
        cond = backbone.encode_prompt(prompt)
        traj = ddpm_invert(backbone, image, cond, seed=seed, cfg_scale=cfg_scale)
        save_trajectory(traj, traj_path)
        self.update_session(sid, inversion={
            "prompt": prompt, "seed": seed, "cfg_scale": cfg_scale,
            "T": traj.T, "created_at": _now()})
        return traj, False

    # -- jobs -------------------------------------------------------------

    def job_dir(self, sid: str, jid: str) -> Path:
        if not _NAME_RE.match(jid):
            raise KeyError(f"invalid job id {jid!r}")
        return self.session_dir(sid) / "jobs" / jid

    def create_job(self, sid: str, spec: EditSpec) -> str:
        if not (self.session_dir(sid) / "session.json").exists():
            raise KeyError(f"unknown session {sid!r}")
        jid = uuid.uuid4().hex[:12]
        d = self.job_dir(sid, jid)
        d.mkdir(parents=True)
        (d / "previews").mkdir()
        _write_json(d / "spec.json", spec.to_json())
        _write_json(d / "status.json", {
            "job_id": jid, "session_id": sid, "status": "queued",
            "created_at": _now(), "error": None})
        return jid

    def find_job(self, jid: str) -> Tuple[str, Path]:
        """Locate a job directory by id alone; returns (session_id, path)."""
        if not _NAME_RE.match(jid):
            raise KeyError(f"invalid job id {jid!r}")
        for sid in self.list_sessions():
            d = self.job_dir(sid, jid)
            if d.exists():
                return sid, d
        raise KeyError(f"unknown job {jid!r}")

    def job_status(self, jid: str, running_ids: Optional[set] = None) -> dict:
        _, d = self.find_job(jid)
        status = json.loads((d / "status.json").read_text())
        if (status["status"] == "running" and running_ids is not None
                and jid not in running_ids):
            status["status"] = "interrupted"
        return status

    def set_job_status(self, sid: str, jid: str, **fields) -> None:
        d = self.job_dir(sid, jid)
        status = json.loads((d / "status.json").read_text())
        status.update(fields)
        _write_json(d / "status.json", status)


def execute_job(store: SessionStore, backbone: ToyBackbone, sid: str, jid: str) -> dict:
    """Run one job to completion, streaming events to its log file."""
    job_dir = store.job_dir(sid, jid)
    spec = EditSpec.from_json(json.loads((job_dir / "spec.json").read_text()))
    log_path = job_dir / "log.jsonl"
    log_file = open(log_path, "a")
    preview_counter = {"branch1": 0, "branch2": 0}

    def write_event(event: dict) -> None:
        event = dict(event)
        preview = event.pop("x0_preview", None)
        if preview is not None:
            stage, t = event.get("stage"), event.get("t")
            n = preview_counter.get(stage, 0)
            if t == 1 or (n % PREVIEW_EVERY) == 0:
                name = f"previews/{stage}_t{t:03d}.png"
                save_image(preview, job_dir / name)
                event["preview"] = name
            preview_counter[stage] = n + 1
        if event.get("stage") == "done":
            event["results"] = {"branch1": "branch1.png", "branch2": "branch2.png"}
        log_file.write(json.dumps(event) + "\n")
        log_file.flush()

    store.set_job_status(sid, jid, status="running", started_at=_now())
    try:
        image = mask = None
        if spec.image_ref is None:
            image = load_image(store.session_dir(sid) / "image.png")
        else:
            image = load_image(store.resolve_ref(sid, spec.image_ref))
        if spec.mask_ref is None:
            mask = load_mask(store.session_dir(sid) / "mask.png")
        else:
            mask = load_mask(store.resolve_ref(sid, spec.mask_ref))

        source_traj = source_mask = None
        if spec.mode == "paste":
            src_img = load_image(store.resolve_ref(sid, spec.source_image_ref))
            source_mask = load_mask(store.resolve_ref(sid, spec.source_mask_ref))
            cond = backbone.encode_prompt(spec.prompt_source)
            source_traj = ddpm_invert(backbone, src_img, cond, seed=spec.seed,
                                      cfg_scale=spec.cfg_scale_1)

        trajectory, cached = store.invert(sid, backbone, spec.prompt_source,
                                          seed=spec.seed, cfg_scale=spec.cfg_scale_1)
        write_event({"stage": "invert", "t": trajectory.T, "cached": cached})

        result = run_edit(backbone, spec, image=image, m_v=mask,
                          trajectory=trajectory, source_trajectory=source_traj,
                          source_mask=source_mask,
                          on_event=lambda e: None if e.get("stage") == "invert"
                          else write_event(e))

        save_image(result.branch1, job_dir / "branch1.png")
        save_image(result.branch2, job_dir / "branch2.png")
        _save_attention(result, backbone, job_dir / "attention.npz")
        metrics = {
            "npml_mean_before": (float(np.mean(list(result.npml_trace.losses_before.values())))
                                 if result.npml_trace.losses_before else None),
            "npml_mean_after": (float(np.mean(list(result.npml_trace.losses_after.values())))
                                if result.npml_trace.losses_after else None),
        }
        store.set_job_status(sid, jid, status="done", finished_at=_now(),
                             metrics=metrics)
        return {"status": "done"}
    except Exception as exc:
        stage = exc.stage if isinstance(exc, StageError) else "run"
        write_event({"stage": stage, "error": str(exc)})
        store.set_job_status(sid, jid, status="failed", finished_at=_now(),
                             error=str(exc))
        return {"status": "failed", "error": str(exc)}
    finally:
        log_file.close()


def _save_attention(result, backbone: ToyBackbone, path: Path) -> None:
    """Persist branch-1 aggregated cross-attention maps per (timestep, token)."""
    arrays = {}
    tokens = None
    for t, capture in result.attention_store.captures.items():
        slots = sorted({token for (_, token) in capture.cross_maps})
        tokens = slots if tokens is None else tokens
        for slot in slots:
            try:
                m = aggregate_object_attention(capture, slot, 16)
            except ValueError:
                continue
            arrays[f"t{t:03d}_w{slot}"] = m.numpy()
    meta = {"words": list(result.attention_store.alignment.source_words),
            "resolution": 16}
    np.savez_compressed(path, meta=np.frombuffer(
        json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_attention_map(job_dir: Path, token: int, t: int) -> Optional[np.ndarray]:
    path = Path(job_dir) / "attention.npz"
    if not path.exists():
        return None
    with np.load(path) as blob:
        key = f"t{t:03d}_w{token}"
        if key not in blob:
            return None
        return blob[key].copy()


class JobRunner:
    """Bounded thread-pool executor for jobs, with in-memory liveness."""

    def __init__(self, store: SessionStore, backbone: ToyBackbone, max_jobs: int = 2):
        self.store = store
        self.backbone = backbone
        self.pool = ThreadPoolExecutor(max_workers=max_jobs)
        self.futures: Dict[str, Future] = {}
        self._lock = threading.Lock()

    def submit(self, sid: str, jid: str) -> None:
        with self._lock:
            self.futures[jid] = self.pool.submit(
                execute_job, self.store, self.backbone, sid, jid)

    def running_ids(self) -> set:
        with self._lock:
            return {jid for jid, f in self.futures.items() if not f.done()}

    def wait(self, jid: str, timeout: Optional[float] = None) -> None:
        with self._lock:
            fut = self.futures.get(jid)
        if fut is not None:
            fut.result(timeout=timeout)

    def shutdown(self) -> None:
        self.pool.shutdown(wait=True)


def etag_for(path: Path) -> str:
    return hashlib.md5(path.read_bytes()).hexdigest()
