"""Job-oriented HTTP service: upload a bundle archive, poll, fetch artifacts.

Jobs live on disk under ``<store>/<job id>/`` and are keyed by a content
hash of the bundle files and the processing configuration, so resubmitting
the same archive returns the existing job.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import shutil
import threading
import zipfile
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path, PurePosixPath
from typing import Optional

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, Response

from .pipeline import parse_manifest, process_manifest, resolve_config

log = logging.getLogger(__name__)

STATES = ("queued", "running", "done", "failed")
MODES = ("single-view", "multi-view")


class ValidationError(ValueError):
    pass


class JobNotFound(KeyError):
    pass


class JobNotDone(RuntimeError):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _read_archive(data: bytes) -> dict:
    """Archive members as ``{relative posix path: bytes}``, rooted at the manifest."""
    try:
        zf = zipfile.ZipFile(io.BytesIO(data))
    except zipfile.BadZipFile:
        raise ValidationError("upload is not a zip archive") from None
    files = {}
    with zf:
        for info in zf.infolist():
            if info.is_dir():
                continue
            p = PurePosixPath(info.filename)
            if p.is_absolute() or ".." in p.parts:
                raise ValidationError(f"unsafe path in archive: {info.filename}")
            files[p.as_posix()] = zf.read(info)
    manifests = sorted((n for n in files if PurePosixPath(n).name == "manifest.json"),
                       key=lambda n: len(PurePosixPath(n).parts))
    if not manifests:
        raise ValidationError("archive has no manifest.json")
    prefix = PurePosixPath(manifests[0]).parent
    if str(prefix) == ".":
        return files
    out = {}
    for n, b in files.items():
        p = PurePosixPath(n)
        if p.parts[:len(prefix.parts)] == prefix.parts:
            out[PurePosixPath(*p.parts[len(prefix.parts):]).as_posix()] = b
    return out


def _content_id(files: dict, config: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(files):
        h.update(name.encode() + b"\0" + hashlib.sha256(files[name]).digest())
    h.update(json.dumps(config, sort_keys=True).encode())
    return h.hexdigest()[:32]


class JobStore:
    """Persistent job records plus a bounded worker pool."""

    def __init__(self, root, workers: int = 2, autostart: bool = True):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._pool = ThreadPoolExecutor(max_workers=max(1, workers)) if autostart else None
        self._recover()

    # -- records --
    def _dir(self, job_id: str) -> Path:
        if not job_id.isalnum():
            raise JobNotFound(job_id)
        return self.root / job_id

    def _load(self, job_id: str) -> dict:
        path = self._dir(job_id) / "job.json"
        if not path.is_file():
            raise JobNotFound(job_id)
        return json.loads(path.read_text())

    def _save(self, job: dict) -> None:
        path = self._dir(job["id"]) / "job.json"
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(job, indent=2, sort_keys=True))
        os.replace(tmp, path)

    def get(self, job_id: str) -> dict:
        with self._lock:
            return self._load(job_id)

    def _transition(self, job_id: str, new: str, **fields) -> dict:
        allowed = {"queued": ("running",), "running": ("done", "failed"), "done": (), "failed": ()}
        with self._lock:
            job = self._load(job_id)
            if new not in allowed[job["state"]]:
                raise RuntimeError(f"illegal transition {job['state']} -> {new}")
            job["state"] = new
            job.update(fields)
            self._save(job)
            return job

    # -- lifecycle --
    def submit(self, archive: bytes, overrides: Optional[dict] = None, mode: str = "single-view") -> dict:
        if mode not in MODES:
            raise ValidationError(f"unknown mode {mode!r}")
        files = _read_archive(archive)
        try:
            manifest = parse_manifest(json.loads(files["manifest.json"]), Path("."))
        except (ValueError, KeyError) as exc:
            raise ValidationError(f"invalid manifest: {exc}") from None
        for v in manifest.views:
            names = list(v.fringes) + list(v.reference_fringes or [])
            if v.white:
                names.append(v.white)
            elif mode == "multi-view":
                raise ValidationError(f"{v.name}: white image required for multi-view processing")
            for n in names:
                rel = (PurePosixPath(v.directory) / n).as_posix()
                if rel not in files:
                    raise ValidationError(f"{v.name}: missing file {rel}")
        if mode == "multi-view" and len(manifest.views) < 2:
            raise ValidationError("multi-view processing needs at least 2 views")
        overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
        try:
            config = resolve_config(manifest.defaults, overrides)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"invalid configuration: {exc}") from None
        snapshot = {"mode": mode, "overrides": overrides, "resolved": config.to_dict()}
        job_id = _content_id(files, snapshot)

        with self._lock:
            d = self._dir(job_id)
            if (d / "job.json").is_file():
                return self._load(job_id)
            inp = d / "input"
            for name, data in files.items():
                p = inp / name
                p.parent.mkdir(parents=True, exist_ok=True)
                p.write_bytes(data)
            job = {"id": job_id, "state": "queued", "submitted_at": _now(), "started_at": None,
                   "finished_at": None, "config": snapshot, "error": None, "artifacts": []}
            self._save(job)
        self._enqueue(job_id)
        return job

    def _enqueue(self, job_id: str) -> None:
        if self._pool is not None:
            self._pool.submit(self._run, job_id)

    def _run(self, job_id: str) -> None:
        job = self._transition(job_id, "running", started_at=_now())
        d = self._dir(job_id)
        out = d / "output"
        shutil.rmtree(out, ignore_errors=True)
        try:
            cfg = job["config"]
            written = process_manifest(d / "input" / "manifest.json", out, cfg["overrides"], cfg["mode"])
            names = sorted(Path(p).relative_to(out).as_posix() for p in written)
            self._transition(job_id, "done", finished_at=_now(), artifacts=names)
        except Exception as exc:  # noqa: BLE001 - any pipeline failure ends the job
            log.exception("job %s failed", job_id)
            self._transition(job_id, "failed", finished_at=_now(), error=f"{type(exc).__name__}: {exc}")

    def _recover(self) -> None:
        """Re-queue jobs left queued or running by a previous process."""
        pending = []
        for path in sorted(self.root.glob("*/job.json")):
            job = json.loads(path.read_text())
            if job["state"] in ("queued", "running"):
                job["state"] = "queued"
                job["started_at"] = None
                self._save(job)
                pending.append(job["id"])
        for job_id in pending:
            self._enqueue(job_id)

    def artifact(self, job_id: str, name: str) -> bytes:
        job = self.get(job_id)
        if job["state"] != "done":
            raise JobNotDone(job["state"])
        if name not in job["artifacts"]:
            raise FileNotFoundError(name)
        return (self._dir(job_id) / "output" / name).read_bytes()

    def shutdown(self, wait: bool = True) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=wait)


def _public(job: dict, request: Request) -> dict:
    out = dict(job)
    if job["state"] == "done":
        base = str(request.url_for("fetch_result", job_id=job["id"], name="x"))[:-1]
        out["links"] = {name: base + name for name in job["artifacts"]}
    return out


_CONFIG_PARAMS = {"hp_sigma": float, "mod_threshold": float, "scale": str, "seed": int,
                  "formats": str, "ransac_tol": float, "ransac_iters": int}


def create_app(store_dir, workers: int = 2, store: JobStore | None = None) -> FastAPI:
    app = FastAPI(title="pmdkit job service")
    app.state.store = store or JobStore(store_dir, workers)

    @app.get("/v1/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/v1/jobs", status_code=202)
    async def submit_job(request: Request):
        params = request.query_params
        overrides = {}
        try:
            for k, conv in _CONFIG_PARAMS.items():
                if k in params:
                    overrides[k] = conv(params[k])
            if "debug_intermediates" in params:
                overrides["debug_intermediates"] = params["debug_intermediates"].lower() in ("1", "true", "yes")
        except ValueError as exc:
            return JSONResponse({"detail": f"bad parameter: {exc}"}, status_code=422)
        body = await request.body()
        try:
            job = app.state.store.submit(body, overrides, params.get("mode", "single-view"))
        except ValidationError as exc:
            return JSONResponse({"detail": str(exc)}, status_code=422)
        return {"id": job["id"], "state": job["state"]}

    @app.get("/v1/jobs/{job_id}")
    def poll_job(job_id: str, request: Request):
        try:
            return _public(app.state.store.get(job_id), request)
        except JobNotFound:
            raise HTTPException(404, "job not found") from None

    @app.get("/v1/jobs/{job_id}/artifacts/{name:path}", name="fetch_result")
    def fetch_result(job_id: str, name: str):
        try:
            data = app.state.store.artifact(job_id, name)
        except JobNotFound:
            raise HTTPException(404, "job not found") from None
        except JobNotDone as exc:
            raise HTTPException(409, f"job is {exc}") from None
        except FileNotFoundError:
            raise HTTPException(404, f"no artifact {name!r}") from None
        return Response(data, media_type="application/octet-stream")

    return app
