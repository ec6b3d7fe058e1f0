"""HTTP service backing the interactive map editor.

Serves samples with their current attention maps and top-3 predictions,
accepts edited maps (raw rasters or brush strokes rasterized server-side),
re-infers under the edit, persists edit sessions, and runs fine-tuning jobs
over the committed edits. Readers always see an immutable model snapshot;
a finished job swaps the snapshot atomically.

Store layout (override root with env var ABN_STORE):
    sessions/<sid>.json, <sid>.original.amap, <sid>.edited.amap
    jobs/<job_id>.json
    checkpoints/<job_id>.abnm, checkpoints/current.abnm
"""

from __future__ import annotations

import base64
import copy
import dataclasses
import json
import os
import threading
import time

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from starlette.exceptions import HTTPException as StarletteHTTPException

from . import autodiff as ad
from .data import ArrayDataset
from .maps import (AttentionMap, BrushStroke, apply_stroke, decode_map,
                   encode_map, overlay, resize_map)
from .metrics import map_similarity_mse
from .model import (ABNModel, forward, infer_with_map, load_checkpoint,
                    predict_topk, save_checkpoint)
from .training import FinetuneConfig, accuracy, finetune_with_maps

TOPK = 3
OVERLAY_ALPHA = 0.5

JOB_STATES = ("queued", "running", "done", "failed")
_LEGAL_JOB_STEPS = {("queued", "running"), ("running", "done"), ("running", "failed")}

FINETUNE_FIELDS = {"epochs": int, "batch_size": int, "learning_rate": float,
                   "momentum": float, "gamma": float, "seed": int,
                   "edited_only": bool}


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


def _b64(blob: bytes) -> str:
    return base64.b64encode(blob).decode("ascii")


def _unb64(text: str, what: str) -> bytes:
    try:
        return base64.b64decode(text, validate=True)
    except Exception:
        raise ApiError(422, "invalid_request", f"{what} is not valid base64")


def _topk_json(labels, probs):
    return {"labels": [int(v) for v in labels],
            "probs": [float(v) for v in probs]}


class EditStore:
    """Session and job records on disk; maps live in AMAP files next to them."""

    def __init__(self, root):
        self.root = root
        for sub in ("sessions", "jobs", "checkpoints"):
            os.makedirs(os.path.join(root, sub), exist_ok=True)
        self.sessions = {}
        self.session_maps = {}  # sid -> (original AttentionMap, edited AttentionMap)
        self.jobs = {}
        self._load()

    def _load(self):
        sdir = os.path.join(self.root, "sessions")
        for name in sorted(os.listdir(sdir)):
            if not name.endswith(".json"):
                continue
            with open(os.path.join(sdir, name), "r", encoding="utf-8") as f:
                rec = json.load(f)
            sid = rec["session_id"]
            orig = self._read_amap(rec["original_map_path"])
            edited = self._read_amap(rec["edited_map_path"])
            self.sessions[sid] = rec
            self.session_maps[sid] = (orig, edited)
        jdir = os.path.join(self.root, "jobs")
        for name in sorted(os.listdir(jdir)):
            if name.endswith(".json"):
                with open(os.path.join(jdir, name), "r", encoding="utf-8") as f:
                    rec = json.load(f)
                self.jobs[rec["job_id"]] = rec

    def _read_amap(self, rel):
        with open(os.path.join(self.root, rel), "rb") as f:
            return decode_map(f.read())

    def next_session_id(self):
        return f"s{len(self.sessions):05d}"

    def next_job_id(self):
        return f"j{len(self.jobs):05d}"

    def put_session(self, rec, original: AttentionMap, edited: AttentionMap):
        sid = rec["session_id"]
        opath = os.path.join("sessions", f"{sid}.original.amap")
        epath = os.path.join("sessions", f"{sid}.edited.amap")
        rec["original_map_path"] = opath
        rec["edited_map_path"] = epath
        with open(os.path.join(self.root, opath), "wb") as f:
            f.write(encode_map(original))
        with open(os.path.join(self.root, epath), "wb") as f:
            f.write(encode_map(edited))
        self._write_session_json(rec)
        self.sessions[sid] = rec
        self.session_maps[sid] = (original, edited)

    def update_session(self, rec):
        self._write_session_json(rec)
        self.sessions[rec["session_id"]] = rec

    def _write_session_json(self, rec):
        path = os.path.join(self.root, "sessions", f"{rec['session_id']}.json")
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(rec, f, sort_keys=True, indent=1)
        os.replace(tmp, path)

    def put_job(self, rec):
        path = os.path.join(self.root, "jobs", f"{rec['job_id']}.json")
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(rec, f, sort_keys=True, indent=1)
        os.replace(tmp, path)
        self.jobs[rec["job_id"]] = rec

    def checkpoint_path(self, name):
        return os.path.join(self.root, "checkpoints", name)


class ServiceState:
    def __init__(self, model: ABNModel, dataset: ArrayDataset, store: EditStore):
        self.lock = threading.RLock()
        self.model = model
        self.dataset = dataset
        self.store = store
        self._pred_cache = None
        self._worker = None

    # -- model snapshot -----------------------------------------------------

    def snapshot(self) -> ABNModel:
        with self.lock:
            return self.model

    def swap_model(self, model: ABNModel):
        with self.lock:
            self.model = model
            self._pred_cache = None

    # -- cached whole-dataset predictions ------------------------------------

    def predictions(self):
        with self.lock:
            cache = self._pred_cache
            model = self.model
        if cache is not None and cache[0] is model:
            return cache[1]
        logits = []
        with ad.no_grad():
            for i in range(0, len(self.dataset), 64):
                out = forward(model, self.dataset.images[i : i + 64])
                logits.append(out.perception_logits.data)
        preds = np.concatenate(logits)
        with self.lock:
            self._pred_cache = (model, preds)
        return preds

    def sample_row(self, sample_id):
        try:
            return self.dataset.row(sample_id)
        except KeyError:
            raise ApiError(404, "not_found", f"unknown sample {sample_id!r}")

    def display_size(self):
        return self.model.config.image_size


def _model_map(model, dataset, row) -> AttentionMap:
    with ad.no_grad():
        out = forward(model, dataset.images[row : row + 1])
    return AttentionMap(out.attention_map.data[0, 0])


def _now():
    return time.time()


def create_app(checkpoint_path, dataset_path, store_path) -> FastAPI:
    """Build the application; ABN_STORE in the environment overrides store_path."""
    store_root = os.environ.get("ABN_STORE", store_path)
    model = load_checkpoint(checkpoint_path)
    dataset = ArrayDataset.from_manifest(dataset_path)
    store = EditStore(store_root)
    state = ServiceState(model, dataset, store)

    # the serving snapshot survives restarts once a job has swapped it
    current = store.checkpoint_path("current.abnm")
    if os.path.exists(current):
        state.model = load_checkpoint(current)

    app = FastAPI()
    # the browser editor is served as static files from another origin
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])
    app.state.service = state

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status,
                            content={"error": exc.code, "message": exc.message})

    @app.exception_handler(StarletteHTTPException)
    async def _http_error(request: Request, exc: StarletteHTTPException):
        code = "not_found" if exc.status_code == 404 else "http_error"
        return JSONResponse(status_code=exc.status_code,
                            content={"error": code, "message": str(exc.detail)})

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=422,
                            content={"error": "invalid_request", "message": str(exc)})

    # -- read side ----------------------------------------------------------

    @app.get("/health")
    def health():
        cfg = state.snapshot().config
        return {"status": "ok",
                "samples": len(state.dataset),
                "model": {"num_classes": cfg.num_classes,
                          "image_size": list(cfg.image_size),
                          "map_size": list(cfg.map_size)}}

    @app.get("/samples")
    def list_samples(filter: str = "all"):
        if filter not in ("all", "misclassified"):
            raise ApiError(422, "invalid_request",
                           f"filter must be all|misclassified, got {filter!r}")
        preds = state.predictions().argmax(axis=1)
        ds = state.dataset
        rows = []
        for i, sid in enumerate(ds.ids):
            correct = int(preds[i]) == int(ds.labels[i])
            if filter == "misclassified" and correct:
                continue
            rows.append({"id": sid, "label": int(ds.labels[i]),
                         "predicted": int(preds[i]), "correct": correct})
        return {"samples": rows, "count": len(rows)}

    @app.get("/samples/{sample_id}")
    def sample_view(sample_id: str):
        row = state.sample_row(sample_id)
        model = state.snapshot()
        ds = state.dataset
        img01 = ds.images[row, 0]
        amap = _model_map(model, ds, row)
        dh, dw = state.display_size()
        display_map = resize_map(amap, dh, dw)
        blend = overlay(img01, display_map, OVERLAY_ALPHA)
        labels, probs = predict_topk(
            forward_logits(model, ds, row), min(TOPK, model.config.num_classes))

        img_u8 = np.clip(np.round(img01 * 255.0), 0, 255).astype(np.uint8)
        blend_u8 = np.clip(np.round(blend * 255.0), 0, 255).astype(np.uint8)
        return {
            "id": sample_id,
            "label": int(ds.labels[row]),
            "display_size": [dh, dw],
            "image_b64": _b64(_pgm_bytes(img_u8)),
            "map_b64": _b64(encode_map(display_map)),
            "overlay_b64": _b64(_ppm_bytes(blend_u8)),
            "topk": _topk_json(labels, probs),
        }

    # -- edit side ----------------------------------------------------------

    @app.post("/samples/{sample_id}/edits")
    async def submit_edit(sample_id: str, request: Request):
        body = await _json_body(request)
        row = state.sample_row(sample_id)
        model = state.snapshot()
        ds = state.dataset
        dh, dw = state.display_size()

        original = resize_map(_model_map(model, ds, row), dh, dw)
        edited = _edited_map_from_body(body, original, (dh, dw))

        before = predict_topk(forward_logits(model, ds, row),
                              min(TOPK, model.config.num_classes))
        logits = infer_with_map(model, ds.images[row : row + 1], edited)
        after = predict_topk(logits, min(TOPK, model.config.num_classes))

        with state.lock:
            sid = body.get("session_id")
            if sid is not None:
                rec = store.sessions.get(sid)
                if rec is None:
                    raise ApiError(404, "not_found", f"unknown session {sid!r}")
                if rec["status"] == "committed":
                    raise ApiError(409, "conflict",
                                   f"session {sid} is committed and immutable")
                if rec["sample_id"] != sample_id:
                    raise ApiError(409, "conflict",
                                   f"session {sid} belongs to sample "
                                   f"{rec['sample_id']!r}")
                rec = dict(rec, updated_at=_now(),
                           before_topk=_topk_json(*before),
                           after_topk=_topk_json(*after))
            else:
                now = _now()
                rec = {"session_id": store.next_session_id(),
                       "sample_id": sample_id, "status": "draft",
                       "created_at": now, "updated_at": now,
                       "before_topk": _topk_json(*before),
                       "after_topk": _topk_json(*after)}
            store.put_session(rec, original, edited)
        return _session_json(store, rec["session_id"])

    @app.get("/sessions")
    def list_sessions(status: str = "all"):
        if status not in ("all", "draft", "committed"):
            raise ApiError(422, "invalid_request",
                           f"status must be all|draft|committed, got {status!r}")
        with state.lock:
            sids = [sid for sid, rec in sorted(store.sessions.items())
                    if status == "all" or rec["status"] == status]
            rows = [_session_json(store, sid) for sid in sids]
        return {"sessions": rows, "count": len(rows)}

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        with state.lock:
            if session_id not in store.sessions:
                raise ApiError(404, "not_found", f"unknown session {session_id!r}")
            return _session_json(store, session_id)

    @app.post("/sessions/{session_id}/commit")
    def commit_session(session_id: str):
        with state.lock:
            rec = store.sessions.get(session_id)
            if rec is None:
                raise ApiError(404, "not_found", f"unknown session {session_id!r}")
            if rec["status"] == "committed":
                raise ApiError(409, "conflict",
                               f"session {session_id} already committed")
            rec = dict(rec, status="committed", updated_at=_now())
            store.update_session(rec)
            return _session_json(store, session_id)

    # -- fine-tune jobs -------------------------------------------------------

    @app.post("/jobs/finetune")
    async def start_finetune(request: Request):
        body = await _json_body(request, default={})
        config = _finetune_config(body)
        with state.lock:
            committed = [sid for sid, rec in sorted(store.sessions.items())
                         if rec["status"] == "committed"]
            if not committed:
                raise ApiError(422, "no_committed_sessions",
                               "fine-tuning needs at least one committed session")
            active = [j for j in store.jobs.values()
                      if j["state"] in ("queued", "running")]
            if active:
                raise ApiError(409, "conflict",
                               f"job {active[0]['job_id']} is {active[0]['state']}")
            job_id = store.next_job_id()
            rec = {"job_id": job_id, "state": "queued",
                   "config": _config_json(config), "session_ids": committed,
                   "created_at": _now(), "updated_at": _now(),
                   "checkpoint_path": None, "metrics": None, "message": None}
            store.put_job(rec)
            worker = threading.Thread(target=_run_job, daemon=True,
                                      args=(state, job_id, config, committed))
            state._worker = worker
            worker.start()
        return store.jobs[job_id]

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        with state.lock:
            rec = store.jobs.get(job_id)
            if rec is None:
                raise ApiError(404, "not_found", f"unknown job {job_id!r}")
            return dict(rec)

    @app.get("/jobs")
    def list_jobs():
        with state.lock:
            return {"jobs": [store.jobs[j] for j in sorted(store.jobs)],
                    "count": len(store.jobs)}

    return app


async def _json_body(request: Request, default=None):
    raw = await request.body()
    if not raw:
        if default is not None:
            return default
        raise ApiError(422, "invalid_request", "request body is empty")
    try:
        body = json.loads(raw)
    except ValueError:
        raise ApiError(422, "invalid_request", "request body is not valid JSON")
    if not isinstance(body, dict):
        raise ApiError(422, "invalid_request", "request body must be a JSON object")
    return body


def forward_logits(model, dataset, row):
    with ad.no_grad():
        return forward(model, dataset.images[row : row + 1]).perception_logits.data[0]


def _edited_map_from_body(body, original: AttentionMap, display_size):
    has_map = "map_b64" in body
    has_strokes = "strokes" in body
    if has_map == has_strokes:
        raise ApiError(422, "invalid_request",
                       "provide exactly one of map_b64 or strokes")
    if has_map:
        blob = _unb64(body["map_b64"], "map_b64")
        try:
            edited = decode_map(blob)
        except ValueError as e:
            raise ApiError(422, "invalid_map", str(e))
        if (edited.height, edited.width) != display_size:
            raise ApiError(422, "invalid_map",
                           f"map must be {display_size[0]}x{display_size[1]} "
                           f"(display resolution), got "
                           f"{edited.height}x{edited.width}")
        return edited
    strokes = body["strokes"]
    if not isinstance(strokes, list) or not strokes:
        raise ApiError(422, "invalid_request", "strokes must be a non-empty list")
    edited = original
    for i, s in enumerate(strokes):
        try:
            stroke = BrushStroke(
                mode=s["mode"],
                points=[(float(x), float(y)) for x, y in s["points"]],
                radius=float(s["radius"]), strength=float(s["strength"]))
            edited = apply_stroke(edited, stroke, display_size)
        except (KeyError, TypeError, ValueError) as e:
            raise ApiError(422, "invalid_request", f"stroke {i}: {e}")
    return edited


def _session_json(store: EditStore, sid: str):
    rec = store.sessions[sid]
    original, edited = store.session_maps[sid]
    out = dict(rec)
    out["original_map_b64"] = _b64(encode_map(original))
    out["edited_map_b64"] = _b64(encode_map(edited))
    return out


def _config_json(config: FinetuneConfig) -> dict:
    return dataclasses.asdict(config)


def _finetune_config(body) -> FinetuneConfig:
    kwargs = {}
    for key, value in body.items():
        if key not in FINETUNE_FIELDS:
            raise ApiError(422, "invalid_request", f"unknown config field {key!r}")
        caster = FINETUNE_FIELDS[key]
        if caster is bool:
            if not isinstance(value, bool):
                raise ApiError(422, "invalid_request", f"{key} must be a boolean")
            kwargs[key] = value
        else:
            try:
                kwargs[key] = caster(value)
            except (TypeError, ValueError):
                raise ApiError(422, "invalid_request",
                               f"{key} must be {caster.__name__}")
    kwargs.setdefault("epochs", 4)
    try:
        return FinetuneConfig(**kwargs)
    except ValueError as e:
        raise ApiError(422, "invalid_request", str(e))


def _set_job_state(state: ServiceState, job_id: str, new_state: str, **fields):
    with state.lock:
        rec = dict(state.store.jobs[job_id])
        if (rec["state"], new_state) not in _LEGAL_JOB_STEPS:
            raise RuntimeError(f"illegal job transition {rec['state']} -> {new_state}")
        rec["state"] = new_state
        rec["updated_at"] = _now()
        rec.update(fields)
        state.store.put_job(rec)


def _run_job(state: ServiceState, job_id: str, config: FinetuneConfig, session_ids):
    store = state.store
    try:
        _set_job_state(state, job_id, "running")
        with state.lock:
            base = state.model
            # newest committed edit per sample wins
            edits = {}
            for sid in session_ids:
                rec = store.sessions[sid]
                stamp = rec["updated_at"]
                sample_id = rec["sample_id"]
                if sample_id not in edits or stamp >= edits[sample_id][0]:
                    edits[sample_id] = (stamp, store.session_maps[sid][1])
        edited = {sample_id: amap for sample_id, (_, amap) in edits.items()}

        model = copy.deepcopy(base)
        ds = state.dataset
        acc_before = accuracy(base, ds)
        mse_before = _mean_edit_mse(base, ds, edited)
        finetune_with_maps(model, ds, edited, config)
        acc_after = accuracy(model, ds)
        mse_after = _mean_edit_mse(model, ds, edited)

        final = store.checkpoint_path(f"{job_id}.abnm")
        save_checkpoint(model, final)
        tmp = store.checkpoint_path("current.abnm.tmp")
        save_checkpoint(model, tmp)
        os.replace(tmp, store.checkpoint_path("current.abnm"))
        state.swap_model(model)
        _set_job_state(state, job_id, "done",
                       checkpoint_path=final,
                       metrics={"accuracy_before": acc_before,
                                "accuracy_after": acc_after,
                                "map_mse_before": mse_before,
                                "map_mse_after": mse_after})
    except Exception as e:  # job must record its own failure
        _set_job_state(state, job_id, "failed", message=f"{type(e).__name__}: {e}")


def _mean_edit_mse(model, dataset, edited):
    mh, mw = model.config.map_size
    total = 0.0
    with ad.no_grad():
        for sample_id, amap in sorted(edited.items()):
            row = dataset.row(sample_id)
            out = forward(model, dataset.images[row : row + 1])
            produced = AttentionMap(out.attention_map.data[0, 0])
            target = amap if (amap.height, amap.width) == (mh, mw) \
                else resize_map(amap, mh, mw)
            total += map_similarity_mse(produced, target)
    return total / len(edited)


def _pgm_bytes(img_u8):
    h, w = img_u8.shape
    return b"P5\n%d %d\n255\n" % (w, h) + img_u8.tobytes()


def _ppm_bytes(img_u8):
    h, w = img_u8.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + img_u8.tobytes()


def serve(checkpoint_path, dataset_path, store_path, port: int = 8000,
          host: str = "127.0.0.1"):
    import uvicorn

    app = create_app(checkpoint_path, dataset_path, store_path)
    uvicorn.run(app, host=host, port=port, log_level="warning")
