"""HTTP editing service: sessions, mask ingestion, sequential manipulation.

The app wraps a frozen model bundle.  Model forward passes are reentrant
reads; all per-session state lives in the SessionStore, and history mutation
is serialized per session id so concurrent sessions never interleave.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path
from typing import Optional

import torch
from fastapi import FastAPI, File, Form, HTTPException, UploadFile
from fastapi.staticfiles import StaticFiles

from ..data import (
    decode_image_png,
    decode_mask_png,
    encode_image_png,
    encode_mask_png,
)
from ..pipeline import MaskBackendError, extract_mask, load_model, manipulate
from ..sessions import NothingToUndo, SessionNotFound, SessionStore
from .schemas import (
    DiagnosticsPayload,
    HealthResponse,
    ManipulateResponse,
    MaskResponse,
    SessionCreated,
    SessionInfo,
    UndoResponse,
)


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _attention_previews(attention: torch.Tensor) -> list:
    previews = []
    for i in range(attention.shape[0]):
        channel = attention[i]
        peak = channel.max().clamp(min=1e-8)
        previews.append(_b64(encode_image_png((channel / peak)[None])))
    return previews


def _field_preview(field: torch.Tensor) -> str:
    rgb = torch.stack([
        (field[..., 0] + 1.0) / 2.0,
        (field[..., 1] + 1.0) / 2.0,
        torch.full_like(field[..., 0], 0.5),
    ]).clamp(0, 1)
    return _b64(encode_image_png(rgb))


def create_app(checkpoint_path=None, *, bundle=None, checkpoint=None,
               store: Optional[SessionStore] = None,
               segmenter_url: Optional[str] = None,
               ui_dir=None, ttl_seconds: float = 3600.0) -> FastAPI:
    if bundle is None:
        if checkpoint_path is None:
            raise ValueError("need a checkpoint path or a prebuilt bundle")
        bundle, checkpoint = load_model(checkpoint_path)
    store = store or SessionStore(ttl_seconds=ttl_seconds)
    ckpt_step = checkpoint.step if checkpoint is not None else -1

    app = FastAPI(title="mask transport editor", version="0.1.0")
    app.state.bundle = bundle
    app.state.store = store

    def _view(session_id: str):
        try:
            return store.get(session_id)
        except SessionNotFound as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc

    def _decode_upload_image(upload: UploadFile, what: str) -> torch.Tensor:
        try:
            return decode_image_png(upload.file.read())
        except Exception as exc:
            raise HTTPException(status_code=400,
                                detail=f"cannot decode {what}: {exc}") from exc

    def _decode_upload_mask(upload: UploadFile, resolution: int,
                            what: str = "mask") -> torch.Tensor:
        try:
            return decode_mask_png(upload.file.read(), resolution)
        except Exception as exc:
            raise HTTPException(status_code=400,
                                detail=f"cannot decode {what}: {exc}") from exc

    @app.get("/healthz", response_model=HealthResponse)
    def healthz():
        return HealthResponse(
            status="ok",
            num_keypoints=bundle.arch.num_keypoints,
            internal_resolution=bundle.arch.internal_resolution,
            checkpoint_step=ckpt_step,
        )

    @app.post("/sessions", response_model=SessionCreated)
    def create_session(exemplar: UploadFile = File(...),
                       mask: Optional[UploadFile] = File(None),
                       resolution: Optional[int] = Form(None)):
        image = _decode_upload_image(exemplar, "exemplar")
        if resolution is not None:
            if resolution < 8:
                raise HTTPException(status_code=400,
                                    detail="resolution must be >= 8")
            image = torch.nn.functional.interpolate(
                image[None], size=(resolution, resolution), mode="bilinear",
                align_corners=True)[0]
        h, w = image.shape[-2:]
        if mask is not None:
            mask_tensor = _decode_upload_mask(mask, w)
        else:
            try:
                mask_tensor = extract_mask(image, segmenter_url=segmenter_url)
            except MaskBackendError as exc:
                raise HTTPException(status_code=503, detail=str(exc)) from exc
        session_id = store.create(encode_image_png(image),
                                  encode_mask_png(mask_tensor))
        return SessionCreated(id=session_id,
                              mask=_b64(encode_mask_png(mask_tensor)),
                              width=w, height=h)

    @app.get("/sessions/{session_id}", response_model=SessionInfo)
    def get_session(session_id: str):
        view = _view(session_id)
        image = decode_image_png(view.exemplar)
        h, w = image.shape[-2:]
        return SessionInfo(
            id=view.id, width=w, height=h,
            history_length=len(view.history),
            exemplar=_b64(view.exemplar), mask=_b64(view.mask),
            created=view.created, updated=view.updated,
        )

    @app.post("/sessions/{session_id}/mask", response_model=MaskResponse)
    def set_mask(session_id: str, mask: Optional[UploadFile] = File(None),
                 prompt: Optional[str] = Form(None)):
        view = _view(session_id)
        exemplar = decode_image_png(view.exemplar)
        if mask is not None:
            mask_tensor = _decode_upload_mask(mask, exemplar.shape[-1])
        else:
            prompt_data = None
            if prompt:
                try:
                    prompt_data = json.loads(prompt)
                except json.JSONDecodeError as exc:
                    raise HTTPException(status_code=400,
                                        detail=f"prompt is not JSON: {exc}")
            if segmenter_url is None and prompt_data is not None:
                raise HTTPException(
                    status_code=503,
                    detail="no segmenter configured; running in degraded "
                           "mode — upload a mask file instead")
            try:
                mask_tensor = extract_mask(exemplar, segmenter_url=segmenter_url,
                                           prompt=prompt_data)
            except MaskBackendError as exc:
                raise HTTPException(status_code=503, detail=str(exc)) from exc
        encoded = encode_mask_png(mask_tensor)
        try:
            store.set_mask(session_id, encoded)
        except SessionNotFound as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc
        return MaskResponse(mask=_b64(encoded))

    @app.post("/sessions/{session_id}/manipulate",
              response_model=ManipulateResponse)
    def run_manipulation(session_id: str, mask: UploadFile = File(...),
                         return_diagnostics: bool = Form(False),
                         resolution: Optional[int] = Form(None),
                         diffusion_refinement: bool = Form(False)):
        if diffusion_refinement:
            raise HTTPException(
                status_code=501,
                detail="diffusion refinement is a reserved option and is "
                       "not supported by this build")
        lock = store.lock(session_id)
        with lock:
            view = _view(session_id)
            exemplar = decode_image_png(view.exemplar)
            h, w = exemplar.shape[-2:]
            if resolution is not None and resolution != w:
                raise HTTPException(
                    status_code=400,
                    detail=f"session works at {w}x{h}; resolution option "
                           f"{resolution} does not match")
            exemplar_mask = decode_mask_png(view.mask, w)
            edited = _decode_upload_mask(mask, w, "edited mask")

            result = manipulate(bundle, exemplar, exemplar_mask, edited,
                                diagnostics=return_diagnostics)
            output_png = encode_image_png(result["output_image"])
            step = store.append_step(session_id, encode_mask_png(edited),
                                     output_png)

        diagnostics = None
        if return_diagnostics:
            diag = result["diagnostics"]
            diagnostics = DiagnosticsPayload(
                source_keypoints=diag["source_keypoints"].tolist(),
                driver_keypoints=diag["driver_keypoints"].tolist(),
                attention=_attention_previews(diag["attention"]),
                fused_field=_field_preview(diag["fused_field"]),
                degenerate=diag["degenerate"].tolist(),
            )
        return ManipulateResponse(
            image=_b64(output_png),
            mask=_b64(encode_mask_png(result["output_mask"])),
            step=step, width=w, height=h,
            binarized_input=result["binarized_input"],
            diagnostics=diagnostics,
        )

    @app.post("/sessions/{session_id}/undo", response_model=UndoResponse)
    def undo(session_id: str):
        lock = store.lock(session_id)
        with lock:
            try:
                view = store.undo(session_id)
            except SessionNotFound as exc:
                raise HTTPException(status_code=404, detail=str(exc)) from exc
            except NothingToUndo as exc:
                raise HTTPException(status_code=409, detail=str(exc)) from exc
        return UndoResponse(history_length=len(view.history),
                            exemplar=_b64(view.exemplar),
                            mask=_b64(view.mask))

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True),
                  name="ui")

    return app
