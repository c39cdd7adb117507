"""Request/response bodies for the editing service."""

from __future__ import annotations

from typing import List, Optional

from pydantic import BaseModel, Field


class SessionCreated(BaseModel):
    id: str
    mask: str = Field(description="auto/base exemplar mask, base64 PNG")
    width: int
    height: int


class SessionInfo(BaseModel):
    id: str
    width: int
    height: int
    history_length: int
    exemplar: str = Field(description="current working exemplar, base64 PNG")
    mask: str = Field(description="current exemplar mask, base64 PNG")
    created: float
    updated: float


class MaskResponse(BaseModel):
    mask: str


class DiagnosticsPayload(BaseModel):
    source_keypoints: List[List[float]]
    driver_keypoints: List[List[float]]
    attention: List[str] = Field(description="K+1 heat previews, base64 PNGs")
    fused_field: str = Field(description="warp-field preview, base64 PNG")
    degenerate: List[bool]


class ManipulateResponse(BaseModel):
    image: str = Field(description="manipulated exemplar, base64 PNG")
    mask: str = Field(description="estimated edited-region mask, base64 PNG")
    step: int
    width: int
    height: int
    binarized_input: bool
    diagnostics: Optional[DiagnosticsPayload] = None


class UndoResponse(BaseModel):
    history_length: int
    exemplar: str
    mask: str


class HealthResponse(BaseModel):
    status: str
    num_keypoints: int
    internal_resolution: int
    checkpoint_step: int
