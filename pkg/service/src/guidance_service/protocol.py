"""Wire protocol models and tensor codecs.

All tensors travel as base64-encoded little-endian f32, row-major,
channel-last. Requests are validated structurally by pydantic (schema
errors -> 400) and semantically by the handlers (shape errors -> 422).
"""

from __future__ import annotations

import base64

import numpy as np
from pydantic import BaseModel, Field


def encode_f32(arr: np.ndarray) -> str:
    return base64.b64encode(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def decode_f32(b64: str, count: int) -> np.ndarray:
    raw = base64.b64decode(b64)
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.size != count:
        raise ValueError(f"payload holds {arr.size} f32 values, expected {count}")
    return arr.astype(np.float64)


class NoisePredictionRequest(BaseModel):
    request_id: str
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    channels: int = Field(gt=0)
    dtype: str
    image_b64: str
    t: float
    prompt: str
    negative_prompt: str = ""
    guidance_scale: float | None = None
    view_weights: dict[str, float] | None = None


class ScheduleInfo(BaseModel):
    name: str
    alpha_bar_at_t: float


class NoisePredictionResponse(BaseModel):
    request_id: str
    noise_b64: str
    schedule: ScheduleInfo


class EmbedTextRequest(BaseModel):
    text: str


class EmbedImageRequest(BaseModel):
    image_b64: str
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    channels: int = Field(gt=0)
    dtype: str = "f32le"


class EmbedResponse(BaseModel):
    dim: int
    vector_b64: str


class HealthResponse(BaseModel):
    version: str
    denoiser: str
    embedder: str
    device: str
