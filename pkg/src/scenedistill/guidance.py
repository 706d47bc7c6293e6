"""Pluggable noise-prediction providers for score distillation.

A provider predicts the noise inside a noised render given a text condition
and declares the forward-noising schedule it assumes. The analytic mock
inverts the forward process against a configured target image (so
distillation provably pulls renders toward it); the remote client speaks
the HTTP wire protocol of a guidance service.
"""

from __future__ import annotations

import base64
import hashlib
import json
import time
from dataclasses import dataclass, field as dc_field

import httpx
import numpy as np

from .render import Camera, ViewPromptWeights, view_prompt_weights

DEFAULT_GUIDANCE_SCALE = 20.0
T_RANGE = (0.02, 0.98)

PROMPT_PREFIX = "a photo of"
PROMPT_SUFFIX = ", 8K, HD"

ROLES = ("human", "human_head", "object", "interaction")


class GuidanceError(Exception):
    pass


class GuidanceProtocolError(GuidanceError):
    """Shape or schedule disagreement with the remote service."""


class GuidanceTransportError(GuidanceError):
    """Transport failure that persisted through the retry budget."""


@dataclass(frozen=True)
class TextCondition:
    prompt: str
    view_weights: ViewPromptWeights
    role: str
    guidance_scale: float = DEFAULT_GUIDANCE_SCALE

    def __post_init__(self):
        if not self.prompt:
            raise GuidanceError("prompt must be non-empty")
        if self.role not in ROLES:
            raise GuidanceError(f"unknown condition role {self.role!r}")
        if not np.isfinite(self.guidance_scale) or self.guidance_scale <= 0:
            raise GuidanceError("guidance_scale must be finite and > 0")


class NoiseSchedule:
    """Monotone-decreasing alpha_bar over t in (0, 1)."""

    def __init__(self, name: str, alpha_bar_fn):
        self.name = name
        self._fn = alpha_bar_fn

    def alpha_bar(self, t: float) -> float:
        if not 0.0 < t < 1.0:
            raise GuidanceError(f"t={t} outside (0, 1)")
        ab = float(self._fn(t))
        if not 0.0 < ab < 1.0:
            raise GuidanceError(f"schedule {self.name} produced alpha_bar={ab}")
        return ab


def linear_schedule() -> NoiseSchedule:
    return NoiseSchedule("linear", lambda t: 1.0 - t)


def ddpm_linear_schedule(n_steps: int = 1000, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> NoiseSchedule:
    """Discrete DDPM alpha_bar table with nearest-index lookup for continuous t."""
    betas = np.linspace(beta_start, beta_end, n_steps)
    table = np.cumprod(1.0 - betas)
    name = f"ddpm-linear-{n_steps}"
    return NoiseSchedule(name, lambda t: table[int(round(t * (n_steps - 1)))])


def add_noise(x, t: float, epsilon, schedule: NoiseSchedule):
    """Forward process: x_t = sqrt(ab(t)) * x + sqrt(1 - ab(t)) * eps."""
    if tuple(x.shape) != tuple(epsilon.shape):
        raise GuidanceError(f"shape mismatch {tuple(x.shape)} vs {tuple(epsilon.shape)}")
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * x + np.sqrt(1.0 - ab) * epsilon


def build_condition(description: str, role: str, camera: Camera,
                    guidance_scale: float = DEFAULT_GUIDANCE_SCALE) -> TextCondition:
    """Assemble the full prompt for a render: prefix, quality suffix, view weights."""
    core = f"the head of {description}" if role == "human_head" else description
    return TextCondition(prompt=f"{PROMPT_PREFIX} {core}{PROMPT_SUFFIX}",
                         view_weights=view_prompt_weights(camera), role=role,
                         guidance_scale=guidance_scale)


def flat_prompt(condition: TextCondition) -> str:
    """Prompt with the argmax view word appended, for providers that cannot
    interpolate view embeddings."""
    return f"{condition.prompt}, {condition.view_weights.argmax_view()} view"


def _resize_nearest(img: np.ndarray, h: int, w: int) -> np.ndarray:
    ys = (np.arange(h) * img.shape[0] / h).astype(int)
    xs = (np.arange(w) * img.shape[1] / w).astype(int)
    return img[ys][:, xs]


def hash_embedding(payload: bytes, dim: int) -> np.ndarray:
    """Deterministic unit vector derived from a byte payload."""
    seed = int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")
    v = np.random.default_rng(seed).standard_normal(dim)
    return v / np.linalg.norm(v)


class MockGuidance:
    """Analytic provider: knows the clean image each role should converge to.

    predict_noise returns the exact noise under the hypothesis that the clean
    image is the configured target, so the distillation residual is
    proportional to (render - target) and vanishes at convergence.
    """

    def __init__(self, targets: dict[str, np.ndarray], embed_dim: int = 64,
                 schedule: NoiseSchedule | None = None):
        self.targets = {k: np.asarray(v, dtype=np.float64) for k, v in targets.items()}
        self.embed_dim = embed_dim
        self._schedule = schedule or linear_schedule()

    def schedule(self) -> NoiseSchedule:
        return self._schedule

    def target_for(self, role: str, shape) -> np.ndarray:
        if role not in self.targets:
            raise GuidanceError(f"mock provider has no target for role {role!r}")
        tgt = self.targets[role]
        if tgt.shape != tuple(shape):
            tgt = _resize_nearest(tgt, shape[0], shape[1])
        return tgt

    def predict_noise(self, x_t: np.ndarray, t: float,
                      condition: TextCondition) -> np.ndarray:
        target = self.target_for(condition.role, x_t.shape)
        ab = self._schedule.alpha_bar(t)
        return (x_t - np.sqrt(ab) * target) / np.sqrt(1.0 - ab)

    def embed_text(self, prompt: str) -> np.ndarray:
        return hash_embedding(b"text:" + prompt.encode("utf-8"), self.embed_dim)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        feats = _resize_nearest(np.asarray(image, dtype=np.float64), 8, 8).ravel()
        proj = np.random.default_rng(1905).standard_normal((self.embed_dim, feats.size))
        v = proj @ feats
        n = np.linalg.norm(v)
        if n < 1e-12:
            raise GuidanceError("degenerate image embedding")
        return v / n


def encode_f32(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def decode_f32(b64: str, shape) -> np.ndarray:
    raw = base64.b64decode(b64)
    arr = np.frombuffer(raw, dtype="<f4")
    expect = int(np.prod(shape))
    if arr.size != expect:
        raise GuidanceProtocolError(f"payload holds {arr.size} floats, expected {expect}")
    return arr.reshape(shape).astype(np.float64)


def noise_request_body(request_id: str, image: np.ndarray, t: float,
                       condition: TextCondition, negative_prompt: str = "") -> dict:
    h, w, c = image.shape
    return {
        "request_id": request_id,
        "width": w,
        "height": h,
        "channels": c,
        "dtype": "f32le",
        "image_b64": encode_f32(image),
        "t": t,
        "prompt": condition.prompt,
        "negative_prompt": negative_prompt,
        "guidance_scale": condition.guidance_scale,
        "view_weights": condition.view_weights.as_dict(),
    }


class RemoteGuidance:
    """HTTP client for the guidance wire protocol.

    Classifier-free guidance happens service-side at the requested scale; the
    response declares the service's alpha_bar at t, which must agree with the
    client-side schedule (protocol error otherwise). Transport failures are
    retried with exponential backoff before giving up.
    """

    def __init__(self, base_url: str, schedule: NoiseSchedule | None = None,
                 embed_dim: int | None = None, retries: int = 3,
                 backoff: float = 0.25, timeout: float = 30.0, transport=None,
                 schedule_tol: float = 1e-5):
        self.base_url = base_url.rstrip("/")
        self._schedule = schedule or ddpm_linear_schedule()
        self.retries = retries
        self.backoff = backoff
        self.schedule_tol = schedule_tol
        self.embed_dim = embed_dim
        self._client = httpx.Client(base_url=self.base_url, timeout=timeout,
                                    transport=transport)
        self._counter = 0

    def close(self) -> None:
        self._client.close()

    def schedule(self) -> NoiseSchedule:
        return self._schedule

    def _post(self, path: str, body: dict) -> dict:
        delay = self.backoff
        last_exc: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._client.post(path, json=body)
            except httpx.TransportError as exc:
                last_exc = exc
                if attempt < self.retries:
                    time.sleep(delay)
                    delay *= 2
                continue
            if resp.status_code != 200:
                raise GuidanceProtocolError(
                    f"{path} returned {resp.status_code}: {resp.text[:200]}")
            return resp.json()
        raise GuidanceTransportError(f"{path} failed after {self.retries + 1} attempts: "
                                     f"{last_exc}")

    def health(self) -> dict:
        try:
            resp = self._client.get("/v1/health")
        except httpx.TransportError as exc:
            raise GuidanceTransportError(str(exc)) from exc
        return resp.json()

    def predict_noise(self, x_t: np.ndarray, t: float,
                      condition: TextCondition) -> np.ndarray:
        self._counter += 1
        rid = f"req-{self._counter}"
        body = noise_request_body(rid, x_t, t, condition)
        out = self._post("/v1/noise_prediction", body)
        if out.get("request_id") != rid:
            raise GuidanceProtocolError("response request_id does not match")
        sched = out.get("schedule", {})
        ab_remote = sched.get("alpha_bar_at_t")
        ab_local = self._schedule.alpha_bar(t)
        if ab_remote is None or abs(ab_remote - ab_local) > self.schedule_tol:
            raise GuidanceProtocolError(
                f"schedule mismatch: service alpha_bar={ab_remote}, "
                f"client {self._schedule.name} gives {ab_local}")
        noise = decode_f32(out["noise_b64"], x_t.shape)
        return noise

    def embed_text(self, prompt: str) -> np.ndarray:
        out = self._post("/v1/embed_text", {"text": prompt})
        return decode_f32(out["vector_b64"], (out["dim"],))

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        h, w, c = image.shape
        body = {"image_b64": encode_f32(image), "width": w, "height": h,
                "channels": c, "dtype": "f32le"}
        out = self._post("/v1/embed_image", body)
        return decode_f32(out["vector_b64"], (out["dim"],))


def save_wire_fixture(path, request: dict, response: dict) -> None:
    with open(path, "w") as fh:
        json.dump({"request": request, "response": response}, fh, indent=2)


def load_wire_fixture(path) -> tuple[dict, dict]:
    with open(path) as fh:
        blob = json.load(fh)
    return blob["request"], blob["response"]
