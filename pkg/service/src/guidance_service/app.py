"""FastAPI application implementing the guidance wire protocol.

Classifier-free guidance mixes the conditional and unconditional predictions
server-side at the requested scale; responses declare the discrete-schedule
alpha_bar actually used so clients can check agreement. Requests beyond the
configured in-flight limit are rejected with 503.
"""

from __future__ import annotations

import argparse
import threading

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from . import __version__
from .backend import ProceduralBackend, ServiceConfig
from .protocol import (EmbedImageRequest, EmbedResponse, EmbedTextRequest,
                       HealthResponse, NoisePredictionRequest,
                       NoisePredictionResponse, ScheduleInfo, decode_f32,
                       encode_f32)


class _InFlightGate:
    """Bounded concurrency; non-blocking acquire so overload returns 503."""

    def __init__(self, limit: int):
        self._sem = threading.Semaphore(limit)

    def try_acquire(self) -> bool:
        return self._sem.acquire(blocking=False)

    def release(self) -> None:
        self._sem.release()


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    config = config or ServiceConfig()
    backend = ProceduralBackend(config)
    gate = _InFlightGate(config.max_in_flight)
    app = FastAPI(title="guidance-service", version=__version__)

    @app.exception_handler(RequestValidationError)
    async def schema_error(request: Request, exc: RequestValidationError):
        # protocol schema violations are 400s, not FastAPI's default 422
        return _error(400, f"schema: {exc.errors()[:3]}")

    @app.get("/v1/health", response_model=HealthResponse)
    def health():
        return HealthResponse(version=__version__, denoiser=config.denoiser_model,
                              embedder=config.embedder_model, device=config.device)

    @app.post("/v1/noise_prediction", response_model=NoisePredictionResponse)
    def noise_prediction(req: NoisePredictionRequest):
        if not gate.try_acquire():
            return _error(503, "model busy: in-flight limit reached")
        try:
            if req.dtype != "f32le":
                return _error(422, f"unsupported dtype {req.dtype!r}")
            if not 0.0 < req.t < 1.0:
                return _error(422, f"t={req.t} outside (0, 1)")
            count = req.width * req.height * req.channels
            try:
                flat = decode_f32(req.image_b64, count)
            except ValueError as exc:
                return _error(422, str(exc))
            x_t = flat.reshape(req.height, req.width, req.channels)
            scale = (req.guidance_scale if req.guidance_scale is not None
                     else config.cfg_default)
            noise, alpha_bar = backend.predict_noise(
                x_t, req.t, req.prompt, req.negative_prompt, scale,
                req.view_weights)
            return NoisePredictionResponse(
                request_id=req.request_id,
                noise_b64=encode_f32(noise),
                schedule=ScheduleInfo(name=backend.schedule.name,
                                      alpha_bar_at_t=alpha_bar))
        finally:
            gate.release()

    @app.post("/v1/embed_text", response_model=EmbedResponse)
    def embed_text(req: EmbedTextRequest):
        if not req.text:
            return _error(422, "text must be non-empty")
        vec = backend.embed_text(req.text)
        return EmbedResponse(dim=len(vec), vector_b64=encode_f32(vec))

    @app.post("/v1/embed_image", response_model=EmbedResponse)
    def embed_image(req: EmbedImageRequest):
        if req.dtype != "f32le":
            return _error(422, f"unsupported dtype {req.dtype!r}")
        count = req.width * req.height * req.channels
        try:
            flat = decode_f32(req.image_b64, count)
        except ValueError as exc:
            return _error(422, str(exc))
        if req.channels != 3:
            return _error(422, "embed_image expects 3-channel images")
        image = flat.reshape(req.height, req.width, req.channels)
        vec = backend.embed_image(image)
        return EmbedResponse(dim=len(vec), vector_b64=encode_f32(vec))

    return app


def main():
    parser = argparse.ArgumentParser(description="Run the guidance service.")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8040)
    parser.add_argument("--max-in-flight", type=int, default=8)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--embed-dim", type=int, default=64)
    args = parser.parse_args()
    config = ServiceConfig(max_in_flight=args.max_in_flight, device=args.device,
                           embed_dim=args.embed_dim)
    import uvicorn
    uvicorn.run(create_app(config), host=args.host, port=args.port,
                log_level="warning")


if __name__ == "__main__":
    main()
