"""Model backends behind the service endpoints.

The procedural backend is fully deterministic: each prompt maps to a smooth
pseudo-image ("what the model would draw"), noise prediction inverts the
forward process against it, and embeddings are a fixed random projection of
downsampled pixels. It stands in for a pretrained denoiser/embedder pair so
the protocol, CFG mixing, and determinism contracts are testable without
model weights; a real backend implements the same three methods.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .schedule import DdpmSchedule

PROJECTION_SEED = 1905
FEATURE_SIDE = 8


@dataclass
class ServiceConfig:
    denoiser_model: str = "procedural-denoiser-v1"
    embedder_model: str = "procedural-embedder-v1"
    device: str = "cpu"
    max_in_flight: int = 8
    cfg_default: float = 20.0
    embed_dim: int = 64
    schedule_steps: int = 1000


def _prompt_seed(prompt: str) -> int:
    digest = hashlib.blake2b(prompt.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _block_mean(img: np.ndarray, side: int) -> np.ndarray:
    h, w, c = img.shape
    ys = np.linspace(0, h, side + 1).astype(int)
    xs = np.linspace(0, w, side + 1).astype(int)
    out = np.empty((side, side, c))
    for i in range(side):
        for j in range(side):
            out[i, j] = img[ys[i]:max(ys[i + 1], ys[i] + 1),
                            xs[j]:max(xs[j + 1], xs[j] + 1)].mean(axis=(0, 1))
    return out


class ProceduralBackend:
    """Deterministic denoiser + embedder driven by prompt hashes."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.schedule = DdpmSchedule(config.schedule_steps)
        rng = np.random.default_rng(PROJECTION_SEED)
        self._projection = rng.standard_normal(
            (config.embed_dim, FEATURE_SIDE * FEATURE_SIDE * 3))

    def target_image(self, prompt: str, height: int, width: int) -> np.ndarray:
        """Smooth pseudo-image for a prompt: low-res noise, bilinear upsample."""
        rng = np.random.default_rng(_prompt_seed(prompt))
        coarse = rng.uniform(0.0, 1.0, size=(8, 8, 3))
        ys = np.linspace(0, 7, height)
        xs = np.linspace(0, 7, width)
        y0 = np.floor(ys).astype(int)
        x0 = np.floor(xs).astype(int)
        y1 = np.minimum(y0 + 1, 7)
        x1 = np.minimum(x0 + 1, 7)
        fy = (ys - y0)[:, None, None]
        fx = (xs - x0)[None, :, None]
        img = ((1 - fy) * (1 - fx) * coarse[y0][:, x0]
               + (1 - fy) * fx * coarse[y0][:, x1]
               + fy * (1 - fx) * coarse[y1][:, x0]
               + fy * fx * coarse[y1][:, x1])
        return img

    def _conditional_target(self, prompt: str, view_weights: dict | None,
                            height: int, width: int) -> np.ndarray:
        """View conditioning by weighted interpolation over suffixed prompts."""
        if not view_weights:
            return self.target_image(prompt, height, width)
        img = np.zeros((height, width, 3))
        total = 0.0
        for view, weight in view_weights.items():
            if weight <= 0.0:
                continue
            img += weight * self.target_image(f"{prompt}, {view} view",
                                              height, width)
            total += weight
        if total <= 0.0:
            return self.target_image(prompt, height, width)
        return img / total

    def predict_noise(self, x_t: np.ndarray, t: float, prompt: str,
                      negative_prompt: str, guidance_scale: float,
                      view_weights: dict | None) -> tuple[np.ndarray, float]:
        """Classifier-free guided prediction; returns (noise, alpha_bar used)."""
        ab = self.schedule.alpha_bar(t)
        h, w = x_t.shape[:2]
        cond_target = self._conditional_target(prompt, view_weights, h, w)
        if negative_prompt:
            uncond_target = self.target_image(negative_prompt, h, w)
        else:
            uncond_target = np.full_like(x_t, 0.5)  # the "dataset mean" image

        def eps_for(target):
            return (x_t - np.sqrt(ab) * target) / np.sqrt(1.0 - ab)

        eps_uncond = eps_for(uncond_target)
        eps_cond = eps_for(cond_target)
        mixed = eps_uncond + guidance_scale * (eps_cond - eps_uncond)
        return mixed, ab

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        feats = _block_mean(image, FEATURE_SIDE).ravel()
        vec = self._projection @ feats
        norm = np.linalg.norm(vec)
        if norm < 1e-12:
            vec = self._projection[:, 0].copy()
            norm = np.linalg.norm(vec)
        return vec / norm

    def embed_text(self, text: str) -> np.ndarray:
        return self.embed_image(self.target_image(text, 64, 64))
