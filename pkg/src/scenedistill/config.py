"""Run configuration: a strict, human-editable YAML tree.

Unknown keys are rejected with their full path so experiment-sweep typos
fail loudly. parse -> serialize -> parse is the identity.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from .engine import EngineParams, Prompts
from .guidance import MockGuidance, RemoteGuidance
from .images import read_ppm
from .losses import Schedule

ENV_GUIDANCE_URL = "IF_GUIDANCE_URL"


class ConfigError(ValueError):
    pass


def _check_keys(tree: dict, allowed, path: str) -> None:
    if not isinstance(tree, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    unknown = set(tree) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s) at {path or 'top level'}: "
                          f"{', '.join(sorted(unknown))}")


def _pow2_le(value: int, limit: int, what: str) -> int:
    value = int(value)
    if value < 1 or value > limit or value & (value - 1):
        raise ConfigError(f"{what} must be a power of two <= {limit}, got {value}")
    return value


@dataclass
class CodebookSection:
    path: str
    anchor_dir: str
    k: int = 7
    selector: str | None = None  # external command: gets k pose ids, prints an index

    @classmethod
    def from_dict(cls, tree: dict) -> "CodebookSection":
        _check_keys(tree, {"path", "anchor_dir", "k", "selector"}, "codebook")
        if "path" not in tree or "anchor_dir" not in tree:
            raise ConfigError("codebook section needs both 'path' and 'anchor_dir'")
        return cls(path=str(tree["path"]), anchor_dir=str(tree["anchor_dir"]),
                   k=int(tree.get("k", 7)), selector=tree.get("selector"))

    def to_dict(self) -> dict:
        out = {"path": self.path, "anchor_dir": self.anchor_dir, "k": self.k}
        if self.selector is not None:
            out["selector"] = self.selector
        return out


@dataclass
class RunConfig:
    prompts: Prompts
    anchor_path: str
    provider_kind: str                   # "mock" | "remote"
    provider_opts: dict
    output_dir: str = "out"
    seed: int = 0
    iterations: int = 10_000
    grid_resolution: int = 64
    checkpoint_every: int = 1000
    turntable_frames: int = 8
    codebook: CodebookSection | None = None
    lambda3: float = 0.1
    eta: float | None = None
    engine_overrides: dict = field(default_factory=dict)

    _ENGINE_KEYS = {
        "resolution", "samples_per_ray", "fov_y", "head_fraction",
        "head_radius_factor", "geo_samples_in", "geo_samples_out", "lr",
        "guidance_scale", "enable_head_sds", "enable_interaction_sds",
        "background",
    }

    @classmethod
    def from_dict(cls, tree: dict) -> "RunConfig":
        _check_keys(tree, {"prompts", "anchor", "provider", "output_dir", "seed",
                           "iterations", "grid_resolution", "checkpoint_every",
                           "turntable_frames", "codebook", "schedule", "engine"}, "")
        for req in ("prompts", "anchor", "provider"):
            if req not in tree:
                raise ConfigError(f"missing required config section '{req}'")

        pr = tree["prompts"]
        _check_keys(pr, {"human", "object", "interaction"}, "prompts")
        try:
            prompts = Prompts(human=str(pr["human"]), object=str(pr["object"]),
                              interaction=str(pr["interaction"]))
        except KeyError as exc:
            raise ConfigError(f"prompts section missing {exc}") from exc

        prov = tree["provider"]
        _check_keys(prov, {"mock", "remote"}, "provider")
        if len(prov) != 1:
            raise ConfigError("exactly one provider must be configured")
        kind = next(iter(prov))
        opts = dict(prov[kind] or {})
        if kind == "mock":
            _check_keys(opts, {"targets", "embed_dim"}, "provider.mock")
        else:
            _check_keys(opts, {"url", "schedule_steps"}, "provider.remote")

        sched = tree.get("schedule", {}) or {}
        _check_keys(sched, {"lambda3", "eta"}, "schedule")

        eng = dict(tree.get("engine", {}) or {})
        _check_keys(eng, cls._ENGINE_KEYS, "engine")
        if "resolution" in eng:
            eng["resolution"] = _pow2_le(eng["resolution"], 64, "engine.resolution")

        cb = None
        if "codebook" in tree and tree["codebook"] is not None:
            cb = CodebookSection.from_dict(tree["codebook"])

        return cls(
            prompts=prompts,
            anchor_path=str(tree["anchor"]),
            provider_kind=kind,
            provider_opts=opts,
            output_dir=str(tree.get("output_dir", "out")),
            seed=int(tree.get("seed", 0)),
            iterations=int(tree.get("iterations", 10_000)),
            grid_resolution=_pow2_le(tree.get("grid_resolution", 64), 64,
                                     "grid_resolution"),
            checkpoint_every=int(tree.get("checkpoint_every", 1000)),
            turntable_frames=int(tree.get("turntable_frames", 8)),
            codebook=cb,
            lambda3=float(sched.get("lambda3", 0.1)),
            eta=sched.get("eta"),
            engine_overrides=eng,
        )

    def to_dict(self) -> dict:
        tree = {
            "prompts": {"human": self.prompts.human, "object": self.prompts.object,
                        "interaction": self.prompts.interaction},
            "anchor": self.anchor_path,
            "provider": {self.provider_kind: self.provider_opts},
            "output_dir": self.output_dir,
            "seed": self.seed,
            "iterations": self.iterations,
            "grid_resolution": self.grid_resolution,
            "checkpoint_every": self.checkpoint_every,
            "turntable_frames": self.turntable_frames,
            "schedule": {"lambda3": self.lambda3,
                         **({"eta": self.eta} if self.eta is not None else {})},
        }
        if self.codebook is not None:
            tree["codebook"] = self.codebook.to_dict()
        if self.engine_overrides:
            tree["engine"] = dict(self.engine_overrides)
        return tree

    def engine_params(self) -> EngineParams:
        params = EngineParams(eta=self.eta)
        for key, value in self.engine_overrides.items():
            if key == "resolution":
                params.resolution = (int(value), int(value))
            else:
                setattr(params, key, value)
        return params

    def schedule(self, voxel_size: float) -> Schedule:
        eta = self.eta if self.eta is not None else 2.0 * voxel_size
        return Schedule(total_iters=self.iterations, lambda3=self.lambda3, eta=eta)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        tree = yaml.safe_load(fh)
    if not isinstance(tree, dict):
        raise ConfigError(f"{path}: config must be a YAML mapping")
    return RunConfig.from_dict(tree)


def save_config(config: RunConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)


def _load_target(spec: str, base_dir: str) -> np.ndarray:
    """A target image is either 'solid:r,g,b' or a PPM path (relative to the config)."""
    if spec.startswith("solid:"):
        parts = [float(x) for x in spec[len("solid:"):].split(",")]
        if len(parts) != 3 or not all(0.0 <= v <= 1.0 for v in parts):
            raise ConfigError(f"bad solid color spec {spec!r}")
        return np.broadcast_to(np.array(parts), (64, 64, 3)).copy()
    path = spec if os.path.isabs(spec) else os.path.join(base_dir, spec)
    if not os.path.exists(path):
        raise ConfigError(f"target image not found: {path}")
    return read_ppm(path)


def build_provider(config: RunConfig, base_dir: str = "."):
    """Instantiate the configured guidance provider.

    The IF_GUIDANCE_URL environment variable overrides the remote endpoint.
    Mock targets for role human_head fall back to the human target.
    """
    if config.provider_kind == "mock":
        raw = config.provider_opts.get("targets", {})
        known = {"human", "human_head", "object", "interaction"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown mock target role(s): {sorted(unknown)}")
        targets = {role: _load_target(spec, base_dir) for role, spec in raw.items()}
        if "human" in targets and "human_head" not in targets:
            targets["human_head"] = targets["human"]
        return MockGuidance(targets, embed_dim=int(config.provider_opts.get("embed_dim", 64)))
    url = os.environ.get(ENV_GUIDANCE_URL) or config.provider_opts.get("url")
    if not url:
        raise ConfigError("remote provider needs a url (or IF_GUIDANCE_URL)")
    return RemoteGuidance(url)
