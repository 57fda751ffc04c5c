"""
Run configuration: one JSON document holding every module's settings.

Unknown keys are rejected so that typos surface as configuration errors.
The resolved form (all defaults filled in) is what commands print, and
feeding it back reproduces a run.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ffnseg.errors import ConfigError
from ffnseg.inference import MovementPolicy, SeedConfig
from ffnseg.synth import SynthConfig
from ffnseg.training import TrainConfig, example_dims_for


@dataclass
class RunConfig:
    """
    Attributes
    ----------
    seed : int
        Master seed. Offsets derive the synthetic world, model init and
        example sampling seeds.
    fov : (int, int, int)
        Network field of view (x, y, z); odd sizes.
    channels : int
        Feature maps per convolution.
    modules : int or None
        Residual modules; None picks the smallest count covering the FoV.
    delta : (int, int, int)
        FoV movement step.
    t_move : float
        Movement and final segmentation threshold.
    example_dims : (int, int, int) or None
        Training example size; must equal ``fov + 2 * delta``.
    lr, batch_size, max_steps, checkpoint_every, patience
        SGD settings, checkpoint cadence and early-stop patience.
    n_train, n_eval : int
        Synthetic worlds generated for training and held-out evaluation.
    synth : dict
        Overrides for :class:`ffnseg.synth.SynthConfig` (``seed`` excluded).
    seeds : dict
        Overrides for :class:`ffnseg.inference.SeedConfig`.
    min_object_size : int
        Objects smaller than this are discarded during inference.
    connected_objects : bool
        Keep only the part of each object joined to its seed.
    """

    seed: int = 0
    fov: tuple[int, int, int] = (17, 17, 9)
    channels: int = 8
    modules: int | None = None
    delta: tuple[int, int, int] = (4, 4, 2)
    t_move: float = 0.9
    example_dims: tuple[int, int, int] | None = None
    lr: float = 1e-5
    batch_size: int = 4
    max_steps: int = 20000
    checkpoint_every: int = 1000
    patience: int = 3
    n_train: int = 10
    n_eval: int = 5
    synth: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    min_object_size: int = 0
    connected_objects: bool = True

    def __post_init__(self):
        for name in ("fov", "delta", "example_dims"):
            val = getattr(self, name)
            if val is None:
                continue
            if not isinstance(val, (list, tuple)) or len(val) != 3:
                raise ConfigError(f"{name}: expected three integers, got {val!r}")
            setattr(self, name, tuple(int(v) for v in val))
        if any(f % 2 == 0 or f < 1 for f in self.fov):
            raise ConfigError(f"fov: sizes must be odd and positive, got {self.fov}")
        want = example_dims_for(self.fov, self.delta)
        if self.example_dims is None:
            self.example_dims = want
        elif self.example_dims != want:
            raise ConfigError(
                f"example_dims: {self.example_dims} must equal fov + 2*delta = {want}"
            )
        if "seed" in self.synth:
            raise ConfigError("synth.seed: world seeds derive from the top-level seed")
        try:
            self.policy
            self.train_config()
            self.synth_config(0)
            self.seed_config
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.n_train < 1 or self.n_eval < 0 or self.min_object_size < 0:
            raise ConfigError("n_train must be >= 1; n_eval, min_object_size >= 0")

    # --- derived module configs ---

    @property
    def policy(self) -> MovementPolicy:
        return MovementPolicy(self.delta, self.t_move)

    @property
    def seed_config(self) -> SeedConfig:
        return SeedConfig(**self.seeds)

    def synth_config(self, index: int) -> SynthConfig:
        """World ``index``; held-out worlds use indices from ``n_train`` on."""
        return SynthConfig(**{**self.synth, "seed": self.seed * 100003 + index})

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            fov=self.fov, channels=self.channels, modules=self.modules, delta=self.delta,
            t_move=self.t_move, lr=self.lr, batch_size=self.batch_size,
            max_steps=self.max_steps, checkpoint_every=self.checkpoint_every,
            patience=self.patience, example_dims=self.example_dims,
            model_seed=self.seed, data_seed=self.seed + 1,
        )

    # --- serialization ---

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("fov", "delta", "example_dims"):
            d[k] = list(d[k])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        """Read a JSON config. I/O failures propagate as OSError."""
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def merged(self, **overrides) -> "RunConfig":
        """Copy with the non-None ``overrides`` applied (validated again)."""
        data = self.to_dict()
        data.update({k: v for k, v in overrides.items() if v is not None})
        if overrides.get("fov") is not None or overrides.get("delta") is not None:
            if "example_dims" not in overrides:
                data["example_dims"] = None
        return RunConfig.from_dict(data)
