"""Run configuration in ``key = value`` text form."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .formats import fmt_float, parse_bool, parse_kv

STREAMS = {"dataset": 0, "plan": 1, "crop": 2, "jitter": 3, "init": 4, "gradcheck": 5}


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent named random stream derived from the run seed."""
    return np.random.default_rng([int(seed), STREAMS[name]])


@dataclass
class RunConfig:
    scene: str = ""
    dataset: str = "data"
    output: str = "run"
    seed: int = 0
    iterations: int = 200
    checkpoint_every: int = 100
    # march
    n_samples: int = 64
    jitter: bool = True
    background: float = 0.0
    chunk: int = 8192
    # model
    map_res: int = 128
    resolutions: tuple = (64, 128, 256)
    channels: int = 16
    extent: float = 1.0
    decoder_hidden: int = 64
    cond_hidden: int = 64
    density_scale: float = 10.0
    init_std: float = 0.1
    # optimisation
    lr: float = 1e-4
    lambda_mask: float = 0.1
    lambda_perp: float = 0.0
    enable_sliding_window: bool = True
    pyramid_depth: int = 3
    verify_mode: bool = False
    eval_frames: int = 0
    eval_samples: int = 0

    def validate(self) -> "RunConfig":
        if self.pyramid_depth not in (1, 2, 3):
            raise ValueError(f"pyramid_depth must be 1, 2 or 3, got {self.pyramid_depth}")
        if len(self.resolutions) != self.pyramid_depth:
            raise ValueError(f"{self.pyramid_depth} pyramid levels need {self.pyramid_depth} resolutions, "
                             f"got {list(self.resolutions)}")
        if self.iterations < 0 or self.checkpoint_every <= 0:
            raise ValueError("iterations must be >= 0 and checkpoint_every > 0")
        if self.n_samples < 2:
            raise ValueError("n_samples must be at least 2")
        if self.lambda_mask < 0 or self.lambda_perp < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda_perp != 0:
            raise ValueError("lambda_perp is reserved and must stay 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        return self

    def serialize(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, float):
                s = fmt_float(v)
            elif isinstance(v, tuple):
                s = ",".join(str(int(x)) for x in v)
            else:
                s = str(v)
            lines.append(f"{f.name} = {s}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        kv = parse_kv(text)
        out = {}
        defaults = cls()
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv.pop(f.name)
            like = getattr(defaults, f.name)
            try:
                if isinstance(like, bool):
                    out[f.name] = parse_bool(raw)
                elif isinstance(like, int):
                    out[f.name] = int(raw)
                elif isinstance(like, float):
                    out[f.name] = float(raw)
                elif isinstance(like, tuple):
                    out[f.name] = tuple(int(x) for x in raw.split(",") if x.strip())
                else:
                    out[f.name] = raw
            except ValueError as e:
                raise ValueError(f"bad value for {f.name}: {raw!r}") from e
        if kv:
            raise ValueError(f"unknown config keys: {sorted(kv)}")
        return cls(**out).validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.parse(fh.read())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.serialize())

    def replace(self, **kw) -> "RunConfig":
        d = asdict(self)
        d.update(kw)
        return type(self)(**d)
