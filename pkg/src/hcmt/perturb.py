from __future__ import annotations

from dataclasses import dataclass

import torch

from hcmt.errors import ConfigError

NOISE_KINDS = ("none", "gaussian")


@dataclass
class PerturbationSpec:
    """Input noise applied before a forward pass.

    ``seed`` only matters when no generator is passed to :func:`perturb`;
    the trainer keeps one long-lived generator per stream instead.
    """

    noise_kind: str = "gaussian"
    sigma: float = 0.1
    clip: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.noise_kind not in NOISE_KINDS:
            raise ConfigError(f"unknown noise_kind {self.noise_kind!r}; choose from {NOISE_KINDS}")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.noise_kind != "none" and self.clip <= 0:
            raise ConfigError("clip must be > 0 when noise is enabled")

    @property
    def is_identity(self) -> bool:
        return self.noise_kind == "none" or self.sigma == 0

    @classmethod
    def identity(cls) -> "PerturbationSpec":
        return cls(noise_kind="none", sigma=0.0)


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def perturb(x: torch.Tensor, spec: PerturbationSpec, generator: torch.Generator | None = None) -> torch.Tensor:
    """Return ``x + clamp(sigma * n, -clip, clip)`` with standard normal ``n``, or ``x`` itself."""
    spec.validate()
    if spec.is_identity:
        return x
    if generator is None:
        generator = make_generator(spec.seed)
    noise = torch.randn(x.shape, generator=generator, dtype=x.dtype, device="cpu").to(x.device)
    return x + torch.clamp(spec.sigma * noise, -spec.clip, spec.clip)
