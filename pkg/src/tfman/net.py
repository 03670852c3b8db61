"""The full network: shallow feature extraction, recurrent FMF blocks, reconstruction."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .layers import Conv2d, ConvTranspose2d, Identity, Module, PReLU, Sequential
from .modules import SRNL, TFM, ChannelAttention, TfmConfig
from .tensor import ConfigurationError, Tensor

SUPPORTED_SCALES = (2, 3, 4, 8)
PIXEL_RANGE = 255.0
# DIV2K channel means on the 0..1 scale, removed at the input and restored at the output
RGB_MEAN = (0.4488, 0.4371, 0.4040)

# module toggles (tfm, srnl, ca) for the ablation variants
VARIANTS = {
    "base": (False, False, False),
    "r1": (True, False, False),
    "r2": (False, True, False),
    "r3": (False, False, True),
    "original": (True, True, True),
    "r5": (False, True, True),
    "r6": (True, False, True),
    "r7": (True, True, False),
}


@dataclass(frozen=True)
class TfmanConfig:
    s: int = 2
    n: int = 12
    C: int = 128
    K: int = 3
    N: int = 32
    R: int = 4
    P: int = 48
    C1: int = 64
    C2: int = 8
    use_tfm: bool = True
    use_srnl: bool = True
    use_ca: bool = True
    nonlocal_residual: bool = True
    ca_mid_activation: bool = True
    tfm_bias: bool = True
    prelu_per_channel: bool = False

    def __post_init__(self):
        if self.s not in SUPPORTED_SCALES:
            raise ConfigurationError(f"unsupported scale {self.s}; expected one of {SUPPORTED_SCALES}")
        for name in ("n", "C", "K", "N", "R", "P", "C1", "C2"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.use_ca and self.C2 >= self.C:
            raise ConfigurationError("C2 must be smaller than C")

    @classmethod
    def variant(cls, name: str, **overrides) -> "TfmanConfig":
        try:
            tfm, srnl, ca = VARIANTS[name.lower()]
        except KeyError:
            raise ConfigurationError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None
        return cls(use_tfm=tfm, use_srnl=srnl, use_ca=ca, **overrides)

    @property
    def tfm(self) -> TfmConfig:
        return TfmConfig(self.N, self.R, self.K, self.s)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "TfmanConfig":
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, val = line.partition("=")
                values[key.strip()] = val.strip()
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict) -> "TfmanConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, val in values.items():
            if key not in types:
                raise ConfigurationError(f"unknown config key {key!r}")
            kwargs[key] = parse_value(val, types[key])
        return cls(**kwargs)


def parse_value(val, typ):
    if not isinstance(val, str):
        return val
    if typ in (bool, "bool"):
        low = val.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"not a boolean: {val!r}")
    if typ in (int, "int"):
        return int(val)
    if typ in (float, "float"):
        return float(val)
    return val


def down_layers(C: int, s: int, rng, slope: int) -> list[Module]:
    """Strided down-sampling by ``s``: 9x9 stride 3, or 6x6 stride 2 repeated log2(s) times."""
    if s == 3:
        return [Conv2d(C, C, 9, rng, stride=3, padding=3), PReLU(slope)]
    layers: list[Module] = []
    for _ in range(int(np.log2(s))):
        layers += [Conv2d(C, C, 6, rng, stride=2, padding=2), PReLU(slope)]
    return layers


def up_layer(C: int, s: int, rng) -> ConvTranspose2d:
    return ConvTranspose2d(C, C, 3 * s, s, s, rng)


class FMF(Module):
    """One feature matching and fusion block; weights are reused by every recurrence."""

    def __init__(self, cfg: TfmanConfig, rng: np.random.Generator):
        C, s = cfg.C, cfg.s
        slope = C if cfg.prelu_per_channel else 1
        if cfg.use_tfm:
            self.tfm = TFM(C, cfg.tfm, cfg.n, rng, bias=cfg.tfm_bias)
        else:
            self.tfm = Sequential(up_layer(C, s, rng), PReLU(slope))
        self.ca = ChannelAttention(C, cfg.C2, rng, cfg.ca_mid_activation) if cfg.use_ca else Identity()
        if cfg.use_srnl:
            self.srnl = SRNL(C, cfg.C1, cfg.P, rng, cfg.nonlocal_residual)
        else:
            self.srnl = Sequential(Conv2d(C, C, 3, rng), PReLU(slope))
        self.up1 = Sequential(up_layer(C, s, rng), PReLU(slope))
        self.ops1 = Sequential(Conv2d(C, C, 3, rng), PReLU(slope), Conv2d(C, C, 3, rng))
        self.down1 = Sequential(*down_layers(C, s, rng, slope))
        self.up2 = Sequential(up_layer(C, s, rng), PReLU(slope))
        self.down2 = Sequential(*down_layers(C, s, rng, slope), Conv2d(C, C, 3, rng), PReLU(slope))
        self._use_tfm = cfg.use_tfm

    def branch_tfm(self, F: Tensor, i: int) -> Tensor:
        y = self.tfm(F, i) if self._use_tfm else self.tfm(F)
        return self.ca(y)

    def forward(self, F_prev: Tensor, i: int) -> tuple[Tensor, Tensor]:
        f_b1 = self.branch_tfm(F_prev, i)
        f_b2 = self.up1(self.srnl(F_prev))
        f_fuse = self.ops1(f_b2 - f_b1) + f_b1
        f_up = self.up2(F_prev - self.down1(f_fuse)) + f_fuse
        return f_up, self.down2(f_up)


class TFMAN(Module):
    def __init__(self, cfg: TfmanConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1417]))
        slope = cfg.C if cfg.prelu_per_channel else 1
        self.head = Sequential(Conv2d(3, cfg.C, 3, rng), PReLU(slope), Conv2d(cfg.C, cfg.C, 3, rng), PReLU(slope))
        self.fmf = FMF(cfg, rng)
        self.tail = Conv2d(cfg.n * cfg.C, 3, 3, rng)
        self.assign_names()

    @staticmethod
    def _mean(x: Tensor) -> np.ndarray:
        return np.asarray(RGB_MEAN, dtype=x.dtype).reshape(1, 3, 1, 1)

    def features(self, x: Tensor) -> list[Tensor]:
        """Up-sampled features from every recurrence."""
        f = self.head(x / PIXEL_RANGE - self._mean(x))
        ups = []
        for i in range(self.cfg.n):
            f_up, f = self.fmf(f, i)
            ups.append(f_up)
        return ups

    def reconstruct(self, x: Tensor) -> Tensor:
        """Network output before the mean offset is restored, on the 0..1 scale."""
        h, w = x.shape[2:]
        if min(h, w) < self.cfg.K:
            raise ValueError(f"input {h}x{w} is smaller than the {self.cfg.K}x{self.cfg.K} matching window")
        return self.tail(T.concat(self.features(x), axis=1))

    def forward(self, x: Tensor) -> Tensor:
        single = x.ndim == 3
        if single:
            x = x.reshape((1,) + x.shape)
        out = (self.reconstruct(x) + self._mean(x)) * PIXEL_RANGE
        return out.reshape(out.shape[1:]) if single else out


def build(cfg: TfmanConfig, seed: int = 0) -> TFMAN:
    return TFMAN(cfg, seed)


def fmf_forward(F_prev: Tensor, block: FMF, i: int) -> tuple[Tensor, Tensor]:
    return block(F_prev, i)


def forward(model: TFMAN, lr: Tensor) -> Tensor:
    return model(lr)


def parameter_count(model: Module, prefix: str = "") -> int:
    return sum(p.size for name, p in model.named_parameters() if name.startswith(prefix))


def parameter_breakdown(model: Module, depth: int = 2) -> dict[str, int]:
    """Scalar counts grouped by the first ``depth`` components of each name."""
    out: dict[str, int] = {}
    for name, p in model.named_parameters():
        key = ".".join(name.split(".")[:depth])
        out[key] = out.get(key, 0) + p.size
    return out


def alpha_count(model: TFMAN) -> int:
    return parameter_count(model, "fmf.tfm.alpha")


def with_config(cfg: TfmanConfig, **changes) -> TfmanConfig:
    return dataclasses.replace(cfg, **changes)
