"""Model configuration, parameter storage and the four primitive maps.

Every embedding is a ``(k, u)`` array: ``k`` independent channels of width
``u``. Flattening is row-major, so channel ``c`` occupies entries
``c*u:(c+1)*u`` of the length-``E`` vector. Composition and decomposition
share one small affine map across all channels.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .errors import ConfigError, ShapeError, VocabError


class Objective(str, Enum):
    CE = "ce"
    CONTRASTIVE = "contrastive"
    CECO = "ceco"
    STRCSE = "strcse"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            names = ", ".join(o.value for o in cls)
            raise ConfigError(f"unknown objective {value!r} (choose from {names})") from None


# Initialisation constants. Matrices use a Glorot-style symmetric uniform,
# biases start at zero and the embedding table is N(0, EMBED_STD^2).
EMBED_STD = 0.1
GLOROT_GAIN = 6.0


@dataclass(frozen=True)
class ModelConfig:
    V: int
    E: int = 256
    k: int = 128
    u: int = 2
    tied: bool = False
    tau: float = 1.2
    objective: Objective = Objective.CECO
    dropout_p: float = 0.0
    # "flat" scores merges by the cosine of flattened vectors, "channel" by
    # the mean per-channel cosine.
    merge_score: str = "flat"

    def __post_init__(self):
        object.__setattr__(self, "objective", Objective.parse(self.objective))
        if self.V < 2:
            raise ConfigError(f"V must be >= 2, got {self.V}")
        if self.k < 1 or self.u < 1:
            raise ConfigError(f"k and u must be >= 1, got k={self.k}, u={self.u}")
        if self.E != self.k * self.u:
            raise ConfigError(
                f"embedding size must equal k*u: E={self.E} but k*u={self.k}*{self.u}={self.k * self.u}"
            )
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.merge_score not in ("flat", "channel"):
            raise ConfigError(f"merge_score must be 'flat' or 'channel', got {self.merge_score!r}")

    def to_dict(self):
        return {
            "V": self.V,
            "E": self.E,
            "k": self.k,
            "u": self.u,
            "tied": self.tied,
            "tau": self.tau,
            "objective": self.objective.value,
            "dropout_p": self.dropout_p,
            "merge_score": self.merge_score,
        }

    @classmethod
    def from_dict(cls, d):
        keys = ("V", "E", "k", "u", "tied", "tau", "objective", "dropout_p", "merge_score")
        return cls(**{key: d[key] for key in keys if key in d})

    def with_(self, **changes):
        return replace(self, **changes)


PARAM_ORDER = ("Psi", "Phi", "phi", "Theta", "theta", "Gamma")


def param_shapes(config: ModelConfig):
    """Shape of every learnable array, in storage order."""
    c = config
    out = {
        "Psi": (c.V, c.E),
        "Phi": (2 * c.u, c.u),
        "phi": (c.u,),
        "Theta": (c.u, 2 * c.u),
        "theta": (2 * c.u,),
    }
    if not c.tied:
        out["Gamma"] = (c.E, c.V)
    return out


@dataclass
class ModelParams:
    config: ModelConfig
    Psi: np.ndarray
    Phi: np.ndarray
    phi: np.ndarray
    Theta: np.ndarray
    theta: np.ndarray
    Gamma: np.ndarray | None = None

    def __post_init__(self):
        self.validate()

    def shapes(self):
        return param_shapes(self.config)

    def validate(self):
        expected = self.shapes()
        if self.config.tied and self.Gamma is not None:
            raise ShapeError("tied model must not carry a separate Gamma")
        if not self.config.tied and self.Gamma is None:
            raise ShapeError("untied model requires Gamma")
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ShapeError(f"{name} contains non-finite entries")

    def names(self):
        return tuple(name for name in PARAM_ORDER if name != "Gamma" or not self.config.tied)

    def as_dict(self):
        return {name: getattr(self, name) for name in self.names()}

    def copy(self):
        return ModelParams(self.config, **{n: a.copy() for n, a in self.as_dict().items()})

    def replace_arrays(self, arrays):
        merged = self.as_dict()
        merged.update(arrays)
        return ModelParams(self.config, **merged)

    @property
    def dembed_matrix(self):
        """E x V matrix mapping a flattened embedding to logits."""
        return self.Psi.T if self.config.tied else self.Gamma


def _glorot(rng, fan_in, fan_out, shape):
    bound = np.sqrt(GLOROT_GAIN / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def new_model(config: ModelConfig, seed: int) -> ModelParams:
    """Draw a fresh parameter set; deterministic in ``(config, seed)``."""
    rng = np.random.default_rng(seed)
    c = config
    Psi = rng.normal(0.0, EMBED_STD, size=(c.V, c.E))
    Phi = _glorot(rng, 2 * c.u, c.u, (2 * c.u, c.u))
    Theta = _glorot(rng, c.u, 2 * c.u, (c.u, 2 * c.u))
    Gamma = None if c.tied else _glorot(rng, c.E, c.V, (c.E, c.V))
    return ModelParams(
        config,
        Psi=Psi,
        Phi=Phi,
        phi=np.zeros(c.u),
        Theta=Theta,
        theta=np.zeros(2 * c.u),
        Gamma=Gamma,
    )


def non_embedding_param_count(k: int, u: int) -> int:
    """Size of the composition and decomposition maps.

    ``|Phi| + |phi| + |Theta| + |theta| = 4u^2 + 3u``; the channel count only
    affects the embedding tables.
    """
    if k < 1 or u < 1:
        raise ConfigError("k and u must be >= 1")
    return 2 * u * u + u + 2 * u * u + 2 * u


def flatten(e: np.ndarray) -> np.ndarray:
    return np.reshape(e, -1)


def unflatten(vec: np.ndarray, k: int, u: int) -> np.ndarray:
    vec = np.asarray(vec)
    if vec.shape[-1] != k * u:
        raise ShapeError(f"vector of length {vec.shape[-1]} cannot be viewed as {k}x{u}")
    return vec.reshape(vec.shape[:-1] + (k, u))


def _check_embedding(params, e, what):
    c = params.config
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (c.k, c.u):
        raise ShapeError(f"{what} has shape {e.shape}, expected ({c.k}, {c.u})")
    return e


def embed_leaf(params: ModelParams, token_id: int) -> np.ndarray:
    c = params.config
    if not 0 <= int(token_id) < c.V:
        raise VocabError(f"token id {token_id} outside vocabulary of size {c.V}")
    return params.Psi[int(token_id)].reshape(c.k, c.u).copy()


def compose(params: ModelParams, c1: np.ndarray, c2: np.ndarray) -> np.ndarray:
    """Parent of two children; each channel row is mapped independently."""
    c1 = _check_embedding(params, c1, "left child")
    c2 = _check_embedding(params, c2, "right child")
    return np.concatenate([c1, c2], axis=1) @ params.Phi + params.phi


def decompose(params: ModelParams, p: np.ndarray):
    p = _check_embedding(params, p, "parent")
    u = params.config.u
    y = p @ params.Theta + params.theta
    return y[:, :u].copy(), y[:, u:].copy()


def dembed(params: ModelParams, e: np.ndarray) -> np.ndarray:
    e = _check_embedding(params, e, "embedding")
    return flatten(e) @ params.dembed_matrix
