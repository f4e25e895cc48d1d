"""Per-point network: two tanh hidden layers and three linear heads.

Input per point is position, colour, normal and height above the floor (10
values). Heads produce an instance embedding, semantic logits and a 3-D offset
towards the instance centre. Gradients are computed by hand.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from weakseg3d.pointcloud import Scene, atomic_write_text

IN_DIM = 10
PARAM_NAMES = ("W1", "b1", "W2", "b2", "We", "be", "Ws", "bs", "Wo", "bo")
CHECKPOINT_MAGIC = "CPARAMS v1"


@dataclass(frozen=True)
class Hyperparams:
    delta_v: float = 0.2
    delta_d: float = 1.5
    alpha: float = 0.6
    beta: float = 1.5
    theta: float = 0.9
    gamma: float = 0.3
    sigma_e: float = 1.0
    sigma_p: float = 1.0
    pseudo_start: int = 60
    lr: float = 5e-3
    epochs: int = 120
    embed_dim: int = 4
    hidden: int = 48
    seed: int = 0
    steps_per_epoch: int = 1
    optimizer: str = "gd"
    baseline_period: int | None = None
    offset_switch: int | None = None
    mean_grad: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0 < self.delta_v < self.delta_d:
            raise ValueError(f"need 0 < delta_v < delta_d, got delta_v={self.delta_v}, delta_d={self.delta_d}")
        for name in ("theta", "gamma"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("sigma_e", "sigma_p", "lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        for name in ("epochs", "pseudo_start"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("embed_dim", "hidden", "steps_per_epoch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError(f"optimizer must be 'gd' or 'adam', got {self.optimizer!r}")
        if self.baseline_period is not None and self.baseline_period < 1:
            raise ValueError("baseline_period must be >= 1")

    @property
    def regen_period(self) -> int:
        return self.baseline_period or max(1, self.epochs // 8)

    @property
    def offset_epoch(self) -> int:
        return self.pseudo_start + 10 if self.offset_switch is None else self.offset_switch

    def replace(self, **kw) -> "Hyperparams":
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown Hyperparams field(s): {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(eq=False)
class ModelParams:
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        missing = set(PARAM_NAMES) - set(self.tensors)
        if missing:
            raise ValueError(f"missing parameter tensors {sorted(missing)}")
        self.tensors = {k: np.asarray(self.tensors[k], dtype=np.float64) for k in PARAM_NAMES}
        h = self.hidden
        expect = {"W1": (IN_DIM, h), "b1": (h,), "W2": (h, h), "b2": (h,),
                  "We": (h, self.embed_dim), "be": (self.embed_dim,),
                  "Ws": (h, self.num_classes), "bs": (self.num_classes,), "Wo": (h, 3), "bo": (3,)}
        for k, shape in expect.items():
            if self.tensors[k].shape != shape:
                raise ValueError(f"{k} has shape {self.tensors[k].shape}, expected {shape}")

    def __getitem__(self, k):
        return self.tensors[k]

    @property
    def hidden(self) -> int:
        return self.tensors["W1"].shape[1]

    @property
    def embed_dim(self) -> int:
        return self.tensors["We"].shape[1]

    @property
    def num_classes(self) -> int:
        return self.tensors["Ws"].shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].ravel() for k in PARAM_NAMES])

    def with_flat(self, vec: np.ndarray) -> "ModelParams":
        out, i = {}, 0
        for k in PARAM_NAMES:
            size = self.tensors[k].size
            out[k] = vec[i:i + size].reshape(self.tensors[k].shape).copy()
            i += size
        return ModelParams(out)

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return all(np.array_equal(self.tensors[k], other.tensors[k]) for k in PARAM_NAMES)

    __hash__ = None


def init_params(embed_dim: int, num_classes: int, hidden: int, seed: int = 0) -> ModelParams:
    """Uniform init in [-a, a] with a = 1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    shapes = [("W1", (IN_DIM, hidden)), ("b1", (hidden,)), ("W2", (hidden, hidden)), ("b2", (hidden,)),
              ("We", (hidden, embed_dim)), ("be", (embed_dim,)), ("Ws", (hidden, num_classes)),
              ("bs", (num_classes,)), ("Wo", (hidden, 3)), ("bo", (3,))]
    fan_in = {"W1": IN_DIM, "b1": IN_DIM, "W2": hidden, "b2": hidden}
    out = {}
    for name, shape in shapes:
        a = 1.0 / np.sqrt(fan_in.get(name, hidden))
        out[name] = rng.uniform(-a, a, size=shape)
    return ModelParams(out)


@dataclass(frozen=True, eq=False)
class ModelOutput:
    embeddings: np.ndarray
    logits: np.ndarray
    offsets: np.ndarray
    semantic_probs: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "semantic_probs", softmax(self.logits))

    @classmethod
    def from_arrays(cls, embeddings, semantic_probs, offsets) -> "ModelOutput":
        """Build an output from probabilities directly (file-loaded or hand-built data)."""
        probs = np.asarray(semantic_probs, dtype=float)
        out = cls(np.asarray(embeddings, dtype=float), np.log(np.maximum(probs, 1e-300)),
                  np.asarray(offsets, dtype=float))
        object.__setattr__(out, "semantic_probs", probs)
        return out

    def __len__(self):
        return len(self.embeddings)

    def subset(self, idx) -> "ModelOutput":
        return ModelOutput.from_arrays(self.embeddings[idx], self.semantic_probs[idx], self.offsets[idx])


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def features(scene: Scene, floor_z: float = 0.0) -> np.ndarray:
    height = scene.positions[:, 2:3] - floor_z
    return np.hstack([scene.positions, scene.colors, scene.normals, height])


def _check_finite(params: ModelParams):
    for k in PARAM_NAMES:
        if not np.all(np.isfinite(params[k])):
            raise FloatingPointError(f"parameter {k} is not finite")


def _hidden(params, x):
    z1 = x @ params["W1"] + params["b1"]
    a1 = np.tanh(z1)
    z2 = a1 @ params["W2"] + params["b2"]
    a2 = np.tanh(z2)
    return a1, a2


def forward(params: ModelParams, scene: Scene) -> ModelOutput:
    _check_finite(params)
    _, a2 = _hidden(params, features(scene))
    return ModelOutput(a2 @ params["We"] + params["be"],
                       a2 @ params["Ws"] + params["bs"],
                       a2 @ params["Wo"] + params["bo"])


@dataclass
class OutputGrads:
    """Loss gradients w.r.t. the raw heads: embeddings, semantic logits, offsets."""

    embeddings: np.ndarray
    logits: np.ndarray
    offsets: np.ndarray

    @classmethod
    def zeros(cls, n: int, embed_dim: int, num_classes: int) -> "OutputGrads":
        return cls(np.zeros((n, embed_dim)), np.zeros((n, num_classes)), np.zeros((n, 3)))

    def __iadd__(self, other: "OutputGrads"):
        self.embeddings = self.embeddings + other.embeddings
        self.logits = self.logits + other.logits
        self.offsets = self.offsets + other.offsets
        return self

    def scaled(self, c: float) -> "OutputGrads":
        return OutputGrads(self.embeddings * c, self.logits * c, self.offsets * c)


def backward(params: ModelParams, scene: Scene, grads: OutputGrads) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of sum(grads * outputs) w.r.t. every parameter."""
    n = len(scene)
    expect = {"embeddings": (n, params.embed_dim), "logits": (n, params.num_classes), "offsets": (n, 3)}
    for name, shape in expect.items():
        if getattr(grads, name).shape != shape:
            raise ValueError(f"gradient for {name} has shape {getattr(grads, name).shape}, expected {shape}")
    x = features(scene)
    a1, a2 = _hidden(params, x)
    g = {"We": a2.T @ grads.embeddings, "be": grads.embeddings.sum(axis=0),
         "Ws": a2.T @ grads.logits, "bs": grads.logits.sum(axis=0),
         "Wo": a2.T @ grads.offsets, "bo": grads.offsets.sum(axis=0)}
    da2 = grads.embeddings @ params["We"].T + grads.logits @ params["Ws"].T + grads.offsets @ params["Wo"].T
    dz2 = da2 * (1.0 - a2 * a2)
    g["W2"] = a1.T @ dz2
    g["b2"] = dz2.sum(axis=0)
    dz1 = (dz2 @ params["W2"].T) * (1.0 - a1 * a1)
    g["W1"] = x.T @ dz1
    g["b1"] = dz1.sum(axis=0)
    return {k: g[k] for k in PARAM_NAMES}


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for k in PARAM_NAMES:
            m = self.m.get(k, 0.0) * self.beta1 + (1 - self.beta1) * grads[k]
            v = self.v.get(k, 0.0) * self.beta2 + (1 - self.beta2) * grads[k] ** 2
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            params.tensors[k] = params.tensors[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class GradientDescent:
    """Plain full-batch gradient descent with a fixed step size."""

    def __init__(self, lr):
        self.lr = lr

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        for k in PARAM_NAMES:
            params.tensors[k] = params.tensors[k] - self.lr * grads[k]


def make_optimizer(hp: Hyperparams):
    return Adam(hp.lr) if hp.optimizer == "adam" else GradientDescent(hp.lr)


def save_params(params: ModelParams, path) -> None:
    lines = [f"{CHECKPOINT_MAGIC} E={params.embed_dim} K={params.num_classes} H={params.hidden}"]
    for k in PARAM_NAMES:
        t = params[k]
        lines.append(f"{k} " + " ".join(str(d) for d in t.shape))
        lines.append(" ".join(repr(float(v)) for v in t.ravel()))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_params(path, embed_dim: int | None = None, num_classes: int | None = None,
                hidden: int | None = None) -> ModelParams:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a parameter checkpoint")
    header = dict(tok.split("=") for tok in lines[0].split()[2:])
    want = {"E": embed_dim, "K": num_classes, "H": hidden}
    for key, val in want.items():
        if val is not None and int(header[key]) != val:
            raise ValueError(f"{path}: checkpoint has {key}={header[key]}, config expects {val}")
    tensors = {}
    body = lines[1:]
    if len(body) != 2 * len(PARAM_NAMES):
        raise ValueError(f"{path}: expected {len(PARAM_NAMES)} tensors")
    for i in range(0, len(body), 2):
        name, *dims = body[i].split()
        shape = tuple(int(d) for d in dims)
        values = np.array([float(v) for v in body[i + 1].split()], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise ValueError(f"{path}: tensor {name} has {values.size} values for shape {shape}")
        tensors[name] = values.reshape(shape)
    return ModelParams(tensors)
