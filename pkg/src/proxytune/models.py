"""Logit-producing models, logits-only handles and checkpoint files.

Every model maps a batch ``X[N, d]`` to logits ``[N, C]``. Tunable models keep
their parameters in an ordered ``params`` dict of float64 arrays; ``forward``
accepts replacement weights (e.g. tape-watched leaves) so the trainer can
differentiate without the model knowing about tapes.
"""

from __future__ import annotations

import copy
import enum
import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from . import diffcore as dc
from ._fileio import atomic_write
from .diffcore import NonFinite, ShapeMismatch, Tensor

FORMAT_VERSION = 1
MAGIC = b"PXTCKPT\x00"


class Role(enum.Enum):
    TUNABLE = "tunable"
    FROZEN_SMALL = "frozen_small"
    FROZEN_LARGE = "frozen_large_black_box"


class CheckpointError(Exception):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


def _init_dense(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)


def _mlp(X: Tensor, weights: Mapping[str, Tensor], n_layers: int, activation: str) -> Tensor:
    act = dc.tanh if activation == "tanh" else dc.relu
    h = X
    for i in range(n_layers):
        h = dc.add_bias(dc.matmul(h, weights[f"W{i}"]), weights[f"b{i}"])
        if i < n_layers - 1:
            h = act(h)
    return h


def _as_batch(x, input_dim: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != input_dim:
        raise ShapeMismatch(f"expected inputs of dim {input_dim}, got shape {np.shape(x)}")
    return arr, single


class Model:
    """Common surface of every tunable model."""

    arch_name = "model"
    input_dim: int
    output_dim: int
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]

    def architecture(self) -> dict[str, Any]:
        raise NotImplementedError

    def _forward(self, X: Tensor, w: Mapping[str, Tensor]) -> Tensor:
        raise NotImplementedError

    def forward(self, X, weights: Mapping[str, Tensor] | None = None) -> Tensor:
        """Batched logits as a Tensor, optionally under substitute weights."""
        arr, _ = _as_batch(X, self.input_dim)
        if weights is None:
            weights = {k: Tensor._wrap(v, None) for k, v in self.params.items()}
        return self._forward(Tensor._wrap(arr, None), weights)

    def logits(self, x) -> np.ndarray:
        arr, single = _as_batch(x, self.input_dim)
        z = self.forward(arr).data
        if not np.all(np.isfinite(z)):
            raise NonFinite(f"{self.arch_name}: non-finite logits (corrupted parameters?)")
        return z[0] if single else z

    __call__ = logits

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def set_params(self, new: Mapping[str, np.ndarray]) -> None:
        for k, v in new.items():
            if k not in self.params or self.params[k].shape != np.shape(v):
                raise ShapeMismatch(f"parameter {k!r} shape mismatch")
            self.params[k] = np.array(v, dtype=np.float64)

    def checkpoint(self, metadata: Mapping[str, Any] | None = None) -> "Checkpoint":
        return Checkpoint(
            arch=self.architecture(),
            params={k: v.copy() for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
            metadata=dict(metadata or {}),
        )


class MlpClassifier(Model):
    """Fully connected classifier; ``widths = [input_dim, *hidden, n_classes]``."""

    arch_name = "mlp"

    def __init__(self, widths, activation: str = "tanh", seed: int = 0):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"bad layer widths {widths}")
        if activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = widths
        self.activation = activation
        self.seed = seed
        self.input_dim, self.output_dim = widths[0], widths[-1]
        rng = np.random.default_rng(seed)
        self.params = {}
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self.params[f"W{i}"], self.params[f"b{i}"] = _init_dense(rng, a, b)
        self.buffers = {}

    def architecture(self):
        return {"name": self.arch_name, "widths": self.widths,
                "activation": self.activation, "seed": self.seed}

    def _forward(self, X, w):
        return _mlp(X, w, len(self.widths) - 1, self.activation)


def cosine_logits(f, g, tau: float = 1.0) -> Tensor:
    """Temperature-scaled cosine similarity between rows of ``f`` and ``g``.

    ``f`` is ``[N, d]`` (input embeddings), ``g`` is ``[C, d]`` (class
    embeddings); returns ``[N, C]``. Either side may be tracked.
    """
    f = f if isinstance(f, Tensor) else Tensor(np.atleast_2d(f))
    g = g if isinstance(g, Tensor) else Tensor(np.atleast_2d(g))
    if f.shape[1] != g.shape[1]:
        raise ShapeMismatch(f"embedding dims differ: {f.shape[1]} vs {g.shape[1]}")
    fn = dc.l2_normalize_rows(f)
    gn = dc.l2_normalize_rows(g)
    gt = Tensor._wrap(gn.data.T, None) if gn.tape is None else _transpose(gn)
    cos = dc.clip_unit(dc.matmul(fn, gt))
    return cos if tau == 1.0 else dc.mul_scalar(cos, 1.0 / tau)


def _transpose(t: Tensor) -> Tensor:
    return dc._emit(t.data.T, (t,), lambda g: (g.T,))


class DualEncoderClassifier(Model):
    """Cosine-similarity classifier: MLP input encoder against a class embedding table.

    The class table is a fixed buffer by default (frozen prompt embeddings);
    ``tunable_classes=True`` moves it into ``params``.
    """

    arch_name = "dual_encoder"

    def __init__(self, input_dim: int, hidden, embed_dim: int, n_classes: int,
                 tau: float = 1.0, activation: str = "tanh",
                 tunable_classes: bool = False, seed: int = 0):
        if embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if not tau > 0:
            raise ValueError("temperature must be positive")
        self.hidden = [int(h) for h in hidden]
        self.embed_dim, self.tau = int(embed_dim), float(tau)
        self.activation = activation
        self.tunable_classes = tunable_classes
        self.seed = seed
        self.input_dim, self.output_dim = int(input_dim), int(n_classes)
        self.encoder_widths = [self.input_dim, *self.hidden, self.embed_dim]
        rng = np.random.default_rng(seed)
        self.params = {}
        for i, (a, b) in enumerate(zip(self.encoder_widths[:-1], self.encoder_widths[1:])):
            self.params[f"W{i}"], self.params[f"b{i}"] = _init_dense(rng, a, b)
        table = rng.standard_normal((n_classes, self.embed_dim))
        if n_classes <= self.embed_dim:
            table = np.ascontiguousarray(np.linalg.qr(table.T)[0].T)  # orthonormal rows
        self.buffers = {}
        if tunable_classes:
            self.params["classes"] = table
        else:
            self.buffers["classes"] = table

    def architecture(self):
        return {"name": self.arch_name, "input_dim": self.input_dim,
                "hidden": self.hidden, "embed_dim": self.embed_dim,
                "n_classes": self.output_dim, "tau": self.tau,
                "activation": self.activation,
                "tunable_classes": self.tunable_classes, "seed": self.seed}

    def embed(self, X, w=None) -> Tensor:
        arr, _ = _as_batch(X, self.input_dim)
        if w is None:
            w = {k: Tensor._wrap(v, None) for k, v in self.params.items()}
        return _mlp(Tensor._wrap(arr, None), w, len(self.encoder_widths) - 1, self.activation)

    def _class_table(self, w) -> Tensor:
        if self.tunable_classes:
            return w["classes"]
        return Tensor._wrap(self.buffers["classes"], None)

    def _forward(self, X, w):
        f = _mlp(X, w, len(self.encoder_widths) - 1, self.activation)
        return cosine_logits(f, self._class_table(w), self.tau)

    def unit_logits(self, x) -> np.ndarray:
        """Pre-temperature logits (cosines), always inside [-1, 1]."""
        z = self.logits(x)
        return z * self.tau if self.tau != 1.0 else z


def dual_encoder_logits(m: DualEncoderClassifier, x) -> np.ndarray:
    return m.logits(x)


class ScalarLogistic(Model):
    """One-parameter binary model, logits ``[-θx/2, θx/2]`` on scalar inputs."""

    arch_name = "scalar_logistic"
    _SPLIT = np.array([[-0.5, 0.5]])

    def __init__(self, theta: float = 0.0):
        self.input_dim, self.output_dim = 1, 2
        self.params = {"theta": np.array([[float(theta)]])}
        self.buffers = {}

    @property
    def theta(self) -> float:
        return float(self.params["theta"][0, 0])

    def architecture(self):
        return {"name": self.arch_name}

    def _forward(self, X, w):
        return dc.matmul(dc.matmul(X, w["theta"]), self._SPLIT)


ARCHITECTURES: dict[str, Callable[[dict], Model]] = {
    "mlp": lambda a: MlpClassifier(a["widths"], a.get("activation", "tanh"), a.get("seed", 0)),
    "dual_encoder": lambda a: DualEncoderClassifier(
        a["input_dim"], a["hidden"], a["embed_dim"], a["n_classes"], a.get("tau", 1.0),
        a.get("activation", "tanh"), a.get("tunable_classes", False), a.get("seed", 0)),
    "scalar_logistic": lambda a: ScalarLogistic(),
}


def build_model(arch: Mapping[str, Any]) -> Model:
    arch = dict(arch)
    kind = arch.get("name")
    if kind not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {kind!r}")
    return ARCHITECTURES[kind](arch)


# -- handles --------------------------------------------------------------


class ModelHandle:
    """Logits-only access to a model.

    A handle owns a private deep copy of the model, hidden inside a closure;
    the public surface is ``role``, ``input_dim``, ``output_dim`` and calling
    it on inputs. Frozen handles therefore cannot leak parameters or be
    mutated by whoever built them.
    """

    __slots__ = ("role", "input_dim", "output_dim", "_evaluate")

    def __init__(self, evaluate: Callable[[np.ndarray], np.ndarray], role: Role,
                 input_dim: int, output_dim: int):
        object.__setattr__(self, "role", role)
        object.__setattr__(self, "input_dim", int(input_dim))
        object.__setattr__(self, "output_dim", int(output_dim))
        object.__setattr__(self, "_evaluate", evaluate)

    def __setattr__(self, name, value):
        raise AttributeError("model handles are read-only")

    @classmethod
    def frozen(cls, model: Model, role: Role = Role.FROZEN_LARGE) -> "ModelHandle":
        if role is Role.TUNABLE:
            raise ValueError("use TunableHandle for the tuned model")
        private = copy.deepcopy(model)

        def evaluate(X):
            return private.logits(X)

        return cls(evaluate, role, private.input_dim, private.output_dim)

    def __call__(self, x) -> np.ndarray:
        z = self._evaluate(x)
        if not np.all(np.isfinite(z)):
            raise NonFinite("handle produced non-finite logits")
        return z

    def __repr__(self):
        return f"ModelHandle({self.role.value}, {self.input_dim}->{self.output_dim})"

    def __deepcopy__(self, memo):
        return self  # immutable

    def __reduce__(self):
        raise TypeError("logits-only handles cannot be pickled; rebuild from a checkpoint")


@dataclass
class TunableHandle:
    """The white-box side: evaluation plus parameter access."""

    model: Model
    role: Role = field(default=Role.TUNABLE, init=False)

    @property
    def input_dim(self) -> int:
        return self.model.input_dim

    @property
    def output_dim(self) -> int:
        return self.model.output_dim

    def __call__(self, x) -> np.ndarray:
        return self.model.logits(x)


def forward_logits(h, x) -> np.ndarray:
    """Logits of one input vector (or a batch) through any handle or model."""
    return h(x)


# -- checkpoints ----------------------------------------------------------


@dataclass
class Checkpoint:
    arch: dict
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    report: Any = field(default=None, repr=False, compare=False)

    def to_model(self) -> Model:
        m = build_model(self.arch)
        m.set_params(self.params)
        for k, v in self.buffers.items():
            if k not in m.buffers or m.buffers[k].shape != v.shape:
                raise CorruptCheckpoint(f"unexpected buffer {k!r}")
            m.buffers[k] = np.array(v, dtype=np.float64)
        return m

    def digest(self) -> str:
        """SHA-256 over architecture and every array (metadata excluded)."""
        h = hashlib.sha256(json.dumps(self.arch, sort_keys=True).encode())
        for group in (self.params, self.buffers):
            for k in sorted(group):
                h.update(k.encode())
                h.update(np.ascontiguousarray(group[k], dtype="<f8").tobytes())
        return h.hexdigest()


def _payload_manifest(ckpt: Checkpoint) -> list[dict]:
    out = []
    for group in ("params", "buffers"):
        for k, v in getattr(ckpt, group).items():
            out.append({"group": group, "name": k, "shape": list(v.shape)})
    return out


def save_checkpoint(m: Model | Checkpoint, path) -> None:
    """Write a checkpoint atomically.

    Layout: 8-byte magic, u32 version, u32 header length, JSON header
    (architecture, array manifest, metadata, payload crc32), then every array
    as little-endian float64 in manifest order.
    """
    ckpt = m if isinstance(m, Checkpoint) else m.checkpoint()
    manifest = _payload_manifest(ckpt)
    payload = b"".join(
        np.ascontiguousarray(getattr(ckpt, e["group"])[e["name"]], dtype="<f8").tobytes()
        for e in manifest
    )
    header = json.dumps({
        "architecture": ckpt.arch,
        "arrays": manifest,
        "metadata": ckpt.metadata,
        "payload_bytes": len(payload),
        "crc32": zlib.crc32(payload),
    }, sort_keys=True).encode()
    blob = MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + payload
    atomic_write(path, blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic header")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(blob) < 16 + hlen:
        raise CorruptCheckpoint(f"{path}: truncated header")
    try:
        header = json.loads(blob[16:16 + hlen])
    except ValueError as e:
        raise CorruptCheckpoint(f"{path}: unreadable header") from e
    payload = blob[16 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CorruptCheckpoint(f"{path}: payload is {len(payload)} bytes, expected {header['payload_bytes']}")
    if zlib.crc32(payload) != header["crc32"]:
        raise CorruptCheckpoint(f"{path}: payload checksum mismatch")
    groups: dict[str, dict] = {"params": {}, "buffers": {}}
    off = 0
    for e in header["arrays"]:
        n = int(np.prod(e["shape"])) * 8
        arr = np.frombuffer(payload[off:off + n], dtype="<f8").astype(np.float64)
        groups[e["group"]][e["name"]] = arr.reshape(e["shape"])
        off += n
    return Checkpoint(header["architecture"], groups["params"], groups["buffers"],
                      header.get("metadata", {}))


def load_model(path) -> Model:
    return load_checkpoint(path).to_model()
