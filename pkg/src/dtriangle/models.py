"""Generator, inference and energy networks plus the DTRI1 checkpoint format.

The generator maps ``z ~ N(0, I_d)`` to ``g(z)``; observations are
``g(z) + sigma * e``. The inference network emits the mean and log standard
deviation of a diagonal Gaussian over ``z``. The energy network emits one
scalar ``f(x)`` per example; ``-f(x)`` is the energy and the normalizer is
never computed.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    bias_add,
    conv2d,
    conv_output_size,
    conv_transpose2d,
    conv_transpose_output_size,
    matmul,
    slice_axis,
)

ARCHITECTURES = ("mlp", "conv28", "conv14")
CHECKPOINT_MAGIC = b"DTRI1\n"


class CheckpointError(ValueError):
    """A checkpoint archive is malformed or has the wrong version."""


@dataclass
class ModelConfig:
    architecture: str = "mlp"
    signal_shape: tuple[int, ...] = (2,)
    latent_dim: int = 2
    hidden: tuple[int, ...] = (64, 64)
    width_mult: float = 0.25
    init_std: float = 0.02
    obs_sigma: float = 0.3
    gen_output: str = "tanh"
    leak: float = 0.2

    def __post_init__(self):
        self.signal_shape = tuple(int(s) for s in self.signal_shape)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.obs_sigma <= 0:
            raise ValueError("obs_sigma must be positive")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.gen_output not in ("tanh", "linear"):
            raise ValueError("gen_output must be 'tanh' or 'linear'")
        side = {"conv28": 28, "conv14": 14}.get(self.architecture)
        if side is not None and self.signal_shape != (1, side, side):
            raise ValueError(f"{self.architecture} requires signal_shape (1, {side}, {side})")

    @property
    def signal_dim(self) -> int:
        return int(np.prod(self.signal_shape))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["signal_shape"] = list(self.signal_shape)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ParamStore:
    """Ordered named parameters of one model."""

    def __init__(self, name: str = ""):
        self.name = name
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {
            k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self._params.items()
        }

    def set_requires_grad(self, flag: bool) -> None:
        for p in self._params.values():
            p.requires_grad = flag

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if list(state) != list(self._params):
            raise CheckpointError(f"parameter names differ for {self.name!r}")
        for k, arr in state.items():
            p = self._params[k]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != p.shape:
                raise CheckpointError(f"{self.name}.{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


class frozen:
    """Context manager: the given stores receive no gradient inside the block."""

    def __init__(self, *stores: ParamStore):
        self.stores = stores

    def __enter__(self):
        for s in self.stores:
            s.set_requires_grad(False)

    def __exit__(self, *exc):
        for s in self.stores:
            s.set_requires_grad(True)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


@dataclass
class Layer:
    kind: str  # dense | conv | convT
    n_in: int
    n_out: int
    act: str = "none"
    k: int = 1
    stride: int = 1
    pad: int = 0
    name: str = ""
    weight: Tensor | None = field(default=None, repr=False)
    bias: Tensor | None = field(default=None, repr=False)

    def build(self, store: ParamStore, rng: np.random.Generator, std: float) -> None:
        if self.kind == "dense":
            shape = (self.n_in, self.n_out)
        elif self.kind == "conv":
            shape = (self.n_out, self.n_in, self.k, self.k)
        else:
            shape = (self.n_in, self.n_out, self.k, self.k)
        self.weight = store.add(f"{self.name}.weight", rng.normal(0.0, std, size=shape))
        self.bias = store.add(f"{self.name}.bias", np.zeros(self.n_out))

    def __call__(self, x: Tensor, leak: float) -> Tensor:
        if self.kind == "dense":
            y = bias_add(matmul(x, self.weight), self.bias, axis=1)
        elif self.kind == "conv":
            y = bias_add(conv2d(x, self.weight, self.stride, self.pad), self.bias, axis=1)
        else:
            y = bias_add(conv_transpose2d(x, self.weight, self.stride, self.pad), self.bias, axis=1)
        if self.act == "relu":
            return y.relu()
        if self.act == "lrelu":
            return y.leaky_relu(leak)
        if self.act == "tanh":
            return y.tanh()
        return y


def _scaled(n: int, mult: float) -> int:
    return max(1, int(round(n * mult)))


def _mlp(n_in: int, hidden, n_out: int, act: str, out_act: str) -> list[Layer]:
    sizes = [n_in, *hidden]
    layers = [Layer("dense", a, b, act) for a, b in zip(sizes[:-1], sizes[1:])]
    layers.append(Layer("dense", sizes[-1], n_out, out_act))
    return layers


def _encoder(cfg: ModelConfig, n_out: int) -> list[Layer]:
    m = cfg.width_mult
    if cfg.architecture == "conv28":
        c1, c2, c3 = _scaled(128, m), _scaled(256, m), _scaled(512, m)
        return [
            Layer("conv", 1, c1, "lrelu", 4, 2, 1),  # 28 -> 14
            Layer("conv", c1, c2, "lrelu", 4, 2, 1),  # 14 -> 7
            Layer("conv", c2, c3, "lrelu", 3, 2, 0),  # 7 -> 3
            Layer("conv", c3, n_out, "none", 3, 1, 0),  # 3 -> 1
        ]
    c1, c2 = _scaled(128, m), _scaled(256, m)
    return [
        Layer("conv", 1, c1, "lrelu", 4, 2, 1),  # 14 -> 7
        Layer("conv", c1, c2, "lrelu", 3, 2, 0),  # 7 -> 3
        Layer("conv", c2, n_out, "none", 3, 1, 0),  # 3 -> 1
    ]


def _decoder(cfg: ModelConfig) -> list[Layer]:
    m, d = cfg.width_mult, cfg.latent_dim
    out = cfg.gen_output
    if cfg.architecture == "conv28":
        c1, c2, c3 = _scaled(1024, m), _scaled(512, m), _scaled(256, m)
        return [
            Layer("convT", d, c1, "relu", 3, 1, 0),  # 1 -> 3
            Layer("convT", c1, c2, "relu", 3, 2, 0),  # 3 -> 7
            Layer("convT", c2, c3, "relu", 4, 2, 1),  # 7 -> 14
            Layer("convT", c3, 1, out, 4, 2, 1),  # 14 -> 28
        ]
    c1, c2 = _scaled(512, m), _scaled(256, m)
    return [
        Layer("convT", d, c1, "relu", 3, 1, 0),  # 1 -> 3
        Layer("convT", c1, c2, "relu", 3, 2, 0),  # 3 -> 7
        Layer("convT", c2, 1, out, 4, 2, 1),  # 7 -> 14
    ]


def _trace_shape(layers: list[Layer], shape: tuple[int, ...]) -> tuple[int, ...]:
    """Propagate a per-example shape through the stack, raising on bad geometry."""
    for layer in layers:
        if layer.kind == "dense":
            if len(shape) != 1 or shape[0] != layer.n_in:
                raise ShapeError(f"layer {layer.name}: expects {layer.n_in} features, got {shape}")
            shape = (layer.n_out,)
            continue
        if len(shape) != 3 or shape[0] != layer.n_in:
            raise ShapeError(f"layer {layer.name}: expects {layer.n_in} channels, got {shape}")
        size = conv_output_size if layer.kind == "conv" else conv_transpose_output_size
        shape = (layer.n_out, size(shape[1], layer.k, layer.stride, layer.pad), size(shape[2], layer.k, layer.stride, layer.pad))
    return shape


class _Network:
    def __init__(self, name: str, layers: list[Layer], cfg: ModelConfig, rng: np.random.Generator):
        self.config = cfg
        self.params = ParamStore(name)
        self.layers = layers
        for i, layer in enumerate(layers):
            layer.name = str(i)
            layer.build(self.params, rng, cfg.init_std)

    def _run(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x, self.config.leak)
        return x


class GeneratorModel(_Network):
    """``z -> g(z)`` with output shaped like the signal."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        if cfg.architecture == "mlp":
            layers = _mlp(cfg.latent_dim, cfg.hidden, cfg.signal_dim, "relu", cfg.gen_output)
            out = _trace_shape(layers, (cfg.latent_dim,))
            expect = (cfg.signal_dim,)
        else:
            layers = _decoder(cfg)
            out = _trace_shape(layers, (cfg.latent_dim, 1, 1))
            expect = cfg.signal_shape
        if out != expect:
            raise ShapeError(f"generator output {out} does not match signal shape {cfg.signal_shape}")
        super().__init__("theta", layers, cfg, rng)

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    @property
    def obs_sigma(self) -> float:
        return self.config.obs_sigma

    def __call__(self, z) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError(f"latent batch must be [n, {self.latent_dim}], got {z.shape}")
        n = z.shape[0]
        h = z if self.config.architecture == "mlp" else z.reshape(n, self.latent_dim, 1, 1)
        return self._run(h).reshape((n, *self.config.signal_shape))


class InferenceModel(_Network):
    """``x -> (mu(x), log sigma(x))`` sharing one trunk."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d2 = 2 * cfg.latent_dim
        if cfg.architecture == "mlp":
            layers = _mlp(cfg.signal_dim, cfg.hidden, d2, "lrelu", "none")
            out = _trace_shape(layers, (cfg.signal_dim,))
            expect = (d2,)
        else:
            layers = _encoder(cfg, d2)
            out = _trace_shape(layers, cfg.signal_shape)
            expect = (d2, 1, 1)
        if out != expect:
            raise ShapeError(f"inference output {out} != {expect}")
        super().__init__("phi", layers, cfg, rng)

    def heads(self, x) -> tuple[Tensor, Tensor]:
        x = _check_signal(x, self.config)
        n, d = x.shape[0], self.config.latent_dim
        h = x.reshape(n, self.config.signal_dim) if self.config.architecture == "mlp" else x
        out = self._run(h).reshape(n, 2 * d)
        return slice_axis(out, 1, 0, d), slice_axis(out, 1, d, 2 * d)


class EnergyModel(_Network):
    """``x -> f(x)``, one scalar per example; the last layer is linear."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        if cfg.architecture == "mlp":
            layers = _mlp(cfg.signal_dim, cfg.hidden, 1, "lrelu", "none")
            out = _trace_shape(layers, (cfg.signal_dim,))
            expect = (1,)
        else:
            layers = _encoder(cfg, 1)
            out = _trace_shape(layers, cfg.signal_shape)
            expect = (1, 1, 1)
        if out != expect:
            raise ShapeError(f"energy output {out} != {expect}")
        super().__init__("alpha", layers, cfg, rng)

    def __call__(self, x) -> Tensor:
        x = _check_signal(x, self.config)
        n = x.shape[0]
        h = x.reshape(n, self.config.signal_dim) if self.config.architecture == "mlp" else x
        return self._run(h).reshape(n)


def _check_signal(x, cfg: ModelConfig) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[1:] != cfg.signal_shape:
        raise ShapeError(f"input batch {x.shape} does not match signal shape {cfg.signal_shape}")
    return x


@dataclass
class TriangleModels:
    config: ModelConfig
    gen: GeneratorModel
    inf: InferenceModel
    en: EnergyModel

    def stores(self) -> dict[str, ParamStore]:
        return {"alpha": self.en.params, "phi": self.inf.params, "theta": self.gen.params}


def build_models(cfg: ModelConfig, rng: np.random.Generator) -> TriangleModels:
    """Initialise all three networks; weights ~ N(0, init_std^2), biases 0."""
    gen = GeneratorModel(cfg, rng)
    inf = InferenceModel(cfg, rng)
    en = EnergyModel(cfg, rng)
    return TriangleModels(cfg, gen, inf, en)


# ---------------------------------------------------------------------------
# model operations
# ---------------------------------------------------------------------------


def sample_prior(n: int, d: int, rng: np.random.Generator) -> Tensor:
    """``n`` i.i.d. draws from N(0, I_d)."""
    return Tensor(rng.standard_normal((n, d)))


def generate(gen: GeneratorModel, z, noise: str = "none", rng=None, eps=None) -> Tensor:
    """``g(z)``, or ``g(z) + sigma * e`` with ``e ~ N(0, I)`` when ``noise='gaussian'``.

    ``eps`` overrides the draw of ``e`` (it must have the signal's batch shape).
    """
    x = gen(z)
    if noise == "none":
        return x
    if noise != "gaussian":
        raise ValueError(f"noise must be 'none' or 'gaussian', got {noise!r}")
    if eps is None:
        eps = rng.standard_normal(x.shape)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x.shape:
        raise ShapeError(f"noise {eps.shape} does not match generator output {x.shape}")
    return x + Tensor(gen.obs_sigma * eps)


class Posterior(NamedTuple):
    mu: Tensor
    sigma: Tensor
    z_sample: Tensor


def infer(inf: InferenceModel, x, rng=None, eps=None, *, return_log_sigma: bool = False):
    """Reparameterised draw ``z = mu(x) + sigma(x) * e``.

    Returns ``(mu, sigma, z_sample)``; with ``return_log_sigma`` a fourth
    element ``log sigma`` is appended.
    """
    mu, log_sigma = inf.heads(x)
    if not (np.all(np.isfinite(mu.data)) and np.all(np.isfinite(log_sigma.data))):
        raise FloatingPointError("inference heads produced non-finite values")
    sigma = log_sigma.exp()
    if eps is None:
        eps = rng.standard_normal(mu.shape)
    eps = np.asarray(eps, dtype=np.float64)
    z = mu + sigma * Tensor(eps)
    post = Posterior(mu, sigma, z)
    return (*post, log_sigma) if return_log_sigma else post


def energy_value(en: EnergyModel, x) -> Tensor:
    """Per-example ``f(x)``; the energy is ``-f(x)``."""
    return en(x)


# ---------------------------------------------------------------------------
# DTRI1 checkpoints
# ---------------------------------------------------------------------------


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(groups: dict[str, dict[str, np.ndarray]], meta: dict) -> bytes:
    """Serialise ordered ``{group: {name: array}}`` plus JSON-able ``meta``.

    Layout: magic, u64 LE header length, UTF-8 JSON header, then every array
    as raw little-endian float64 in header order.
    """
    index = []
    blobs = []
    for group, arrays in groups.items():
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            index.append({"group": group, "name": name, "shape": list(arr.shape)})
            blobs.append(np.ascontiguousarray(arr).tobytes())
    header = json.dumps({"meta": meta, "arrays": index}, sort_keys=True, separators=(",", ":"))
    hb = header.encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(blobs)


def decode_checkpoint(payload: bytes) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    if not payload.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("not a DTRI1 checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    if len(payload) < off + 8:
        raise CheckpointError("truncated checkpoint header")
    (hlen,) = struct.unpack_from("<Q", payload, off)
    off += 8
    try:
        header = json.loads(payload[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    off += hlen
    groups: dict[str, dict[str, np.ndarray]] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(payload):
            raise CheckpointError("truncated checkpoint payload")
        arr = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=off).reshape(shape)
        groups.setdefault(entry["group"], {})[entry["name"]] = arr.astype(np.float64)
        off += nbytes
    if off != len(payload):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return groups, header["meta"]


def save_checkpoint(path: str, groups: dict[str, dict[str, np.ndarray]], meta: dict) -> None:
    _atomic_write(path, encode_checkpoint(groups, meta))


def load_checkpoint(path: str) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def save_models(path: str, models: TriangleModels, extra_meta: dict | None = None) -> None:
    groups = {k: s.state_dict() for k, s in models.stores().items()}
    meta = {"model_config": models.config.to_dict(), **(extra_meta or {})}
    save_checkpoint(path, groups, meta)


def load_models(path: str) -> tuple[TriangleModels, dict]:
    groups, meta = load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    models = build_models(cfg, np.random.default_rng(0))
    for key, store in models.stores().items():
        if key not in groups:
            raise CheckpointError(f"checkpoint has no parameters for {key!r}")
        store.load_state_dict(groups[key])
    return models, meta
