"""Trainable noise predictor behind a flat-parameter interface.

The torch module is an evaluation shell; model state lives in a
:class:`ParameterVector` (flat float array + ordered name/shape manifest),
which is the unit of federated aggregation and of checkpointing. All
randomness (init draws, timestep/noise sampling) comes from injected numpy
Generators so that training is replayable bit for bit.
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .diffusion import NoiseSchedule, forward_sample
from .unet import UNet

_CKPT_MAGIC = b"FDDF"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 1
    image_size: int = 8
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2)
    res_blocks_per_stage: int = 1
    time_embed_dim: int = 32
    class_conditional: bool = False
    num_classes: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers)
        )
        counts = (
            self.in_channels,
            self.image_size,
            self.base_channels,
            self.res_blocks_per_stage,
            self.time_embed_dim,
            *self.channel_multipliers,
        )
        if not self.channel_multipliers or any(c < 1 for c in counts):
            raise ValueError(f"all config counts must be >= 1: {self}")
        stages = len(self.channel_multipliers)
        if self.image_size % (2 ** (stages - 1)) != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2^{stages - 1}"
            )
        if self.class_conditional and self.num_classes < 1:
            raise ValueError("class_conditional requires num_classes >= 1")


@dataclass(frozen=True)
class ParameterVector:
    """Flat view of model weights plus the manifest describing their layout."""

    values: np.ndarray
    manifest: tuple = field(repr=False)

    def __post_init__(self):
        object.__setattr__(
            self,
            "manifest",
            tuple((name, tuple(shape)) for name, shape in self.manifest),
        )
        if self.values.ndim != 1:
            raise ValueError("values must be a flat vector")
        if len(self.values) != self.total_count:
            raise ValueError(
                f"values length {len(self.values)} != manifest total {self.total_count}"
            )

    @property
    def total_count(self) -> int:
        return int(sum(int(np.prod(shape)) for _, shape in self.manifest))


def flatten(named_arrays, manifest=None) -> ParameterVector:
    """Concatenate (name -> array) entries into a ParameterVector.

    Order comes from ``manifest`` when given, otherwise from the dict's own
    iteration order.
    """
    if manifest is None:
        manifest = tuple((name, tuple(a.shape)) for name, a in named_arrays.items())
    chunks = []
    for name, shape in manifest:
        a = named_arrays[name]
        if tuple(a.shape) != tuple(shape):
            raise ValueError(f"{name}: shape {a.shape} != manifest {shape}")
        chunks.append(np.asarray(a).ravel())
    return ParameterVector(values=np.concatenate(chunks), manifest=manifest)


def unflatten(params: ParameterVector) -> dict:
    """Inverse of :func:`flatten`; round-trips exactly."""
    out = {}
    offset = 0
    for name, shape in params.manifest:
        n = int(np.prod(shape))
        out[name] = params.values[offset : offset + n].reshape(shape).copy()
        offset += n
    return out


class Denoiser:
    """Stateless evaluator for one architecture; parameters are passed in.

    Each concurrent worker should own its own instance (the wrapped torch
    module is reused as scratch space between calls).
    """

    def __init__(self, config: DenoiserConfig, dtype: torch.dtype = torch.float32):
        self.config = config
        self.dtype = dtype
        self.module = UNet(
            in_channels=config.in_channels,
            image_size=config.image_size,
            base_channels=config.base_channels,
            channel_multipliers=config.channel_multipliers,
            res_blocks_per_stage=config.res_blocks_per_stage,
            time_embed_dim=config.time_embed_dim,
            class_conditional=config.class_conditional,
            num_classes=config.num_classes,
        ).to(dtype)
        self.manifest = tuple(
            (name, tuple(p.shape)) for name, p in self.module.named_parameters()
        )
        self.total_count = int(sum(p.numel() for p in self.module.parameters()))

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == torch.float64 else np.float32

    def init_params(self, seed: int) -> ParameterVector:
        """Deterministic initialization from a seed.

        Conv/linear weights are uniform in +-1/sqrt(fan_in), norm layers are
        identity, biases zero, label embeddings N(0, 0.02), and the output
        convolution is zeroed so a fresh model predicts zero noise.
        """
        rng = np.random.default_rng(seed)
        chunks = []
        for name, shape in self.manifest:
            if name.startswith("out_conv."):
                chunks.append(np.zeros(int(np.prod(shape))))
            elif name.startswith("label_embed."):
                chunks.append(0.02 * rng.standard_normal(int(np.prod(shape))))
            elif name.endswith(".weight") and len(shape) >= 2:
                fan_in = int(np.prod(shape[1:]))
                bound = 1.0 / np.sqrt(fan_in)
                chunks.append(rng.uniform(-bound, bound, int(np.prod(shape))))
            elif name.endswith(".weight"):  # norm scale
                chunks.append(np.ones(int(np.prod(shape))))
            else:  # biases
                chunks.append(np.zeros(int(np.prod(shape))))
        values = np.concatenate(chunks).astype(self.np_dtype)
        return ParameterVector(values=values, manifest=self.manifest)

    def _load(self, params: ParameterVector) -> None:
        if params.manifest != self.manifest:
            raise ValueError("parameter manifest does not match this architecture")
        offset = 0
        with torch.no_grad():
            for (name, shape), p in zip(self.manifest, self.module.parameters()):
                n = int(np.prod(shape))
                chunk = params.values[offset : offset + n].reshape(shape)
                p.copy_(torch.from_numpy(np.ascontiguousarray(chunk)))
                offset += n

    def _prepare_inputs(self, x, t, labels):
        xt = torch.from_numpy(np.ascontiguousarray(x)).to(self.dtype)
        tt = torch.from_numpy(np.ascontiguousarray(t)).long()
        lt = None
        if labels is not None:
            lt = torch.from_numpy(np.ascontiguousarray(labels)).long()
        return xt, tt, lt

    def predict_noise(
        self, params: ParameterVector, x_t: np.ndarray, t: np.ndarray, labels=None
    ) -> np.ndarray:
        """Evaluate the noise prediction; output shape equals input shape."""
        if x_t.ndim != 4 or x_t.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected (B, {self.config.in_channels}, H, W), got {x_t.shape}"
            )
        self._load(params)
        xt, tt, lt = self._prepare_inputs(x_t, t, labels)
        with torch.no_grad():
            out = self.module(xt, tt, lt)
        return out.numpy().astype(x_t.dtype, copy=False)

    def loss_gradient(
        self, params: ParameterVector, x0_batch: np.ndarray, sched: NoiseSchedule,
        rng, labels=None,
    ):
        """Loss and flat gradient for one batch.

        Draws (t, eps) in the same order and dtype as
        :func:`feddiff.diffusion.training_loss`, so the returned loss equals
        a training_loss replay of the same RNG stream exactly.
        """
        n = x0_batch.shape[0]
        t = rng.integers(1, sched.T + 1, size=n)
        eps = rng.standard_normal(x0_batch.shape, dtype=x0_batch.dtype)
        x_t = forward_sample(x0_batch, t, eps, sched)

        self._load(params)
        self.module.zero_grad(set_to_none=True)
        xt, tt, lt = self._prepare_inputs(x_t, t, labels)
        eps_t = torch.from_numpy(eps).to(self.dtype)
        pred = self.module(xt, tt, lt)
        loss_t = ((eps_t - pred) ** 2).flatten(1).sum(dim=1).mean()
        loss_t.backward()

        grad = np.concatenate(
            [
                (p.grad.numpy().ravel() if p.grad is not None else np.zeros(p.numel()))
                for p in self.module.parameters()
            ]
        ).astype(params.values.dtype, copy=False)
        # report the loss with the same float64 accumulation as training_loss
        resid = (eps - pred.detach().numpy().astype(eps.dtype)).astype(np.float64)
        loss = float(np.mean(np.sum(resid * resid, axis=(1, 2, 3))))
        return loss, grad


def save_checkpoint(
    path, params: ParameterVector, config: DenoiserConfig, extra: dict | None = None
) -> None:
    """Write manifest + config + raw little-endian float32 values."""
    header = {
        "format_version": _CKPT_VERSION,
        "config": asdict(config),
        "manifest": [[name, list(shape)] for name, shape in params.manifest],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(params.values.astype("<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (ParameterVector, DenoiserConfig, extra)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a denoiser checkpoint")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header["format_version"] != _CKPT_VERSION:
            raise ValueError(
                f"{path}: unsupported checkpoint version {header['format_version']}"
            )
        manifest = tuple((name, tuple(shape)) for name, shape in header["manifest"])
        count = int(sum(int(np.prod(shape)) for _, shape in manifest))
        values = np.frombuffer(f.read(count * 4), dtype="<f4").astype(np.float32)
    config = DenoiserConfig(**header["config"])
    params = ParameterVector(values=values, manifest=manifest)
    return params, config, header["extra"]
