"""Toy video diffusion transformer.

Clips of shape (frames, height, width, channels) are patchified per frame,
embedded with a learned position table plus timestep/condition lookups, and
run through pre-norm blocks of temporal attention (tokens attend across
frames at a fixed spatial site), spatial attention (across sites within a
frame), and a gelu MLP.  Two zero-initialized heads read out the noise
estimate and the variance-interpolation coefficient.

Every affine layer inside the blocks is registered as *adaptable*; the model
fingerprint hashes their (name, out_features, in_features) triples so adapter
files can prove they were trained against a structurally identical model.
"""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, FormatError
from .fileio import read_container, unpack_arrays, write_container
from .schedule import SCHEDULE_KINDS, Schedule, make_schedule
from .tensor import Tensor

MODEL_MAGIC = b"UFOM"
_INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 8
    height: int = 16
    width: int = 16
    channels: int = 1
    patch: int = 2
    dim: int = 64
    heads: int = 4
    mlp_dim: int = 256
    blocks: int = 2
    cond_vocab: int = 36
    timesteps: int = 100
    schedule: str = "cosine"
    fps: float = 8.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ContractError(f"patch {self.patch} must divide height {self.height} and width {self.width}")
        if self.dim % self.heads:
            raise ContractError(f"heads {self.heads} must divide dim {self.dim}")
        if self.schedule not in SCHEDULE_KINDS:
            raise ContractError(f"unknown schedule kind {self.schedule!r}")
        if self.dtype not in ("float32", "float64"):
            raise ContractError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for name in ("frames", "height", "width", "channels", "patch", "dim",
                     "heads", "mlp_dim", "blocks", "cond_vocab", "timesteps"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ContractError(f"config field {name} must be a positive integer, got {v!r}")

    @property
    def sites(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(doc: dict) -> "ModelConfig":
        known = ModelConfig.__dataclass_fields__.keys()
        extra = set(doc) - set(known)
        if extra:
            raise FormatError(f"unknown model config fields {sorted(extra)}")
        try:
            return ModelConfig(**doc)
        except (TypeError, ContractError) as exc:
            raise FormatError(f"bad model config: {exc}") from None


@dataclass
class DiffusionModel:
    config: ModelConfig
    params: "OrderedDict[str, Tensor]"
    sched: Schedule = field(repr=False, default=None)

    def __post_init__(self):
        if self.sched is None:
            self.sched = make_schedule(self.config.schedule, self.config.timesteps)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def trainable(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, v) for k, v in self.params.items() if v.requires_grad)


def _affine_specs(cfg: ModelConfig) -> list[tuple[str, int, int]]:
    """Ordered (name, out_features, in_features) for every block affine layer."""
    specs = []
    for b in range(cfg.blocks):
        for attn in ("tattn", "sattn"):
            for piece in ("q", "k", "v", "proj"):
                specs.append((f"block{b}.{attn}.{piece}", cfg.dim, cfg.dim))
        specs.append((f"block{b}.mlp.fc1", cfg.mlp_dim, cfg.dim))
        specs.append((f"block{b}.mlp.fc2", cfg.dim, cfg.mlp_dim))
    return specs


def adaptable_layers(model_or_cfg) -> list[tuple[str, int, int]]:
    cfg = model_or_cfg.config if isinstance(model_or_cfg, DiffusionModel) else model_or_cfg
    return _affine_specs(cfg)


def fingerprint(model_or_cfg) -> str:
    """sha256 over the ordered adaptable-layer names and shapes (never weights)."""
    text = ";".join(f"{name}:{m}:{n}" for name, m, n in adaptable_layers(model_or_cfg))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def build_model(cfg: ModelConfig, seed: int = 0) -> DiffusionModel:
    """Fresh model with N(0, 0.02) weights and zero-initialized output heads."""
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype

    def normal(*shape):
        return Tensor((rng.normal(size=shape) * _INIT_STD).astype(dt), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dt), requires_grad=True)

    p: "OrderedDict[str, Tensor]" = OrderedDict()
    p["patch_embed.w"] = normal(cfg.dim, cfg.patch_dim)
    p["patch_embed.b"] = zeros(cfg.dim)
    p["pos_emb"] = normal(cfg.frames, cfg.sites, cfg.dim)
    p["t_table"] = normal(cfg.timesteps, cfg.dim)
    p["cond_table"] = normal(cfg.cond_vocab, cfg.dim)
    for b in range(cfg.blocks):
        for ln in ("ln1", "ln2", "ln3"):
            p[f"block{b}.{ln}.g"] = ones(cfg.dim)
            p[f"block{b}.{ln}.b"] = zeros(cfg.dim)
    for name, m, n in _affine_specs(cfg):
        p[name + ".w"] = normal(m, n)
        p[name + ".b"] = zeros(m)
    p["final_ln.g"] = ones(cfg.dim)
    p["final_ln.b"] = zeros(cfg.dim)
    # zero heads: the fresh model predicts zero noise and mid-interpolation variance
    p["head_eps.w"] = zeros(cfg.patch_dim, cfg.dim)
    p["head_eps.b"] = zeros(cfg.patch_dim)
    p["head_sigma.w"] = zeros(cfg.patch_dim, cfg.dim)
    p["head_sigma.b"] = zeros(cfg.patch_dim)
    return DiffusionModel(cfg, p)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def _linear(x: Tensor, name: str, params, stack=None) -> Tensor:
    """Affine layer y = x W^T + b on the trailing axis, with adapter hook."""
    w, b = params[name + ".w"], params[name + ".b"]
    lead = x.shape[:-1]
    x2 = T.reshape(x, (-1, x.shape[-1]))
    y = T.add(T.matmul(x2, T.transpose(w)), b)
    if stack is not None:
        y = stack.apply(name, x2, y)
    return T.reshape(y, lead + (y.shape[-1],))


def _attention(h: Tensor, prefix: str, params, stack, heads: int) -> Tensor:
    """Self-attention over the middle axis of (groups, length, dim)."""
    g, length, dim = h.shape
    hd = dim // heads
    scale = 1.0 / math.sqrt(hd)

    def split(x):  # (g, L, dim) -> (g, heads, L, hd)
        return T.transpose(T.reshape(x, (g, length, heads, hd)), (0, 2, 1, 3))

    q = split(_linear(h, prefix + ".q", params, stack))
    k = split(_linear(h, prefix + ".k", params, stack))
    v = split(_linear(h, prefix + ".v", params, stack))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale)
    att = T.softmax(scores)
    out = T.matmul(att, v)  # (g, heads, L, hd)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (g, length, dim))
    return _linear(out, prefix + ".proj", params, stack)


def _patchify(z: Tensor, cfg: ModelConfig) -> Tensor:
    b, f = z.shape[0], cfg.frames
    hp, wp, p, c = cfg.height // cfg.patch, cfg.width // cfg.patch, cfg.patch, cfg.channels
    x = T.reshape(z, (b, f, hp, p, wp, p, c))
    x = T.transpose(x, (0, 1, 2, 4, 3, 5, 6))
    return T.reshape(x, (b, f, cfg.sites, cfg.patch_dim))


def _unpatchify(x: Tensor, cfg: ModelConfig) -> Tensor:
    b, f = x.shape[0], cfg.frames
    hp, wp, p, c = cfg.height // cfg.patch, cfg.width // cfg.patch, cfg.patch, cfg.channels
    y = T.reshape(x, (b, f, hp, wp, p, p, c))
    y = T.transpose(y, (0, 1, 2, 4, 3, 5, 6))
    return T.reshape(y, (b, f, cfg.height, cfg.width, c))


def forward(model: DiffusionModel, z_t, t, cond, stack=None) -> tuple[Tensor, Tensor]:
    """Predict (eps_hat, v) for noisy latents z_t at timesteps t under condition ids.

    `stack` is an optional adapter stack whose entries modulate the adaptable
    affine layers; `stack=None` and a stack at intensity zero take the same
    code path through the base weights.
    """
    cfg = model.config
    p = model.params
    expect = (cfg.frames, cfg.height, cfg.width, cfg.channels)
    z_arr = z_t.data if isinstance(z_t, Tensor) else np.asarray(z_t)
    if z_arr.ndim != 5 or z_arr.shape[1:] != expect:
        raise DimensionError(f"z_t shape {z_arr.shape} does not match (batch,) + {expect}")
    batch = z_arr.shape[0]
    t = np.asarray(t)
    cond = np.asarray(cond)
    if t.shape != (batch,) or not np.issubdtype(t.dtype, np.integer):
        raise ContractError(f"t must be {batch} integer timesteps, got shape {t.shape}")
    if t.min() < 1 or t.max() > cfg.timesteps:
        raise ContractError(f"timesteps must lie in [1, {cfg.timesteps}]")
    if cond.shape != (batch,) or not np.issubdtype(cond.dtype, np.integer):
        raise ContractError(f"cond must be {batch} integer ids, got shape {cond.shape}")
    if cond.min() < 0 or cond.max() >= cfg.cond_vocab:
        raise ContractError(f"condition ids must lie in [0, {cfg.cond_vocab})")
    if stack is not None:
        stack.check_model(model)

    z = z_t if isinstance(z_t, Tensor) else Tensor(z_arr.astype(cfg.np_dtype, copy=False))
    x = _linear(_patchify(z, cfg), "patch_embed", p)          # (B, F, S, dim)
    x = T.add(x, p["pos_emb"])                                 # suffix broadcast over batch
    ctx = T.add(T.take_rows(p["t_table"], t - 1), T.take_rows(p["cond_table"], cond))
    ctx = T.expand(T.reshape(ctx, (batch, 1, 1, cfg.dim)), x.shape)
    x = T.add(x, ctx)

    f, s, dim = cfg.frames, cfg.sites, cfg.dim
    for bidx in range(cfg.blocks):
        pre = f"block{bidx}"
        # temporal attention: across frames at each spatial site
        h = T.layernorm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        h = T.reshape(T.transpose(h, (0, 2, 1, 3)), (batch * s, f, dim))
        h = _attention(h, f"{pre}.tattn", p, stack, cfg.heads)
        h = T.transpose(T.reshape(h, (batch, s, f, dim)), (0, 2, 1, 3))
        x = T.add(x, h)
        # spatial attention: across sites within each frame
        h = T.layernorm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        h = T.reshape(h, (batch * f, s, dim))
        h = _attention(h, f"{pre}.sattn", p, stack, cfg.heads)
        h = T.reshape(h, (batch, f, s, dim))
        x = T.add(x, h)
        # position-wise MLP
        h = T.layernorm(x, p[f"{pre}.ln3.g"], p[f"{pre}.ln3.b"])
        h = _linear(T.gelu(_linear(h, f"{pre}.mlp.fc1", p, stack)), f"{pre}.mlp.fc2", p, stack)
        x = T.add(x, h)

    x = T.layernorm(x, p["final_ln.g"], p["final_ln.b"])
    eps_hat = _unpatchify(_linear(x, "head_eps", p), cfg)
    v = _unpatchify(_linear(x, "head_sigma", p), cfg)
    return eps_hat, v


# ---------------------------------------------------------------------------
# checkpoint I/O (UFOM container)
# ---------------------------------------------------------------------------

def save_model(model: DiffusionModel, path) -> None:
    names = list(model.params.keys())
    header = {
        "kind": "model",
        "config": model.config.to_dict(),
        "fingerprint": fingerprint(model),
        "param_names": names,
        "param_shapes": [list(model.params[n].shape) for n in names],
    }
    write_container(path, MODEL_MAGIC, header, [model.params[n].data for n in names])


def load_model(path) -> DiffusionModel:
    header, payload, at = read_container(path, MODEL_MAGIC)
    for key in ("config", "fingerprint", "param_names", "param_shapes"):
        if key not in header:
            raise FormatError(f"model header is missing '{key}'")
    cfg = ModelConfig.from_dict(header["config"])
    if cfg.dtype != "float32":
        raise FormatError("model checkpoints are stored in float32 only")
    reference = build_model(cfg, seed=0)
    names = header["param_names"]
    if names != list(reference.params.keys()):
        raise FormatError("model header parameter registry does not match the architecture")
    shapes = [tuple(s) for s in header["param_shapes"]]
    expected = [reference.params[n].shape for n in names]
    if shapes != expected:
        raise FormatError("model header parameter shapes do not match the architecture")
    if header["fingerprint"] != fingerprint(cfg):
        raise FormatError("model header fingerprint does not match the architecture")
    arrays = unpack_arrays(payload, at, zip(names, shapes))
    params = OrderedDict((n, Tensor(arrays[n], requires_grad=True)) for n in names)
    return DiffusionModel(cfg, params)
