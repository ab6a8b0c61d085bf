"""Vision transformer backbone with a two-layer classification head.

Blocks are pre-norm: x + Attn(LN(x)) followed by x + MLP(LN(x)). The
attention projections use the row-vector convention Q = x @ W_q with
x of shape (tokens, D) and fused per-block weights of shape (D, D);
low-rank adapters, when supplied, modify only the query/key paths.

Parameter naming scheme (depth blocks, embed dim D, mlp ratio R,
head hidden F):

    patch_embed.weight           (patch_size^2 * channels, D)
    patch_embed.bias             (D,)
    cls_token                    (1, D)
    pos_embed                    (n_tokens, D)
    blocks.{i}.ln1.gain/.bias    (D,)
    blocks.{i}.attn.w_q/.w_k/.w_v/.w_o   (D, D)
    blocks.{i}.ln2.gain/.bias    (D,)
    blocks.{i}.mlp.fc1.weight    (D, R*D)     .bias (R*D,)
    blocks.{i}.mlp.fc2.weight    (R*D, D)     .bias (D,)
    norm.gain/.bias              (D,)
    head.fc1.weight              (D, F)       .bias (F,)
    head.fc2.weight              (F, 1)       .bias (1,)

The head feature tap is the post-GELU output of head.fc1; the logit is
head.fc2 applied to it, squashed by sigmoid at the loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import tnsr
from .autograd import Parameter, Tensor
from .errors import ConfigError, ContractError, ShapeError


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 1
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    head_hidden: int = 32
    seed: int = 0

    def __post_init__(self):
        if min(self.image_size, self.patch_size, self.channels, self.embed_dim,
               self.depth, self.heads, self.mlp_ratio, self.head_hidden) < 1:
            raise ConfigError("all ViT dimensions must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1  # class token

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


class ModelState:
    """Ordered registry of named parameters plus the config they realize."""

    def __init__(self, config: ViTConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Parameter] = {}

    def add(self, name: str, array, trainable: bool = True) -> Parameter:
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        p = Parameter(name, Tensor(np.asarray(array, dtype=self.dtype)), trainable)
        self.params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def tensor(self, name: str) -> Tensor:
        return self.params[name].tensor

    def named_parameters(self):
        return self.params.items()

    def trainable_names(self):
        return [n for n, p in self.params.items() if p.trainable]

    def frozen_names(self):
        return [n for n, p in self.params.items() if not p.trainable]

    def set_all_trainable(self, flag: bool):
        for p in self.params.values():
            p.trainable = flag


def expected_parameter_names(cfg: ViTConfig) -> list[str]:
    """Enumerate the documented naming scheme for a config."""
    names = ["patch_embed.weight", "patch_embed.bias", "cls_token", "pos_embed"]
    for i in range(cfg.depth):
        b = f"blocks.{i}"
        names += [f"{b}.ln1.gain", f"{b}.ln1.bias"]
        names += [f"{b}.attn.w_q", f"{b}.attn.w_k", f"{b}.attn.w_v", f"{b}.attn.w_o"]
        names += [f"{b}.ln2.gain", f"{b}.ln2.bias"]
        names += [f"{b}.mlp.fc1.weight", f"{b}.mlp.fc1.bias",
                  f"{b}.mlp.fc2.weight", f"{b}.mlp.fc2.bias"]
    names += ["norm.gain", "norm.bias",
              "head.fc1.weight", "head.fc1.bias", "head.fc2.weight", "head.fc2.bias"]
    return names


def _trunc_normal(rng: np.random.Generator, shape, std: float):
    """Normal(0, std) resampled until all values lie within two sigma."""
    vals = rng.standard_normal(shape)
    bad = np.abs(vals) > 2.0
    while bad.any():
        vals[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(vals) > 2.0
    return vals * std


def init_model(cfg: ViTConfig, dtype=np.float32) -> ModelState:
    """Fresh model; weights truncated-normal std 0.02, biases zero,
    layer-norm gains one. Deterministic under cfg.seed."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    model = ModelState(cfg, dtype)
    d = cfg.embed_dim
    std = 0.02

    def w(shape):
        return _trunc_normal(rng, shape, std)

    model.add("patch_embed.weight", w((cfg.patch_dim, d)))
    model.add("patch_embed.bias", np.zeros(d))
    model.add("cls_token", w((1, d)))
    model.add("pos_embed", w((cfg.n_tokens, d)))
    hidden = cfg.mlp_ratio * d
    for i in range(cfg.depth):
        b = f"blocks.{i}"
        model.add(f"{b}.ln1.gain", np.ones(d))
        model.add(f"{b}.ln1.bias", np.zeros(d))
        for proj in ("w_q", "w_k", "w_v", "w_o"):
            model.add(f"{b}.attn.{proj}", w((d, d)))
        model.add(f"{b}.ln2.gain", np.ones(d))
        model.add(f"{b}.ln2.bias", np.zeros(d))
        model.add(f"{b}.mlp.fc1.weight", w((d, hidden)))
        model.add(f"{b}.mlp.fc1.bias", np.zeros(hidden))
        model.add(f"{b}.mlp.fc2.weight", w((hidden, d)))
        model.add(f"{b}.mlp.fc2.bias", np.zeros(d))
    model.add("norm.gain", np.ones(d))
    model.add("norm.bias", np.zeros(d))
    model.add("head.fc1.weight", w((d, cfg.head_hidden)))
    model.add("head.fc1.bias", np.zeros(cfg.head_hidden))
    model.add("head.fc2.weight", w((cfg.head_hidden, 1)))
    model.add("head.fc2.bias", np.zeros(1))
    return model


def patchify(images: Tensor, cfg: ViTConfig) -> Tensor:
    """(B, C, H, W) -> (B, n_patches, patch_dim) in row-major patch order."""
    b = images.shape[0]
    p, g, c = cfg.patch_size, cfg.grid, cfg.channels
    x = ag.reshape(images, (b, c, g, p, g, p))
    x = ag.transpose(x, (0, 2, 4, 1, 3, 5))
    return ag.reshape(x, (b, cfg.n_patches, cfg.patch_dim))


def attention(h: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor,
              heads: int, q_adapter=None, k_adapter=None) -> Tensor:
    """Multi-head self-attention over (B, N, D) with optional low-rank
    query/key adapters. The value path is never adapted."""
    from .lora import adapted_projection

    b, n, d = h.shape
    dh = d // heads

    def project(w, adapter):
        if adapter is None:
            return ag.matmul(h, w)
        return adapted_projection(h, w, adapter)

    q = project(w_q, q_adapter)
    k = project(w_k, k_adapter)
    v = ag.matmul(h, w_v)

    def split(t):
        return ag.transpose(ag.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = ag.scale(ag.matmul(qh, ag.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    ctx = ag.matmul(ag.softmax_rows(scores), vh)
    merged = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    return ag.matmul(merged, w_o)


def forward(model: ModelState, images: Tensor, adapters=None):
    """Full forward pass.

    Returns (logit, features): logit has shape (B, 1); features is the
    post-activation output of head.fc1 with shape (B, head_hidden), the
    embedding the center loss operates on.
    """
    cfg = model.config
    if images.data.ndim != 4 or images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ShapeError(
            f"images must be (B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}),"
            f" got {tuple(images.shape)}"
        )
    if images.dtype != model.dtype:
        raise ContractError(
            f"image dtype {images.dtype.name} does not match model dtype {model.dtype.name}"
        )
    if adapters is not None:
        adapters.validate_against(cfg)

    b = images.shape[0]
    t = model.tensor

    x = ag.add(ag.matmul(patchify(images, cfg), t("patch_embed.weight")), t("patch_embed.bias"))
    cls = ag.broadcast_to(ag.reshape(t("cls_token"), (1, 1, cfg.embed_dim)),
                          (b, 1, cfg.embed_dim))
    x = ag.add(ag.concat_rows(cls, x), t("pos_embed"))

    for i in range(cfg.depth):
        blk = f"blocks.{i}"
        h = ag.layer_norm(x, t(f"{blk}.ln1.gain"), t(f"{blk}.ln1.bias"))
        x = ag.add(x, attention(
            h,
            t(f"{blk}.attn.w_q"), t(f"{blk}.attn.w_k"),
            t(f"{blk}.attn.w_v"), t(f"{blk}.attn.w_o"),
            cfg.heads,
            q_adapter=adapters.query_adapter(i) if adapters is not None else None,
            k_adapter=adapters.key_adapter(i) if adapters is not None else None,
        ))
        h2 = ag.layer_norm(x, t(f"{blk}.ln2.gain"), t(f"{blk}.ln2.bias"))
        m = ag.gelu(ag.add(ag.matmul(h2, t(f"{blk}.mlp.fc1.weight")), t(f"{blk}.mlp.fc1.bias")))
        m = ag.add(ag.matmul(m, t(f"{blk}.mlp.fc2.weight")), t(f"{blk}.mlp.fc2.bias"))
        x = ag.add(x, m)

    x = ag.layer_norm(x, t("norm.gain"), t("norm.bias"))
    cls_out = ag.select_row(x, 0)
    features = ag.gelu(ag.add(ag.matmul(cls_out, t("head.fc1.weight")), t("head.fc1.bias")))
    logit = ag.add(ag.matmul(features, t("head.fc2.weight")), t("head.fc2.bias"))
    return logit, features


def save_checkpoint(model: ModelState, path, adapters=None):
    """Write model (and adapter) tensors into one container file."""
    entries = {name: p.tensor for name, p in model.named_parameters()}
    if adapters is not None:
        entries.update(adapters.checkpoint_entries())
    tnsr.write_container(path, entries)


def load_checkpoint(path, cfg: ViTConfig, dtype=np.float32):
    """Load a container back into (ModelState, AdapterSet or None).

    The entry name set must match the config's naming scheme exactly;
    mismatches report the missing and unexpected names.
    """
    from .lora import adapters_from_entries

    entries = tnsr.read_container(path)
    model_entries = {n: t for n, t in entries.items() if not n.startswith("lora.")}
    lora_entries = {n: t for n, t in entries.items() if n.startswith("lora.")}

    expected = expected_parameter_names(cfg)
    missing = [n for n in expected if n not in model_entries]
    extra = [n for n in model_entries if n not in set(expected)]
    if missing or extra:
        raise ConfigError(
            f"checkpoint does not match config: missing names {missing}, unexpected names {extra}"
        )

    model = ModelState(cfg, dtype)
    for name in expected:
        arr = model_entries[name].data
        if arr.dtype != model.dtype:
            arr = arr.astype(model.dtype)
        model.add(name, arr)

    adapters = adapters_from_entries(lora_entries, dtype) if lora_entries else None
    return model, adapters
