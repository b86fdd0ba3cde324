"""Pseudo-3D conditional U-Net with spatially variant FiLM conditioning.

Every convolution in the residual path is factorized into an in-plane 2D
convolution applied per axial slice, followed by a 1D convolution along the
slice axis. Downsampling touches (H, W) only, so the slice axis keeps its full
resolution at every level.

Timestep conditioning is spatial: each voxel carries its own effective step
for each timepoint. A map takes at most two values, so embeddings are computed
once per distinct (tau1, tau2) pair and gathered per voxel.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CKPT_MAGIC = b"P3DCKPT1"
CKPT_VERSION = 1
_DTYPES = {"single": torch.float32, "double": torch.float64}
_NP_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8"), "int64": np.dtype("<i8")}


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


class ConfigConflictError(CheckpointError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 8
    out_channels: int = 2
    base_channels: int = 32
    levels: int = 3
    blocks_per_level: int = 2
    conv1d_kernel: int = 3
    conv2d_kernel: int = 3
    embed_dim: int = 128
    precision: str = "single"
    norm: str = "group"
    max_timestep: int = 1000

    def __post_init__(self):
        if self.in_channels != 8 or self.out_channels != 2:
            raise ValueError("the conditioning design fixes in_channels=8 and out_channels=2")
        if self.levels < 1 or self.blocks_per_level < 1 or self.base_channels < 1:
            raise ValueError("levels, blocks_per_level and base_channels must be >= 1")
        if self.conv1d_kernel % 2 == 0 or self.conv2d_kernel % 2 == 0:
            raise ValueError("kernel sizes must be odd for same padding")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even")
        if self.precision not in _DTYPES:
            raise ValueError(f"precision must be one of {sorted(_DTYPES)}")
        if self.norm not in ("group", "none"):
            raise ValueError("norm must be 'group' or 'none'")

    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.precision]

    @property
    def spatial_multiple(self) -> int:
        return 2 ** (self.levels - 1)

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


TINY = NetworkConfig(base_channels=4, levels=2, blocks_per_level=1, embed_dim=16)


def p3d_conv(h, weight_2d, weight_1d, bias_2d=None, bias_1d=None):
    """(2+1)D convolution of ``h`` with shape (B, C, D, H, W), same padding.

    ``weight_2d`` is (C2, C, k, k) and acts on every axial slice; ``weight_1d``
    is (C3, C2, k1) and acts along D at every in-plane location.
    """
    b, c, d, hh, ww = h.shape
    if weight_2d.shape[1] != c or weight_1d.shape[1] != weight_2d.shape[0]:
        raise ValueError(
            f"kernel shapes {tuple(weight_2d.shape)}, {tuple(weight_1d.shape)} do not fit {c} channels"
        )
    k2, k1 = weight_2d.shape[-1], weight_1d.shape[-1]
    slices = h.transpose(1, 2).reshape(b * d, c, hh, ww)
    y = F.conv2d(slices, weight_2d, bias_2d, padding=k2 // 2)
    c2 = y.shape[1]
    # Rearrange so that D becomes the sequence axis of a 1D convolution.
    seq = y.reshape(b, d, c2, hh, ww).permute(0, 3, 4, 2, 1).reshape(b * hh * ww, c2, d)
    z = F.conv1d(seq, weight_1d, bias_1d, padding=k1 // 2)
    c3 = z.shape[1]
    return z.reshape(b, hh, ww, c3, d).permute(0, 3, 4, 1, 2)


def sinusoidal_embedding(t, dim: int, max_period: float = 10000.0):
    """Standard transformer-style embedding of integer steps, shape (N, dim)."""
    half = dim // 2
    t = torch.as_tensor(t)
    dtype = t.dtype if t.is_floating_point() else torch.float64
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=dtype) / half)
    args = t.to(dtype)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class P3DConv(nn.Module):
    def __init__(self, cin: int, cout: int, k2: int = 3, k1: int = 3):
        super().__init__()
        self.conv2d = nn.Conv2d(cin, cout, k2, padding=k2 // 2)
        self.conv1d = nn.Conv1d(cout, cout, k1, padding=k1 // 2)
        # Start as a purely in-plane convolution; inter-slice mixing is learned.
        nn.init.dirac_(self.conv1d.weight)
        nn.init.zeros_(self.conv1d.bias)

    @property
    def depth_radius(self) -> int:
        return self.conv1d.kernel_size[0] // 2

    def forward(self, h):
        return p3d_conv(h, self.conv2d.weight, self.conv1d.weight, self.conv2d.bias, self.conv1d.bias)


class TimestepEmbedding(nn.Module):
    """Sinusoidal features of a step followed by a learned two-layer projection."""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2:
            raise ValueError(f"embedding dim must be even, got {dim}")
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t):
        w = self.mlp[0].weight
        return self.mlp(sinusoidal_embedding(t, self.dim).to(w.dtype))


@dataclass
class EmbeddingTable:
    """Distinct per-voxel embeddings plus the voxel -> row index map.

    ``table`` is (P, E); ``index`` is (B, D, H, W) with values in [0, P).
    """

    table: torch.Tensor
    index: torch.Tensor

    def dense(self) -> torch.Tensor:
        return self.table[self.index].permute(0, 4, 1, 2, 3)


def downsample_tau(tau):
    """Halve (H, W) of an integer step map; a coarse voxel takes the noisiest child."""
    pooled = F.max_pool3d(tau[:, None].double(), kernel_size=(1, 2, 2))
    return pooled[:, 0].long()


def spatial_timestep_embedding(embed: TimestepEmbedding, tau1, tau2=None) -> EmbeddingTable:
    """Embedding field of one or two step maps (concatenated per voxel).

    Only the distinct steps present are embedded, then broadcast through an
    index map.
    """
    maps = [tau1] if tau2 is None else [tau1, tau2]
    tables, inverses = [], []
    for tau in maps:
        values, inverse = torch.unique(tau, return_inverse=True)
        # Row by row so each vector is bit-identical to embedding that step alone.
        tables.append(torch.cat([embed(v.reshape(1)) for v in values]))
        inverses.append(inverse)
    if len(maps) == 1:
        return EmbeddingTable(tables[0], inverses[0])
    n2 = tables[1].shape[0]
    pair = inverses[0] * n2 + inverses[1]
    used, index = torch.unique(pair, return_inverse=True)
    table = torch.cat([tables[0][used // n2], tables[1][used % n2]], dim=-1)
    return EmbeddingTable(table, index)


def spatial_film(h, emb: torch.Tensor, weight, bias):
    """Per-voxel affine modulation ``(1 + dgamma) * h + beta`` from a dense embedding field.

    ``emb`` is (B, E, D, H, W); ``weight`` (2C, E) and ``bias`` (2C,) project it
    to (dgamma, beta).
    """
    if emb.shape[0] != h.shape[0] or emb.shape[2:] != h.shape[2:]:
        raise ValueError(f"embedding {tuple(emb.shape)} does not match features {tuple(h.shape)}")
    params = torch.einsum("oe,bedhw->bodhw", weight, emb) + bias[None, :, None, None, None]
    dgamma, beta = params.chunk(2, dim=1)
    return (1.0 + dgamma) * h + beta


class SpatialFiLM(nn.Module):
    """FiLM layer driven by an ``EmbeddingTable``; zero-initialized to the identity."""

    def __init__(self, emb_dim: int, channels: int):
        super().__init__()
        self.proj = nn.Linear(emb_dim, 2 * channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, h, emb: EmbeddingTable):
        params = self.proj(F.silu(emb.table))[emb.index]
        dgamma, beta = params.permute(0, 4, 1, 2, 3).chunk(2, dim=1)
        return (1.0 + dgamma) * h + beta


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "none":
        return nn.Identity()
    return nn.GroupNorm(math.gcd(channels, 8), channels)


class P3DResBlock(nn.Module):
    """norm -> SiLU -> P3D conv -> spatial FiLM -> SiLU -> P3D conv, plus skip."""

    def __init__(self, cin: int, cout: int, emb_dim: int, cfg: NetworkConfig):
        super().__init__()
        self.norm = _norm(cfg.norm, cin)
        self.conv1 = P3DConv(cin, cout, cfg.conv2d_kernel, cfg.conv1d_kernel)
        self.film = SpatialFiLM(emb_dim, cout)
        self.conv2 = P3DConv(cout, cout, cfg.conv2d_kernel, cfg.conv1d_kernel)
        self.skip = nn.Identity() if cin == cout else nn.Conv3d(cin, cout, 1)

    def forward(self, h, emb: EmbeddingTable):
        y = self.conv1(F.silu(self.norm(h)))
        y = self.film(y, emb)
        y = self.conv2(F.silu(y))
        return self.skip(h) + y


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv3d(channels, channels, (1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1))

    def forward(self, h):
        return self.conv(h)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv3d(channels, channels, (1, 3, 3), padding=(0, 1, 1))

    def forward(self, h):
        return self.conv(F.interpolate(h, scale_factor=(1, 2, 2), mode="nearest"))


class P3DUNet(nn.Module):
    """Conditional U-Net mapping the 8-channel input to two velocity fields."""

    def __init__(self, config: NetworkConfig | None = None, seed: int | None = 0):
        super().__init__()
        cfg = config or NetworkConfig()
        self.config = cfg
        self.step = 0
        gen_state = torch.random.get_rng_state()
        if seed is not None:
            torch.manual_seed(seed)
        try:
            self._build(cfg)
        finally:
            if seed is not None:
                torch.random.set_rng_state(gen_state)
        self.to(cfg.dtype)

    def _build(self, cfg: NetworkConfig):
        e = cfg.embed_dim
        film_dim = 2 * e
        self.time_embed = TimestepEmbedding(e)
        self.stem = P3DConv(cfg.in_channels, cfg.base_channels, cfg.conv2d_kernel, cfg.conv1d_kernel)

        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        skip_channels = [cfg.base_channels]
        ch = cfg.base_channels
        for level in range(cfg.levels):
            blocks = nn.ModuleList()
            for _ in range(cfg.blocks_per_level):
                blocks.append(P3DResBlock(ch, cfg.channels(level), film_dim, cfg))
                ch = cfg.channels(level)
                skip_channels.append(ch)
            self.down_blocks.append(blocks)
            if level < cfg.levels - 1:
                self.downsamplers.append(Downsample(ch))
                skip_channels.append(ch)

        self.mid_blocks = nn.ModuleList([P3DResBlock(ch, ch, film_dim, cfg) for _ in range(2)])

        self.up_blocks = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for level in reversed(range(cfg.levels)):
            blocks = nn.ModuleList()
            for _ in range(cfg.blocks_per_level + 1):
                blocks.append(P3DResBlock(ch + skip_channels.pop(), cfg.channels(level), film_dim, cfg))
                ch = cfg.channels(level)
            self.up_blocks.append(blocks)
            if level > 0:
                self.upsamplers.append(Upsample(ch))

        self.out_norm = _norm(cfg.norm, ch)
        self.out_conv = P3DConv(ch, cfg.out_channels, cfg.conv2d_kernel, cfg.conv1d_kernel)

    def depth_receptive_radius(self) -> int:
        """Slices of context on each side that can influence one output voxel."""
        return sum(m.depth_radius for m in self.modules() if isinstance(m, P3DConv))

    def _check(self, h, name: str):
        if not torch.isfinite(h).all():
            raise NonFiniteError(f"non-finite activations after {name}")

    def forward(self, x, tau1, tau2):
        """Predict velocities for both timepoints.

        Args:
            x: condition tensor (B, 8, D, H, W).
            tau1, tau2: integer step maps (B, D, H, W) for the two timepoints.

        Returns:
            Tensor (B, 2, D, H, W).
        """
        cfg = self.config
        if x.ndim != 5 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected input (B, {cfg.in_channels}, D, H, W), got {tuple(x.shape)}")
        b, _, d, hh, ww = x.shape
        if tau1.shape != (b, d, hh, ww) or tau2.shape != (b, d, hh, ww):
            raise ValueError("step maps must be (B, D, H, W) matching the input")
        m = cfg.spatial_multiple
        if hh % m or ww % m:
            raise ValueError(f"H and W must be divisible by {m}, got {hh}x{ww}")
        x = x.to(cfg.dtype)

        taus = [(tau1, tau2)]
        for _ in range(cfg.levels - 1):
            taus.append(tuple(downsample_tau(t) for t in taus[-1]))
        embs = [spatial_timestep_embedding(self.time_embed, *pair) for pair in taus]

        h = self.stem(x)
        skips = [h]
        for level, blocks in enumerate(self.down_blocks):
            for i, block in enumerate(blocks):
                h = block(h, embs[level])
                self._check(h, f"down{level}.{i}")
                skips.append(h)
            if level < cfg.levels - 1:
                h = self.downsamplers[level](h)
                skips.append(h)
        for i, block in enumerate(self.mid_blocks):
            h = block(h, embs[-1])
            self._check(h, f"mid.{i}")
        for j, blocks in enumerate(self.up_blocks):
            level = cfg.levels - 1 - j
            for i, block in enumerate(blocks):
                h = block(torch.cat([h, skips.pop()], dim=1), embs[level])
                self._check(h, f"up{level}.{i}")
            if level > 0:
                h = self.upsamplers[j](h)
        out = self.out_conv(F.silu(self.out_norm(h)))
        self._check(out, "out")
        return out


def parameter_gradients(model: P3DUNet, x, tau1, tau2, grad_out) -> dict[str, torch.Tensor]:
    """Vector-Jacobian product of the forward pass w.r.t. every parameter."""
    names, params = zip(*model.named_parameters())
    out = model(x, tau1, tau2)
    grads = torch.autograd.grad(out, params, grad_outputs=grad_out.to(out.dtype), allow_unused=True)
    return {n: torch.zeros_like(p) if g is None else g for n, p, g in zip(names, params, grads)}


def _block_bytes(t: torch.Tensor) -> tuple[str, bytes]:
    arr = t.detach().cpu().numpy()
    tag = str(arr.dtype)
    if tag not in _NP_DTYPES:
        raise CheckpointError(f"unsupported tensor dtype {tag}")
    return tag, np.ascontiguousarray(arr, dtype=_NP_DTYPES[tag]).tobytes()


def save_checkpoint(model: P3DUNet, path, extra_tensors: dict | None = None, extra: dict | None = None) -> Path:
    """Write parameters, config and step counter (plus optional optimizer blocks).

    Layout: magic, uint32 big-endian header length, JSON header, then the raw
    little-endian payload of each named block in header order.
    """
    blocks = [(f"param/{n}", p) for n, p in model.state_dict().items()]
    blocks += [(f"extra/{n}", t) for n, t in (extra_tensors or {}).items()]
    entries, payloads, offset = [], [], 0
    for name, tensor in blocks:
        tag, raw = _block_bytes(tensor)
        entries.append({"name": name, "dtype": tag, "shape": list(tensor.shape), "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = {
        "version": CKPT_VERSION,
        "config": model.config.to_dict(),
        "step": int(model.step),
        "blocks": entries,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack(">I", len(header_bytes)))
        fh.write(header_bytes)
        for raw in payloads:
            fh.write(raw)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    raw = Path(path).read_bytes()
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        (hlen,) = struct.unpack(">I", raw[8:12])
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('version')} != {CKPT_VERSION}")
    base = 12 + hlen
    tensors = {}
    for entry in header["blocks"]:
        start = base + entry["offset"]
        chunk = raw[start : start + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated block {entry['name']}")
        arr = np.frombuffer(chunk, dtype=_NP_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    return header, tensors


def load_checkpoint(path, config: NetworkConfig | None = None, with_extras: bool = False):
    """Rebuild a model from a checkpoint.

    If ``config`` is given it must equal the stored configuration, otherwise
    ``ConfigConflictError`` is raised. With ``with_extras`` also returns the
    extra tensors and header metadata.
    """
    header, tensors = read_checkpoint(path)
    try:
        stored = NetworkConfig(**header["config"])
    except TypeError as exc:
        raise CheckpointError(f"{path}: unreadable config ({exc})") from exc
    if config is not None and config != stored:
        diff = {k: (v, getattr(stored, k)) for k, v in config.to_dict().items() if getattr(stored, k) != v}
        raise ConfigConflictError(f"{path}: config conflict (requested, stored): {diff}")
    model = P3DUNet(stored, seed=None)
    state = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)[:5]}")
    model.load_state_dict(state, strict=True)
    model.step = int(header["step"])
    for p in model.parameters():
        if not torch.isfinite(p).all():
            raise CheckpointError(f"{path}: non-finite parameters")
    if with_extras:
        extras = {k[len("extra/"):]: v for k, v in tensors.items() if k.startswith("extra/")}
        return model, extras, header.get("extra", {})
    return model
