"""Toy multimodal DiT velocity model with Double and Single joint-attention
blocks and attention instrumentation (record, replace, mix).

Double blocks keep separate text/visual projections and attend jointly over
the concatenated token stream; Single blocks run one shared projection over
the concatenation. A controller can observe every attention site and
substitute the visual Q/K/V segments; text segments are never exposed for
substitution. With no controller (or a purely recording one) the forward pass
is bit-identical to an uninstrumented run.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
import torch
from torch import Tensor, nn

from .errors import CheckpointError, ControllerShapeError, ShapeMismatchError
from .flow import EvalTag
from .text import DEFAULT_VOCAB, TokenIds, Vocabulary

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    hidden_dim: int = 128
    num_heads: int = 4
    num_double_blocks: int = 4
    num_single_blocks: int = 4
    vocab_size: int = 64
    max_text_tokens: int = 8
    time_embed_dim: int = 128

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.hidden_dim % 4 != 0:
            raise ValueError("hidden_dim must be divisible by 4 for 2-D positional embeddings")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_visual_tokens(self) -> int:
        return self.grid_size * self.grid_size


@dataclass(frozen=True)
class AttentionSite:
    """Identity of one attention operation inside one model evaluation."""

    phase: str            # "inversion" | "sampling" | "free"
    step_index: int
    layer_index: int
    block_kind: str       # "double" | "single"
    num_heads: int
    num_text_tokens: int
    num_visual_tokens: int
    t: float = 0.0
    canonical: bool = True

    @property
    def key(self) -> tuple[int, int, str]:
        return (self.step_index, self.layer_index, self.block_kind)

    def describe(self) -> str:
        return (f"{self.phase} step {self.step_index}, {self.block_kind} block "
                f"{self.layer_index}")


@dataclass
class VisualOverride:
    """Replacement visual segments returned by a controller; None = keep."""

    q: Optional[Tensor] = None
    k: Optional[Tensor] = None
    v: Optional[Tensor] = None


class AttentionController:
    """Hook consulted at every attention site, in declaration order.

    ``on_attention`` receives the per-head text and visual Q/K/V segments
    (shape (num_heads, tokens, head_dim), batch of one) plus a zero-argument
    accessor that lazily computes the joint attention probabilities from the
    unsubstituted Q/K. Return a VisualOverride to replace visual segments, or
    None to pass through untouched.
    """

    def on_attention(self, site: AttentionSite,
                     q_text: Tensor, k_text: Tensor, v_text: Tensor,
                     q_vis: Tensor, k_vis: Tensor, v_vis: Tensor,
                     attn_probs: Callable[[], Tensor]) -> Optional[VisualOverride]:
        return None


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """(C, H, W) or (B, C, H, W) -> (..., tokens, C * p * p), row-major grid order."""
    single = image.dim() == 3
    x = image.unsqueeze(0) if single else image
    if x.dim() != 4:
        raise ShapeMismatchError(f"expected (C,H,W) or (B,C,H,W), got {tuple(image.shape)}")
    b, c, h, w = x.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise ShapeMismatchError(f"image {h}x{w} not divisible by patch size {p}")
    x = x.reshape(b, c, h // p, p, w // p, p)
    x = x.permute(0, 2, 4, 1, 3, 5).reshape(b, (h // p) * (w // p), c * p * p)
    return x.squeeze(0) if single else x


def unpatchify(tokens: Tensor, patch_size: int, channels: int,
               height: int, width: int) -> Tensor:
    """Exact inverse of patchify for the given image geometry."""
    single = tokens.dim() == 2
    x = tokens.unsqueeze(0) if single else tokens
    p = patch_size
    gh, gw = height // p, width // p
    b, t, d = x.shape
    if t != gh * gw or d != channels * p * p:
        raise ShapeMismatchError(f"token tensor {tuple(tokens.shape)} does not match "
                                 f"a {channels}x{height}x{width} image with patch {p}")
    x = x.reshape(b, gh, gw, channels, p, p)
    x = x.permute(0, 3, 1, 4, 2, 5).reshape(b, channels, height, width)
    return x.squeeze(0) if single else x


def attention_probabilities(q: Tensor, k: Tensor) -> Tensor:
    """Row-normalized attention weights softmax(q k^T / sqrt(d))."""
    scale = q.shape[-1] ** -0.5
    return torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)


def sincos_time_embedding(t: Tensor, dim: int) -> Tensor:
    """Sinusoidal features of t in [0,1], scaled x1000 for frequency coverage."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = t[:, None] * 1000.0 * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def sincos_2d_positions(dim: int, grid_h: int, grid_w: int) -> Tensor:
    """Fixed 2-D sinusoidal embeddings, (grid_h * grid_w, dim), row-major."""
    quarter = dim // 4
    omega = 1.0 / (10000.0 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    ys, xs = torch.meshgrid(torch.arange(grid_h, dtype=torch.float64),
                            torch.arange(grid_w, dtype=torch.float64), indexing="ij")
    out = []
    for coord in (ys.reshape(-1), xs.reshape(-1)):
        args = coord[:, None] * omega[None, :]
        out += [torch.sin(args), torch.cos(args)]
    return torch.cat(out, dim=-1).to(torch.float32)


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1.0 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class _PassContext:
    """Tracks whether a forward pass is still live, for probability accessors."""

    __slots__ = ("live",)

    def __init__(self):
        self.live = True


def _joint_attention(q: Tensor, k: Tensor, v: Tensor, n_text: int,
                     controller, site: Optional[AttentionSite],
                     ctx: Optional[_PassContext]) -> Tensor:
    """Attention over the concatenated [text, visual] stream with the hook.

    q, k, v: (B, heads, T, head_dim). The controller sees the batch-of-one
    segments and may substitute visual Q/K/V; text segments pass through
    unchanged always.
    """
    if controller is not None:
        q0, k0, v0 = q[0], k[0], v[0]

        def attn_probs() -> Tensor:
            if ctx is None or not ctx.live:
                raise RuntimeError("attention probabilities requested outside a live forward pass")
            return attention_probabilities(q0, k0)

        override = controller.on_attention(
            site,
            q0[:, :n_text], k0[:, :n_text], v0[:, :n_text],
            q0[:, n_text:], k0[:, n_text:], v0[:, n_text:],
            attn_probs,
        )
        if override is not None:
            vis_shape = q0[:, n_text:].shape
            new_segs = []
            for name, repl in (("q", override.q), ("k", override.k), ("v", override.v)):
                if repl is None:
                    new_segs.append(None)
                    continue
                if repl.shape != vis_shape:
                    raise ControllerShapeError(
                        f"controller returned {name} of shape {tuple(repl.shape)}, "
                        f"expected {tuple(vis_shape)} at {site.describe()}")
                new_segs.append(repl.to(q0.dtype))
            rq, rk, rv = new_segs
            if rq is not None:
                q = torch.cat([q[:, :, :n_text], rq.unsqueeze(0)], dim=2)
            if rk is not None:
                k = torch.cat([k[:, :, :n_text], rk.unsqueeze(0)], dim=2)
            if rv is not None:
                v = torch.cat([v[:, :, :n_text], rv.unsqueeze(0)], dim=2)
    probs = attention_probabilities(q, k)
    return probs @ v


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, num_heads, d // num_heads).permute(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, hd = x.shape
    return x.permute(0, 2, 1, 3).reshape(b, t, h * hd)


class _Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class DoubleBlock(nn.Module):
    """Separate text/visual projections, joint attention over both streams."""

    def __init__(self, dim: int, num_heads: int, time_dim: int):
        super().__init__()
        self.num_heads = num_heads
        self.norm1_txt = nn.LayerNorm(dim, elementwise_affine=False)
        self.norm1_vis = nn.LayerNorm(dim, elementwise_affine=False)
        self.norm2_txt = nn.LayerNorm(dim, elementwise_affine=False)
        self.norm2_vis = nn.LayerNorm(dim, elementwise_affine=False)
        self.qkv_txt = nn.Linear(dim, 3 * dim)
        self.qkv_vis = nn.Linear(dim, 3 * dim)
        self.proj_txt = nn.Linear(dim, dim)
        self.proj_vis = nn.Linear(dim, dim)
        self.mlp_txt = _Mlp(dim)
        self.mlp_vis = _Mlp(dim)
        # adaLN-zero: blocks start as identity
        self.mod_txt = nn.Linear(time_dim, 6 * dim)
        self.mod_vis = nn.Linear(time_dim, 6 * dim)
        nn.init.zeros_(self.mod_txt.weight); nn.init.zeros_(self.mod_txt.bias)
        nn.init.zeros_(self.mod_vis.weight); nn.init.zeros_(self.mod_vis.bias)

    def forward(self, txt, vis, tvec, controller=None, site=None, ctx=None):
        mt = self.mod_txt(tvec).chunk(6, dim=-1)
        mv = self.mod_vis(tvec).chunk(6, dim=-1)
        n_text = txt.shape[1]

        h_txt = _modulate(self.norm1_txt(txt), mt[0], mt[1])
        h_vis = _modulate(self.norm1_vis(vis), mv[0], mv[1])
        qt, kt, vt = self.qkv_txt(h_txt).chunk(3, dim=-1)
        qv, kv, vv = self.qkv_vis(h_vis).chunk(3, dim=-1)
        q = _split_heads(torch.cat([qt, qv], dim=1), self.num_heads)
        k = _split_heads(torch.cat([kt, kv], dim=1), self.num_heads)
        v = _split_heads(torch.cat([vt, vv], dim=1), self.num_heads)
        out = _merge_heads(_joint_attention(q, k, v, n_text, controller, site, ctx))
        txt = txt + mt[2].unsqueeze(1) * self.proj_txt(out[:, :n_text])
        vis = vis + mv[2].unsqueeze(1) * self.proj_vis(out[:, n_text:])

        txt = txt + mt[5].unsqueeze(1) * self.mlp_txt(_modulate(self.norm2_txt(txt), mt[3], mt[4]))
        vis = vis + mv[5].unsqueeze(1) * self.mlp_vis(_modulate(self.norm2_vis(vis), mv[3], mv[4]))
        return txt, vis


class SingleBlock(nn.Module):
    """One shared projection over the concatenated [text, visual] stream."""

    def __init__(self, dim: int, num_heads: int, time_dim: int):
        super().__init__()
        self.num_heads = num_heads
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.mlp = _Mlp(dim)
        self.mod = nn.Linear(time_dim, 6 * dim)
        nn.init.zeros_(self.mod.weight); nn.init.zeros_(self.mod.bias)

    def forward(self, x, tvec, n_text, controller=None, site=None, ctx=None):
        m = self.mod(tvec).chunk(6, dim=-1)
        h = _modulate(self.norm1(x), m[0], m[1])
        q, k, v = (_split_heads(y, self.num_heads) for y in self.qkv(h).chunk(3, dim=-1))
        out = _merge_heads(_joint_attention(q, k, v, n_text, controller, site, ctx))
        x = x + m[2].unsqueeze(1) * self.proj(out)
        x = x + m[5].unsqueeze(1) * self.mlp(_modulate(self.norm2(x), m[3], m[4]))
        return x


class ToyMMDiT(nn.Module):
    """Desk-scale stand-in for a rectified-flow MMDiT backbone.

    Operates directly on pixel patches (no VAE). Visual tokens carry fixed 2-D
    sinusoidal positions; text tokens carry learned positions. Timestep
    conditioning enters every block through per-block scale/shift/gate from a
    sinusoidal-plus-learned time embedding.
    """

    def __init__(self, config: ModelConfig, vocab: Vocabulary = DEFAULT_VOCAB):
        super().__init__()
        if config.vocab_size != len(vocab):
            raise ValueError(f"config.vocab_size {config.vocab_size} != vocabulary size {len(vocab)}")
        self.config = config
        self.vocab = vocab
        c = config
        patch_dim = c.channels * c.patch_size * c.patch_size

        self.patch_proj = nn.Linear(patch_dim, c.hidden_dim)
        self.token_embed = nn.Embedding(c.vocab_size, c.hidden_dim)
        self.text_pos = nn.Parameter(torch.zeros(c.max_text_tokens, c.hidden_dim))
        self.register_buffer("vis_pos", sincos_2d_positions(c.hidden_dim, c.grid_size, c.grid_size))

        self.time_mlp = nn.Sequential(
            nn.Linear(c.time_embed_dim, c.time_embed_dim),
            nn.SiLU(),
            nn.Linear(c.time_embed_dim, c.time_embed_dim),
        )
        self.double_blocks = nn.ModuleList(
            DoubleBlock(c.hidden_dim, c.num_heads, c.time_embed_dim)
            for _ in range(c.num_double_blocks))
        self.single_blocks = nn.ModuleList(
            SingleBlock(c.hidden_dim, c.num_heads, c.time_embed_dim)
            for _ in range(c.num_single_blocks))

        self.final_norm = nn.LayerNorm(c.hidden_dim, elementwise_affine=False)
        self.final_mod = nn.Linear(c.time_embed_dim, 2 * c.hidden_dim)
        self.final_proj = nn.Linear(c.hidden_dim, patch_dim)
        nn.init.zeros_(self.final_mod.weight); nn.init.zeros_(self.final_mod.bias)
        nn.init.zeros_(self.final_proj.weight); nn.init.zeros_(self.final_proj.bias)
        nn.init.normal_(self.token_embed.weight, std=0.02)
        nn.init.normal_(self.text_pos, std=0.02)

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0,
               vocab: Vocabulary = DEFAULT_VOCAB) -> "ToyMMDiT":
        """Construct with parameters initialized from a fixed seed."""
        torch.manual_seed(seed)
        return cls(config, vocab)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _site(self, tag: EvalTag, layer_index: int, kind: str, n_text: int) -> AttentionSite:
        return AttentionSite(
            phase=tag.phase, step_index=tag.step_index, layer_index=layer_index,
            block_kind=kind, num_heads=self.config.num_heads,
            num_text_tokens=n_text, num_visual_tokens=self.config.num_visual_tokens,
            t=tag.t, canonical=tag.canonical)

    def forward(self, z: Tensor, t, text: TokenIds, controller=None,
                tag: Optional[EvalTag] = None) -> Tensor:
        c = self.config
        single = z.dim() == 3
        zb = z.unsqueeze(0) if single else z
        if zb.shape[1:] != (c.channels, c.image_size, c.image_size):
            raise ShapeMismatchError(f"latent shape {tuple(z.shape)} does not match model "
                                     f"({c.channels}, {c.image_size}, {c.image_size})")
        b = zb.shape[0]
        if controller is not None and b != 1:
            raise ValueError("attention controllers support single-image passes only")
        if tag is None:
            tag = EvalTag()

        param = next(self.parameters())
        zb = zb.to(param.dtype)
        if isinstance(t, Tensor):
            tb = t.reshape(-1).to(param.dtype)
            if tb.numel() == 1:
                tb = tb.expand(b)
        else:
            tb = torch.full((b,), float(t), dtype=param.dtype)
        tvec = self.time_mlp(sincos_time_embedding(tb, c.time_embed_dim))

        ids = text.ids if isinstance(text, TokenIds) else text
        if ids.dim() == 1:
            ids = ids.unsqueeze(0).expand(b, -1)
        if ids.shape[1] != c.max_text_tokens:
            raise ShapeMismatchError(f"expected {c.max_text_tokens} text tokens, got {ids.shape[1]}")
        n_text = c.max_text_tokens

        txt = self.token_embed(ids) + self.text_pos.unsqueeze(0)
        vis = self.patch_proj(patchify(zb, c.patch_size)) + self.vis_pos.unsqueeze(0)

        ctx = _PassContext()
        try:
            for i, blk in enumerate(self.double_blocks):
                site = self._site(tag, i, "double", n_text) if controller is not None else None
                txt, vis = blk(txt, vis, tvec, controller, site, ctx)
            x = torch.cat([txt, vis], dim=1)
            for i, blk in enumerate(self.single_blocks):
                site = self._site(tag, i, "single", n_text) if controller is not None else None
                x = blk(x, tvec, n_text, controller, site, ctx)
        finally:
            ctx.live = False

        shift, scale = self.final_mod(tvec).chunk(2, dim=-1)
        out = self.final_proj(_modulate(self.final_norm(x[:, n_text:]), shift, scale))
        img = unpatchify(out, c.patch_size, c.channels, c.image_size, c.image_size)
        return img.squeeze(0) if single else img

    def evaluate(self, state: Tensor, t, condition, controller=None,
                 tag: Optional[EvalTag] = None) -> Tensor:
        """VelocityModel interface used by the flow solvers."""
        return self.forward(state, t, condition, controller=controller, tag=tag)


def save_checkpoint(model: ToyMMDiT, path, manifest: Optional[dict] = None) -> None:
    """Write a versioned checkpoint container.

    Zip layout: format.json (version, dtype), config.json (ModelConfig),
    vocab.json (word list), manifest.txt (plain-text key: value lines), and
    weights.npz (named parameter tensors).
    """
    params = dict(model.named_parameters())
    dtypes = {str(p.dtype) for p in params.values()}
    if len(dtypes) != 1:
        raise CheckpointError(f"mixed parameter dtypes {dtypes} cannot be checkpointed")
    buf = io.BytesIO()
    np.savez(buf, **{k: p.detach().cpu().numpy() for k, p in params.items()})
    manifest_lines = [f"{k}: {v}" for k, v in (manifest or {}).items()]
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("format.json", json.dumps(
            {"format_version": CHECKPOINT_FORMAT_VERSION, "dtype": dtypes.pop()}))
        zf.writestr("config.json", json.dumps(asdict(model.config), sort_keys=True))
        zf.writestr("vocab.json", json.dumps(list(model.vocab.words)))
        zf.writestr("manifest.txt", "\n".join(manifest_lines) + "\n")
        zf.writestr("weights.npz", buf.getvalue())


def load_checkpoint(path) -> tuple[ToyMMDiT, dict]:
    """Load a checkpoint container; returns (model, manifest dict)."""
    try:
        with zipfile.ZipFile(path, "r") as zf:
            fmt = json.loads(zf.read("format.json"))
            if fmt.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {fmt.get('format_version')}")
            config = ModelConfig(**json.loads(zf.read("config.json")))
            vocab = Vocabulary(json.loads(zf.read("vocab.json")))
            manifest = {}
            for line in zf.read("manifest.txt").decode().splitlines():
                if line.strip():
                    key, _, val = line.partition(":")
                    manifest[key.strip()] = val.strip()
            weights = np.load(io.BytesIO(zf.read("weights.npz")))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    model = ToyMMDiT(config, vocab)
    if fmt["dtype"] == "torch.float64":
        model.double()
    state = {name: torch.from_numpy(weights[name]) for name in weights.files}
    missing = set(dict(model.named_parameters())) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint missing parameters: {sorted(missing)[:3]}...")
    with torch.no_grad():
        for name, p in model.named_parameters():
            if state[name].shape != p.shape:
                raise CheckpointError(f"parameter {name} has shape {tuple(state[name].shape)}, "
                                      f"expected {tuple(p.shape)}")
            p.copy_(state[name])
    model.eval()
    return model, manifest
