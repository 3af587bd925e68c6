"""Messenger shift transformer backbone.

Frames are patch-embedded independently, a shared set of learnable messenger
tokens is appended to every frame, and each transformer block runs per frame
over the joint token set.  Between blocks the messenger tokens are moved along
the time axis group by group; consecutive shifts use opposite directions so
every messenger returns home after two blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from tevit.core import tensor as tt
from tevit.core.errors import ConfigError
from tevit.core.flops import count_flops
from tevit.core.nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from tevit.core.tensor import Tensor, no_grad

FORWARD, BACKWARD = "forward", "backward"
MESSENGER_MODES = ("shift", "static", "mhsa_ffn", "conv")


@dataclass(frozen=True)
class ShiftSchedule:
    groups: tuple[tuple[int, str], ...] = ((1, FORWARD), (1, BACKWARD), (2, FORWARD), (2, BACKWARD))
    boundary_mode: str = "circular"

    def __post_init__(self):
        if self.boundary_mode not in ("circular", "zero_fill"):
            raise ConfigError(f"unknown boundary mode {self.boundary_mode!r}")
        for stride, direction in self.groups:
            if stride < 0 or direction not in (FORWARD, BACKWARD):
                raise ConfigError(f"bad shift group {(stride, direction)!r}")

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def offsets(self, parity: str) -> list[int]:
        """Signed frame offset per group; odd parity reverses every direction."""
        flip = -1 if parity == "odd" else 1
        return [flip * s * (1 if d == FORWARD else -1) for s, d in self.groups]


@dataclass(frozen=True)
class StageConfig:
    depth: int
    channels: int
    heads: int
    patch_stride: int
    mlp_ratio: int = 4


def default_stages(channels=(32, 64, 128, 256), depths=(2, 2, 2, 2), heads=(1, 2, 4, 4), mlp_ratio=4):
    strides = (4, 2, 2, 2)
    return tuple(StageConfig(d, c, h, s, mlp_ratio) for d, c, h, s in zip(depths, channels, heads, strides))


@dataclass(frozen=True)
class BackboneConfig:
    image_size: tuple[int, int] = (64, 64)
    stages: tuple[StageConfig, ...] = field(default_factory=default_stages)
    messengers: int = 8
    schedule: ShiftSchedule = field(default_factory=ShiftSchedule)
    messenger_mode: str = "shift"

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ConfigError("the backbone has exactly 4 stages")
        if self.stages[0].patch_stride != 4 or any(s.patch_stride != 2 for s in self.stages[1:]):
            raise ConfigError("patch strides must be (4, 2, 2, 2)")
        h, w = self.image_size
        if h % 32 or w % 32:
            raise ConfigError(f"image size {self.image_size} must be divisible by 32")
        if self.messengers < 0:
            raise ConfigError("messenger count must be non-negative")
        if self.messengers and self.messengers % self.schedule.num_groups:
            raise ConfigError(f"M={self.messengers} not divisible by G={self.schedule.num_groups}")
        if self.messenger_mode not in MESSENGER_MODES:
            raise ConfigError(f"unknown messenger mode {self.messenger_mode!r}")
        for s in self.stages:
            if s.channels % s.heads:
                raise ConfigError(f"{s.heads} heads do not divide {s.channels} channels")

    @property
    def strides(self) -> tuple[int, ...]:
        return (4, 8, 16, 32)


@dataclass
class TokenSequence:
    patch_tokens: Tensor  # (T, L, C)
    messenger_tokens: Tensor | None  # (T, M, C) or None
    stage_index: int = 1

    @property
    def num_messengers(self) -> int:
        return 0 if self.messenger_tokens is None else self.messenger_tokens.shape[1]

    def joint(self) -> Tensor:
        if not self.num_messengers:
            return self.patch_tokens
        return tt.concat([self.patch_tokens, self.messenger_tokens], axis=1)

    @classmethod
    def split(cls, joint: Tensor, num_patches: int, stage_index: int) -> "TokenSequence":
        if joint.shape[1] == num_patches:
            return cls(joint, None, stage_index)
        return cls(joint[:, :num_patches], joint[:, num_patches:], stage_index)


# -- parameter-free pieces ----------------------------------------------------

def patchify(frames: np.ndarray | Tensor, patch: int) -> Tensor:
    """(T, C, H, W) -> (T, HW/P^2, C*P*P), patches in row-major order."""
    x = tt.as_tensor(frames)
    t, c, h, w = x.shape
    if h % patch or w % patch:
        raise ConfigError(f"frame size {(h, w)} not divisible by patch size {patch}")
    x = x.reshape(t, c, h // patch, patch, w // patch, patch)
    x = tt.transpose(x, (0, 2, 4, 1, 3, 5))
    return x.reshape(t, (h // patch) * (w // patch), c * patch * patch)


def msg_shift(tokens: TokenSequence, schedule: ShiftSchedule, parity: str) -> TokenSequence:
    """Move messenger groups along time; patch tokens are passed through as-is.

    Group ``g`` at frame ``t`` lands on frame ``t + offset_g``.  Circular
    boundaries wrap modulo T; ``zero_fill`` leaves vacated slots at zero.
    """
    m = tokens.messenger_tokens
    if m is None or m.shape[1] == 0:
        return tokens
    t, num, _ = m.shape
    g = schedule.num_groups
    if num % g:
        raise ConfigError(f"M={num} not divisible by G={g}")
    size = num // g
    frames = np.arange(t)
    src = np.empty((t, num), dtype=np.int64)
    valid = np.ones((t, num), dtype=bool)
    for gi, off in enumerate(schedule.offsets(parity)):
        cols = slice(gi * size, (gi + 1) * size)
        origin = frames - off
        if schedule.boundary_mode == "circular":
            src[:, cols] = (origin % t)[:, None]
        else:
            inside = (origin >= 0) & (origin < t)
            src[:, cols] = np.where(inside, origin, 0)[:, None]
            valid[:, cols] = inside[:, None]
    slots = np.broadcast_to(np.arange(num), (t, num))
    shifted = tt.index(m, (src, slots), unique=bool(valid.all()))
    if not valid.all():
        shifted = shifted * valid[:, :, None].astype(np.float64)
    return TokenSequence(tokens.patch_tokens, shifted, tokens.stage_index)


# -- learnable pieces ---------------------------------------------------------

class TransformerBlock(Module):
    """Pre-norm block: x + MHSA(LN x), then x + FFN(LN x)."""

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int, label: str = "backbone"):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, heads, label=label)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim, dim * mlp_ratio, label=label)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


def frame_block_forward(tokens: TokenSequence, block: TransformerBlock) -> TokenSequence:
    """Apply one block to every frame's joint tokens; frames never mix."""
    out = block(tokens.joint())
    return TokenSequence.split(out, tokens.patch_tokens.shape[1], tokens.stage_index)


class MessengerMixer(Module):
    """Learned alternatives to shifting, used by the ablation variants.

    ``mhsa_ffn`` attends over all T*M messengers of the clip; ``conv`` is a
    width-3 temporal convolution with full channel mixing.
    """

    def __init__(self, rng, mode: str, dim: int, heads: int, mlp_ratio: int):
        self._mode = mode
        if mode == "mhsa_ffn":
            self.block = TransformerBlock(rng, dim, heads, mlp_ratio, label="messenger_mixer")
        elif mode == "conv":
            self.taps = [Linear(rng, dim, dim, bias=(k == 1), label="messenger_mixer") for k in range(3)]
        else:
            raise ConfigError(f"no mixer for mode {mode!r}")

    def __call__(self, m: Tensor) -> Tensor:
        t, num, c = m.shape
        if self._mode == "mhsa_ffn":
            return self.block(m.reshape(1, t * num, c)).reshape(t, num, c)
        padded = tt.pad_zeros(m, 0, 1, 1)
        out = m
        for k, tap in enumerate(self.taps):
            out = out + tap(padded[k:k + t])
        return out


class Stage(Module):
    def __init__(self, rng, cfg: StageConfig, in_dim: int, grid: tuple[int, int], messengers: int,
                 prev_channels: int | None, mode: str):
        p = cfg.patch_stride
        self.embed = Linear(rng, in_dim * p * p, cfg.channels, label="backbone")
        self.embed_norm = LayerNorm(cfg.channels)
        self.pos = tt.parameter(rng.normal(0.0, 0.02, size=(grid[0] * grid[1], cfg.channels)))
        self.blocks = [TransformerBlock(rng, cfg.channels, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.channels)
        self.messenger_proj = (Linear(rng, prev_channels, cfg.channels, label="backbone")
                               if messengers and prev_channels is not None else None)
        if messengers and mode in ("mhsa_ffn", "conv"):
            self.mixers = [MessengerMixer(rng, mode, cfg.channels, cfg.heads, cfg.mlp_ratio)
                           for _ in range(cfg.depth)]
        else:
            self.mixers = []
        self._cfg = cfg
        self._grid = grid


@dataclass
class PyramidFeatures:
    levels: list[Tensor]  # F1..F4, each (T, C_s, H/s, W/s)

    def __getitem__(self, i: int) -> Tensor:
        return self.levels[i]

    def __len__(self) -> int:
        return len(self.levels)


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.config = cfg
        h, w = cfg.image_size
        m = cfg.messengers
        c1 = cfg.stages[0].channels
        self.messenger_embed = tt.parameter(rng.normal(0.0, 0.02, size=(m, c1))) if m else None
        self.stages = []
        in_dim, prev = 3, None
        for i, sc in enumerate(cfg.stages):
            s = cfg.strides[i]
            self.stages.append(Stage(rng, sc, in_dim, (h // s, w // s), m, prev, cfg.messenger_mode))
            in_dim = prev = sc.channels

    def patch_embed(self, frames, stage: int = 0) -> Tensor:
        st = self.stages[stage]
        x = patchify(frames, st._cfg.patch_stride)
        x = st.embed_norm(st.embed(x))
        return x + st.pos

    def attach_messengers(self, tokens: TokenSequence, m0: Tensor | None = None) -> TokenSequence:
        if tokens.messenger_tokens is not None:
            raise ConfigError("messengers are already attached")
        m0 = self.messenger_embed if m0 is None else m0
        if m0 is None or m0.shape[0] == 0:
            return tokens
        t = tokens.patch_tokens.shape[0]
        copies = tt.broadcast_to(m0, (t,) + m0.shape)
        return TokenSequence(tokens.patch_tokens, copies, tokens.stage_index)

    def __call__(self, frames, messenger_init: str = "learned",
                 rng: np.random.Generator | None = None) -> PyramidFeatures:
        return self.forward(frames, messenger_init, rng)

    def forward(self, frames, messenger_init: str = "learned",
                rng: np.random.Generator | None = None) -> PyramidFeatures:
        """Run the four stages; ``messenger_init`` can zero or randomise m0 at inference."""
        cfg = self.config
        x = tt.as_tensor(frames)
        if x.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != tuple(cfg.image_size):
            raise ConfigError(f"expected frames (T, 3, {cfg.image_size[0]}, {cfg.image_size[1]}), got {x.shape}")
        m0 = self.messenger_embed
        if m0 is not None and messenger_init != "learned":
            if messenger_init == "zero":
                m0 = tt.Tensor(np.zeros(m0.shape))
            elif messenger_init == "random":
                rng = rng or np.random.default_rng(0)
                m0 = tt.Tensor(rng.normal(0.0, 0.02, size=m0.shape))
            else:
                raise ConfigError(f"unknown messenger init {messenger_init!r}")
        levels = []
        parity = 0
        messengers = None
        feat = x
        t = x.shape[0]
        for si, stage in enumerate(self.stages):
            patches = self.patch_embed(feat, si)
            tokens = TokenSequence(patches, None, si + 1)
            if si == 0:
                tokens = self.attach_messengers(tokens, m0)
            elif messengers is not None:
                tokens = TokenSequence(patches, stage.messenger_proj(messengers), si + 1)
            for bi, block in enumerate(stage.blocks):
                tokens = frame_block_forward(tokens, block)
                if tokens.messenger_tokens is None:
                    continue
                if cfg.messenger_mode == "shift":
                    tokens = msg_shift(tokens, cfg.schedule, "odd" if parity % 2 else "even")
                    parity += 1
                elif cfg.messenger_mode in ("mhsa_ffn", "conv"):
                    mixed = stage.mixers[bi](tokens.messenger_tokens)
                    tokens = TokenSequence(tokens.patch_tokens, mixed, tokens.stage_index)
            messengers = tokens.messenger_tokens
            gh, gw = stage._grid
            out = stage.norm(tokens.patch_tokens)  # (T, L, C)
            fmap = tt.transpose(out.reshape(t, gh, gw, out.shape[-1]), (0, 3, 1, 2))
            levels.append(fmap)
            feat = fmap
        return PyramidFeatures(levels)


def backbone_forward(clip, backbone: Backbone) -> PyramidFeatures:
    return backbone(clip)


def messenger_parameter_count(cfg: BackboneConfig) -> int:
    """Learnable parameters that exist only because M > 0 (shift mode)."""
    m = cfg.messengers
    if not m:
        return 0
    ch = [s.channels for s in cfg.stages]
    proj = sum(a * b + b for a, b in zip(ch[:-1], ch[1:]))
    return m * ch[0] + proj


def count_flops_and_params(cfg: BackboneConfig, num_frames: int = 1, seed: int = 0):
    """(flops, params, messenger overhead fraction) measured by running forwards.

    The overhead is relative to the same architecture rebuilt with M=0.
    """
    base_cfg = replace(cfg, messengers=0)
    counts = []
    for c in (cfg, base_cfg):
        model = Backbone(c, np.random.default_rng(seed))
        frames = np.zeros((num_frames, 3) + tuple(c.image_size))
        with no_grad(), count_flops() as fc:
            model(frames)
        counts.append((fc.total, model.num_parameters()))
    (flops, params), (base_flops, _) = counts
    return flops, params, (flops - base_flops) / base_flops
