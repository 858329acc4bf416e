"""Image encoders built on the selective scan, plus toy CNN/ViT baselines.

Four classifier families share one harness: token-sequence scanning with a
bidirectional block (vim), feature-map scanning in four traversal orders
with stage-wise downsampling (vmamba), a small strided CNN, and a small
attention/MLP transformer. Residual blocks zero-initialize their output
projections, so every block is an exact identity at init.

All forward functions accept a leading batch axis; the single-image forms
in the public API are the batch-of-one special case.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from . import tensor as T
from .ssm import (
    SSMParams,
    SelectiveProjections,
    init_selective_projections,
    init_ssm_params,
    selective_scan,
)
from .tensor import ShapeError, Tensor

ENCODER_KINDS = ("vim", "vmamba", "toy_cnn", "toy_vit")


@dataclass
class EncoderSpec:
    """Declarative description of one encoder and its hyperparameters."""

    kind: str
    patch_size: int = 8
    embed_dim: int = 16
    depth: Union[int, Sequence[int]] = 2  # list = blocks per vmamba stage
    d_state: int = 4
    num_classes: int = 3
    image_size: int = 32
    num_heads: int = 2

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(
                f"unknown encoder kind {self.kind!r}; choose from {ENCODER_KINDS}")
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by "
                f"patch_size {self.patch_size}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    def stage_depths(self) -> list:
        return [self.depth] if isinstance(self.depth, int) else list(self.depth)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "depth": (self.depth if isinstance(self.depth, int)
                      else list(self.depth)),
            "d_state": self.d_state,
            "num_classes": self.num_classes,
            "image_size": self.image_size,
            "num_heads": self.num_heads,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        return cls(**d)


@dataclass
class TokenSequence:
    """Patch tokens plus the grid they were unrolled from (row-major)."""

    tokens: Tensor  # [num_tokens, embed] or [batch, num_tokens, embed]
    grid: tuple

    def __post_init__(self):
        rows, cols = self.grid
        if self.tokens.shape[-2] != rows * cols:
            raise ShapeError(
                f"{self.tokens.shape[-2]} tokens do not fill a "
                f"{rows}x{cols} grid")

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[-2]


@dataclass
class FeatureMap:
    """Spatial feature tensor [height, width, channels], optionally batched."""

    data: Tensor

    def __post_init__(self):
        if self.data.ndim not in (3, 4) or min(self.data.shape) < 1:
            raise ShapeError(f"bad feature map shape {self.data.shape}")


# ---------------------------------------------------------------------------
# shared pieces

def _rms_norm(x: Tensor, scale: Tensor, eps: float = 1e-6) -> Tensor:
    ms = T.reduce_mean(x * x, axis=-1, keepdims=True)
    return x * T.power(ms + eps, -0.5) * scale


def _normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape),
                  requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def patchify(image: Tensor, patch_size: int, weight: Tensor,
             bias: Tensor) -> TokenSequence:
    """Cut the image into row-major patches, flatten, project to embed dim."""
    single = image.ndim == 3
    x = T.reshape(image, (1,) + tuple(image.shape)) if single else image
    b, h, w, ch = x.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(
            f"image {h}x{w} not divisible by patch_size {patch_size}")
    rows, cols = h // patch_size, w // patch_size
    x = T.reshape(x, (b, rows, patch_size, cols, patch_size, ch))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (b, rows * cols, patch_size * patch_size * ch))
    tokens = T.matmul(x, weight) + bias
    if single:
        tokens = T.reshape(tokens, tokens.shape[1:])
    return TokenSequence(tokens=tokens, grid=(rows, cols))


def add_positional_encoding(seq: TokenSequence, table: Tensor) -> TokenSequence:
    """Add a learned per-position embedding table to the tokens."""
    if table.shape[0] != seq.num_tokens:
        raise ShapeError(
            f"positional table has {table.shape[0]} rows for "
            f"{seq.num_tokens} tokens")
    return TokenSequence(tokens=seq.tokens + table, grid=seq.grid)


def init_positional_table(num_tokens: int, embed_dim: int,
                          rng: np.random.Generator) -> Tensor:
    return Tensor(rng.normal(0.0, 0.02, (num_tokens, embed_dim)),
                  requires_grad=True)


def cross_scan_orders(rows: int, cols: int) -> list:
    """Four grid traversals: row-major and column-major, each both ways."""
    if rows < 1 or cols < 1:
        raise ValueError("grid dimensions must be >= 1")
    n = rows * cols
    row_fwd = np.arange(n, dtype=np.intp)
    col_fwd = row_fwd.reshape(rows, cols).T.reshape(-1)
    return [row_fwd, row_fwd[::-1].copy(), col_fwd, col_fwd[::-1].copy()]


# ---------------------------------------------------------------------------
# vim: bidirectional token scanning

@dataclass
class ScanBranch:
    params: SSMParams
    proj: SelectiveProjections


@dataclass
class VimBlockWeights:
    norm_scale: Tensor
    gate_w: Tensor
    fwd: ScanBranch
    bwd: ScanBranch
    out_w: Tensor  # zero-init: block is the identity at init


def _init_branch(d_inner: int, d_state: int, rng) -> ScanBranch:
    return ScanBranch(params=init_ssm_params(d_inner, d_state),
                      proj=init_selective_projections(d_inner, d_state, rng))


def init_vim_block(embed_dim: int, d_state: int, rng) -> VimBlockWeights:
    return VimBlockWeights(
        norm_scale=_ones(embed_dim),
        gate_w=_normal(rng, (embed_dim, embed_dim), embed_dim),
        fwd=_init_branch(embed_dim, d_state, rng),
        bwd=_init_branch(embed_dim, d_state, rng),
        out_w=_zeros((embed_dim, embed_dim)),
    )


def vim_block_forward(seq: TokenSequence, w: VimBlockWeights) -> TokenSequence:
    """Residual bidirectional scan block over the token order.

    Each direction has its own scan parameters; both branches share one
    silu gate computed from the normalized input.
    """
    x = seq.tokens
    single = x.ndim == 2
    xb = T.reshape(x, (1,) + tuple(x.shape)) if single else x
    n = xb.shape[1]
    xn = _rms_norm(xb, w.norm_scale)
    gate = T.silu(T.matmul(xn, w.gate_w))
    rev = np.arange(n - 1, -1, -1, dtype=np.intp)
    fwd_out = selective_scan(w.fwd.params, w.fwd.proj, xn)
    bwd_out = T.take(selective_scan(w.bwd.params, w.bwd.proj,
                                    T.take(xn, rev, axis=1)), rev, axis=1)
    mixed = fwd_out * gate + bwd_out * gate
    out = T.matmul(mixed, w.out_w) + xb
    if single:
        out = T.reshape(out, out.shape[1:])
    return TokenSequence(tokens=out, grid=seq.grid)


# ---------------------------------------------------------------------------
# vmamba: four-direction scanning over feature maps

@dataclass
class VssBlockWeights:
    norm_scale: Tensor
    gate_w: Tensor
    scan: ScanBranch  # shared across the four traversals
    out_w: Tensor


def init_vss_block(channels: int, d_state: int, rng) -> VssBlockWeights:
    return VssBlockWeights(
        norm_scale=_ones(channels),
        gate_w=_normal(rng, (channels, channels), channels),
        scan=_init_branch(channels, d_state, rng),
        out_w=_zeros((channels, channels)),
    )


def vss_block_forward(fm: FeatureMap, w: VssBlockWeights) -> FeatureMap:
    """Residual block scanning the grid along all four cross-scan orders."""
    x = fm.data
    single = x.ndim == 3
    xb = T.reshape(x, (1,) + tuple(x.shape)) if single else x
    b, h, wd, c = xb.shape
    xn = _rms_norm(xb, w.norm_scale)
    flat = T.reshape(xn, (b, h * wd, c))
    acc = None
    for order in cross_scan_orders(h, wd):
        seq = T.take(flat, order, axis=1)
        out = selective_scan(w.scan.params, w.scan.proj, seq)
        back = T.take(out, np.argsort(order), axis=1)
        acc = back if acc is None else acc + back
    gate = T.silu(T.matmul(flat, w.gate_w))
    y = T.matmul(acc * gate, w.out_w)
    out = T.reshape(y, (b, h, wd, c)) + xb
    if single:
        out = T.reshape(out, out.shape[1:])
    return FeatureMap(data=out)


def downsample(fm: FeatureMap, weight: Tensor) -> FeatureMap:
    """Merge 2x2 neighborhoods: [H, W, C] -> [H/2, W/2, 2C] via projection."""
    x = fm.data
    single = x.ndim == 3
    xb = T.reshape(x, (1,) + tuple(x.shape)) if single else x
    b, h, w, c = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"downsample needs even dims, got {h}x{w}")
    if weight.shape != (4 * c, 2 * c):
        raise ShapeError(
            f"downsample weight {weight.shape} does not match channels {c}")
    x = T.reshape(xb, (b, h // 2, 2, w // 2, 2, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (b, h // 2, w // 2, 4 * c))
    out = T.matmul(x, weight)
    if single:
        out = T.reshape(out, out.shape[1:])
    return FeatureMap(data=out)


# ---------------------------------------------------------------------------
# toy baselines

@dataclass
class VitBlockWeights:
    norm1_scale: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    attn_out: Tensor  # zero-init
    norm2_scale: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor  # zero-init


def init_vit_block(embed_dim: int, rng) -> VitBlockWeights:
    hidden = 2 * embed_dim
    return VitBlockWeights(
        norm1_scale=_ones(embed_dim),
        wq=_normal(rng, (embed_dim, embed_dim), embed_dim),
        wk=_normal(rng, (embed_dim, embed_dim), embed_dim),
        wv=_normal(rng, (embed_dim, embed_dim), embed_dim),
        attn_out=_zeros((embed_dim, embed_dim)),
        norm2_scale=_ones(embed_dim),
        mlp_w1=_normal(rng, (embed_dim, hidden), embed_dim),
        mlp_b1=_zeros(hidden),
        mlp_w2=_zeros((hidden, embed_dim)),
    )


def vit_block_forward(seq: TokenSequence, w: VitBlockWeights,
                      num_heads: int) -> TokenSequence:
    """Pre-norm multi-head self-attention + MLP, both residual."""
    x = seq.tokens
    single = x.ndim == 2
    xb = T.reshape(x, (1,) + tuple(x.shape)) if single else x
    b, n, e = xb.shape
    if e % num_heads:
        raise ShapeError(f"embed {e} not divisible by {num_heads} heads")
    dh = e // num_heads

    def split_heads(t):
        t = T.reshape(t, (b, n, num_heads, dh))
        return T.transpose(t, (0, 2, 1, 3))  # [b, heads, n, dh]

    xn = _rms_norm(xb, w.norm1_scale)
    q = split_heads(T.matmul(xn, w.wq))
    k = split_heads(T.matmul(xn, w.wk))
    v = split_heads(T.matmul(xn, w.wv))
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    att = T.matmul(T.softmax(scores), v)
    att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (b, n, e))
    xb = T.matmul(att, w.attn_out) + xb

    xn2 = _rms_norm(xb, w.norm2_scale)
    hidden = T.silu(T.matmul(xn2, w.mlp_w1) + w.mlp_b1)
    out = T.matmul(hidden, w.mlp_w2) + xb
    if single:
        out = T.reshape(out, out.shape[1:])
    return TokenSequence(tokens=out, grid=seq.grid)


@dataclass
class ConvStageWeights:
    weight: Tensor  # [9 * c_in, c_out]
    bias: Tensor


def init_conv_stage(c_in: int, c_out: int, rng) -> ConvStageWeights:
    return ConvStageWeights(weight=_normal(rng, (9 * c_in, c_out), 9 * c_in),
                            bias=_zeros(c_out))


def conv_stage_forward(fm: FeatureMap, w: ConvStageWeights) -> FeatureMap:
    """3x3 stride-2 convolution (zero-padded) followed by silu."""
    x = fm.data
    single = x.ndim == 3
    xb = T.reshape(x, (1,) + tuple(x.shape)) if single else x
    b, h, wd, c = xb.shape
    if h % 2 or wd % 2:
        raise ShapeError(f"conv stage needs even dims, got {h}x{wd}")
    oh, ow = h // 2, wd // 2
    xp = T.pad(xb, ((0, 0), (1, 1), (1, 1), (0, 0)))
    pw = wd + 2
    oi, oj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    base = (2 * oi * pw + 2 * oj).reshape(-1, 1)  # top-left of each window
    offs = (np.arange(3)[:, None] * pw + np.arange(3)[None, :]).reshape(1, -1)
    idx = (base + offs).reshape(-1)
    xf = T.reshape(xp, (b, (h + 2) * pw, c))
    patches = T.reshape(T.take(xf, idx, axis=1), (b, oh * ow, 9 * c))
    y = T.matmul(patches, w.weight) + w.bias
    out = T.silu(T.reshape(y, (b, oh, ow, w.weight.shape[1])))
    if single:
        out = T.reshape(out, out.shape[1:])
    return FeatureMap(data=out)


# ---------------------------------------------------------------------------
# whole encoders

@dataclass
class EncoderWeights:
    """All learnables of one encoder: flat name->Tensor map plus typed views.

    ``named`` and ``structure`` reference the same Tensor objects; the flat
    map drives the optimizer and the checkpoint format.
    """

    spec: EncoderSpec
    named: dict
    structure: dict = field(repr=False, default_factory=dict)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named.values())


def _register_branch(named, prefix, branch: ScanBranch):
    named[f"{prefix}.a"] = branch.params.a
    named[f"{prefix}.d"] = branch.params.d
    named[f"{prefix}.w_b"] = branch.proj.w_b
    named[f"{prefix}.w_c"] = branch.proj.w_c
    named[f"{prefix}.w_delta"] = branch.proj.w_delta
    named[f"{prefix}.delta_bias"] = branch.proj.delta_bias


def init_encoder_weights(spec: EncoderSpec,
                         rng: np.random.Generator) -> EncoderWeights:
    named: dict = {}
    structure: dict = {}
    e = spec.embed_dim
    grid = spec.image_size // spec.patch_size
    n_tokens = grid * grid

    if spec.kind in ("vim", "toy_vit"):
        named["patch.w"] = _normal(rng, (spec.patch_size ** 2, e),
                                   spec.patch_size ** 2)
        named["patch.b"] = _zeros(e)
        named["pos.table"] = init_positional_table(n_tokens, e, rng)
        blocks = []
        for i in range(spec.stage_depths()[0]):
            if spec.kind == "vim":
                blk = init_vim_block(e, spec.d_state, rng)
                _register_branch(named, f"block{i}.fwd", blk.fwd)
                _register_branch(named, f"block{i}.bwd", blk.bwd)
                named[f"block{i}.norm"] = blk.norm_scale
                named[f"block{i}.gate_w"] = blk.gate_w
                named[f"block{i}.out_w"] = blk.out_w
            else:
                blk = init_vit_block(e, rng)
                for fname in ("norm1_scale", "wq", "wk", "wv", "attn_out",
                              "norm2_scale", "mlp_w1", "mlp_b1", "mlp_w2"):
                    named[f"block{i}.{fname}"] = getattr(blk, fname)
            blocks.append(blk)
        structure["blocks"] = blocks
        head_in = e
    elif spec.kind == "vmamba":
        named["patch.w"] = _normal(rng, (spec.patch_size ** 2, e),
                                   spec.patch_size ** 2)
        named["patch.b"] = _zeros(e)
        stages = []
        dim = e
        depths = spec.stage_depths()
        for s, nblocks in enumerate(depths):
            blocks = []
            for i in range(nblocks):
                blk = init_vss_block(dim, spec.d_state, rng)
                pre = f"stage{s}.block{i}"
                _register_branch(named, f"{pre}.scan", blk.scan)
                named[f"{pre}.norm"] = blk.norm_scale
                named[f"{pre}.gate_w"] = blk.gate_w
                named[f"{pre}.out_w"] = blk.out_w
                blocks.append(blk)
            entry = {"blocks": blocks, "down": None}
            if s < len(depths) - 1:
                down = _normal(rng, (4 * dim, 2 * dim), 4 * dim)
                named[f"stage{s}.down_w"] = down
                entry["down"] = down
                dim *= 2
            stages.append(entry)
        structure["stages"] = stages
        head_in = dim
    elif spec.kind == "toy_cnn":
        stages = []
        c_in = 1
        for i in range(3):
            c_out = e * (2 ** i)
            stg = init_conv_stage(c_in, c_out, rng)
            named[f"conv{i}.w"] = stg.weight
            named[f"conv{i}.b"] = stg.bias
            stages.append(stg)
            c_in = c_out
        structure["stages"] = stages
        head_in = c_in
    else:  # pragma: no cover
        raise ValueError(spec.kind)

    named["head.w"] = Tensor(rng.normal(0.0, 0.02, (head_in, spec.num_classes)),
                             requires_grad=True)
    named["head.b"] = _zeros(spec.num_classes)
    return EncoderWeights(spec=spec, named=named, structure=structure)


def _check_image_batch(images: Tensor, spec: EncoderSpec) -> Tensor:
    if images.ndim == 3:
        images = T.reshape(images, (1,) + tuple(images.shape))
    if images.ndim != 4 or images.shape[1:] != (spec.image_size,
                                                spec.image_size, 1):
        raise ShapeError(
            f"expected images [batch, {spec.image_size}, {spec.image_size}, 1],"
            f" got {images.shape}")
    return images


def encoder_forward_batch(images: Tensor, spec: EncoderSpec,
                          weights: EncoderWeights) -> Tensor:
    """Logits [batch, num_classes] for a batch of [H, W, 1] images."""
    if weights.spec.to_dict() != spec.to_dict():
        raise ValueError("weights were initialized for a different spec")
    x = _check_image_batch(images, spec)
    named, structure = weights.named, weights.structure

    if spec.kind in ("vim", "toy_vit"):
        seq = patchify(x, spec.patch_size, named["patch.w"], named["patch.b"])
        seq = add_positional_encoding(seq, named["pos.table"])
        for blk in structure["blocks"]:
            if spec.kind == "vim":
                seq = vim_block_forward(seq, blk)
            else:
                seq = vit_block_forward(seq, blk, spec.num_heads)
        pooled = T.reduce_mean(seq.tokens, axis=1)
    elif spec.kind == "vmamba":
        seq = patchify(x, spec.patch_size, named["patch.w"], named["patch.b"])
        rows, cols = seq.grid
        fm = FeatureMap(data=T.reshape(
            seq.tokens, (x.shape[0], rows, cols, spec.embed_dim)))
        for stage in structure["stages"]:
            for blk in stage["blocks"]:
                fm = vss_block_forward(fm, blk)
            if stage["down"] is not None:
                fm = downsample(fm, stage["down"])
        b, h, w, c = fm.data.shape
        pooled = T.reduce_mean(T.reshape(fm.data, (b, h * w, c)), axis=1)
    else:  # toy_cnn
        fm = FeatureMap(data=x)
        for stg in structure["stages"]:
            fm = conv_stage_forward(fm, stg)
        b, h, w, c = fm.data.shape
        pooled = T.reduce_mean(T.reshape(fm.data, (b, h * w, c)), axis=1)

    return T.matmul(pooled, named["head.w"]) + named["head.b"]


def encoder_forward(image: Tensor, spec: EncoderSpec,
                    weights: EncoderWeights) -> Tensor:
    """Logits [num_classes] for a single [H, W, 1] image."""
    logits = encoder_forward_batch(image, spec, weights)
    return T.reshape(logits, (spec.num_classes,))


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, spec echo, named float64 tensors (LE)

CHECKPOINT_MAGIC = b"SSMB"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(spec: EncoderSpec, named: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    spec_json = json.dumps(spec.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(spec_json)))
    buf.write(spec_json)
    buf.write(struct.pack("<I", len(named)))
    for name in sorted(named):
        arr = named[name].data if isinstance(named[name], Tensor) else named[name]
        arr = np.asarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.astype("<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(path, spec: EncoderSpec, named: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(spec, named))


def load_checkpoint(path) -> tuple:
    """Returns (spec, name -> float64 array)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = io.BytesIO(raw)
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (spec_len,) = struct.unpack("<I", buf.read(4))
    spec = EncoderSpec.from_dict(json.loads(buf.read(spec_len)))
    (count,) = struct.unpack("<I", buf.read(4))
    named = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", buf.read(2))
        name = buf.read(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim)) if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(buf.read(8 * n), dtype="<f8").astype(np.float64)
        named[name] = data.reshape(shape)
    return spec, named


def restore_weights(spec: EncoderSpec, named_arrays: dict) -> EncoderWeights:
    """Rebuild EncoderWeights from checkpoint arrays (bit-exact forward)."""
    weights = init_encoder_weights(spec, np.random.default_rng(0))
    if set(weights.named) != set(named_arrays):
        missing = set(weights.named) ^ set(named_arrays)
        raise ValueError(f"checkpoint does not match spec; differing: {missing}")
    for name, tensor in weights.named.items():
        arr = np.asarray(named_arrays[name], dtype=np.float64)
        if arr.shape != tensor.shape:
            raise ShapeError(
                f"{name}: checkpoint shape {arr.shape} != {tensor.shape}")
        tensor.data = arr.copy()
    return weights
