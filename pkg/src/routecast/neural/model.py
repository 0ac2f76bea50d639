"""Dual-stream 3-D U-Net with a shared encoder and per-cell decoder heads.

The encoder downsamples ``depth`` times (stride-2 convolutions), doubling
channels per level; decoders mirror it with nearest-neighbor upsampling,
skip fusion and an attention block per level.  A small dense head on the
globally pooled bottleneck acts as the domain discriminator.

Two encoders live side by side: the one trained on simulation and its
copy that gets adversarially aligned to the measurement domain.  Decoders
are architecturally identical with separate parameters, one per cell id.
All parameters sit in a flat dict keyed ``<block>.<layer>.<tensor>``, which
keeps freezing, checksums and checkpointing trivial.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import FormatError
from . import ops

SOURCE_ENCODER = "src_enc"
TARGET_ENCODER = "tgt_enc"
DISCRIMINATOR = "disc"
CBAM_REDUCTION = 4


@dataclass(frozen=True)
class ArchSpec:
    in_channels: int = 2
    base_channels: int = 16
    depth: int = 3
    gn_groups: int = 4
    attention: str = "full"  # "full": bottleneck + decoder levels; "none": plain
    disc_hidden: int = 64

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < self.gn_groups:
            raise ValueError("need depth >= 1 and base_channels >= gn_groups")
        if self.attention not in ("full", "none"):
            raise ValueError(f"unknown attention mode {self.attention!r}")

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2**self.depth

    def level_channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**d)


def _acc(grads: dict, name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


def _check_finite(tag: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values after {tag}")


# -- parameterized layer wrappers (forward returns (y, back)) ----------------


def _conv(params, name, x, stride=1):
    y, cache = ops.conv3d_fwd(x, params[name + ".w"], params[name + ".b"], stride)

    def back(dy, grads):
        dx, dw, db = ops.conv3d_bwd(cache, dy)
        _acc(grads, name + ".w", dw)
        _acc(grads, name + ".b", db)
        return dx

    return y, back


def _gn(params, name, x, groups):
    y, cache = ops.groupnorm_fwd(x, params[name + ".g"], params[name + ".b"], groups)

    def back(dy, grads):
        dx, dg, db = ops.groupnorm_bwd(cache, dy)
        _acc(grads, name + ".g", dg)
        _acc(grads, name + ".b", db)
        return dx

    return y, back


def _linear(params, name, x):
    y, cache = ops.linear_fwd(x, params[name + ".w"], params[name + ".b"])

    def back(dy, grads):
        dx, dw, db = ops.linear_bwd(cache, dy)
        _acc(grads, name + ".w", dw)
        _acc(grads, name + ".b", db)
        return dx

    return y, back


def _conv_block(params, arch, name, x, stride=1):
    """conv -> group norm -> ELU."""
    h, b1 = _conv(params, name, x, stride)
    h, b2 = _gn(params, name + "_gn", h, arch.gn_groups)
    y, cache = ops.elu_fwd(h)

    def back(dy, grads):
        return b1(b2(ops.elu_bwd(cache, dy), grads), grads)

    return y, back


# -- attention block ----------------------------------------------------------


def cbam(params: dict, prefix: str, f: np.ndarray):
    """Channel-then-spatial attention gate.

    Channel weights come from average- and max-pooled channel descriptors
    pushed through a shared two-layer bottleneck; spatial weights from the
    channel-wise mean/max maps through one convolution.  Both gates are
    logistic, so the output is the input scaled by factors in (0, 1).

    Returns (y, back) with back(dy, grads) -> df.
    """
    n, c = f.shape[:2]

    def mlp(s):
        h, b1 = _linear(params, prefix + ".mlp1", s)
        h, rcache = ops.relu_fwd(h)
        a, b2 = _linear(params, prefix + ".mlp2", h)

        def back(da, grads):
            return b1(ops.relu_bwd(rcache, b2(da, grads)), grads)

        return a, back

    s_avg, avg_cache = ops.global_avg_fwd(f)
    s_max, max_cache = ops.global_max_fwd(f)
    a_avg, mlp_back_avg = mlp(s_avg)
    a_max, mlp_back_max = mlp(s_max)
    gate_c, gc_cache = ops.sigmoid_fwd(a_avg + a_max)  # (N, C)
    gc_b = gate_c[:, :, None, None, None]
    f1 = f * gc_b

    m_avg, cm_cache = ops.channel_mean_fwd(f1)
    m_max, cx_cache = ops.channel_max_fwd(f1)
    m = np.concatenate([m_avg, m_max], axis=1)
    sa, conv_back = _conv(params, prefix + ".spat", m)
    gate_s, gs_cache = ops.sigmoid_fwd(sa)  # (N, 1, X, Y, Z)
    y = f1 * gate_s

    def back(dy, grads):
        # spatial gate product
        df1 = dy * gate_s
        dgate_s = ops.reduce_to(gate_s.shape, dy * f1)
        dsa = ops.sigmoid_bwd(gs_cache, dgate_s)
        dm = conv_back(dsa, grads)
        df1 = df1 + ops.channel_mean_bwd(cm_cache, dm[:, 0:1])
        df1 = df1 + ops.channel_max_bwd(cx_cache, dm[:, 1:2])
        # channel gate product
        df = df1 * gc_b
        dgate_c = (df1 * f).sum(axis=(2, 3, 4))
        da = ops.sigmoid_bwd(gc_cache, dgate_c)
        ds_avg = mlp_back_avg(da, grads)
        ds_max = mlp_back_max(da, grads)
        df = df + ops.global_avg_bwd(avg_cache, ds_avg)
        df = df + ops.global_max_bwd(max_cache, ds_max)
        return df

    return y, back


# -- encoder / decoder / discriminator ----------------------------------------


def encode(params: dict, arch: ArchSpec, x: np.ndarray, prefix: str = SOURCE_ENCODER):
    """Bottleneck features plus one skip tensor per level.

    Returns (z, skips, back); back(dz, dskips, grads) -> dx, where dskips is
    a list (entries may be None) aligned with skips.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        x = x[None]
    spatial = x.shape[2:]
    div = 2**arch.depth
    if any(s % div for s in spatial):
        raise ValueError(f"spatial dims {spatial} not divisible by 2^depth = {div}")
    if x.shape[1] != arch.in_channels:
        raise ValueError(f"expected {arch.in_channels} input channels, got {x.shape[1]}")

    skips = []
    feat_backs = []
    down_backs = []
    h = x
    for lvl in range(arch.depth):
        h, fb = _conv_block(params, arch, f"{prefix}.l{lvl}.feat", h)
        skips.append(h)
        feat_backs.append(fb)
        h, db = _conv_block(params, arch, f"{prefix}.l{lvl}.down", h, stride=2)
        down_backs.append(db)
    h, bott_back = _conv_block(params, arch, f"{prefix}.bott", h)
    if arch.attention == "full":
        z, att_back = cbam(params, f"{prefix}.bott_att", h)
    else:
        z, att_back = h, None
    _check_finite("encode", z)

    def back(dz, dskips, grads):
        d = dz
        if att_back is not None:
            d = att_back(d, grads)
        d = bott_back(d, grads)
        for lvl in reversed(range(arch.depth)):
            d = down_backs[lvl](d, grads)
            if dskips is not None and dskips[lvl] is not None:
                d = d + dskips[lvl]
            d = feat_backs[lvl](d, grads)
        _check_finite("encode backward", d)
        return d

    return z, skips, back


def decode(params: dict, arch: ArchSpec, z: np.ndarray, skips: list, prefix: str):
    """Reconstruction head: returns (xhat, back); back(dxhat, grads) -> (dz, dskips)."""
    if len(skips) != arch.depth:
        raise ValueError(f"expected {arch.depth} skip tensors, got {len(skips)}")
    h = z
    level_backs = []
    for lvl in reversed(range(arch.depth)):
        want_ch = arch.level_channels(lvl)
        if skips[lvl].shape[1] != want_ch:
            raise ValueError(f"skip {lvl} has {skips[lvl].shape[1]} channels, expected {want_ch}")
        h, up_cache = ops.upsample2_fwd(h)
        h, up_back = _conv_block(params, arch, f"{prefix}.l{lvl}.up", h)
        if h.shape[2:] != skips[lvl].shape[2:]:
            raise ValueError(f"skip {lvl} spatial shape {skips[lvl].shape[2:]} != {h.shape[2:]}")
        h = np.concatenate([h, skips[lvl]], axis=1)
        h, fuse_back = _conv_block(params, arch, f"{prefix}.l{lvl}.fuse", h)
        if arch.attention == "full":
            h, att_back = cbam(params, f"{prefix}.l{lvl}.att", h)
        else:
            att_back = None
        level_backs.append((lvl, want_ch, up_cache, up_back, fuse_back, att_back))
    xhat, head_back = _conv(params, prefix + ".head", h)
    _check_finite("decode", xhat)

    def back(dxhat, grads):
        dskips = [None] * arch.depth
        d = head_back(dxhat, grads)
        for lvl, want_ch, up_cache, up_back, fuse_back, att_back in reversed(level_backs):
            if att_back is not None:
                d = att_back(d, grads)
            d = fuse_back(d, grads)
            dskips[lvl] = d[:, want_ch:]
            d = d[:, :want_ch]
            d = up_back(d, grads)
            d = ops.upsample2_bwd(up_cache, d)
        return d, dskips

    return xhat, back


def discriminate(params: dict, arch: ArchSpec, z: np.ndarray, prefix: str = DISCRIMINATOR):
    """Domain probability per batch element from globally pooled bottleneck features.

    Returns (p, logit, back); back(dlogit, grads) -> dz.  The probability is a
    logistic of a finite logit, hence strictly inside (0, 1).
    """
    pooled, pool_cache = ops.global_avg_fwd(z)
    h, b1 = _linear(params, prefix + ".fc1", pooled)
    h, rcache = ops.relu_fwd(h)
    logit, b2 = _linear(params, prefix + ".fc2", h)
    logit = logit[:, 0]
    p, _ = ops.sigmoid_fwd(logit)

    def back(dlogit, grads):
        d = b2(np.asarray(dlogit, dtype=np.float64)[:, None], grads)
        d = b1(ops.relu_bwd(rcache, d), grads)
        return ops.global_avg_bwd(pool_cache, d)

    return p, logit, back


# -- parameter initialization --------------------------------------------------


def _init_conv(rng, shape):
    fan_in = shape[1] * shape[2] * shape[3] * shape[4]
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _init_linear(rng, shape):
    return rng.normal(0.0, np.sqrt(2.0 / shape[1]), size=shape)


def _init_cbam(params, rng, prefix, channels):
    hidden = max(channels // CBAM_REDUCTION, 1)
    params[prefix + ".mlp1.w"] = _init_linear(rng, (hidden, channels))
    params[prefix + ".mlp1.b"] = np.zeros(hidden)
    params[prefix + ".mlp2.w"] = _init_linear(rng, (channels, hidden))
    params[prefix + ".mlp2.b"] = np.zeros(channels)
    params[prefix + ".spat.w"] = _init_conv(rng, (1, 2, 3, 3, 3))
    params[prefix + ".spat.b"] = np.zeros(1)


def _init_block(params, rng, name, c_in, c_out, k=3):
    params[name + ".w"] = _init_conv(rng, (c_out, c_in, k, k, k))
    params[name + ".b"] = np.zeros(c_out)
    params[name + "_gn.g"] = np.ones(c_out)
    params[name + "_gn.b"] = np.zeros(c_out)


def init_encoder(arch: ArchSpec, seed: int, prefix: str = SOURCE_ENCODER) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, zlib.crc32(prefix.encode())]))
    params: dict = {}
    c_in = arch.in_channels
    for lvl in range(arch.depth):
        c = arch.level_channels(lvl)
        _init_block(params, rng, f"{prefix}.l{lvl}.feat", c_in, c)
        _init_block(params, rng, f"{prefix}.l{lvl}.down", c, 2 * c)
        c_in = 2 * c
    _init_block(params, rng, f"{prefix}.bott", c_in, c_in)
    if arch.attention == "full":
        _init_cbam(params, rng, f"{prefix}.bott_att", c_in)
    return params


def init_decoder(arch: ArchSpec, seed: int, prefix: str) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, zlib.crc32(prefix.encode())]))
    params: dict = {}
    for lvl in reversed(range(arch.depth)):
        c = arch.level_channels(lvl)
        _init_block(params, rng, f"{prefix}.l{lvl}.up", 2 * c, c)
        _init_block(params, rng, f"{prefix}.l{lvl}.fuse", 2 * c, c)
        if arch.attention == "full":
            _init_cbam(params, rng, f"{prefix}.l{lvl}.att", c)
    params[prefix + ".head.w"] = _init_conv(rng, (1, arch.base_channels, 1, 1, 1))
    params[prefix + ".head.b"] = np.full(1, 0.5)  # start predictions mid-window
    return params


def init_discriminator(arch: ArchSpec, seed: int, prefix: str = DISCRIMINATOR) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, zlib.crc32(prefix.encode())]))
    c = arch.bottleneck_channels
    return {
        prefix + ".fc1.w": _init_linear(rng, (arch.disc_hidden, c)),
        prefix + ".fc1.b": np.zeros(arch.disc_hidden),
        prefix + ".fc2.w": _init_linear(rng, (1, arch.disc_hidden)),
        prefix + ".fc2.b": np.zeros(1),
    }


# -- model container -----------------------------------------------------------


class DualTxModel:
    """Parameter store plus forward helpers for the full dual-stream network."""

    def __init__(self, arch: ArchSpec, norm: tuple[float, float], params: dict,
                 decoder_cells: tuple[str, ...], pairs: tuple[tuple[str, str], ...]):
        self.arch = arch
        self.norm = (float(norm[0]), float(norm[1]))
        self.params = params
        self.decoder_cells = tuple(decoder_cells)
        self.pairs = tuple((a, b) for a, b in pairs)

    @classmethod
    def create(cls, arch: ArchSpec, norm: tuple[float, float],
               pairs: list[tuple[str, str]], seed: int,
               extra_cells: tuple[str, ...] = ()) -> "DualTxModel":
        cells = []
        for a, b in pairs:
            for c in (a, b):
                if c not in cells:
                    cells.append(c)
        for c in extra_cells:
            if c not in cells:
                cells.append(c)
        params: dict = {}
        params.update(init_encoder(arch, seed, SOURCE_ENCODER))
        params.update(init_discriminator(arch, seed))
        for cell in cells:
            params.update(init_decoder(arch, seed, f"dec.{cell}"))
        model = cls(arch, norm, params, tuple(cells), tuple(pairs))
        model.copy_block(SOURCE_ENCODER, TARGET_ENCODER)
        return model

    # - parameter bookkeeping -

    def block_names(self, prefix: str) -> list[str]:
        dotted = prefix + "."
        return sorted(n for n in self.params if n.startswith(dotted))

    def decoder_prefix(self, cell: str) -> str:
        if cell not in self.decoder_cells:
            raise KeyError(f"no decoder for cell {cell!r} (have {self.decoder_cells})")
        return f"dec.{cell}"

    def copy_block(self, src_prefix: str, dst_prefix: str) -> None:
        for name in self.block_names(src_prefix):
            self.params[dst_prefix + name[len(src_prefix):]] = self.params[name].copy()

    def checksum(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            if prefix and not name.startswith(prefix + "."):
                continue
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()

    def clone(self) -> "DualTxModel":
        return DualTxModel(
            self.arch, self.norm, {k: v.copy() for k, v in self.params.items()},
            self.decoder_cells, self.pairs,
        )

    # - forward helpers -

    def encode(self, x, encoder: str = SOURCE_ENCODER):
        return encode(self.params, self.arch, x, encoder)

    def decode_cell(self, z, skips, cell: str):
        return decode(self.params, self.arch, z, skips, self.decoder_prefix(cell))

    def forward_dual(self, x_i, x_j, cells: tuple[str, str], encoder: str = SOURCE_ENCODER):
        """Both streams through the designated encoder and their own decoders.

        Returns (xhat_i, xhat_j, back); back(d_i, d_j, grads) -> (dx_i, dx_j).
        """
        if np.shape(x_i) != np.shape(x_j):
            raise ValueError(f"stream shapes differ: {np.shape(x_i)} vs {np.shape(x_j)}")
        z_i, skips_i, enc_back_i = self.encode(x_i, encoder)
        z_j, skips_j, enc_back_j = self.encode(x_j, encoder)
        xh_i, dec_back_i = self.decode_cell(z_i, skips_i, cells[0])
        xh_j, dec_back_j = self.decode_cell(z_j, skips_j, cells[1])

        def back(d_i, d_j, grads):
            dz_i, dskips_i = dec_back_i(d_i, grads)
            dz_j, dskips_j = dec_back_j(d_j, grads)
            dx_i = enc_back_i(dz_i, dskips_i, grads)
            dx_j = enc_back_j(dz_j, dskips_j, grads)
            return dx_i, dx_j

        return xh_i, xh_j, back

    def discriminate(self, z):
        return discriminate(self.params, self.arch, z)


# -- checkpoint format ---------------------------------------------------------
#
# "DTXM" magic, u16 version, u16 reserved, u32 descriptor length, descriptor
# JSON (architecture, normalization window, decoder cells, pairs), u32 block
# count, then per block: u16 name length, name, u8 ndim, u32 dims, f64
# little-endian data.

_CKPT_MAGIC = b"DTXM"
_CKPT_VERSION = 1


def _descriptor(model: DualTxModel) -> bytes:
    desc = {
        "arch": model.arch.to_dict(),
        "norm": list(model.norm),
        "decoder_cells": list(model.decoder_cells),
        "pairs": [list(p) for p in model.pairs],
    }
    return json.dumps(desc, sort_keys=True, separators=(",", ":")).encode()


def save_model(model: DualTxModel, path) -> None:
    desc = _descriptor(model)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHHI", _CKPT_MAGIC, _CKPT_VERSION, 0, len(desc)))
        fh.write(desc)
        names = sorted(model.params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(model.params[name], dtype="<f8")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_model(path, expect_arch: ArchSpec | None = None) -> DualTxModel:
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) != 12:
            raise FormatError(f"{path}: truncated checkpoint header")
        magic, version, _, desc_len = struct.unpack("<4sHHI", head)
        if magic != _CKPT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != _CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        desc = json.loads(fh.read(desc_len).decode())
        arch = ArchSpec.from_dict(desc["arch"])
        if expect_arch is not None and arch != expect_arch:
            raise FormatError(f"{path}: architecture descriptor mismatch: {arch} != {expect_arch}")
        (n_blocks,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(n_blocks):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            data = fh.read(8 * count)
            if len(data) != 8 * count:
                raise FormatError(f"{path}: truncated block {name!r}")
            params[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    return DualTxModel(
        arch,
        tuple(desc["norm"]),
        params,
        tuple(desc["decoder_cells"]),
        tuple(tuple(p) for p in desc["pairs"]),
    )
