"""Shared two-stream encoder, cross-modal interaction and task decoders.

Encoder: four 3x3 stride-2 conv layers per stream (visible and infrared).
After each layer the two stream features are mixed by a learned 1x1
interaction block, and the mixed feature is added back into both streams
as the next layer's input. The fusion decoder walks back up with bilinear
upsampling and 3x3 convs over (upsampled state, mixed feature) concats and
ends in a two-conv reconstruction head squashed to [0,1]. The counting
decoder regresses a nonnegative density map at 1/16 resolution straight
from the deepest features.

In the 'series' architecture the counting path instead re-encodes the
fused image through its own four-layer encoder (cascaded single-stream),
which duplicates feature extraction on purpose for ablation runs.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import FormatError, ModelError
from .rgbt_data import RgbtSample

WIDTHS = (16, 32, 64, 128)
LEAKY_SLOPE = 0.01
N_LAYERS = 4
DOWNSAMPLE = 2 ** N_LAYERS    # density map resolution vs the input image
VIS_CHANNELS = 3
IR_CHANNELS = 1
RECON_HIDDEN = 16
COUNT_HIDDEN = 64
CHECKPOINT_MAGIC = b"FCCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    """All learnable weights, keyed by name in a fixed insertion order."""

    arch: str = "parallel"         # 'parallel' or 'series'
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors.keys())

    def n_weights(self):
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self):
        out = ModelParams(arch=self.arch)
        for name, t in self.tensors.items():
            c = Tensor(t.data.copy(), requires_grad=t.requires_grad)
            out.tensors[name] = c
        return out


@dataclass
class FeaturePyramid:
    """Per-layer stream features, mixed features and fusion-decoder states."""

    vis: list                      # vis[k] is the visible feature after layer k+1
    ir: list
    mixed: list
    dec: list = None               # filled by decode_fusion; dec[3] == mixed[3]


def _f32_snap(arr):
    # keep values on the float32 grid so checkpoints serialize losslessly
    return arr.astype(np.float32).astype(np.float64)


def _param_specs(arch):
    specs = []
    for k in range(N_LAYERS):
        cin_v = VIS_CHANNELS if k == 0 else WIDTHS[k - 1]
        cin_i = IR_CHANNELS if k == 0 else WIDTHS[k - 1]
        cout = WIDTHS[k]
        specs.append((f"enc_vis{k + 1}_w", (cout, cin_v, 3, 3)))
        specs.append((f"enc_vis{k + 1}_b", (cout,)))
        specs.append((f"enc_ir{k + 1}_w", (cout, cin_i, 3, 3)))
        specs.append((f"enc_ir{k + 1}_b", (cout,)))
        specs.append((f"mix{k + 1}_w", (cout, 2 * cout, 1, 1)))
        specs.append((f"mix{k + 1}_b", (cout,)))
    for k in (3, 2, 1):
        cin = WIDTHS[k] + WIDTHS[k - 1]
        specs.append((f"dec{k}_w", (WIDTHS[k - 1], cin, 3, 3)))
        specs.append((f"dec{k}_b", (WIDTHS[k - 1],)))
    specs.append(("recon1_w", (RECON_HIDDEN, WIDTHS[0], 3, 3)))
    specs.append(("recon1_b", (RECON_HIDDEN,)))
    specs.append(("recon2_w", (1, RECON_HIDDEN, 3, 3)))
    specs.append(("recon2_b", (1,)))
    if arch == "parallel":
        specs.append(("count1_w", (COUNT_HIDDEN, 3 * WIDTHS[3], 3, 3)))
        specs.append(("count1_b", (COUNT_HIDDEN,)))
        specs.append(("count2_w", (1, COUNT_HIDDEN, 3, 3)))
        specs.append(("count2_b", (1,)))
    elif arch == "series":
        for k in range(N_LAYERS):
            cin = 1 if k == 0 else WIDTHS[k - 1]
            specs.append((f"senc{k + 1}_w", (WIDTHS[k], cin, 3, 3)))
            specs.append((f"senc{k + 1}_b", (WIDTHS[k],)))
        specs.append(("count1_w", (COUNT_HIDDEN, WIDTHS[3], 3, 3)))
        specs.append(("count1_b", (COUNT_HIDDEN,)))
        specs.append(("count2_w", (1, COUNT_HIDDEN, 3, 3)))
        specs.append(("count2_b", (1,)))
    else:
        raise ModelError(f"unknown architecture {arch!r}")
    return specs


def init_params(seed, arch="parallel") -> ModelParams:
    """Fan-in scaled uniform weights, zero biases, deterministic in seed."""
    rng = np.random.default_rng(seed)
    params = ModelParams(arch=arch)
    for name, shape in _param_specs(arch):
        if name.endswith("_b"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            data = _f32_snap(rng.uniform(-bound, bound, size=shape))
        params.tensors[name] = Tensor(data, requires_grad=True)
    return params


# input handling ------------------------------------------------------------

def _to_nchw(img, channels=None):
    """Accept (H,W), (H,W,C) or (N,C,H,W) arrays/Tensors; return a Tensor."""
    if isinstance(img, Tensor):
        if img.ndim != 4:
            raise ModelError(f"tensor input must be NCHW, got shape {img.shape}")
        return img
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim == 3:
        if channels is not None and arr.shape[2] != channels:
            raise ModelError(f"expected {channels} channels, got shape {arr.shape}")
        arr = arr.transpose(2, 0, 1)[None]
    elif arr.ndim != 4:
        raise ModelError(f"cannot interpret input of shape {arr.shape}")
    return Tensor(arr)


def stack_samples(samples):
    """Stack same-size samples into batched (N,3,H,W) and (N,1,H,W) tensors."""
    vis = np.stack([s.visible.transpose(2, 0, 1) for s in samples])
    ir = np.stack([s.infrared.transpose(2, 0, 1) for s in samples])
    return Tensor(vis), Tensor(ir)


def _nchw_to_hwc(t):
    arr = t.data if isinstance(t, Tensor) else t
    if arr.shape[0] != 1:
        raise ModelError("single-sample output requested from a batched tensor")
    return arr[0].transpose(1, 2, 0)


# forward graph ---------------------------------------------------------------

def mix(f_vis, f_ir, params, k):
    """Cross-modal interaction at layer k: concat -> 1x1 conv -> leaky ReLU."""
    f_vis = _to_nchw(f_vis)
    f_ir = _to_nchw(f_ir)
    if f_vis.shape != f_ir.shape:
        raise ModelError(f"mix inputs differ in shape: {f_vis.shape} vs {f_ir.shape}")
    cat = ad.concat([f_vis, f_ir], axis=1)
    out = ad.conv2d(cat, params[f"mix{k}_w"], params[f"mix{k}_b"])
    return ad.leaky_relu(out, LEAKY_SLOPE)


def encode(visible, infrared, params) -> FeaturePyramid:
    """Run both encoder streams with per-layer interaction."""
    vis_t = _to_nchw(visible, VIS_CHANNELS)
    ir_t = _to_nchw(infrared, IR_CHANNELS)
    h, w = vis_t.shape[2], vis_t.shape[3]
    if ir_t.shape[2] != h or ir_t.shape[3] != w:
        raise ModelError(f"visible {vis_t.shape} and infrared {ir_t.shape} disagree")
    if h % 16 or w % 16:
        raise ModelError(f"input size {h}x{w} not divisible by 16")
    vis_feats, ir_feats, mixed = [], [], []
    in_v, in_i = vis_t, ir_t
    for k in range(1, N_LAYERS + 1):
        fv = ad.leaky_relu(
            ad.conv2d(in_v, params[f"enc_vis{k}_w"], params[f"enc_vis{k}_b"], stride=2, pad=1),
            LEAKY_SLOPE)
        fi = ad.leaky_relu(
            ad.conv2d(in_i, params[f"enc_ir{k}_w"], params[f"enc_ir{k}_b"], stride=2, pad=1),
            LEAKY_SLOPE)
        m = mix(fv, fi, params, k)
        vis_feats.append(fv)
        ir_feats.append(fi)
        mixed.append(m)
        in_v = fv + m
        in_i = fi + m
    return FeaturePyramid(vis=vis_feats, ir=ir_feats, mixed=mixed)


def _check_pyramid(pyramid):
    for name in ("vis", "ir", "mixed"):
        feats = getattr(pyramid, name)
        if feats is None or len(feats) != N_LAYERS or any(f is None for f in feats):
            raise ModelError(f"pyramid is missing {name} levels")


def decode_fusion(pyramid, params, as_array=False):
    """Fusion decoder: top-down upsample/concat/conv, then the recon head."""
    _check_pyramid(pyramid)
    a = pyramid.mixed[3]
    dec = [None, None, None, a]
    for k in (3, 2, 1):
        up = ad.bilinear_up2(a)
        cat = ad.concat([up, pyramid.mixed[k - 1]], axis=1)
        a = ad.conv2d(cat, params[f"dec{k}_w"], params[f"dec{k}_b"], pad=1)
        dec[k - 1] = a
    pyramid.dec = dec
    r = ad.bilinear_up2(a)
    r = ad.leaky_relu(ad.conv2d(r, params["recon1_w"], params["recon1_b"], pad=1), LEAKY_SLOPE)
    fused = ad.sigmoid(ad.conv2d(r, params["recon2_w"], params["recon2_b"], pad=1))
    return _nchw_to_hwc(fused) if as_array else fused


def decode_count(pyramid, params, as_array=False):
    """Counting decoder on the deepest features; nonnegative density map."""
    _check_pyramid(pyramid)
    if params.arch != "parallel":
        raise ModelError("decode_count reads the shared pyramid only in the parallel architecture")
    x = ad.concat([pyramid.vis[3], pyramid.ir[3], pyramid.mixed[3]], axis=1)
    x = ad.leaky_relu(ad.conv2d(x, params["count1_w"], params["count1_b"], pad=1), LEAKY_SLOPE)
    density = ad.relu(ad.conv2d(x, params["count2_w"], params["count2_b"], pad=1))
    return _nchw_to_hwc(density) if as_array else density


def series_count(fused, params, as_array=False):
    """Cascaded counting head: re-encode the fused image, then regress."""
    x = fused if isinstance(fused, Tensor) else _to_nchw(fused, 1)
    for k in range(1, N_LAYERS + 1):
        x = ad.leaky_relu(
            ad.conv2d(x, params[f"senc{k}_w"], params[f"senc{k}_b"], stride=2, pad=1),
            LEAKY_SLOPE)
    x = ad.leaky_relu(ad.conv2d(x, params["count1_w"], params["count1_b"], pad=1), LEAKY_SLOPE)
    density = ad.relu(ad.conv2d(x, params["count2_w"], params["count2_b"], pad=1))
    return _nchw_to_hwc(density) if as_array else density


def forward(sample, params, heads=("fusion", "count")):
    """One shared encoder pass feeding the requested decoder heads.

    Returns (fused, density) as (H,W,1) / (H/16,W/16,1) arrays; a skipped
    head yields None. Accepts an RgbtSample or a (visible, infrared) pair.
    """
    if isinstance(sample, RgbtSample):
        visible, infrared = sample.visible, sample.infrared
    else:
        visible, infrared = sample
    pyramid = encode(visible, infrared, params)
    fused = density = None
    if "fusion" in heads or (params.arch == "series" and "count" in heads):
        fused_t = decode_fusion(pyramid, params)
        fused = _nchw_to_hwc(fused_t)
    if "count" in heads:
        if params.arch == "series":
            density = series_count(fused_t, params, as_array=True)
        else:
            density = decode_count(pyramid, params, as_array=True)
    if "fusion" not in heads:
        fused = None
    return fused, density


# checkpoint io ---------------------------------------------------------------

def save_checkpoint(path, params: ModelParams):
    """FCCK container: magic, version, arch string, length-prefixed entries."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        arch = params.arch.encode("utf-8")
        f.write(struct.pack("<I", len(arch)))
        f.write(arch)
        f.write(struct.pack("<I", len(params.tensors)))
        for name, t in params.tensors.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            shape = t.data.shape
            f.write(struct.pack("<I", len(shape)))
            f.write(struct.pack(f"<{len(shape)}I", *shape))
            f.write(t.data.astype("<f4").tobytes())


def load_checkpoint(path) -> ModelParams:
    name = str(path)
    try:
        raw = open(path, "rb").read()
    except FileNotFoundError:
        raise FormatError(f"missing file {name}")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{name}: bad magic {raw[:4]!r}, expected FCCK")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{name}: truncated checkpoint")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    version, = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{name}: unsupported checkpoint version {version}")
    arch_len, = struct.unpack("<I", take(4))
    arch = take(arch_len).decode("utf-8")
    n_entries, = struct.unpack("<I", take(4))
    params = ModelParams(arch=arch)
    for _ in range(n_entries):
        name_len, = struct.unpack("<I", take(4))
        pname = take(name_len).decode("utf-8")
        ndim, = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        params.tensors[pname] = Tensor(data.astype(np.float64), requires_grad=True)
    if pos != len(raw):
        raise FormatError(f"{name}: {len(raw) - pos} trailing bytes")
    expected = [s for s, _ in _param_specs(arch)]
    if params.names() != expected:
        raise FormatError(f"{name}: parameter set does not match the {arch} architecture")
    for pname, shape in _param_specs(arch):
        if params.tensors[pname].data.shape != shape:
            raise FormatError(f"{name}: entry {pname} has shape "
                              f"{params.tensors[pname].data.shape}, expected {shape}")
    return params
