"""Twin encoders, projection heads, refinement decoder, feature encoder and
reconstruction decoder, sized by :class:`NetConfig`.

Image tensors are ``[N, 3, H, W]`` in [0, 1]. Every encoder is stride 1, so
feature maps keep the spatial size of their input. The decoders fold the map
to LR resolution with ``pixel_unshuffle``, run residual blocks there, and
return to full size with a ``pixel_shuffle`` upsampler; a linear 3x3 skip from
the decoder input is added to the output. At initialization the first three
channels of every encoder copy the centred input image and the decoder skip
reads them back, so an untrained encoder-decoder pair starts close to the
identity map.

Parameter names are dotted paths whose first component is the submodule:
``enc_l``, ``enc_h``, ``proj_l``, ``proj_h``, ``proj_f``, ``dref``, ``ef``,
``drec``.
"""

from __future__ import annotations

import json
import math
import os
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .degradation import SCALES, bicubic_resize
from .rng import Rng

INFER_MODULES = ("enc_l", "dref")
OUTPUT_INIT_SCALE = 0.1
RES_INIT_SCALE = 0.1
# Small enough that rows keep unit norm within 1e-5 unless nearly zero.
PROJ_EPS = 1e-12
IDENTITY_ENCODERS = ("enc_l", "enc_h", "ef")
IDENTITY_DECODERS = ("dref", "drec")
TRAIN_ONLY_MODULES = ("enc_h", "proj_l", "proj_h", "proj_f", "ef", "drec")


@dataclass(frozen=True)
class NetConfig:
    channels: int = 16
    num_blocks: int = 3
    proj_dim: int = 32
    scale: int = 2
    leaky_slope: float = 0.2
    proj_hidden: int = 0  # 0 means proj_dim
    feat_blocks: int = 1
    dec_blocks: int = 1
    pool: int = 8  # side of the average-pooling cell that yields one contrastive vector

    def __post_init__(self):
        if self.channels < 4:
            raise ValueError("channels must be >= 4")
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.proj_dim < 8:
            raise ValueError("proj_dim must be >= 8")
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {SCALES}")
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in [0, 1)")
        if self.pool < 1 or self.feat_blocks < 0 or self.dec_blocks < 0:
            raise ValueError("pool must be >= 1 and block counts >= 0")

    @property
    def hidden(self) -> int:
        return self.proj_hidden or self.proj_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


@dataclass
class FeatureSet:
    """Unit-norm ``[M, S]`` vectors taken from an ``h x w`` feature grid."""

    vectors: Tensor
    origin: str
    spatial_map: tuple[int, int]

    @property
    def m(self) -> int:
        return self.vectors.shape[0]


class ModelParams:
    """Ordered mapping of parameter name to tensor."""

    def __init__(self, tensors: "OrderedDict[str, Tensor]", config: NetConfig):
        self.tensors = tensors
        self.config = config

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def subset(self, modules) -> "ModelParams":
        keep = OrderedDict((k, v) for k, v in self.tensors.items() if k.split(".")[0] in modules)
        return ModelParams(keep, self.config)

    def modules(self) -> list[str]:
        return list(OrderedDict.fromkeys(k.split(".")[0] for k in self.tensors))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self.tensors.values():
            t.requires_grad = flag
        return self


# ------------------------------------------------------------------ layout

def _conv_shapes(prefix: str, cin: int, cout: int, k: int = 3):
    return [(f"{prefix}.w", (cout, cin, k, k)), (f"{prefix}.b", (cout,))]


def _res_shapes(prefix: str, c: int):
    return _conv_shapes(f"{prefix}.conv1", c, c) + _conv_shapes(f"{prefix}.conv2", c, c)


def _encoder_shapes(prefix: str, cfg: NetConfig, blocks: int):
    out = _conv_shapes(f"{prefix}.head", 3, cfg.channels)
    for i in range(blocks):
        out += _res_shapes(f"{prefix}.block{i}", cfg.channels)
    return out


def _decoder_shapes(prefix: str, cfg: NetConfig):
    c, s2 = cfg.channels, cfg.scale * cfg.scale
    out = _conv_shapes(f"{prefix}.fold", c * s2, c)
    for i in range(cfg.dec_blocks):
        out += _res_shapes(f"{prefix}.block{i}", c)
    out += _conv_shapes(f"{prefix}.up", c, c * s2)
    out += _conv_shapes(f"{prefix}.out", c, 3)
    out += _conv_shapes(f"{prefix}.skip", c, 3)
    return out


def _head_shapes(prefix: str, cfg: NetConfig):
    return [(f"{prefix}.fc1.w", (cfg.channels, cfg.hidden)), (f"{prefix}.fc1.b", (cfg.hidden,)),
            (f"{prefix}.fc2.w", (cfg.hidden, cfg.proj_dim)), (f"{prefix}.fc2.b", (cfg.proj_dim,))]


def param_shapes(cfg: NetConfig) -> list[tuple[str, tuple[int, ...]]]:
    return (_encoder_shapes("enc_l", cfg, cfg.num_blocks)
            + _encoder_shapes("enc_h", cfg, cfg.num_blocks)
            + _head_shapes("proj_l", cfg)
            + _head_shapes("proj_h", cfg)
            + _head_shapes("proj_f", cfg)
            + _decoder_shapes("dref", cfg)
            + _encoder_shapes("ef", cfg, cfg.feat_blocks)
            + _decoder_shapes("drec", cfg))


def param_count(cfg: NetConfig) -> int:
    return int(sum(math.prod(shape) for _, shape in param_shapes(cfg)))


def init_params(cfg: NetConfig, seed: int = 0, dtype=None) -> ModelParams:
    """Kaiming fan-in normal weights with gain ``sqrt(2 / (1 + slope^2))``, zero biases.

    The two image-producing convolutions of each decoder start scaled by
    ``OUTPUT_INIT_SCALE`` so the untrained output sits near mid-grey. The
    second convolution of every residual branch starts scaled by
    ``RES_INIT_SCALE`` so activations do not grow with depth. Encoder heads and
    decoder skips then get the RGB pass-through taps (see ``_identity_path``).

    Each tensor draws from its own sub-stream keyed by its position in the
    layout, so adding a module never changes the values of the others.
    """
    dtype = np.dtype(dtype or ad.get_default_dtype())
    gain = math.sqrt(2.0 / (1.0 + cfg.leaky_slope ** 2))
    root = Rng(seed)
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    for idx, (name, shape) in enumerate(param_shapes(cfg)):
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 else math.prod(shape[1:])
            std = gain / math.sqrt(fan_in)
            if name.endswith((".out.w", ".skip.w")):
                std *= OUTPUT_INIT_SCALE
            elif name.endswith(".conv2.w"):
                std *= RES_INIT_SCALE
            data = root.derive(idx).normal(shape) * std
        data = _identity_path(name, data)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return ModelParams(tensors, cfg)


def _identity_path(name: str, data: np.ndarray) -> np.ndarray:
    """Overwrite the RGB pass-through taps of encoder heads and decoder skips."""
    module, _, rest = name.partition(".")
    if (module in IDENTITY_ENCODERS and rest == "head.w") or (module in IDENTITY_DECODERS and rest == "skip.w"):
        data = data.copy()
        c = data.shape[2] // 2
        if rest == "head.w":
            data[:3] = 0.0
        else:
            data[:, :3] = 0.0
        for ch in range(3):
            data[ch, ch, c, c] = 1.0
    return data


# ---------------------------------------------------------------- blocks

def _conv(x: Tensor, p: ModelParams, prefix: str) -> Tensor:
    return ad.conv2d(x, p[f"{prefix}.w"], p[f"{prefix}.b"], padding=p[f"{prefix}.w"].shape[2] // 2)


def _resblock(x: Tensor, p: ModelParams, prefix: str, slope: float) -> Tensor:
    y = ad.leaky_relu(_conv(x, p, f"{prefix}.conv1"), slope)
    return ad.add(x, _conv(y, p, f"{prefix}.conv2"))


def _encoder(img: Tensor, p: ModelParams, prefix: str, blocks: int, cfg: NetConfig) -> Tensor:
    x = _conv(ad.add_scalar(img, -0.5), p, f"{prefix}.head")
    for i in range(blocks):
        x = _resblock(x, p, f"{prefix}.block{i}", cfg.leaky_slope)
    return x


def _decoder(fmap: Tensor, p: ModelParams, prefix: str, cfg: NetConfig) -> Tensor:
    x = ad.leaky_relu(_conv(ad.pixel_unshuffle(fmap, cfg.scale), p, f"{prefix}.fold"), cfg.leaky_slope)
    for i in range(cfg.dec_blocks):
        x = _resblock(x, p, f"{prefix}.block{i}", cfg.leaky_slope)
    x = ad.pixel_shuffle(_conv(x, p, f"{prefix}.up"), cfg.scale)
    x = _conv(ad.leaky_relu(x, cfg.leaky_slope), p, f"{prefix}.out")
    x = ad.add(x, _conv(fmap, p, f"{prefix}.skip"))
    return ad.add_scalar(x, 0.5)


def _check_image(op: str, x: Tensor) -> None:
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise ad.DimensionError(op, f"expected [N, 3, H, W], got {x.shape}")


# ------------------------------------------------------------------ public

def encode_cde(u_l: Tensor, i_h: Tensor, params: ModelParams, cfg: NetConfig) -> tuple[Tensor, Tensor]:
    """Feature maps of the upsampled LR image and the HR image (same shape)."""
    _check_image("encode_cde", u_l)
    _check_image("encode_cde", i_h)
    if u_l.shape != i_h.shape:
        raise ad.DimensionError("encode_cde", f"U_l {u_l.shape} and I_h {i_h.shape} differ",
                                ["axis 2", "axis 3"])
    fmap_l = _encoder(u_l, params, "enc_l", cfg.num_blocks, cfg)
    fmap_h = _encoder(i_h, params, "enc_h", cfg.num_blocks, cfg)
    return fmap_l, fmap_h


def project(fmap: Tensor, params: ModelParams, head: str, cfg: NetConfig, origin: str = "") -> list[FeatureSet]:
    """One FeatureSet per batch item: pool, flatten positions, 2-layer MLP, normalize."""
    x = ad.avg_pool2d(fmap, cfg.pool) if cfg.pool > 1 else fmap
    n, c, h, w = x.shape
    rows = ad.reshape(ad.transpose(x, (0, 2, 3, 1)), (n * h * w, c))
    z = ad.leaky_relu(ad.linear(rows, params[f"{head}.fc1.w"], params[f"{head}.fc1.b"]), cfg.leaky_slope)
    z = ad.l2_normalize(ad.linear(z, params[f"{head}.fc2.w"], params[f"{head}.fc2.b"]), PROJ_EPS)
    z = ad.reshape(z, (n, h * w, cfg.proj_dim))
    out = []
    for i in range(n):
        vec = ad.reshape(ad.take_rows(z, [i]), (h * w, cfg.proj_dim))
        out.append(FeatureSet(vec, origin, (h, w)))
    return out


def refine(fmap_l: Tensor, params: ModelParams, cfg: NetConfig) -> Tensor:
    """Super-resolved image from the LR feature map; not clipped."""
    return _decoder(fmap_l, params, "dref", cfg)


def feat(image: Tensor, params: ModelParams, cfg: NetConfig) -> Tensor:
    return _encoder(image, params, "ef", cfg.feat_blocks, cfg)


def reconstruct(fmap_h: Tensor, params: ModelParams, cfg: NetConfig) -> Tensor:
    return _decoder(fmap_h, params, "drec", cfg)


@dataclass
class TrainOutputs:
    fmap_l: Tensor
    fmap_h: Tensor
    i_s: Tensor
    f_hmap: Tensor
    f_smap: Tensor
    recon: Tensor
    fbar_l: list[FeatureSet]
    fbar_h: list[FeatureSet]
    f_h: list[FeatureSet]
    f_s: list[FeatureSet]


def forward_train(u_l: Tensor, i_h: Tensor, params: ModelParams, cfg: NetConfig) -> TrainOutputs:
    fmap_l, fmap_h = encode_cde(u_l, i_h, params, cfg)
    i_s = refine(fmap_l, params, cfg)
    n = i_h.shape[0]
    both = feat(ad.concat([i_h, i_s], axis=0), params, cfg)
    f_hmap = ad.reshape(ad.take_rows(both, list(range(n))), (n,) + both.shape[1:])
    f_smap = ad.reshape(ad.take_rows(both, list(range(n, 2 * n))), (n,) + both.shape[1:])
    recon = reconstruct(f_hmap, params, cfg)
    return TrainOutputs(
        fmap_l=fmap_l, fmap_h=fmap_h, i_s=i_s, f_hmap=f_hmap, f_smap=f_smap, recon=recon,
        fbar_l=project(fmap_l, params, "proj_l", cfg, "lr_cde"),
        fbar_h=project(fmap_h, params, "proj_h", cfg, "hr_cde"),
        f_h=project(f_hmap, params, "proj_f", cfg, "hr_feat"),
        f_s=project(f_smap, params, "proj_f", cfg, "sr_feat"),
    )


def upsample_batch(i_l: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic upsampling of an ``[N, 3, h, w]`` batch (input preprocessing, no gradient)."""
    return np.stack([bicubic_resize(img, scale, "up") for img in np.asarray(i_l, dtype=np.float64)])


def forward_infer(i_l, params: ModelParams, cfg: NetConfig) -> np.ndarray:
    """LR batch ``[N, 3, h, w]`` (or one ``[3, h, w]`` image) to SR output.

    Only ``enc_l`` and ``dref`` parameters are read.
    """
    arr = np.asarray(i_l.data if isinstance(i_l, Tensor) else i_l, dtype=np.float64)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    dtype = next(iter(params)).dtype
    with ad.no_grad():
        u_l = Tensor(upsample_batch(arr, cfg.scale).astype(dtype))
        fmap_l = _encoder(u_l, params, "enc_l", cfg.num_blocks, cfg)
        out = refine(fmap_l, params, cfg).data
    return out[0] if single else out


# -------------------------------------------------------------- checkpoints

MAGIC = b"CRLSRCKP"
FORMAT_VERSION = 1
_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64, "uint64": np.uint64}


def write_blobs(path, header: dict, arrays: "OrderedDict[str, np.ndarray]") -> None:
    """Binary container: magic, u32 version, u32 header length, JSON header, raw blobs.

    The header lists each array's ``name``, ``dtype``, ``shape``, ``offset`` and
    ``nbytes`` (offsets relative to the first blob byte). All values are
    little-endian.
    """
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    head = json.dumps({**header, "tensors": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def read_blobs(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for e in header.pop("tensors"):
        dt = np.dtype(_DTYPES[e["dtype"]]).newbyteorder("<")
        buf = raw[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=dt).astype(dt.newbyteorder("="), copy=True).reshape(e["shape"])
    return header, arrays


def save_checkpoint(path, params: ModelParams, extra_arrays=None, meta: dict | None = None) -> None:
    arrays = OrderedDict((name, t.data) for name, t in params.items())
    for name, arr in (extra_arrays or {}).items():
        arrays[name] = arr
    write_blobs(path, {"config": params.config.to_dict(), "meta": meta or {},
                       "params": params.names()}, arrays)


def load_checkpoint(path, modules=None) -> tuple[ModelParams, dict, "OrderedDict[str, np.ndarray]"]:
    """Returns (params, meta, extra arrays). ``modules`` restricts which submodules load."""
    header, arrays = read_blobs(path)
    cfg = NetConfig.from_dict(header["config"])
    names = header["params"]
    tensors = OrderedDict()
    for name in names:
        if modules is None or name.split(".")[0] in modules:
            tensors[name] = Tensor(arrays[name], requires_grad=True, name=name)
    extra = OrderedDict((k, v) for k, v in arrays.items() if k not in set(names))
    return ModelParams(tensors, cfg), header.get("meta", {}), extra
