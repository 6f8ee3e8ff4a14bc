"""Attentive-fusion meme classifier over precomputed image/text embeddings.

Layout of one forward pass (row-vector convention, batch along axis 0)::

    F_I = adapter_img(image)         F_T = adapter_txt(text)
    f_I = Norm(Dropout(F_I))         f_T = Norm(Dropout(F_T))
    D_i = Dense_i(f_I)               D_t = Dense_t(f_T)      # D -> 256 -> 64 -> 8 -> 1
    [s_i, s_t] = softmax([D_i, D_t] @ W_f + b_f);  S = 1 + s
    F_MM = tanh([S_i * f_I, S_t * f_T] @ W_r + b_r)
    f_MM = Norm(Dropout(F_MM))
    logits = Linear(GeLU(Linear(GeLU(Linear(f_MM)))))       # D_f -> 1024 -> 256 -> 3

The adapters are identity-initialized linear maps that stand in for the
finetunable encoders; freezing a modality freezes its adapter only.
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import core
from .core import EVAL, TRAIN, NormState, ParamTensor
from .errors import ConfigError, ContractError, DimensionError

N_CLASSES = 3


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 512
    fused_dim: int = 512
    attn_sizes: tuple = (256, 64, 8, 1)
    head_sizes: tuple = (1024, 256)
    dropout: float = 0.2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.dim < 1 or self.fused_dim < 1:
            raise ConfigError(f"dims must be >= 1, got dim={self.dim}, fused_dim={self.fused_dim}")
        if not self.attn_sizes or self.attn_sizes[-1] != 1:
            raise ConfigError("attention stack must end in a single unit")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        object.__setattr__(self, "attn_sizes", tuple(int(s) for s in self.attn_sizes))
        object.__setattr__(self, "head_sizes", tuple(int(s) for s in self.head_sizes))

    def to_dict(self):
        d = asdict(self)
        d["attn_sizes"] = list(self.attn_sizes)
        d["head_sizes"] = list(self.head_sizes)
        return d

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class ModelParameters:
    """Every trainable tensor plus the three batch-norm states.

    ``tensors`` maps names to :class:`ParamTensor` in the declared (checkpoint)
    order. ``version`` is bumped on every in-place update so stale forward
    traces can be detected.
    """

    NORMS = ("norm_image", "norm_text", "norm_fused")

    def __init__(self, config, tensors, norms):
        self.config = config
        self.tensors = tensors
        self.norms = norms
        self.version = 0

    def __getitem__(self, name):
        return self.tensors[name]

    def attn_names(self, modality):
        return [
            (f"attn_{modality}.{k}.W", f"attn_{modality}.{k}.b")
            for k in range(len(self.config.attn_sizes))
        ]

    def head_names(self):
        n = len(self.config.head_sizes)
        return [(f"head.{k}.W", f"head.{k}.b") for k in range(n + 1)]

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def trainable_tensors(self):
        return {k: t for k, t in self.tensors.items() if t.trainable}

    def bump(self):
        self.version += 1

    def buffers(self):
        out = {}
        for name in self.NORMS:
            out[f"{name}.running_mean"] = self.norms[name].running_mean
            out[f"{name}.running_var"] = self.norms[name].running_var
        return out

    def snapshot(self):
        """Copy of all values and running statistics (for best-checkpoint tracking)."""
        values = {k: t.value.copy() for k, t in self.tensors.items()}
        values.update({k: v.copy() for k, v in self.buffers().items()})
        return values

    def restore(self, snap):
        for k, t in self.tensors.items():
            t.value[...] = snap[k]
        for name in self.NORMS:
            self.norms[name].running_mean = snap[f"{name}.running_mean"].copy()
            self.norms[name].running_var = snap[f"{name}.running_var"].copy()
        self.bump()

    def grad_norm(self, prefix):
        total = 0.0
        for k, t in self.tensors.items():
            if k.startswith(prefix):
                total += float((t.grad * t.grad).sum())
        return total ** 0.5


def init_model(config, rng):
    """Uniform(+-1/sqrt(fan_in)) weights, identity adapters, fresh norm states."""
    D, Df = config.dim, config.fused_dim
    tensors = {}

    def uniform(rows, cols):
        bound = 1.0 / np.sqrt(rows)
        W = ParamTensor(rng.uniform(-bound, bound, (rows, cols)))
        b = ParamTensor(rng.uniform(-bound, bound, (1, cols)))
        return W, b

    for modality in ("image", "text"):
        tensors[f"{modality}_adapter.W"] = ParamTensor(np.eye(D))
        tensors[f"{modality}_adapter.b"] = ParamTensor(np.zeros((1, D)))

    norms = {
        "norm_image": NormState.create(D, config.bn_momentum, config.bn_eps),
        "norm_text": NormState.create(D, config.bn_momentum, config.bn_eps),
        "norm_fused": NormState.create(Df, config.bn_momentum, config.bn_eps),
    }
    for name in ("norm_image", "norm_text"):
        tensors[f"{name}.gamma"] = norms[name].gamma
        tensors[f"{name}.beta"] = norms[name].beta

    for modality in ("image", "text"):
        fan_in = D
        for k, width in enumerate(config.attn_sizes):
            W, b = uniform(fan_in, width)
            tensors[f"attn_{modality}.{k}.W"] = W
            tensors[f"attn_{modality}.{k}.b"] = b
            fan_in = width

    W, b = uniform(2, 2)
    tensors["fusion_gate.W"], tensors["fusion_gate.b"] = W, b
    W, b = uniform(2 * D, Df)
    tensors["fusion_proj.W"], tensors["fusion_proj.b"] = W, b
    tensors["norm_fused.gamma"] = norms["norm_fused"].gamma
    tensors["norm_fused.beta"] = norms["norm_fused"].beta

    fan_in = Df
    for k, width in enumerate(config.head_sizes + (N_CLASSES,)):
        W, b = uniform(fan_in, width)
        tensors[f"head.{k}.W"], tensors[f"head.{k}.b"] = W, b
        fan_in = width

    return ModelParameters(config, tensors, norms)


def set_freeze(params, freeze_image_adapter=False, freeze_text_adapter=False):
    for modality, frozen in (("image", freeze_image_adapter), ("text", freeze_text_adapter)):
        for suffix in ("W", "b"):
            t = params[f"{modality}_adapter.{suffix}"]
            t.trainable = not frozen
            if frozen:
                t.zero_grad()


@dataclass
class ModalityInput:
    """Image and text embeddings, each ``(B, D)`` (1-D vectors are promoted)."""

    image: np.ndarray
    text: np.ndarray

    def __post_init__(self):
        if self.image is None or self.text is None:
            raise ContractError("ModalityInput must be resolved: both modalities required")
        self.image = np.atleast_2d(np.asarray(self.image, dtype=np.float64))
        self.text = np.atleast_2d(np.asarray(self.text, dtype=np.float64))

    @classmethod
    def stack(cls, inputs):
        return cls(
            np.vstack([i.image for i in inputs]),
            np.vstack([i.text for i in inputs]),
        )

    def __len__(self):
        return self.image.shape[0]


@dataclass
class ForwardTrace:
    F_I: np.ndarray
    F_T: np.ndarray
    f_I: np.ndarray
    f_T: np.ndarray
    D_i: np.ndarray
    D_t: np.ndarray
    s_i: np.ndarray
    s_t: np.ndarray
    S_i: np.ndarray
    S_t: np.ndarray
    F_MM: np.ndarray
    f_MM: np.ndarray
    X_MM: np.ndarray
    logits: np.ndarray
    mode: str
    version: int
    cache: dict = field(repr=False, default_factory=dict)


def _branch_forward(params, modality, x, mode, rng, rate):
    W, b = params[f"{modality}_adapter.W"], params[f"{modality}_adapter.b"]
    F = core.affine(x, W, b)
    dropped, mask = core.dropout(F, rate, mode, rng)
    return F, dropped, mask


def _stack_forward(params, names, x):
    acts = [x]
    pre = []
    h = x
    for k, (wn, bn) in enumerate(names):
        z = core.affine(h, params[wn], params[bn])
        pre.append(z)
        h = core.gelu(z) if k < len(names) - 1 else z
        acts.append(h)
    return h, pre, acts


def _stack_backward(params, names, pre, acts, grad):
    for k in range(len(names) - 1, -1, -1):
        wn, bn = names[k]
        if k < len(names) - 1:
            grad = core.gelu_backward(grad, pre[k])
        grad = core.affine_backward(grad, acts[k], params[wn], params[bn])
    return grad


def forward(params, inputs, mode=EVAL, rng=None, update_running=True, dropout=None):
    """Full forward pass; returns a :class:`ForwardTrace` usable by :func:`backward`.

    ``dropout`` overrides the configured rate for this call.
    """
    if mode not in (TRAIN, EVAL):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    D = params.config.dim
    image, text = inputs.image, inputs.text
    if image.shape[1] != D or text.shape[1] != D or image.shape[0] != text.shape[0]:
        raise DimensionError(
            f"inputs image{image.shape} / text{text.shape} do not match model dim {D}"
        )
    rate = params.config.dropout if dropout is None else dropout
    if mode == TRAIN and rate > 0 and rng is None:
        raise ConfigError("train-mode forward with dropout needs an rng")

    F_I, dI, mask_I = _branch_forward(params, "image", image, mode, rng, rate)
    F_T, dT, mask_T = _branch_forward(params, "text", text, mode, rng, rate)
    f_I, nc_I = core.batch_norm(dI, params.norms["norm_image"], mode, update_running)
    f_T, nc_T = core.batch_norm(dT, params.norms["norm_text"], mode, update_running)

    D_i, pre_i, acts_i = _stack_forward(params, params.attn_names("image"), f_I)
    D_t, pre_t, acts_t = _stack_forward(params, params.attn_names("text"), f_T)

    gate_in = np.hstack([D_i, D_t])
    s = core.softmax_row(core.affine(gate_in, params["fusion_gate.W"], params["fusion_gate.b"]))
    s_i, s_t = s[:, :1], s[:, 1:]
    S_i, S_t = 1.0 + s_i, 1.0 + s_t

    fused_in = np.hstack([S_i * f_I, S_t * f_T])
    F_MM = core.tanh_act(core.affine(fused_in, params["fusion_proj.W"], params["fusion_proj.b"]))
    dMM, mask_MM = core.dropout(F_MM, rate, mode, rng)
    f_MM, nc_MM = core.batch_norm(dMM, params.norms["norm_fused"], mode, update_running)

    logits, pre_h, acts_h = _stack_forward(params, params.head_names(), f_MM)

    cache = dict(
        image=image, text=text, dI=dI, dT=dT, mask_I=mask_I, mask_T=mask_T,
        nc_I=nc_I, nc_T=nc_T, pre_i=pre_i, acts_i=acts_i, pre_t=pre_t, acts_t=acts_t,
        gate_in=gate_in, s=s, fused_in=fused_in, dMM=dMM, mask_MM=mask_MM, nc_MM=nc_MM,
        pre_h=pre_h, acts_h=acts_h,
    )
    return ForwardTrace(
        F_I=F_I, F_T=F_T, f_I=f_I, f_T=f_T, D_i=D_i, D_t=D_t, s_i=s_i, s_t=s_t,
        S_i=S_i, S_t=S_t, F_MM=F_MM, f_MM=f_MM, X_MM=acts_h[-2], logits=logits,
        mode=mode, version=params.version, cache=cache,
    )


def backward(params, trace, dL_dlogits):
    """Accumulate exact gradients of all trainable tensors into ``.grad``."""
    if trace.version != params.version:
        raise ContractError(
            f"stale trace: produced at parameter version {trace.version}, "
            f"parameters are now at {params.version}"
        )
    c = trace.cache
    D = params.config.dim
    g = np.asarray(dL_dlogits, dtype=np.float64)
    if g.shape != trace.logits.shape:
        raise DimensionError(f"dL/dlogits shape {g.shape} != logits shape {trace.logits.shape}")

    g = _stack_backward(params, params.head_names(), c["pre_h"], c["acts_h"], g)
    g = core.batch_norm_backward(g, c["nc_MM"], params.norms["norm_fused"])
    g = core.dropout_backward(g, c["mask_MM"])
    g = core.tanh_backward(g, trace.F_MM)
    g = core.affine_backward(g, c["fused_in"], params["fusion_proj.W"], params["fusion_proj.b"])
    g_img, g_txt = g[:, :D], g[:, D:]

    df_I = trace.S_i * g_img
    df_T = trace.S_t * g_txt
    ds = np.hstack([
        (g_img * trace.f_I).sum(axis=1, keepdims=True),
        (g_txt * trace.f_T).sum(axis=1, keepdims=True),
    ])
    dz = core.softmax_row_backward(ds, c["s"])
    dgate = core.affine_backward(dz, c["gate_in"], params["fusion_gate.W"], params["fusion_gate.b"])

    df_I = df_I + _stack_backward(
        params, params.attn_names("image"), c["pre_i"], c["acts_i"], dgate[:, :1])
    df_T = df_T + _stack_backward(
        params, params.attn_names("text"), c["pre_t"], c["acts_t"], dgate[:, 1:])

    for modality, df, nc, mask, x in (
        ("image", df_I, c["nc_I"], c["mask_I"], c["image"]),
        ("text", df_T, c["nc_T"], c["mask_T"], c["text"]),
    ):
        dF = core.dropout_backward(core.batch_norm_backward(df, nc, params.norms[f"norm_{modality}"]), mask)
        W, b = params[f"{modality}_adapter.W"], params[f"{modality}_adapter.b"]
        if W.trainable or b.trainable:
            core.affine_backward(dF, x, W, b)


def predict_logits(params, inputs, batch_size=512):
    """Eval-mode logits for any number of rows, computed in chunks."""
    out = []
    for start in range(0, len(inputs), batch_size):
        chunk = ModalityInput(
            inputs.image[start:start + batch_size], inputs.text[start:start + batch_size]
        )
        out.append(forward(params, chunk, EVAL).logits)
    if not out:
        return np.zeros((0, N_CLASSES))
    return np.vstack(out)


# -- checkpoint file -----------------------------------------------------------

CKPT_MAGIC = b"STILTCK1"


def save_checkpoint(path, params, extra=None):
    """Write ``params`` to ``path`` in the portable checkpoint layout.

    Layout: 8-byte magic ``STILTCK1``; little-endian uint64 header length;
    UTF-8 JSON header (sorted keys) with ``model_config``, ``config_hash``,
    ``extra`` and ``entries`` (name, shape, trainable, offset in float64
    units); then every entry's values as little-endian float64, row-major,
    in entry order. Entries are the tensors in declared order followed by the
    running mean/var of norm_image, norm_text, norm_fused.
    """
    entries = []
    chunks = []
    offset = 0
    items = [(k, t.value, t.trainable) for k, t in params.tensors.items()]
    items += [(k, v, False) for k, v in params.buffers().items()]
    for name, value, trainable in items:
        entries.append(
            {"name": name, "shape": list(value.shape), "trainable": bool(trainable), "offset": offset}
        )
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
        offset += value.size
    header = {
        "format": 1,
        "model_config": params.config.to_dict(),
        "config_hash": params.config.hash(),
        "extra": extra or {},
        "entries": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(params, extra)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise ContractError(f"{path}: not a stilt_bench checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    data = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    cfg = ModelConfig(**header["model_config"])
    if cfg.hash() != header["config_hash"]:
        raise ContractError(f"{path}: config hash mismatch")
    params = init_model(cfg, core.DeterministicRng(0))
    buffers = {}
    for e in header["entries"]:
        size = int(np.prod(e["shape"]))
        value = data[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(np.float64)
        if e["name"] in params.tensors:
            t = params.tensors[e["name"]]
            t.value[...] = value
            t.trainable = e["trainable"]
        else:
            buffers[e["name"]] = value
    for name in params.NORMS:
        params.norms[name].running_mean = buffers[f"{name}.running_mean"]
        params.norms[name].running_var = buffers[f"{name}.running_var"]
    return params, header["extra"]
