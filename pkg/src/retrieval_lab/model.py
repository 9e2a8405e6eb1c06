"""Pre-norm transformer over continuous input vectors.

Parameters live in a flat ``dict[str, Tensor]`` so that the optimizer,
checkpoints and ablations can address them by name.  ``forward`` works on
one example ``(L, input_dim)`` or a batch ``(B, L, input_dim)`` and reads
the regression output at the last ``n_query`` positions.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor, gelu, layer_norm, softmax_rows
from .container import read_container, write_container
from .optim import AdamState

Params = dict[str, Tensor]


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads_per_layer: int = 1
    residual_dim: int = 64
    head_dim: int = 0  # 0 -> residual_dim // heads_per_layer
    use_mlp: bool = True
    mlp_hidden: int = 0  # 0 -> 4 * residual_dim
    input_dim: int = 8
    output_dim: int = 4
    n_query: int = 4
    causal: bool = True
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if self.layers < 1 or self.heads_per_layer < 1:
            raise ValueError("need at least one layer and one head")
        if self.head_dim == 0:
            if self.residual_dim % self.heads_per_layer:
                raise ValueError("residual_dim must divide evenly into heads when head_dim is unset")
            object.__setattr__(self, "head_dim", self.residual_dim // self.heads_per_layer)
        if self.mlp_hidden == 0:
            object.__setattr__(self, "mlp_hidden", 4 * self.residual_dim)
        if min(self.head_dim, self.residual_dim, self.input_dim, self.output_dim, self.n_query) < 1:
            raise ValueError(f"all dimensions must be positive: {self}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)

    @classmethod
    def for_task(cls, task, **kw) -> ModelConfig:
        """Config whose input/output/query sizes match a :class:`TaskConfig`."""
        return cls(input_dim=task.input_dim, output_dim=task.target_dim, n_query=task.N, **kw)


class ConfigMismatchError(ValueError):
    pass


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, hd, H = cfg.residual_dim, cfg.head_dim, cfg.heads_per_layer
    shapes: dict[str, tuple[int, ...]] = {"embed.w": (cfg.input_dim, d), "embed.b": (d,)}
    for l in range(cfg.layers):
        p = f"l{l}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for m in "qkv":
            shapes[p + f"attn.w{m}"] = (d, H * hd)
            shapes[p + f"attn.b{m}"] = (H * hd,)
        shapes[p + "attn.wo"] = (H * hd, d)
        shapes[p + "attn.bo"] = (d,)
        if cfg.use_mlp:
            shapes[p + "ln2.g"] = (d,)
            shapes[p + "ln2.b"] = (d,)
            shapes[p + "mlp.w1"] = (d, cfg.mlp_hidden)
            shapes[p + "mlp.b1"] = (cfg.mlp_hidden,)
            shapes[p + "mlp.w2"] = (cfg.mlp_hidden, d)
            shapes[p + "mlp.b2"] = (d,)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["readout.w"] = (d, cfg.output_dim)
    shapes["readout.b"] = (cfg.output_dim,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    """Weights ~ N(0, init_std^2); biases 0; layer-norm gains 1."""
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            data = np.ones(shape, dtype=np.float32)
        elif _is_bias(name):
            data = np.zeros(shape, dtype=np.float32)
        else:
            data = (rng.standard_normal(shape) * cfg.init_std).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True)
    return params


def _is_bias(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf == "b" or (leaf.startswith("b") and len(leaf) == 2)


def cast_params(params: Mapping[str, Tensor], dtype) -> Params:
    return {k: Tensor(p.data.astype(dtype), requires_grad=True) for k, p in params.items()}


def causal_mask(L: int) -> np.ndarray:
    return np.tril(np.ones((L, L), dtype=bool))


def _override_heads(p: Tensor, overrides: Mapping[int, np.ndarray]) -> Tensor:
    """Replace the post-softmax weights of selected heads with fixed maps."""
    data = p.data.copy()
    for h, w in overrides.items():
        data[:, h] = w
    heads = list(overrides)

    def backward(g):
        g = g.copy()
        g[:, heads] = 0.0
        return (g,)

    return Tensor._from_op(data, (p,), backward, "attn_override")


def forward(
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    inputs,
    capture: bool = False,
    attention_override: Mapping[tuple[int, int], np.ndarray] | None = None,
):
    """Run the model.

    ``attention_override`` maps ``(layer, head)`` to a weight map of shape
    ``(L, L)`` or ``(B, L, L)`` that replaces the head's post-softmax
    attention.  Returns ``(outputs, capture)``; ``capture`` is ``None`` unless
    requested, otherwise an array ``(B, layers, heads, L, L)`` (batch axis
    dropped for single-example input).
    """
    x_in = inputs if isinstance(inputs, Tensor) else Tensor(np.asarray(inputs))
    single = x_in.ndim == 2
    if single:
        x_in = x_in.reshape(1, *x_in.shape)
    B, L, din = x_in.shape
    if din != cfg.input_dim:
        raise ConfigMismatchError(f"input width {din} != model input_dim {cfg.input_dim}")
    if L < cfg.n_query:
        raise ValueError(f"sequence length {L} shorter than n_query {cfg.n_query}")
    H, hd = cfg.heads_per_layer, cfg.head_dim
    allowed = causal_mask(L) if cfg.causal else None
    scale = 1.0 / math.sqrt(hd)

    per_layer: dict[int, dict[int, np.ndarray]] = {}
    for (l, h), w in (attention_override or {}).items():
        if not (0 <= l < cfg.layers and 0 <= h < H):
            raise ValueError(f"override for nonexistent head ({l}, {h})")
        per_layer.setdefault(l, {})[h] = w

    caps = []
    x = x_in @ params["embed.w"] + params["embed.b"]
    for l in range(cfg.layers):
        p = f"l{l}."
        try:
            hn = layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"], cfg.ln_eps)
            q = (hn @ params[p + "attn.wq"] + params[p + "attn.bq"]).reshape(B, L, H, hd).transpose(0, 2, 1, 3)
            k = (hn @ params[p + "attn.wk"] + params[p + "attn.bk"]).reshape(B, L, H, hd).transpose(0, 2, 3, 1)
            v = (hn @ params[p + "attn.wv"] + params[p + "attn.bv"]).reshape(B, L, H, hd).transpose(0, 2, 1, 3)
            att = softmax_rows((q @ k) * scale, allowed)
            if l in per_layer:
                att = _override_heads(att, per_layer[l])
            if capture:
                caps.append(att.data)
            z = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, H * hd)
            x = x + (z @ params[p + "attn.wo"] + params[p + "attn.bo"])
            if cfg.use_mlp:
                hn = layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"], cfg.ln_eps)
                hid = gelu(hn @ params[p + "mlp.w1"] + params[p + "mlp.b1"])
                x = x + (hid @ params[p + "mlp.w2"] + params[p + "mlp.b2"])
        except ag.NonFiniteError as exc:
            raise ag.NonFiniteError(f"layer {l}: {exc}") from exc
    x = x[:, L - cfg.n_query :, :]
    x = layer_norm(x, params["ln_f.g"], params["ln_f.b"], cfg.ln_eps)
    out = x @ params["readout.w"] + params["readout.b"]

    cap = None
    if capture:
        cap = np.stack(caps, axis=1)
        if single:
            cap = cap[0]
    if single:
        out = out.reshape(cfg.n_query, cfg.output_dim)
    return out, cap


def predict(params, cfg: ModelConfig, inputs, batch_size: int = 512, **kw) -> np.ndarray:
    """Forward without building a graph, chunked over the batch."""
    inputs = np.asarray(inputs)
    outs = []
    with ag.no_grad():
        for i in range(0, inputs.shape[0], batch_size):
            chunk_kw = dict(kw)
            ov = kw.get("attention_override")
            if ov:
                chunk_kw["attention_override"] = {
                    key: (w[i : i + batch_size] if w.ndim == 3 else w) for key, w in ov.items()
                }
            out, _ = forward(params, cfg, inputs[i : i + batch_size], **chunk_kw)
            outs.append(out.data)
    return np.concatenate(outs, axis=0)


# -- checkpoints -------------------------------------------------------------------

CHECKPOINT_FORMAT = 1


@dataclass
class ModelCheckpoint:
    params: Params
    config: ModelConfig
    adam: AdamState
    epoch: int
    step: int = 0
    task: dict | None = None
    extra: dict | None = None


def save_checkpoint(
    path: str | Path,
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    adam: AdamState | None = None,
    epoch: int = 0,
    step: int = 0,
    task=None,
    extra: dict | None = None,
) -> int:
    adam = adam or AdamState()
    header = {
        "format": CHECKPOINT_FORMAT,
        "model": cfg.to_dict(),
        "task": task.to_dict() if hasattr(task, "to_dict") else task,
        "epoch": int(epoch),
        "step": int(step),
        "adam_step": int(adam.step_count),
        "param_names": list(params),
        "extra": extra or {},
    }
    arrays = {f"param/{k}": p.data.astype(np.float32) for k, p in params.items()}
    for k in params:
        if k in adam.m:
            arrays[f"adam_m/{k}"] = adam.m[k].astype(np.float32)
            arrays[f"adam_v/{k}"] = adam.v[k].astype(np.float32)
    return write_container(path, "checkpoint", header, arrays)


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None, expect_task=None) -> ModelCheckpoint:
    header, arrays = read_container(path, kind="checkpoint")
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ConfigMismatchError(f"{path}: unsupported checkpoint format {header.get('format')}")
    cfg = ModelConfig.from_dict(header["model"])
    if expect is not None and cfg != expect:
        diff = {k: (v, getattr(expect, k)) for k, v in cfg.to_dict().items() if getattr(expect, k) != v}
        raise ConfigMismatchError(f"{path}: model config differs (stored, expected): {diff}")
    task = header.get("task")
    if expect_task is not None:
        want = expect_task.to_dict() if hasattr(expect_task, "to_dict") else expect_task
        if task != want:
            raise ConfigMismatchError(f"{path}: task config differs: stored {task}, expected {want}")
    names = header["param_names"]
    shapes = param_shapes(cfg)
    params: Params = {}
    for k in names:
        arr = arrays[f"param/{k}"]
        if tuple(arr.shape) != shapes.get(k):
            raise ConfigMismatchError(f"{path}: parameter {k!r} has shape {arr.shape}, config implies {shapes.get(k)}")
        params[k] = Tensor(arr, requires_grad=True)
    adam = AdamState(step_count=header["adam_step"])
    if any(key.startswith("adam_m/") for key in arrays):
        adam.m = {k: arrays[f"adam_m/{k}"] for k in names}
        adam.v = {k: arrays[f"adam_v/{k}"] for k in names}
    return ModelCheckpoint(params, cfg, adam, header["epoch"], header["step"], task, header.get("extra"))
