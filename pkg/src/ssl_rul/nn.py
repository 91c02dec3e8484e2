"""Deep GRU networks and the pretext / fine-tuning model assemblies.

Parameters live in flat ordered dicts ``name -> Tensor``. Names are
prefixed by the block they belong to:

    f.*          embedding linear layer (n_g -> embed_dim)
    theta.k.*    encoder GRU stack (AE only)
    psi.k.*      decoder / backbone GRU stack
    g.*          pretext output head
    phi.k.*      fine-tuning GRU stack
    gt.*         fine-tuning output head (-> scalar RUL)
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .tensor import GRU_NAMES, Tensor

KINDS = ("AE", "AR", "MSPA", "FineTune")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    n_g: int = 3
    h: int = 30
    embed_dim: int = 64
    encoder_layers: int = 2
    backbone_layers: int = 4
    hidden: int = 64
    dropout: float = 0.1
    q: int = 1
    finetune_hidden: int = 64
    finetune_layers: int = 1
    backbone: str | None = None  # FineTune only: pretext family of the backbone

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.embed_dim != self.hidden:
            raise ValueError(f"skip connections need embed_dim == hidden "
                             f"(got {self.embed_dim} and {self.hidden})")
        if self.kind == "FineTune" and self.backbone not in ("AE", "AR", "MSPA"):
            raise ValueError("FineTune spec needs backbone in {'AE', 'AR', 'MSPA'}")
        if min(self.q, self.backbone_layers, self.finetune_layers, self.hidden) < 1:
            raise ValueError("layer counts, sizes and q must be >= 1")

    @classmethod
    def default(cls, kind: str, q: int = 1, **kw) -> "ModelSpec":
        layers = 2 if kind == "AE" else 4
        return cls(kind=kind, backbone_layers=layers, q=q, **kw)

    def finetune(self) -> "ModelSpec":
        """Spec of the RUL model built on this pretext model's backbone."""
        if self.kind == "FineTune":
            return self
        return replace(self, kind="FineTune", backbone=self.kind)

    @property
    def family(self) -> str:
        return self.backbone if self.kind == "FineTune" else self.kind

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def gru_param_count(in_dim: int, hidden: int) -> int:
    return 3 * (in_dim * hidden + hidden * hidden + 2 * hidden)


def _gru_shapes(prefix, in_dim, hidden):
    shapes = {}
    for g in ("z", "r", "h"):
        shapes[f"{prefix}.W_{g}"] = (in_dim, hidden)
    for g in ("z", "r", "h"):
        shapes[f"{prefix}.U_{g}"] = (hidden, hidden)
    for b in ("b_iz", "b_ir", "b_ih", "b_hz", "b_hr", "b_hh"):
        shapes[f"{prefix}.{b}"] = (hidden,)
    return shapes


def _stack_shapes(prefix, layers, in_dim, hidden):
    shapes = {}
    for k in range(layers):
        shapes.update(_gru_shapes(f"{prefix}.{k}", in_dim if k == 0 else hidden, hidden))
    return shapes


def param_shapes(spec: ModelSpec) -> dict[str, tuple]:
    """Ordered tensor table of a model."""
    E, H = spec.embed_dim, spec.hidden
    shapes = {"f.W": (spec.n_g, E), "f.b": (E,)}
    fam = spec.family
    if fam == "AE":
        shapes.update(_stack_shapes("theta", spec.encoder_layers, E, H))
    if spec.kind == "AE" or fam in ("AR", "MSPA"):
        shapes.update(_stack_shapes("psi", spec.backbone_layers, H, H))
    if spec.kind == "AE" or spec.kind == "AR":
        shapes.update({"g.W": (H, spec.n_g), "g.b": (spec.n_g,)})
    elif spec.kind == "MSPA":
        shapes.update({"g.W": (H, spec.q * spec.n_g), "g.b": (spec.q * spec.n_g,)})
    else:
        shapes.update(_stack_shapes("phi", spec.finetune_layers, H, spec.finetune_hidden))
        shapes.update({"gt.W": (spec.finetune_hidden, 1), "gt.b": (1,)})
    return shapes


def backbone_names(spec: ModelSpec) -> list[str]:
    """Tensors shared between a pretext model and its fine-tuning model."""
    stack = "theta." if spec.family == "AE" else "psi."
    return [n for n in param_shapes(spec) if n.startswith("f.") or n.startswith(stack)]


def init_params(spec: ModelSpec, rng: np.random.Generator) -> dict[str, Tensor]:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    params = {}
    for name, shape in param_shapes(spec).items():
        if len(shape) == 1:
            data = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def count_params(params, frozen=()) -> int:
    frozen = set(frozen)
    return int(sum(t.size if isinstance(t, Tensor) else np.size(t)
                   for n, t in params.items() if n not in frozen))


def count_trainable(spec_or_params, frozen=()) -> int:
    if isinstance(spec_or_params, ModelSpec):
        frozen = set(frozen)
        return int(sum(math.prod(s) for n, s in param_shapes(spec_or_params).items() if n not in frozen))
    return count_params(spec_or_params, frozen)


# -- building blocks -------------------------------------------------------------

def _layer(params, prefix):
    return {k: params[f"{prefix}.{k}"] for k in GRU_NAMES}


def gru_cell_forward(x_t, h_prev, layer_params):
    """One GRU step on (B, in) inputs; ``layer_params`` keyed by GRU_NAMES."""
    return T.gru_cell(x_t, h_prev, layer_params)


def deep_gru_forward(X, params, prefix, layers, dropout=0.0, training=False, rng=None, fused=True):
    """Stack of GRU layers over X (B, T, in) -> (B, T, hidden).

    Dropout is applied to the outputs of every layer but the last.
    """
    out = T.as_tensor(X)
    for k in range(layers):
        p = _layer(params, f"{prefix}.{k}")
        if fused:
            out = T.gru_sequence(out, p)
        else:
            B, steps, _ = out.shape
            h = Tensor(np.zeros((B, p["U_z"].shape[0])))
            hs = []
            for t in range(steps):
                h = T.gru_cell(out[:, t, :], h, p)
                hs.append(h)
            out = T.stack(hs, axis=1)
        if k < layers - 1:
            out = T.dropout(out, dropout, rng, training)
    return out


def linear(x, params, prefix):
    return T.add(T.matmul(x, params[f"{prefix}.W"]), params[f"{prefix}.b"])


def _check_input(X, spec):
    X = T.as_tensor(X)
    if X.ndim == 2:
        X = T.reshape(X, (1,) + X.shape)
    if X.ndim != 3 or X.shape[2] != spec.n_g:
        raise T.ShapeError("model input", X.shape, (None, spec.h, spec.n_g))
    return X


def embed(X, spec, params):
    return T.layer_norm(linear(X, params, "f"))


def ae_forward(X, spec, params, training=False, rng=None, fused=True):
    """Reconstruct the window: (B, h, n_g) -> (B, h, n_g)."""
    X = _check_input(X, spec)
    e = embed(X, spec, params)
    z = T.add(deep_gru_forward(e, params, "theta", spec.encoder_layers, spec.dropout, training, rng, fused), e)
    o = T.add(deep_gru_forward(z, params, "psi", spec.backbone_layers, spec.dropout, training, rng, fused), z)
    return linear(o, params, "g")


def _ar_embedding(X, spec, params, training, rng, fused):
    e = embed(X, spec, params)
    return T.add(deep_gru_forward(e, params, "psi", spec.backbone_layers, spec.dropout, training, rng, fused), e)


def ar_forward(X, spec, params, training=False, rng=None, fused=True):
    """Next-step prediction: (B, h, n_g) -> (B, n_g)."""
    X = _check_input(X, spec)
    z = _ar_embedding(X, spec, params, training, rng, fused)
    return linear(z[:, -1, :], params, "g")


def mspa_forward(X, spec, params, training=False, rng=None, fused=True):
    """Next q steps: (B, h, n_g) -> (B, q, n_g)."""
    X = _check_input(X, spec)
    z = _ar_embedding(X, spec, params, training, rng, fused)
    y = linear(z[:, -1, :], params, "g")
    return T.reshape(y, (y.shape[0], spec.q, spec.n_g))


def backbone_forward(X, spec, params, training=False, rng=None, fused=True):
    """Embedding sequence z (B, h, hidden) extracted for fine-tuning."""
    X = _check_input(X, spec)
    if spec.family == "AE":
        e = embed(X, spec, params)
        return T.add(deep_gru_forward(e, params, "theta", spec.encoder_layers, spec.dropout,
                                      training, rng, fused), e)
    return _ar_embedding(X, spec, params, training, rng, fused)


def finetune_forward(X, spec, params, training=False, rng=None, fused=True, backbone_training=None):
    """RUL estimate in measurement steps: (B, h, n_g) -> (B,).

    ``backbone_training`` overrides the dropout mode of the backbone (a frozen
    backbone is run as a fixed feature extractor).
    """
    bt = training if backbone_training is None else backbone_training
    z = backbone_forward(X, spec, params, bt, rng, fused)
    hseq = deep_gru_forward(z, params, "phi", spec.finetune_layers, spec.dropout, training, rng, fused)
    y = linear(hseq[:, -1, :], params, "gt")
    return T.reshape(y, (y.shape[0],))


FORWARD = {"AE": ae_forward, "AR": ar_forward, "MSPA": mspa_forward, "FineTune": finetune_forward}


def forward(X, spec, params, training=False, rng=None, **kw):
    return FORWARD[spec.kind](X, spec, params, training, rng, **kw)


def transfer_backbone(pretext_params, ft_spec: ModelSpec, rng) -> dict[str, Tensor]:
    """Fine-tuning parameters: copied backbone + freshly initialised head."""
    params = init_params(ft_spec, rng)
    for name in backbone_names(ft_spec):
        src = pretext_params[name]
        data = src.data if isinstance(src, Tensor) else np.asarray(src)
        if data.shape != params[name].shape:
            raise ValueError(f"backbone tensor {name}: shape {data.shape} != {params[name].shape}")
        params[name].data = np.array(data, dtype=np.float64, copy=True)
    return params
