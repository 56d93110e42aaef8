"""MLP hierarchy network with hand-written backpropagation.

Layout of the online network::

    x -> backbone -> y -> projector -> z -> predictor -> q (instance-level output)

and a class head attached at ``y`` (arrangement A), ``z`` (B) or ``q`` (C).
The target network is a copy of backbone + projector that only ever moves by
the exponential moving average in :func:`momentum_update`.

Each stack is a list of :class:`MlpLayer`; hidden layers are
Linear -> BatchNorm -> ReLU and the last layer of every built stack is a plain
Linear. Arrays use the row-per-sample convention, ``out = x @ W.T + b``.
"""

import copy
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import DegenerateError, ShapeError, StateError

ARRANGEMENTS = ("A", "B", "C")
STACKS = ("backbone", "projector", "predictor", "class_head")
TARGET_STACKS = ("backbone", "projector")


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-8
    momentum: float = 0.1

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("batch-norm eps must be positive")

    @classmethod
    def fresh(cls, width, eps=1e-8):
        return cls(np.ones(width), np.zeros(width), np.zeros(width), np.ones(width), eps)


@dataclass
class MlpLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    bn: Optional[BatchNorm] = None
    activation: str = "none"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias {self.bias.shape} does not match weight {self.weight.shape}")

    @property
    def in_width(self):
        return self.weight.shape[1]

    @property
    def out_width(self):
        return self.weight.shape[0]

    def parameters(self):
        out = [("weight", self.weight), ("bias", self.bias)]
        if self.bn is not None:
            out += [("bn.gamma", self.bn.gamma), ("bn.beta", self.bn.beta)]
        return out

    def buffers(self):
        if self.bn is None:
            return []
        return [("bn.running_mean", self.bn.running_mean), ("bn.running_var", self.bn.running_var)]


def xavier_layer(rng, fan_in, fan_out, batch_norm=False, activation="none"):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    weight = rng.uniform((fan_out, fan_in), -limit, limit)
    bn = BatchNorm.fresh(fan_out) if batch_norm else None
    return MlpLayer(weight, np.zeros(fan_out), bn, activation)


def build_stack(rng, widths):
    """``widths = (in, h1, ..., out)``; hidden layers get BN + ReLU, the last is plain."""
    layers = []
    for i in range(len(widths) - 1):
        hidden = i < len(widths) - 2
        layers.append(xavier_layer(rng, widths[i], widths[i + 1], batch_norm=hidden, activation="relu" if hidden else "none"))
    return layers


def layer_forward(layer, x, train):
    if x.shape[1] != layer.in_width:
        raise ShapeError(f"layer expects width {layer.in_width}, got {x.shape[1]}")
    a = x @ layer.weight.T + layer.bias
    cache = {"x": x}
    bn = layer.bn
    if bn is not None:
        if train:
            n = a.shape[0]
            if n < 2:
                raise DegenerateError("batch-norm in train mode needs a batch of at least 2")
            mean = a.mean(axis=0)
            centered = a - mean
            var = np.mean(centered * centered, axis=0)
            inv_std = 1.0 / np.sqrt(var + bn.eps)
            bn.running_mean *= 1.0 - bn.momentum
            bn.running_mean += bn.momentum * mean
            bn.running_var *= 1.0 - bn.momentum
            bn.running_var += bn.momentum * var * (n / (n - 1))
        else:
            centered = a - bn.running_mean
            inv_std = 1.0 / np.sqrt(bn.running_var + bn.eps)
        x_hat = centered * inv_std
        cache.update(x_hat=x_hat, inv_std=inv_std, train=train)
        a = bn.gamma * x_hat + bn.beta
    if layer.activation == "relu":
        cache["pre"] = a
        cache["active"] = a > 0
        a = np.where(cache["active"], a, 0.0)
    return a, cache


def layer_backward(layer, cache, grad_out):
    g = grad_out
    grads = {}
    if layer.activation == "relu":
        g = np.where(cache["active"], g, 0.0)
    bn = layer.bn
    if bn is not None:
        x_hat = cache["x_hat"]
        grads["bn.gamma"] = np.sum(g * x_hat, axis=0)
        grads["bn.beta"] = np.sum(g, axis=0)
        g_hat = g * bn.gamma
        if cache["train"]:
            n = g.shape[0]
            g = (cache["inv_std"] / n) * (
                n * g_hat - g_hat.sum(axis=0) - x_hat * np.sum(g_hat * x_hat, axis=0)
            )
        else:
            g = g_hat * cache["inv_std"]
    x = cache["x"]
    grads["weight"] = g.T @ x
    grads["bias"] = g.sum(axis=0)
    return g @ layer.weight, grads


def stack_forward(layers, x, train=True):
    caches = []
    for layer in layers:
        x, c = layer_forward(layer, x, train)
        caches.append(c)
    return x, caches


def stack_backward(layers, caches, grad_out):
    grads = [None] * len(layers)
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        g, grads[i] = layer_backward(layers[i], caches[i], g)
    return g, grads


def _named(stack_name, layers, which):
    out = []
    for i, layer in enumerate(layers):
        items = layer.parameters() if which == "params" else layer.buffers()
        out += [(f"{stack_name}.{i}.{k}", v) for k, v in items]
    return out


@dataclass
class ForwardResult:
    y: np.ndarray
    z: np.ndarray
    y_self: np.ndarray
    y_full: np.ndarray
    caches: Optional[dict] = field(default=None, repr=False)


class HierarchyModel:
    """Online network: backbone, projector, predictor and a class head at the chosen arrangement."""

    def __init__(self, backbone, projector, predictor, class_head, arrangement="C"):
        if arrangement not in ARRANGEMENTS:
            raise ValueError(f"arrangement must be one of {ARRANGEMENTS}, got {arrangement!r}")
        self.backbone: List[MlpLayer] = list(backbone)
        self.projector: List[MlpLayer] = list(projector)
        self.predictor: List[MlpLayer] = list(predictor)
        self.class_head: List[MlpLayer] = list(class_head)
        self.arrangement = arrangement
        self._check_wiring()

    @classmethod
    def build(
        cls,
        rng,
        input_dim,
        num_classes,
        backbone_widths=(64, 64),
        proj_hidden=64,
        embed_dim=32,
        pred_hidden=64,
        head_hidden=None,
        arrangement="C",
    ):
        if head_hidden is None:
            head_hidden = max(4 * num_classes, 32)
        rep_dim = backbone_widths[-1]
        backbone = build_stack(rng, (input_dim, *backbone_widths))
        projector = build_stack(rng, (rep_dim, proj_hidden, embed_dim))
        predictor = build_stack(rng, (embed_dim, pred_hidden, embed_dim))
        head_in = rep_dim if arrangement == "A" else embed_dim
        class_head = build_stack(rng, (head_in, head_hidden, num_classes))
        return cls(backbone, projector, predictor, class_head, arrangement)

    def _check_wiring(self):
        def chain(name, layers, width):
            for layer in layers:
                if layer.in_width != width:
                    raise ShapeError(f"{name} layer expects width {layer.in_width}, previous output is {width}")
                width = layer.out_width
            return width

        rep = chain("backbone", self.backbone, self.backbone[0].in_width)
        emb = chain("projector", self.projector, rep)
        q = chain("predictor", self.predictor, emb)
        attach = {"A": rep, "B": emb, "C": q}[self.arrangement]
        chain("class_head", self.class_head, attach)

    @property
    def input_dim(self):
        return self.backbone[0].in_width

    @property
    def num_classes(self):
        return self.class_head[-1].out_width

    def stacks(self):
        return [(name, getattr(self, name)) for name in STACKS]

    def named_parameters(self):
        out = []
        for name, layers in self.stacks():
            out += _named(name, layers, "params")
        return out

    def named_buffers(self):
        out = []
        for name, layers in self.stacks():
            out += _named(name, layers, "buffers")
        return out

    def encode(self, x):
        """Eval-mode backbone output; the frozen representation used downstream."""
        y, _ = stack_forward(self.backbone, np.asarray(x, dtype=np.float64), train=False)
        return y

    def forward(self, x, mode="train"):
        train = mode == "train"
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"input width {x.shape[-1]} does not match backbone width {self.input_dim}")
        y, c_b = stack_forward(self.backbone, x, train)
        z, c_p = stack_forward(self.projector, y, train)
        q, c_q = stack_forward(self.predictor, z, train)
        head_in = {"A": y, "B": z, "C": q}[self.arrangement]
        logits, c_h = stack_forward(self.class_head, head_in, train)
        caches = {"backbone": c_b, "projector": c_p, "predictor": c_q, "class_head": c_h} if train else None
        return ForwardResult(y, z, q, logits, caches)

    def backward(self, fwd, grad_y_self=None, grad_y_full=None, grad_y=None):
        """Parameter gradients given upstream gradients on ``y_self``, ``y_full`` and ``y``.

        Missing upstream gradients count as zero. ``fwd`` must come from a
        train-mode :meth:`forward` of this model.
        """
        if fwd is None or fwd.caches is None:
            raise StateError("backward needs the cached activations of a train-mode forward pass")
        c = fwd.caches
        grads = {}

        def record(stack, per_layer):
            for i, d in enumerate(per_layer):
                for k, v in d.items():
                    grads[f"{stack}.{i}.{k}"] = v

        g_y = np.zeros_like(fwd.y) if grad_y is None else np.array(grad_y, dtype=np.float64)
        g_z = np.zeros_like(fwd.z)
        g_q = np.zeros_like(fwd.y_self) if grad_y_self is None else np.array(grad_y_self, dtype=np.float64)

        g_logits = np.zeros_like(fwd.y_full) if grad_y_full is None else grad_y_full
        g_head_in, head_grads = stack_backward(self.class_head, c["class_head"], g_logits)
        record("class_head", head_grads)
        if self.arrangement == "A":
            g_y += g_head_in
        elif self.arrangement == "B":
            g_z += g_head_in
        else:
            g_q += g_head_in

        g, pred_grads = stack_backward(self.predictor, c["predictor"], g_q)
        record("predictor", pred_grads)
        g_z += g
        g, proj_grads = stack_backward(self.projector, c["projector"], g_z)
        record("projector", proj_grads)
        g_y += g
        _, bb_grads = stack_backward(self.backbone, c["backbone"], g_y)
        record("backbone", bb_grads)
        return grads


class TargetNetwork:
    """Backbone + projector copy; no predictor, no class head, never optimized."""

    def __init__(self, backbone, projector):
        self.backbone = list(backbone)
        self.projector = list(projector)

    @classmethod
    def from_online(cls, online):
        return cls(copy.deepcopy(online.backbone), copy.deepcopy(online.projector))

    def stacks(self):
        return [(name, getattr(self, name)) for name in TARGET_STACKS]

    def named_parameters(self):
        return _named("backbone", self.backbone, "params") + _named("projector", self.projector, "params")

    def named_buffers(self):
        return _named("backbone", self.backbone, "buffers") + _named("projector", self.projector, "buffers")

    def forward(self, x, mode="train"):
        train = mode == "train"
        y, _ = stack_forward(self.backbone, np.asarray(x, dtype=np.float64), train)
        z, _ = stack_forward(self.projector, y, train)
        return z


@dataclass
class OnlineTargetPair:
    online: HierarchyModel
    target: TargetNetwork
    m: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.m <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")

    @classmethod
    def create(cls, online, m=0.99):
        return cls(online, TargetNetwork.from_online(online), m)


def momentum_update(pair):
    """``theta_target <- m * theta_target + (1 - m) * theta_online`` for every target parameter."""
    online = dict(pair.online.named_parameters())
    m = pair.m
    for name, t in pair.target.named_parameters():
        o = online.get(name)
        if o is None or o.shape != t.shape:
            raise StateError(f"target tensor {name} has no online counterpart of shape {t.shape}")
        t *= m
        t += (1.0 - m) * o
    return pair.target
