"""Plain-text checkpoint format.

::

    OPERA-CKPT v1
    tensors <count>
    <name> <rank> <dim_1> ... <dim_rank>
    <value> <value> ...            (row-major, 17 significant digits)
    ...

Each tensor takes exactly two lines. ``meta.arrangement`` (0/1/2 for A/B/C)
and ``meta.momentum`` are rank-0 tensors; the rest are
``online.<stack>.<layer>.<field>`` and ``target.<stack>.<layer>.<field>``.
A layer with batch-norm tensors is rebuilt as Linear -> BN -> ReLU, one
without as a plain Linear.
"""

import re
from collections import OrderedDict

import numpy as np

from .errors import CheckpointError
from .model import ARRANGEMENTS, BatchNorm, HierarchyModel, MlpLayer, OnlineTargetPair, STACKS, TargetNetwork

MAGIC = "OPERA-CKPT v1"
_FIELDS = ("weight", "bias", "bn.gamma", "bn.beta", "bn.running_mean", "bn.running_var")
_NAME = re.compile(r"^(online|target)\.(\w+)\.(\d+)\.(weight|bias|bn\.gamma|bn\.beta|bn\.running_mean|bn\.running_var)$")


def _stack_tensors(prefix, stacks):
    out = []
    for stack_name, layers in stacks:
        for i, layer in enumerate(layers):
            if layer.bn is None and layer.activation != "none":
                raise CheckpointError(f"{stack_name}.{i}: only BN+ReLU or plain linear layers can be stored")
            if layer.bn is not None and layer.activation != "relu":
                raise CheckpointError(f"{stack_name}.{i}: only BN+ReLU or plain linear layers can be stored")
            items = dict(layer.parameters() + layer.buffers())
            out += [(f"{prefix}.{stack_name}.{i}.{k}", items[k]) for k in _FIELDS if k in items]
    return out


def pair_tensors(pair):
    tensors = [
        ("meta.arrangement", np.array(float(ARRANGEMENTS.index(pair.online.arrangement)))),
        ("meta.momentum", np.array(float(pair.m))),
    ]
    tensors += _stack_tensors("online", pair.online.stacks())
    tensors += _stack_tensors("target", pair.target.stacks())
    return tensors


def dumps(tensors):
    lines = [MAGIC, f"tensors {len(tensors)}"]
    for name, arr in tensors:
        arr = np.asarray(arr, dtype=np.float64)
        lines.append(" ".join([name, str(arr.ndim)] + [str(d) for d in arr.shape]))
        lines.append(" ".join(format(float(v), ".17g") for v in arr.ravel()))
    return "\n".join(lines) + "\n"


def loads(text):
    """Parse checkpoint text into an ordered ``name -> array`` mapping."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()

    def line(i):
        if i >= len(lines):
            raise CheckpointError("unexpected end of file", line=i + 1)
        return lines[i]

    if line(0) != MAGIC:
        raise CheckpointError(f"expected header {MAGIC!r}", line=1)
    head = line(1).split()
    if len(head) != 2 or head[0] != "tensors" or not head[1].isdigit():
        raise CheckpointError("expected 'tensors <count>'", line=2)
    count = int(head[1])
    out = OrderedDict()
    pos = 2
    for _ in range(count):
        parts = line(pos).split()
        if len(parts) < 2 or not parts[1].isdigit():
            raise CheckpointError("expected '<name> <rank> <dims...>'", line=pos + 1)
        name, rank = parts[0], int(parts[1])
        if len(parts) != 2 + rank or not all(p.isdigit() for p in parts[2:]):
            raise CheckpointError(f"tensor {name}: rank {rank} needs {rank} integer dims", line=pos + 1)
        shape = tuple(int(p) for p in parts[2:])
        if name in out:
            raise CheckpointError(f"duplicate tensor {name}", line=pos + 1)
        raw = line(pos + 1).split()
        size = int(np.prod(shape)) if shape else 1
        if len(raw) != size:
            raise CheckpointError(f"tensor {name}: expected {size} values, found {len(raw)}", line=pos + 2)
        try:
            values = np.array([float(v) for v in raw], dtype=np.float64)
        except ValueError:
            raise CheckpointError(f"tensor {name}: non-numeric value", line=pos + 2) from None
        out[name] = values.reshape(shape)
        pos += 2
    if pos != len(lines):
        raise CheckpointError("trailing content after the last tensor", line=pos + 1)
    return out


def _rebuild_stack(tensors, prefix, stack_name):
    layers = []
    i = 0
    while f"{prefix}.{stack_name}.{i}.weight" in tensors:
        key = f"{prefix}.{stack_name}.{i}."
        weight = tensors[key + "weight"]
        bias = tensors.get(key + "bias")
        if bias is None:
            raise CheckpointError(f"missing tensor {key}bias")
        bn = None
        if key + "bn.gamma" in tensors:
            try:
                bn = BatchNorm(
                    tensors[key + "bn.gamma"].copy(),
                    tensors[key + "bn.beta"].copy(),
                    tensors[key + "bn.running_mean"].copy(),
                    tensors[key + "bn.running_var"].copy(),
                )
            except KeyError as exc:
                raise CheckpointError(f"incomplete batch-norm tensors for {key[:-1]}: missing {exc}") from None
        layers.append(MlpLayer(weight.copy(), bias.copy(), bn, "relu" if bn is not None else "none"))
        i += 1
    return layers


def pair_from_tensors(tensors):
    for name in tensors:
        if not name.startswith("meta.") and not _NAME.match(name):
            raise CheckpointError(f"unrecognised tensor name {name}")
    try:
        arrangement = ARRANGEMENTS[int(tensors["meta.arrangement"])]
        m = float(tensors["meta.momentum"])
    except (KeyError, IndexError, ValueError) as exc:
        raise CheckpointError(f"missing or invalid meta tensors ({exc})") from None
    try:
        online = HierarchyModel(*[_rebuild_stack(tensors, "online", s) for s in STACKS], arrangement=arrangement)
        target = TargetNetwork(_rebuild_stack(tensors, "target", "backbone"), _rebuild_stack(tensors, "target", "projector"))
    except (ValueError, IndexError) as exc:
        raise CheckpointError(f"inconsistent network tensors ({exc})") from None
    if not online.backbone or not target.backbone:
        raise CheckpointError("checkpoint has no backbone tensors")
    return OnlineTargetPair(online, target, m)


def save_checkpoint(pair, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(pair_tensors(pair)))


def load_checkpoint(path):
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    return pair_from_tensors(loads(text))
