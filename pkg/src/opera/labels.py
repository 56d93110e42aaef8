"""Two-level labels: instance identity (self supervision) under class identity (full supervision)."""

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import ConsistencyError


class LabelPair(NamedTuple):
    instance_id: int
    class_id: int


class PairRelation(NamedTuple):
    same_instance: bool
    same_class: bool


@dataclass(frozen=True)
class HierarchyViolation:
    """First pair of samples sharing an instance id but not a class id."""

    indices: tuple
    instance_id: int
    class_ids: tuple


def relate(a, b):
    same_instance = a.instance_id == b.instance_id
    same_class = a.class_id == b.class_id
    if same_instance and not same_class:
        raise ConsistencyError(
            f"instance {a.instance_id} carries two classes ({a.class_id}, {b.class_id})"
        )
    return PairRelation(bool(same_instance), bool(same_class))


def validate_dataset(labels) -> Optional[HierarchyViolation]:
    """Return ``None`` if every instance id maps to one class id, else the first violation."""
    first = {}
    for idx, lab in enumerate(labels):
        inst, cls = int(lab[0]), int(lab[1])
        seen = first.get(inst)
        if seen is None:
            first[inst] = (idx, cls)
        elif seen[1] != cls:
            return HierarchyViolation((seen[0], idx), inst, (seen[1], cls))
    return None


def relation_masks(instance_ids, class_ids, other_instance_ids=None, other_class_ids=None):
    """Boolean ``(same_instance, same_class)`` matrices between two label arrays.

    Raises ``ConsistencyError`` if any same-instance pair disagrees on class.
    """
    inst_a = np.asarray(instance_ids)
    cls_a = np.asarray(class_ids)
    inst_b = inst_a if other_instance_ids is None else np.asarray(other_instance_ids)
    cls_b = cls_a if other_class_ids is None else np.asarray(other_class_ids)
    same_inst = inst_a[:, None] == inst_b[None, :]
    same_cls = cls_a[:, None] == cls_b[None, :]
    if np.any(same_inst & ~same_cls):
        i, j = np.argwhere(same_inst & ~same_cls)[0]
        raise ConsistencyError(f"instance {inst_a[i]} carries two classes ({cls_a[i]}, {cls_b[j]})")
    return same_inst, same_cls
