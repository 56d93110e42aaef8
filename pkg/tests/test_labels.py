import numpy as np
import pytest
from hypothesis import given, strategies as st

from opera.errors import ConsistencyError
from opera.labels import LabelPair, PairRelation, relate, relation_masks, validate_dataset


@pytest.mark.parametrize(
    "a, b, want",
    [
        ((7, 2), (7, 2), (True, True)),
        ((7, 2), (9, 2), (False, True)),
        ((7, 2), (9, 5), (False, False)),
    ],
)
def test_relate_examples(a, b, want):
    assert relate(LabelPair(*a), LabelPair(*b)) == PairRelation(*want)


def test_relate_rejects_violation():
    with pytest.raises(ConsistencyError):
        relate(LabelPair(3, 0), LabelPair(3, 1))


def test_validate_dataset_examples():
    assert validate_dataset([LabelPair(0, 0), LabelPair(0, 0), LabelPair(1, 1)]) is None
    assert validate_dataset([]) is None
    v = validate_dataset([LabelPair(0, 0), LabelPair(0, 1)])
    assert v.indices == (0, 1)
    assert v.instance_id == 0 and v.class_ids == (0, 1)


def test_validate_reports_first_offender():
    labels = [(0, 0), (1, 1), (2, 2), (1, 3), (0, 4)]
    assert validate_dataset(labels).indices == (1, 3)


def _consistent_labels(instance_ids):
    # class is a function of the instance, so the hierarchy holds by construction
    return [LabelPair(i, i % 3) for i in instance_ids]


@given(st.lists(st.integers(0, 9), min_size=2, max_size=30))
def test_relate_symmetric_and_never_true_false(ids):
    labels = _consistent_labels(ids)
    assert validate_dataset(labels) is None
    for a in labels:
        for b in labels:
            r = relate(a, b)
            assert r == relate(b, a)
            assert r != PairRelation(True, False)


def test_relation_masks_agree_with_relate():
    inst = np.array([0, 1, 2, 0, 3])
    cls = np.array([0, 1, 0, 0, 1])
    same_inst, same_cls = relation_masks(inst, cls)
    for i in range(5):
        for j in range(5):
            r = relate(LabelPair(inst[i], cls[i]), LabelPair(inst[j], cls[j]))
            assert (same_inst[i, j], same_cls[i, j]) == tuple(r)
    with pytest.raises(ConsistencyError):
        relation_masks(np.array([0, 0]), np.array([0, 1]))
