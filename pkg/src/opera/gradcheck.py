"""End-to-end check of the hierarchical loss gradient through the whole online network."""

import numpy as np

from .model import HierarchyModel, TargetNetwork
from .numerics import Rng, finite_diff_grad
from .objectives import WeightScheme, opera_loss


def small_model(rng, input_dim=6, num_classes=3, arrangement="C"):
    return HierarchyModel.build(
        rng,
        input_dim,
        num_classes,
        backbone_widths=(8, 6),
        proj_hidden=8,
        embed_dim=4,
        pred_hidden=12,
        head_hidden=8,
        arrangement=arrangement,
    )


def kink_distance(fwd, normalize=True):
    """Distance of a train-mode forward pass from the loss's non-smooth points.

    That is the smallest ``|pre-activation|`` over every ReLU unit and, when
    queries are L2-normalized, the smallest query norm (the normalization is
    singular at zero).
    """
    best = float(np.min(np.linalg.norm(fwd.y_self, axis=1))) if normalize else np.inf
    for caches in fwd.caches.values():
        for c in caches:
            if "pre" in c:
                best = min(best, float(np.min(np.abs(c["pre"]))))
    return best


def opera_objective(model, x, keys, instance_ids, class_ids, tau=0.2, normalize=True):
    fwd = model.forward(x, "train")
    rep = opera_loss(
        fwd.y_self, keys, fwd.y_full, instance_ids, class_ids, scheme_self=WeightScheme.infonce(tau), normalize=normalize
    )
    return fwd, rep


def check_opera_gradients(seed, batch=6, arrangement="C", tau=0.2, min_distance=0.0, perturb=0.0):
    """Relative error between backprop and central differences for every online tensor.

    Returns ``(rel_err, kink_distance)``; the error is ``||g_bp - g_fd|| / ||g_fd||``
    over all parameters concatenated. The target network supplies the keys
    and is held fixed, as it is during training. If the point lies closer than
    ``min_distance`` to a non-smooth point the differences are skipped and the
    error is ``nan``.
    """
    rng = Rng(seed)
    model = small_model(rng.spawn(0), arrangement=arrangement)
    target = TargetNetwork.from_online(model)
    # give the target its own parameters so keys are not a function of the online copy
    for _, t in target.named_parameters():
        t += 0.1 * rng.normal(t.shape)
    x = rng.normal((batch, model.input_dim))
    x2 = x + 0.1 * rng.normal(x.shape)
    inst = np.arange(batch)
    cls = rng.integers(model.num_classes, batch)
    keys = target.forward(x2, "train")

    fwd, rep = opera_objective(model, x, keys, inst, cls, tau)
    analytic = model.backward(fwd, grad_y_self=rep.grad_self, grad_y_full=rep.grad_full)
    dist = kink_distance(fwd)
    if dist < min_distance:
        return float("nan"), dist

    got, want = [], []
    for name, arr in model.named_parameters():
        original = arr.copy()

        def f(values, arr=arr):
            arr[...] = values
            return opera_objective(model, x, keys, inst, cls, tau)[1].value

        fd = finite_diff_grad(f, original)
        arr[...] = original
        got.append(analytic[name].ravel() + perturb)
        want.append(fd.ravel())
    got = np.concatenate(got)
    want = np.concatenate(want)
    return float(np.linalg.norm(got - want) / np.linalg.norm(want)), dist
