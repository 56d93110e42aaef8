"""SGD with momentum, learning-rate schedule and the pretraining loop.

Four objective modes share one loop:

``fsl``   softmax cross-entropy on the class head only
``ssl``   InfoNCE between online predictor and target projector only
``naive`` self and full pair objectives summed on the same query/key
          similarities (no class head)
``opera`` InfoNCE on the predictor output plus softmax cross-entropy on the
          class head attached per the arrangement
"""

import math
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Dict, List, Optional

import numpy as np

from .data import AugmentConfig, two_views
from .errors import ConfigError, DivergenceError, NumericError
from .model import ARRANGEMENTS, HierarchyModel, OnlineTargetPair, momentum_update
from .numerics import Rng
from .objectives import WeightScheme, infonce_term, naive_pair_loss, softmax_ce

MODES = ("fsl", "ssl", "naive", "opera")
SCHEDULES = ("constant", "cosine")


@dataclass
class RunConfig:
    mode: str = "opera"
    arrangement: str = "C"
    epochs: int = 200
    batch_size: int = 64
    tau: float = 0.2
    ema: float = 0.99
    lr: float = 0.05
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "cosine"
    seed: int = 0
    # dataset
    num_classes: int = 8
    per_class: int = 100
    dim: int = 32
    spread: float = 0.1
    test_fraction: float = 0.2
    data_csv: str = ""
    test_csv: str = ""
    # augmentation
    noise_sigma: float = 0.05
    scale_lo: float = 0.8
    scale_hi: float = 1.2
    mask_prob: float = 0.1
    # objective switches
    normalize: bool = True
    symmetrize: bool = False
    full_both_views: bool = True
    full_weight: float = 1.0
    naive_self_scheme: str = "infonce"
    naive_full_scheme: str = "softmax"
    naive_self_wp: float = 1.0
    naive_self_wn: float = 1.0
    naive_full_wp: float = 1.0
    naive_full_wn: float = 1.0
    # architecture
    backbone: str = "64,64"
    proj_hidden: int = 64
    pred_hidden: int = 64
    embed_dim: int = 32
    head_hidden: int = 0
    # evaluation
    probe_epochs: int = 100
    probe_lr: float = 0.1
    knn_k: int = 5
    ordering_samples: int = 2000
    out: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        def bad(key, why):
            raise ConfigError(f"invalid value for {key}: {why}", key=key)

        if self.mode not in MODES:
            bad("mode", f"{self.mode!r} not in {MODES}")
        if self.arrangement not in ARRANGEMENTS:
            bad("arrangement", f"{self.arrangement!r} not in {ARRANGEMENTS}")
        if self.schedule not in SCHEDULES:
            bad("schedule", f"{self.schedule!r} not in {SCHEDULES}")
        if self.epochs < 1:
            bad("epochs", "must be >= 1")
        if self.batch_size < 2:
            bad("batch_size", "must be >= 2 (batch-norm and in-batch negatives)")
        if not self.tau > 0:
            bad("tau", "must be positive")
        if not 0 <= self.ema <= 1:
            bad("ema", "must lie in [0, 1]")
        if self.lr < 0:
            bad("lr", "must be nonnegative")
        if not 0 <= self.sgd_momentum < 1:
            bad("sgd_momentum", "must lie in [0, 1)")
        if self.weight_decay < 0:
            bad("weight_decay", "must be nonnegative")
        if self.naive_self_scheme not in ("infonce", "constant"):
            bad("naive_self_scheme", "must be infonce or constant")
        if self.naive_full_scheme not in ("softmax", "constant"):
            bad("naive_full_scheme", "must be softmax or constant")
        for key in ("naive_self_wp", "naive_self_wn", "naive_full_wp", "naive_full_wn", "full_weight"):
            if getattr(self, key) < 0:
                bad(key, "must be nonnegative")
        if min(self.num_classes, self.per_class, self.dim) < 1:
            bad("num_classes", "dataset counts must be >= 1")
        if self.spread < 0:
            bad("spread", "must be nonnegative")
        if not 0 <= self.test_fraction < 1:
            bad("test_fraction", "must lie in [0, 1)")
        try:
            self.augment_config()
        except ValueError as exc:
            bad("noise_sigma/scale_lo/scale_hi/mask_prob", str(exc))
        try:
            widths = self.backbone_widths()
        except ValueError:
            widths = ()
        if not widths or min(widths) < 1:
            bad("backbone", "comma-separated positive widths")

    def backbone_widths(self):
        return tuple(int(w) for w in str(self.backbone).split(",") if w.strip())

    def augment_config(self):
        return AugmentConfig(self.noise_sigma, (self.scale_lo, self.scale_hi), self.mask_prob)

    def naive_schemes(self):
        if self.naive_self_scheme == "infonce":
            s = WeightScheme.infonce(self.tau)
        else:
            s = WeightScheme.constant(self.naive_self_wp, self.naive_self_wn)
        if self.naive_full_scheme == "softmax":
            f = WeightScheme.softmax()
        else:
            f = WeightScheme.constant(self.naive_full_wp, self.naive_full_wn)
        return s, f

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")


def sgd_step(state, params, grads, lr=None):
    """In-place ``v <- mu v + g + wd * theta``; ``theta <- theta - lr v``.

    ``params`` and ``grads`` map tensor names to arrays. Every gradient is
    checked before any parameter is touched.
    """
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown tensor {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match tensor {name} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for tensor {name}")
    for name, theta in params.items():
        g = grads.get(name)
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(theta)
        v *= state.momentum
        if g is not None:
            v += g
        if state.weight_decay:
            v += state.weight_decay * theta
        theta -= lr * v
    return params


def cosine_lr(base_lr, epoch, total):
    if total < 1 or not 0 <= epoch <= total:
        raise ValueError("cosine_lr needs 0 <= epoch <= total and total >= 1")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total))


@dataclass
class MetricsRecord:
    epoch: int
    loss_total: float
    loss_self: float
    loss_full: float
    lr: float
    wall_ms: int = 0
    conflict_grad_max: Optional[float] = None

    def to_json_dict(self):
        """Deterministic fields only; wall time is kept out so reruns are byte-identical."""
        return {
            "epoch": self.epoch,
            "loss_total": self.loss_total,
            "loss_self": self.loss_self,
            "loss_full": self.loss_full,
            "lr": self.lr,
            "conflict_grad_max": self.conflict_grad_max,
        }


@dataclass
class TrainHistory:
    records: List[MetricsRecord] = field(default_factory=list)
    conflict_grads: List[float] = field(default_factory=list)  # naive mode, one per batch


def datasets_for(cfg):
    """Train/test datasets described by a run config (CSV files or seeded blobs)."""
    from .data import load_csv, make_blobs, split

    root = Rng(cfg.seed)
    if cfg.data_csv:
        full = load_csv(cfg.data_csv)
        if cfg.test_csv:
            test = load_csv(cfg.test_csv)
            k = max(full.num_classes, test.num_classes)
            return full.with_num_classes(k), test.with_num_classes(k)
        return split(full, cfg.test_fraction, root.spawn(11))
    full = make_blobs(cfg.num_classes, cfg.per_class, cfg.dim, cfg.spread, root.spawn(10))
    return split(full, cfg.test_fraction, root.spawn(11))


def build_pair(cfg, input_dim, num_classes, rng):
    head_hidden = cfg.head_hidden if cfg.head_hidden > 0 else None
    online = HierarchyModel.build(
        rng,
        input_dim,
        num_classes,
        backbone_widths=cfg.backbone_widths(),
        proj_hidden=cfg.proj_hidden,
        embed_dim=cfg.embed_dim,
        pred_hidden=cfg.pred_hidden,
        head_hidden=head_hidden,
        arrangement=cfg.arrangement,
    )
    return OnlineTargetPair.create(online, cfg.ema)


def _add_grads(total, extra):
    for k, v in extra.items():
        if k in total:
            total[k] = total[k] + v
        else:
            total[k] = v
    return total


def train_step(cfg, pair, v1, v2, instance_ids, class_ids):
    """Losses and online gradients for one batch of paired views.

    Returns ``(loss_self, loss_full, grads, conflict_grad_max)``.
    """
    online, target = pair.online, pair.target
    mode = cfg.mode
    use_self = mode in ("ssl", "opera", "naive")
    use_full = mode in ("fsl", "opera")
    second_view = cfg.symmetrize and use_self or (use_full and cfg.full_both_views)

    f1 = online.forward(v1, "train")
    f2 = online.forward(v2, "train") if second_view else None
    g_self = [None, None]
    g_full = [None, None]
    loss_self = loss_full = 0.0
    conflict = None

    if use_self:
        directions = [(0, f1, target.forward(v2, "train"))]
        if cfg.symmetrize:
            directions.append((1, f2, target.forward(v1, "train")))
        share = 1.0 / len(directions)
        for slot, fq, k in directions:
            if mode == "naive":
                s_scheme, f_scheme = cfg.naive_schemes()
                rep = naive_pair_loss(fq.y_self, k, instance_ids, class_ids, s_scheme, f_scheme, cfg.normalize)
                loss_self += share * rep.self_value
                loss_full += share * rep.full_value
                g = rep.grad_q
                conflict = rep.conflict_grad_max if conflict is None else max(conflict, rep.conflict_grad_max)
            else:
                value, g, _ = infonce_term(
                    fq.y_self, k, instance_ids, WeightScheme.infonce(cfg.tau), normalize=cfg.normalize
                )
                loss_self += share * value
            g_self[slot] = share * g

    if use_full:
        views = [(0, f1)] + ([(1, f2)] if cfg.full_both_views else [])
        share = 1.0 / len(views)
        for slot, fv in views:
            value, g = softmax_ce(fv.y_full, class_ids)
            loss_full += share * cfg.full_weight * value
            g_full[slot] = share * cfg.full_weight * g

    grads = online.backward(f1, grad_y_self=g_self[0], grad_y_full=g_full[0])
    if f2 is not None:
        _add_grads(grads, online.backward(f2, grad_y_self=g_self[1], grad_y_full=g_full[1]))
    return loss_self, loss_full, grads, conflict


def _batches(perm, batch_size):
    out = [perm[i : i + batch_size] for i in range(0, len(perm), batch_size)]
    # a trailing single sample cannot form a batch-norm / in-batch-negative batch
    if len(out) > 1 and len(out[-1]) < 2:
        out.pop()
    return out


def pretrain(cfg, data, hook: Optional[Callable] = None, pair=None):
    """Train an online/target pair on ``data`` according to ``cfg``.

    ``hook(stage, pair, info)`` is called with stage ``"after_optimizer"``
    (target not yet updated) and ``"after_momentum"`` for every step.
    Raises :class:`DivergenceError` on a non-finite loss.
    """
    root = Rng(cfg.seed)
    if pair is None:
        pair = build_pair(cfg, data.dim, data.num_classes, root.spawn(1))
    shuffle_rng = root.spawn(2)
    aug_rng = root.spawn(3)
    aug = cfg.augment_config()
    if len(data) < 2:
        raise ConfigError("training needs at least two samples", key="per_class")

    params = dict(pair.online.named_parameters())
    opt = OptimizerState(cfg.lr, cfg.sgd_momentum, cfg.weight_decay)
    history = TrainHistory()
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs) if cfg.schedule == "cosine" else cfg.lr
        perm = shuffle_rng.permutation(len(data))
        sums = np.zeros(2)
        seen = 0
        epoch_conflict = None
        for idx in _batches(perm, cfg.batch_size):
            x = data.features[idx]
            v1, v2 = two_views(x, aug, aug_rng)
            ls, lf, grads, conflict = train_step(cfg, pair, v1, v2, data.instance_ids[idx], data.class_ids[idx])
            if not (math.isfinite(ls) and math.isfinite(lf)):
                exc = DivergenceError(
                    f"non-finite loss at epoch {epoch}, step {step}", epoch=epoch, last_good_epoch=epoch - 1
                )
                exc.history = history
                raise exc
            if conflict is not None:
                history.conflict_grads.append(conflict)
                epoch_conflict = conflict if epoch_conflict is None else max(epoch_conflict, conflict)
            try:
                sgd_step(opt, params, grads, lr)
            except NumericError as err:
                exc = DivergenceError(str(err), epoch=epoch, last_good_epoch=epoch - 1)
                exc.history = history
                raise exc from err
            if hook is not None:
                hook("after_optimizer", pair, {"epoch": epoch, "step": step})
            momentum_update(pair)
            if hook is not None:
                hook("after_momentum", pair, {"epoch": epoch, "step": step})
            sums += len(idx) * np.array([ls, lf])
            seen += len(idx)
            step += 1
        loss_self, loss_full = (sums / seen).tolist()
        history.records.append(
            MetricsRecord(
                epoch=epoch,
                loss_total=loss_self + loss_full,
                loss_self=loss_self,
                loss_full=loss_full,
                lr=lr,
                wall_ms=int(round(1000 * (time.perf_counter() - t0))),
                conflict_grad_max=epoch_conflict,
            )
        )
    return pair, history
