"""Two-phase orchestration: policy search, regulated task training, baselines, sweeps.

Every random decision is drawn from an :class:`RngStream` addressed by a
purpose tag, so runs that differ only in augmentation share their parameter
initialisation and batch order exactly. In particular, any path that ends up
applying only Identity reproduces the NOAUG trajectory bit for bit.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .backbone import Backbone, build_backbone, train_step
from .data import Dataset, epoch_batches, kfold, shuffled_batches, split_equal
from .info_region import RegionConfig, augment_batch, protection_mask
from .metrics import Predictions, accuracy, bias_confusion, class_recall, macro_recall, swise_metrics, SwiseMetrics
from .policy import (
    PolicyNetwork,
    SearchConfig,
    augmented_logits,
    difficult_loss,
    infer_policy,
    policy_loss,
    sample_train_policy,
    similar_loss,
)
from .regulation import RegulationState, blend_policy, noaug_distribution, regulate
from .transforms import RngStream, TransformId, TransformSettings, transform_set

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class RunConfig:
    seed: int = 0
    arch: str = "mini_fcn"
    epochs: int = 30
    search_epochs: int | None = None  # defaults to ``epochs``
    batch_size: int = 32
    lr: float = 1e-2
    weight_decay: float = 1e-2
    search: SearchConfig = field(default_factory=SearchConfig)
    alpha: float = 0.5
    region: RegionConfig = field(default_factory=RegionConfig)
    use_diff_loss: bool = True
    use_info_region: bool = True
    use_balance_sampler: bool = True
    use_regulation: bool = True
    enable_scaling_transform: bool = False
    folds: int = 3

    def validate(self) -> None:
        self.search.validate()
        self.region.validate()
        for name in ("epochs", "batch_size", "folds"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.search_epochs is not None and self.search_epochs < 1:
            raise ValueError("search_epochs must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0 or self.alpha < 0:
            raise ValueError("lr must be > 0; weight_decay and alpha >= 0")

    @property
    def transforms(self) -> tuple[TransformId, ...]:
        return transform_set(self.enable_scaling_transform)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        search = SearchConfig(**d.pop("search", {}) or {})
        region = RegionConfig(**d.pop("region", {}) or {})
        return cls(search=search, region=region, **d)


def _derive_seed(seed: int, *parts) -> int:
    return int(RngStream(seed, parts).generator().integers(2**31))


def _settings(ds: Dataset) -> TransformSettings:
    return TransformSettings(sample_rate_hz=ds.spec.sample_rate_hz)


def new_model(cfg: RunConfig, ds: Dataset, role: str) -> Backbone:
    return build_backbone(cfg.arch, ds.spec.channels, ds.spec.num_classes, _derive_seed(cfg.seed, "init", role))


def predict(model: Backbone, ds: Dataset) -> Predictions:
    return Predictions(ds.ids, ds.y, model.predict(ds.x))


# Augmenter: (model, x, y, batch_index_into_ds, epoch, batch_no) -> augmented x
Augmenter = Callable[[Backbone, np.ndarray, np.ndarray, np.ndarray, int, int], np.ndarray]


def fit(
    cfg: RunConfig,
    ds: Dataset,
    model: Backbone,
    role: str,
    augmenter: Augmenter | None = None,
    epochs: int | None = None,
    on_epoch_end: Callable[[int], None] | None = None,
) -> list[float]:
    """AdamW + warmup-cosine training loop; returns the mean loss of each epoch."""
    epochs = cfg.epochs if epochs is None else epochs
    opt = T.AdamW(model.params(), cfg.lr, cfg.weight_decay)
    per_epoch = -(-len(ds) // cfg.batch_size)
    total = epochs * per_epoch
    order = RngStream(cfg.seed, (role, "order"))
    step = 0
    history = []
    for epoch in range(epochs):
        gen = order.child(epoch).generator()
        losses = []
        for b, idx in enumerate(epoch_batches(ds.y, cfg.batch_size, gen, cfg.use_balance_sampler)):
            x, y = ds.x[idx], ds.y[idx]
            if augmenter is not None:
                x = augmenter(model, x, y, idx, epoch, b)
            loss = train_step(model, opt, x, y, T.warmup_cosine(step, total, cfg.lr))
            if not math.isfinite(loss):
                raise DivergenceError(f"{role}: loss {loss} at epoch {epoch}, batch {b} (lr {cfg.lr})")
            losses.append(loss)
            step += 1
        history.append(float(np.mean(losses)))
        log.debug("%s epoch %d loss %.4f", role, epoch, history[-1])
        if on_epoch_end is not None:
            on_epoch_end(epoch)
    return history


def _apply_ops(cfg, ds, model, x, y, idx, ops, rng: RngStream, protect: bool):
    rngs = [rng.child(k) for k in range(len(idx))]
    return augment_batch(model, x, y, ops, cfg.region, rngs, protect, _settings(ds))


# ---------------------------------------------------------------------------
# search phase
# ---------------------------------------------------------------------------


@dataclass
class SearchResult:
    model: Backbone
    net: PolicyNetwork
    regulation: RegulationState
    policy_losses: list[float]
    epoch_losses: list[float]
    search_val_losses: list[float]


def _policy_pass(cfg, model, net, opt_h, d_tr, d_sea, pass_no) -> float:
    ts = cfg.transforms
    settings = _settings(d_tr)
    base = RngStream(cfg.seed, ("search", "policy", pass_no))
    gen = base.child("order").generator()
    tr_batches = list(shuffled_batches(len(d_tr), cfg.batch_size, gen))
    sea_batches = list(shuffled_batches(len(d_sea), cfg.batch_size, gen))
    losses = []
    for b, (i_tr, i_sea) in enumerate(zip(tr_batches, sea_batches)):
        rng = base.child(b)

        def branch(part: Dataset, idx, tag):
            x, y = part.x[idx], part.y[idx]
            keep = None
            if cfg.use_info_region:
                keep = protection_mask(model, x, y, cfg.region, [rng.child(tag, "region", k) for k in range(len(idx))])
            lo, la = augmented_logits(
                model, net, x, y, rng.child(tag), ts, cfg.search,
                sample_ids=part.ids[idx], keep_mask=keep, settings=settings,
            )
            return lo, la, y

        with T.frozen(model.params()):
            lo, la, y = branch(d_sea, i_sea, "sea")
            sim = similar_loss(lo, la, y)
            diff = None
            if cfg.use_diff_loss:
                lo, la, y = branch(d_tr, i_tr, "tr")
                diff = difficult_loss(lo, la, y, cfg.search.detach_confidence_weight)
            loss = policy_loss(diff, sim, cfg.use_diff_loss)
            opt_h.zero_grad()
            T.backward(loss)
        opt_h.step()
        losses.append(loss.item())
    return float(np.mean(losses))


def search_phase(cfg: RunConfig, ds: Dataset) -> SearchResult:
    """Alternate task-model epochs on augmented D_tr with policy-update passes.

    One pass over paired D_tr/D_sea batches runs after every ``freq_sea``
    model epochs. The final model's class-wise recall on D_sea sets the
    per-class NoAug weights.
    """
    cfg.validate()
    ts = cfg.transforms
    i_tr, i_sea = split_equal(ds.y, cfg.seed)
    d_tr, d_sea = ds.subset(i_tr), ds.subset(i_sea)
    model = new_model(cfg, ds, "search")
    net = PolicyNetwork(ds.spec.num_classes, model.feature_dim, len(ts), seed=_derive_seed(cfg.seed, "init", "policy"))
    opt_h = T.AdamW(net.params(), cfg.search.policy_lr, weight_decay=0.0)
    aug_stream = RngStream(cfg.seed, ("search", "aug"))

    def augmenter(m, x, y, idx, epoch, b):
        with T.no_grad():
            p, mag = net(m.features(x), y)
        rng = aug_stream.child(epoch, b)
        ops = [
            sample_train_policy(p.data[k], mag.data[k], cfg.search, rng.child("draw", k).generator(), ts)
            for k in range(len(idx))
        ]
        return _apply_ops(cfg, d_tr, m, x, y, idx, ops, rng.child("apply"), cfg.use_info_region)

    policy_losses: list[float] = []
    val_losses: list[float] = []

    def on_epoch_end(epoch):
        with T.no_grad():
            val_losses.append(T.cross_entropy(model(d_sea.x), d_sea.y).item())
        if (epoch + 1) % cfg.search.freq_sea == 0:
            policy_losses.append(_policy_pass(cfg, model, net, opt_h, d_tr, d_sea, len(policy_losses)))
            log.info("policy pass %d: L_policy %.4f", len(policy_losses), policy_losses[-1])

    epochs = cfg.search_epochs or cfg.epochs
    history = fit(cfg, d_tr, model, "search", augmenter, epochs, on_epoch_end)
    recall = np.nan_to_num(class_recall(predict(model, d_sea), ds.spec.num_classes), nan=0.0)
    state = RegulationState.from_recall(recall, cfg.alpha)
    return SearchResult(model, net, state, policy_losses, history, val_losses)


# ---------------------------------------------------------------------------
# train phase and baselines
# ---------------------------------------------------------------------------


@dataclass
class PolicyTable:
    """Per-sample train-time policies, row-aligned with a dataset."""

    ids: np.ndarray
    labels: np.ndarray
    p: np.ndarray
    m: np.ndarray

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.ids, self.p, self.m):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]

    def mean_p_by_class(self, num_classes: int) -> np.ndarray:
        return np.stack([
            self.p[self.labels == c].mean(axis=0) if np.any(self.labels == c) else np.full(self.p.shape[1], np.nan)
            for c in range(num_classes)
        ])


def policy_table(
    cfg: RunConfig,
    ds: Dataset,
    search: SearchResult | None = None,
    noaug_q: float | None = None,
    identity: bool = False,
) -> PolicyTable:
    """Infer policies from the frozen search model and policy network.

    Per-class NoAug regulation applies when ``cfg.use_regulation``; a global
    ``noaug_q`` replaces it (sweep mode). ``identity`` freezes every policy to
    the one-hot Identity vector.
    """
    ts = cfg.transforms
    n, j = len(ds), len(ts)
    if identity:
        p = np.tile(noaug_distribution(ts), (n, 1))
        return PolicyTable(ds.ids, ds.y, p, np.zeros((n, j)))
    if search is None:
        raise ValueError("policy inference needs a search result")
    ps, ms = [], []
    with T.no_grad():
        for i in range(0, n, 256):
            f = search.model.features(ds.x[i : i + 256])
            pol = infer_policy(search.net, f, ds.y[i : i + 256])
            ps.append(pol.p)
            ms.append(pol.m)
    p, m = np.concatenate(ps), np.concatenate(ms)
    if noaug_q is not None:
        p = blend_policy(p, noaug_q, noaug_distribution(ts))
    elif cfg.use_regulation:
        p = regulate(p, ds.y, search.regulation, ts)
    return PolicyTable(ds.ids, ds.y, p, m)


@dataclass
class TrainResult:
    model: Backbone
    epoch_losses: list[float]
    table: PolicyTable | None = None


def train_phase(cfg: RunConfig, ds: Dataset, table: PolicyTable) -> TrainResult:
    """Train a fresh task model on all of ``ds`` with per-sample sampled policies."""
    cfg.validate()
    ts = cfg.transforms
    if len(table.ids) != len(ds) or not np.array_equal(table.ids, ds.ids):
        raise ValueError("policy table rows must align with the dataset")
    aug_stream = RngStream(cfg.seed, ("task", "aug"))

    def augmenter(m, x, y, idx, epoch, b):
        rng = aug_stream.child(epoch, b)
        ops = [
            sample_train_policy(table.p[i], table.m[i], cfg.search, rng.child("draw", k).generator(), ts)
            for k, i in enumerate(idx)
        ]
        return _apply_ops(cfg, ds, m, x, y, idx, ops, rng.child("apply"), cfg.use_info_region)

    model = new_model(cfg, ds, "task")
    return TrainResult(model, fit(cfg, ds, model, "task", augmenter), table)


def run_baseline_noaug(cfg: RunConfig, ds: Dataset) -> TrainResult:
    cfg.validate()
    model = new_model(cfg, ds, "task")
    return TrainResult(model, fit(cfg, ds, model, "task"))


def run_baseline_uniform(
    cfg: RunConfig,
    ds: Dataset,
    transforms: Sequence[TransformId] | None = None,
    zero_magnitude: bool = False,
) -> TrainResult:
    """Uniform transform choice with m ~ U(0, 1) per draw, no protection."""
    cfg.validate()
    ts = tuple(transforms or cfg.transforms)
    aug_stream = RngStream(cfg.seed, ("task", "uniform"))

    def augmenter(m, x, y, idx, epoch, b):
        rng = aug_stream.child(epoch, b)
        ops = []
        for k in range(len(idx)):
            gen = rng.child("draw", k).generator()
            ops.append([
                (ts[int(gen.integers(len(ts)))], 0.0 if zero_magnitude else float(gen.uniform()))
                for _ in range(cfg.search.n_ops)
            ])
        return _apply_ops(cfg, ds, m, x, y, idx, ops, rng.child("apply"), False)

    model = new_model(cfg, ds, "task")
    return TrainResult(model, fit(cfg, ds, model, "task", augmenter))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    method: str
    fold: int
    config: dict
    epoch_losses: list[float]
    predictions: Predictions
    num_classes: int
    noaug: Predictions | None = None
    policy_losses: list[float] = field(default_factory=list)
    w_noaug: np.ndarray | None = None
    search_recall: np.ndarray | None = None
    policy_digest: str = ""
    mean_policy: np.ndarray | None = None

    @property
    def accuracy(self) -> float:
        return accuracy(self.predictions)

    @property
    def macro_recall(self) -> float:
        return macro_recall(self.predictions, self.num_classes)

    @property
    def class_recall(self) -> np.ndarray:
        return class_recall(self.predictions, self.num_classes)

    @property
    def swise(self) -> SwiseMetrics | None:
        if self.noaug is None:
            return None
        return swise_metrics(bias_confusion(self.noaug, self.predictions, self.num_classes))


def make_report(method, fold, cfg, result: TrainResult, test: Dataset, noaug: Predictions | None,
                search: SearchResult | None = None) -> RunReport:
    rep = RunReport(method, fold, cfg.to_dict(), result.epoch_losses, predict(result.model, test),
                    test.spec.num_classes, noaug)
    if search is not None:
        rep.policy_losses = list(search.policy_losses)
        rep.search_recall = search.regulation.class_recall
        if cfg.use_regulation:
            rep.w_noaug = search.regulation.w_noaug
    if result.table is not None:
        rep.policy_digest = result.table.digest()
        rep.mean_policy = result.table.mean_p_by_class(test.spec.num_classes)
    return rep


def fold_split(cfg: RunConfig, ds: Dataset, fold: int) -> tuple[Dataset, Dataset]:
    folds = kfold(ds.y, cfg.folds, cfg.seed)
    if not 0 <= fold < cfg.folds:
        raise ValueError(f"fold {fold} outside [0, {cfg.folds})")
    test = folds[fold]
    train = np.setdiff1d(np.arange(len(ds)), test)
    return ds.subset(train), ds.subset(test)


def run_fold(
    cfg: RunConfig,
    ds: Dataset,
    fold: int = 0,
    methods: Sequence[str] = ("noaug", "uniform", "caap"),
    variants: dict[str, RunConfig] | None = None,
) -> list[RunReport]:
    """NOAUG first, then the requested methods, all scored against the NOAUG run.

    ``variants`` adds extra CAAP runs (e.g. ablations) under their own names.
    """
    train, test = fold_split(cfg, ds, fold)
    base = run_baseline_noaug(cfg, train)
    noaug_preds = predict(base.model, test)
    reports = [make_report("noaug", fold, cfg, base, test, noaug_preds)]
    jobs = [(m, cfg) for m in methods if m != "noaug"] + list((variants or {}).items())
    for name, c in jobs:
        kind = "uniform" if name == "uniform" else "caap"
        if kind == "uniform":
            reports.append(make_report(name, fold, c, run_baseline_uniform(c, train), test, noaug_preds))
            continue
        search = search_phase(c, train)
        result = train_phase(c, train, policy_table(c, train, search))
        reports.append(make_report(name, fold, c, result, test, noaug_preds, search))
    return reports


def run_experiment(cfg: RunConfig, ds: Dataset, folds: Sequence[int] | None = None, **kw) -> list[RunReport]:
    folds = range(cfg.folds) if folds is None else folds
    return [r for f in folds for r in run_fold(cfg, ds, f, **kw)]


# ---------------------------------------------------------------------------
# NoAug-percentage sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepPoint:
    q: float
    report: RunReport


def sweep_noaug(
    cfg: RunConfig,
    train: Dataset,
    test: Dataset,
    search: SearchResult,
    percentages: Sequence[float],
    noaug: Predictions | None = None,
    fold: int = 0,
) -> list[SweepPoint]:
    """Train once per global NoAug percentage q (in %), scored against NOAUG."""
    if noaug is None:
        noaug = predict(run_baseline_noaug(cfg, train).model, test)
    points = []
    for q in percentages:
        if not 0 <= q <= 100:
            raise ValueError(f"NoAug percentage {q} outside [0, 100]")
        result = train_phase(cfg, train, policy_table(cfg, train, search, noaug_q=q / 100.0))
        rep = make_report(f"q{q:g}", fold, cfg, result, test, noaug, search)
        rep.w_noaug = None
        points.append(SweepPoint(float(q), rep))
    return points


def sweep_argmax(points: Sequence[SweepPoint]) -> tuple[float, float]:
    """(q maximising accuracy, q maximising macro Swise gain); first q wins ties."""
    acc = [p.report.accuracy for p in points]
    gain = [p.report.swise.macro_gain for p in points]
    return points[int(np.argmax(acc))].q, points[int(np.argmax(gain))].q


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    """Copy of ``cfg`` with top-level or ``search.``/``region.`` prefixed fields replaced."""
    top, search, region = {}, {}, {}
    for k, v in kw.items():
        if k.startswith("search."):
            search[k[7:]] = v
        elif k.startswith("region."):
            region[k[7:]] = v
        else:
            top[k] = v
    return replace(cfg, search=replace(cfg.search, **search), region=replace(cfg.region, **region), **top)
