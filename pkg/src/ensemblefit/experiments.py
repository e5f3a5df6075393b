"""The three experiments (augmented CNN, per-backbone transfer, ensemble) and the trial helpers behind them."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ensemble as ens
from . import monitor
from .config import RunConfig, write_resolved
from .data import (
    AugmentPipeline,
    Dataset,
    SyntheticConfig,
    generate_source_task,
    generate_synthetic,
    group_labels,
    ingest,
    split,
    to_arrays,
    to_binary,
)
from .tensor_net import LayeredModel, SgdSchedule, build_layers, load_model, save_model
from .transfer import (
    FineTuneConfig,
    PretrainedModel,
    TrainingHistory,
    evaluate,
    finetune,
    from_scratch,
    graft_head,
    predict,
    pretrain_backbone,
)

log = logging.getLogger(__name__)

# Values used where the config leaves a field as None.
PRESETS = {
    "exp1": {"epochs": 50, "decay": 1.0, "ratios": (0.8, 0.1, 0.1), "augment": True, "crack_depth": (0.15, 0.3),
             "fill_mode": "reflect", "interpolation": "nearest"},
    "exp2": {"epochs": 10, "decay": 1.0, "ratios": (0.6, 0.2, 0.2), "augment": False, "crack_depth": (0.25, 0.4),
             "fill_mode": "constant", "interpolation": "bilinear"},
    "exp3": {"epochs": 20, "decay": 0.9, "ratios": (0.6, 0.2, 0.2), "augment": False, "crack_depth": (0.25, 0.4),
             "fill_mode": "constant", "interpolation": "bilinear"},
}

# Plain CNN for the augmentation experiment: enough capacity to overfit 200 images.
# The 4x4 pool keeps the hidden dense layer's fan-in at 256; with 1024 inputs Adam
# steps push every hidden unit negative within a few epochs.
CNN = [
    {"conv": 8}, {"relu": 1}, {"pool": 2},
    {"conv": 16}, {"relu": 1}, {"pool": 4},
    {"flatten": 1}, {"dense": 32}, {"relu": 1}, {"dense": 1}, {"sigmoid": 1},
]

# Acceptance presets.
OVERFIT_PRESET = SyntheticConfig(n_normal=200, n_defect=200, crack_depth=(0.15, 0.3))
OVERFIT_RATIOS = (0.5, 0.25, 0.25)  # 200 train images
OVERFIT_AUGMENT = {"fill_mode": "reflect", "interpolation": "nearest"}
STANDARD_PRESET = SyntheticConfig(n_normal=500, n_defect=500)
CONFUSABLE_PRESET = SyntheticConfig(n_normal=500, n_defect=500, confusable_fraction=0.1)
SOURCE_N_PER_CLASS = 400
PRETRAIN_EPOCHS = 15


def derive_seed(*key: int) -> int:
    """Independent 32-bit seed for a (run seed, purpose, index...) key."""
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


# Purpose tags for derive_seed.
DATA, SPLIT, SOURCE, PRETRAIN, MEMBER, AUGMENT = range(1, 7)


def resolve(cfg: RunConfig, experiment: str) -> RunConfig:
    """Fill preset-dependent ``None`` fields for ``experiment``."""
    p = PRESETS[experiment]
    data = cfg.data
    syn = data.synthetic
    if syn.crack_depth is None:
        syn = dataclasses.replace(syn, crack_depth=p["crack_depth"])
    data = dataclasses.replace(data, synthetic=syn, ratios=data.ratios or p["ratios"])
    aug = cfg.augment
    aug = dataclasses.replace(
        aug,
        enabled=p["augment"] if aug.enabled is None else aug.enabled,
        fill_mode=aug.fill_mode or p["fill_mode"],
        interpolation=aug.interpolation or p["interpolation"],
    )
    train = cfg.train
    train = dataclasses.replace(train, epochs=train.epochs or p["epochs"],
                                decay=p["decay"] if train.decay is None else train.decay)
    cons = cfg.consistency
    if cons.tail is None:
        cons = dataclasses.replace(cons, tail=monitor.default_tail(train.epochs))
    return dataclasses.replace(cfg, data=data, augment=aug, train=train, consistency=cons)


# -- data --------------------------------------------------------------------------------


def target_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.source == "directory":
        ds = ingest(d.path, d.defect_labels)
        if d.label_rules:
            ds = group_labels(ds, d.label_rules)
        return to_binary(ds, d.defect_labels)
    params = dataclasses.asdict(d.synthetic)
    return generate_synthetic(SyntheticConfig(image_size=tuple(d.image_size), seed=derive_seed(cfg.seed, DATA),
                                              **params))


def split_arrays(ds: Dataset, ratios, seed: int, image_size):
    parts = split(ds, ratios, seed=seed)
    return parts, [to_arrays(p, tuple(image_size)) for p in parts]


def fine_tune_config(cfg: RunConfig, seed: int, freeze=True) -> FineTuneConfig:
    t = cfg.train
    return FineTuneConfig(t.batch_size, t.epochs, SgdSchedule(t.lr, t.decay),
                          "backbone" if freeze and t.freeze == "backbone" else None, t.optimizer, seed)


def augment_pipeline(cfg: RunConfig, seed: int) -> AugmentPipeline | None:
    a = cfg.augment
    if not a.enabled:
        return None
    return AugmentPipeline(tuple(cfg.data.image_size), flip_h=a.flip_h, flip_v=a.flip_v,
                           rotation_factor=a.rotation_factor, zoom_factor=a.zoom_factor,
                           fill_mode=a.fill_mode, interpolation=a.interpolation, seed=seed)


# -- pretraining -------------------------------------------------------------------------------


def pretrain_backbones(names, seed: int, image_size=(32, 32), n_per_class: int = SOURCE_N_PER_CLASS,
                       epochs: int = PRETRAIN_EPOCHS, lr: float = 0.003, optimizer: str = "adam",
                       batch_size: int = 32) -> dict[str, PretrainedModel]:
    """Pretrain each named backbone on the synthetic source task (all layers trainable, constant LR)."""
    source = generate_source_task(n_per_class, tuple(image_size), seed=derive_seed(seed, SOURCE))
    X, y = to_arrays(source, tuple(image_size))
    out = {}
    for i, name in enumerate(names):
        config = FineTuneConfig(batch_size, epochs, SgdSchedule(lr, 1.0), None, optimizer, derive_seed(seed, PRETRAIN, i))
        out[name] = pretrain_backbone((X, y), name, config, source_task_id=f"synthetic-scratch-vs-plain/{seed}")
        log.info("pretrained %s: final train acc %.3f", name, out[name].final_train_acc)
    return out


def save_pretrained(pretrained: dict[str, PretrainedModel], out_dir: Path) -> None:
    for name, p in pretrained.items():
        save_model(p.model, out_dir / "pretrained" / f"{name}.json")


def load_pretrained(names, reuse_dir: Path) -> dict[str, PretrainedModel]:
    return {name: PretrainedModel(load_model(Path(reuse_dir) / "pretrained" / f"{name}.json"), "reused", 0, float("nan"))
            for name in names}


# -- history helpers ------------------------------------------------------------------------


def first_epoch_below(history: TrainingHistory, level: float = 0.3) -> int | None:
    return next((e for e, v in enumerate(history.val_loss) if v < level), None)


def min_loss_history(histories: list[TrainingHistory]) -> tuple[TrainingHistory, list[int]]:
    """Per-epoch history of a min-loss ensemble over members trained side by side.

    At each epoch the member with the lowest val loss (lowest index on ties) is selected
    and its row is the ensemble's row.
    """
    out, chosen = TrainingHistory(), []
    for e in range(min(len(h) for h in histories)):
        losses = [h.val_loss[e] for h in histories]
        i = int(np.argmin(losses))
        h = histories[i]
        out.append(h.train_loss[e], h.val_loss[e], h.train_acc[e], h.val_acc[e])
        chosen.append(i)
    return out, chosen


# -- trials (one seed each; used by acceptance tests and scripts) ---------------------------------


@dataclass(frozen=True)
class AugmentTrial:
    raw_val_acc: float
    aug_val_acc: float


def augmentation_trial(seed: int, epochs: int = 50, synthetic: SyntheticConfig = OVERFIT_PRESET,
                       augment: dict | None = None) -> AugmentTrial:
    """Train the plain CNN with and without augmentation on the overfit-prone preset."""
    ds = generate_synthetic(dataclasses.replace(synthetic, seed=derive_seed(seed, DATA)))
    _, (train, val, _) = split_arrays(ds, OVERFIT_RATIOS, derive_seed(seed, SPLIT), synthetic.image_size)
    shape = train[0].shape[1:]
    accs = []
    for pipe in (None, AugmentPipeline(tuple(synthetic.image_size), seed=derive_seed(seed, AUGMENT),
                                       **(OVERFIT_AUGMENT if augment is None else augment))):
        model = LayeredModel(build_layers(CNN, shape, np.random.default_rng(derive_seed(seed, MEMBER))), shape)
        config = FineTuneConfig(32, epochs, SgdSchedule(0.003, 1.0), None, "adam", derive_seed(seed, MEMBER))
        _, history = finetune(model, train, val, config, augment=pipe)
        accs.append(history.val_acc[-1])
    return AugmentTrial(*accs)


@dataclass(frozen=True)
class TransferTrial:
    pretrained_epoch: int | None
    scratch_epoch: int | None
    pretrained_history: TrainingHistory
    scratch_history: TrainingHistory

    @property
    def passed(self) -> bool:
        """Pretrained reaches the loss level, and no later than scratch (which may never reach it)."""
        if self.pretrained_epoch is None:
            return False
        return self.scratch_epoch is None or self.pretrained_epoch <= self.scratch_epoch


def transfer_trial(seed: int, pretrained: PretrainedModel, backbone: str = "medium", epochs: int = 10,
                   synthetic: SyntheticConfig = STANDARD_PRESET, level: float = 0.3) -> TransferTrial:
    ds = generate_synthetic(dataclasses.replace(synthetic, seed=derive_seed(seed, DATA)))
    _, (train, val, _) = split_arrays(ds, (0.6, 0.2, 0.2), derive_seed(seed, SPLIT), synthetic.image_size)
    shape = train[0].shape[1:]
    member_seed = derive_seed(seed, MEMBER)
    schedule = SgdSchedule(0.003, 1.0)
    grafted = graft_head(pretrained, shape, seed=member_seed)
    _, h_t = finetune(grafted, train, val, FineTuneConfig(32, epochs, schedule, "backbone", "adam", member_seed))
    _, h_s = finetune(from_scratch(backbone, shape, seed=member_seed), train, val,
                      FineTuneConfig(32, epochs, schedule, None, "adam", member_seed))
    return TransferTrial(first_epoch_below(h_t, level), first_epoch_below(h_s, level), h_t, h_s)


@dataclass(frozen=True)
class EnsembleTrial:
    ensemble_test_acc: float
    member_test_accs: tuple[float, ...]
    ensemble_epsilon: float
    member_epsilons: tuple[float, ...]
    selected: int

    @property
    def accuracy_ok(self) -> bool:
        return self.ensemble_test_acc >= max(self.member_test_accs) - 0.01

    @property
    def stability_ok(self) -> bool:
        return self.ensemble_epsilon <= float(np.median(self.member_epsilons))


def train_members(pretrained: dict[str, PretrainedModel], names, train, val, config: FineTuneConfig,
                  seed: int) -> tuple[list[LayeredModel], list[TrainingHistory]]:
    models, histories = [], []
    shape = train[0].shape[1:]
    for i, name in enumerate(names):
        member_seed = derive_seed(seed, MEMBER, i)
        grafted = graft_head(pretrained[name], shape, seed=member_seed)
        model, history = finetune(grafted, train, val, dataclasses.replace(config, seed=member_seed))
        models.append(model)
        histories.append(history)
    return models, histories


def ensemble_trial(seed: int, pretrained: dict[str, PretrainedModel], epochs: int = 20,
                   synthetic: SyntheticConfig = STANDARD_PRESET) -> EnsembleTrial:
    names = list(pretrained)
    ds = generate_synthetic(dataclasses.replace(synthetic, seed=derive_seed(seed, DATA)))
    _, (train, val, test) = split_arrays(ds, (0.6, 0.2, 0.2), derive_seed(seed, SPLIT), synthetic.image_size)
    config = FineTuneConfig(32, epochs, SgdSchedule(0.003, 0.9), "backbone", "adam", seed)
    models, histories = train_members(pretrained, names, train, val, config, seed)
    e = ens.evaluate_members(ens.build_ensemble(models, train[0].shape[1:], len(names), names), *val)
    selected = ens.select_min_loss(e)
    test_acc = float(np.mean((ens.predict(e, test[0]) >= 0.5) == (test[1][:, 0] >= 0.5)))
    member_accs = tuple(evaluate(m, *test)[1] for m in models)
    tail = monitor.default_tail(epochs)
    ens_hist, _ = min_loss_history(histories)
    return EnsembleTrial(test_acc, member_accs, monitor.empirical_epsilon(ens_hist, tail),
                         tuple(monitor.empirical_epsilon(h, tail) for h in histories), selected)


@dataclass(frozen=True)
class ConfusableTrial:
    correlation_diff: float
    confusable_errors: int
    confusable_total: int
    nonconfusable_acc: float

    @property
    def passed(self) -> bool:
        return self.correlation_diff < 0.05 and self.confusable_errors >= 1 and self.nonconfusable_acc >= 0.9


def confusable_trial(seed: int, pretrained: PretrainedModel, epochs: int = 10,
                     synthetic: SyntheticConfig = CONFUSABLE_PRESET) -> ConfusableTrial:
    """Fine-tune one member on the confusable preset and inspect its confusable items."""
    ds = generate_synthetic(dataclasses.replace(synthetic, seed=derive_seed(seed, DATA)))
    X, y = to_arrays(ds, synthetic.image_size)
    shape = X.shape[1:]
    (train_ds, val_ds, _), (train, val, _) = split_arrays(ds, (0.6, 0.2, 0.2), derive_seed(seed, SPLIT),
                                                          synthetic.image_size)
    member_seed = derive_seed(seed, MEMBER)
    grafted = graft_head(pretrained, shape, seed=member_seed)
    model, _ = finetune(grafted, train, val, FineTuneConfig(32, epochs, SgdSchedule(0.003, 1.0), "backbone",
                                                            "adam", member_seed))
    # held-out items only: everything not used for training
    train_ids = {id(it) for it in train_ds.items}
    held = [i for i, it in enumerate(ds.items) if id(it) not in train_ids]
    conf = np.array([ds.items[i].confusable for i in held])
    correct = (predict(model, X[held])[:, 0] >= 0.5) == (y[held, 0] >= 0.5)
    defect = next(i for i, it in enumerate(ds.items) if it.confusable and it.label == 1)
    partner = ds.items[defect].pair
    diff = np.abs(monitor.feature_correlation(model, X[defect]).matrix
                  - monitor.feature_correlation(model, X[partner]).matrix).max()
    return ConfusableTrial(float(diff), int(np.sum(~correct[conf])), int(conf.sum()),
                           float(np.mean(correct[~conf])))


# -- experiments ---------------------------------------------------------------------------------


def _evaluate_and_report(cfg: RunConfig, probs: np.ndarray, y: np.ndarray, history: TrainingHistory,
                         out_dir: Path, **extra) -> dict:
    threshold = cfg.ensemble.threshold
    metrics = monitor.compute_metrics(probs, y[:, 0], threshold)
    criterion = monitor.ConsistencyCriterion(cfg.consistency.epsilon, cfg.consistency.window)
    consistency = monitor.consistency_report(history, criterion, cfg.consistency.tail)
    monitor.export_curves(history, out_dir / "history.csv")
    doc = monitor.build_report(metrics, threshold, consistency, **extra)
    monitor.write_report(doc, out_dir / "report.json")
    return doc


def _confidence_and_heatmap(model_or_ensemble, model: LayeredModel, test_ds: Dataset, X, y, out_dir: Path,
                            threshold: float) -> None:
    ids = [Path(it.path).name if it.path else f"test{i:05d}" for i, it in enumerate(test_ds.items)]
    rows = monitor.batch_confidence(model_or_ensemble, X, y[:, 0], ids, threshold)
    monitor.write_confidence_csv(rows, out_dir / "confidence.csv")
    corr = monitor.feature_correlation(model, X[0])
    monitor.render_heatmap(corr.matrix, out_dir / "heatmap.pgm")


def run_exp1(cfg: RunConfig) -> dict:
    """Plain CNN trained with and without the augmentation pipeline."""
    cfg = resolve(cfg, "exp1")
    out = Path(cfg.out_dir)
    write_resolved(cfg, out)
    ds = target_dataset(cfg)
    (_, _, test_ds), (train, val, test) = split_arrays(ds, cfg.data.ratios, derive_seed(cfg.seed, SPLIT),
                                                       cfg.data.image_size)
    shape = train[0].shape[1:]
    results = {}
    for tag, pipe in (("raw", None), ("augmented", augment_pipeline(cfg, derive_seed(cfg.seed, AUGMENT)))):
        model = LayeredModel(build_layers(CNN, shape, np.random.default_rng(derive_seed(cfg.seed, MEMBER))), shape)
        model, history = finetune(model, train, val, fine_tune_config(cfg, derive_seed(cfg.seed, MEMBER), freeze=False),
                                  augment=pipe)
        save_model(model, out / "models" / f"cnn_{tag}.json")
        results[tag] = (model, history)
    model, history = results["augmented"] if cfg.augment.enabled else results["raw"]
    raw_model, raw_history = results["raw"]
    monitor.export_curves(raw_history, out / "history_raw.csv")
    raw_loss, raw_acc = evaluate(raw_model, *test)
    doc = _evaluate_and_report(cfg, predict(model, test[0])[:, 0], test[1], history, out,
                               experiment="exp1", augmented=bool(cfg.augment.enabled),
                               baseline={"test_accuracy": raw_acc, "test_loss": raw_loss,
                                         "final_val_accuracy": raw_history.val_acc[-1]},
                               final_val_accuracy=history.val_acc[-1])
    _confidence_and_heatmap(model, model, test_ds, *test, out, cfg.ensemble.threshold)
    return doc


def _pretrained_for(cfg: RunConfig, names, out: Path, reuse: Path | None) -> dict[str, PretrainedModel]:
    if reuse is not None:
        pretrained = load_pretrained(names, reuse)
    else:
        pretrained = pretrain_backbones(names, cfg.seed, cfg.data.image_size, cfg.data.source_n_per_class,
                                        cfg.train.pretrain_epochs, cfg.train.lr, cfg.train.optimizer,
                                        cfg.train.batch_size)
    save_pretrained(pretrained, out)
    return pretrained


def run_exp2(cfg: RunConfig, reuse: Path | None = None) -> dict:
    """Fine-tune each pretrained backbone with its transferred layers frozen."""
    cfg = resolve(cfg, "exp2")
    out = Path(cfg.out_dir)
    write_resolved(cfg, out)
    names = list(cfg.train.backbones)
    pretrained = _pretrained_for(cfg, names, out, reuse)
    ds = target_dataset(cfg)
    (_, _, test_ds), (train, val, test) = split_arrays(ds, cfg.data.ratios, derive_seed(cfg.seed, SPLIT),
                                                       cfg.data.image_size)
    models, histories = train_members(pretrained, names, train, val, fine_tune_config(cfg, cfg.seed), cfg.seed)
    members = {}
    for name, model, history in zip(names, models, histories):
        save_model(model, out / "models" / f"{name}.json")
        monitor.export_curves(history, out / "members" / name / "history.csv")
        loss, acc = evaluate(model, *test)
        best = int(np.argmin(history.val_loss))
        members[name] = {"test_accuracy": acc, "test_loss": loss, "min_val_loss": history.val_loss[best],
                         "min_val_loss_epoch": best, "first_epoch_below_0.3": first_epoch_below(history)}
    best = names[int(np.argmin([min(h.val_loss) for h in histories]))]
    model = models[names.index(best)]
    doc = _evaluate_and_report(cfg, predict(model, test[0])[:, 0], test[1], histories[names.index(best)], out,
                               experiment="exp2", reported_backbone=best, members=members)
    _confidence_and_heatmap(model, model, test_ds, *test, out, cfg.ensemble.threshold)
    return doc


def run_exp3(cfg: RunConfig, reuse: Path | None = None) -> dict:
    """Ensemble of the fine-tuned backbones under the configured combination mode."""
    cfg = resolve(cfg, "exp3")
    out = Path(cfg.out_dir)
    write_resolved(cfg, out)
    names = list(cfg.train.backbones)
    pretrained = _pretrained_for(cfg, names, out, reuse)
    ds = target_dataset(cfg)
    (_, _, test_ds), (train, val, test) = split_arrays(ds, cfg.data.ratios, derive_seed(cfg.seed, SPLIT),
                                                       cfg.data.image_size)
    models, histories = train_members(pretrained, names, train, val, fine_tune_config(cfg, cfg.seed), cfg.seed)
    e = ens.build_ensemble(models, train[0].shape[1:], cfg.ensemble.n, names,
                           threshold=cfg.ensemble.threshold, combine=cfg.ensemble.combine)
    e = ens.evaluate_members(e, *val)
    if cfg.ensemble.mode == ens.RECIPROCAL:
        e = ens.apply_reciprocal_weights(e)
    elif cfg.ensemble.mode == ens.CALIBRATED:
        e = ens.calibrate_weights(e, *val, lam=cfg.ensemble.lam, grid_step=cfg.ensemble.grid_step)
    ens.save_ensemble(e, out)
    admitted = [m.model_id for m in e.members]
    ens_hist, chosen = min_loss_history([histories[names.index(i)] for i in admitted])
    members = {}
    for name, history in zip(names, histories):
        monitor.export_curves(history, out / "members" / name / "history.csv")
        members[name] = {"test_accuracy": evaluate(models[names.index(name)], *test)[1],
                         "empirical_epsilon": monitor.empirical_epsilon(history, cfg.consistency.tail),
                         "min_val_loss": min(history.val_loss)}
    probs = ens.predict(e, test[0])
    doc = _evaluate_and_report(cfg, probs, test[1], ens_hist, out, experiment="exp3", mode=e.mode,
                               selected=admitted[ens.select_min_loss(e)] if e.mode == ens.MIN_LOSS else None,
                               weights=None if e.weights is None else [float(w) for w in e.weights],
                               per_epoch_selection=[admitted[i] for i in chosen],
                               rejected=[list(r) for r in e.rejected], members=members)
    first = e.members[ens.select_min_loss(e)].model
    _confidence_and_heatmap(e, first, test_ds, *test, out, cfg.ensemble.threshold)
    return doc


EXPERIMENTS = {"exp1": run_exp1, "exp2": run_exp2, "exp3": run_exp3}
