"""Adam training loop with a frozen-backbone partition, the experiment
harnesses (cross-manipulation leave-one-out, cross-dataset, ablation),
and the end-to-end gradient checking oracle.

The optimizer applies weight decay decoupled from the moment machinery:
p <- p - lr*wd*p before the bias-corrected Adam delta. Moments exist
only for trainable parameters, so frozen tensors are untouchable by
construction.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tape, Tensor, finite_diff_grad, gradient_relative_error
from .data import DatasetSpec, Quality, leave_one_out_protocols, make_split, \
    ManipulationFamily, generate_fake, generate_real
from .errors import ConfigError, ContractError, NumericError
from .lora import AdapterSet, LoraConfig, freeze_backbone, inject
from .losses import LabeledBatch, LossConfig, SclCounters, combined_loss, cross_entropy, scl
from .metrics import EvalReport, report_from_scores
from .vit import ModelState, ViTConfig, forward, init_model, save_checkpoint

ABLATION_VARIANTS = ("head_only", "lora", "lora_scl")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 36
    steps: int = 500
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    freeze_head: bool = False
    full_finetune_baseline: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be positive and weight_decay non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.adam_epsilon <= 0:
            raise ConfigError("adam_epsilon must be positive")
        if self.batch_size < 2 or self.steps < 1:
            raise ConfigError("batch_size must be >= 2 and steps >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


class AdamState:
    """First/second moment buffers for the trainable parameters only."""

    def __init__(self, params: list[Parameter]):
        self.m = {}
        self.v = {}
        self.t = 0
        for p in params:
            if not p.trainable:
                continue
            self.m[p.name] = np.zeros_like(p.tensor.data)
            self.v[p.name] = np.zeros_like(p.tensor.data)


def adam_step(params: list[Parameter], state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update over the trainable parameters."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for p in params:
        if not p.trainable:
            continue
        g = p.tensor.grad
        if g is None:
            raise ContractError(f"trainable parameter {p.name!r} has no gradient")
        data = p.tensor.data
        if cfg.weight_decay:
            data *= 1.0 - cfg.learning_rate * cfg.weight_decay
        m = state.m[p.name]
        v = state.v[p.name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        data -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_epsilon)
        if not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite parameter values after update of {p.name!r}")


def trainable_parameters(model: ModelState, adapters: AdapterSet | None) -> list[Parameter]:
    params = [p for _, p in model.named_parameters() if p.trainable]
    if adapters is not None:
        params.extend(adapters.trainable_parameters())
    return params


def zero_grads(params):
    for p in params:
        p.tensor.grad = None


def _stack_images(samples, dtype=np.float32) -> Tensor:
    return Tensor(np.stack([s.image.data for s in samples]).astype(dtype))


def _labels(samples):
    return np.array([s.label for s in samples], dtype=np.int64)


class StratifiedSampler:
    """Deterministic with-replacement batch sampler keeping at least one
    sample of each class per batch whenever the dataset has both."""

    def __init__(self, samples, batch_size: int, seed: int):
        labels = _labels(samples)
        self.real_pool = np.flatnonzero(labels == 1)
        self.fake_pool = np.flatnonzero(labels == 0)
        self.batch_size = batch_size
        self.rng = np.random.default_rng(np.random.SeedSequence((seed, 0xBA7C)))
        n = len(samples)
        if self.real_pool.size and self.fake_pool.size:
            n_real = int(round(batch_size * self.real_pool.size / n))
            self.n_real = min(max(n_real, 1), batch_size - 1)
        else:
            self.n_real = batch_size if self.real_pool.size else 0

    def next_batch(self):
        picks = []
        if self.n_real:
            picks.append(self.rng.choice(self.real_pool, size=self.n_real, replace=True))
        if self.n_real < self.batch_size:
            picks.append(self.rng.choice(self.fake_pool, size=self.batch_size - self.n_real,
                                         replace=True))
        idx = np.concatenate(picks)
        self.rng.shuffle(idx)
        return idx


@dataclass
class TrainLog:
    rows: list  # (step, loss_ce, loss_scl, loss, skipped_scl_count)
    counters: SclCounters

    HEADER = "step,loss_ce,loss_scl,loss,skipped_scl_count"

    def to_csv(self) -> str:
        lines = [self.HEADER]
        for step, ce, s, total, skipped in self.rows:
            lines.append(f"{step},{ce!r},{s!r},{total!r},{skipped}")
        return "\n".join(lines) + "\n"


class TrainingAborted(NumericError):
    def __init__(self, message, log: TrainLog):
        super().__init__(message)
        self.log = log


def train(model: ModelState, adapters: AdapterSet | None, samples, cfg: TrainConfig,
          out_dir=None) -> TrainLog:
    """Run cfg.steps stratified-batch steps; returns the per-step log.

    A non-finite loss aborts with the last finite step preserved in the
    attached log. With out_dir set, writes train_log.csv and a final
    checkpoint.ckpt next to each other.
    """
    if not samples:
        raise ContractError("train requires a non-empty dataset")
    params = trainable_parameters(model, adapters)
    if not params:
        raise ContractError("nothing to train: every parameter is frozen")
    state = AdamState(params)
    sampler = StratifiedSampler(samples, cfg.batch_size, cfg.seed)
    counters = SclCounters()
    log = TrainLog(rows=[], counters=counters)
    lam = cfg.loss.lam

    for step in range(cfg.steps):
        idx = sampler.next_batch()
        batch_samples = [samples[i] for i in idx]
        images = _stack_images(batch_samples, dtype=model.dtype)
        labels = _labels(batch_samples)
        zero_grads(params)
        try:
            with Tape() as tape:
                logit, feats = forward(model, images, adapters)
                preds = ag.sigmoid(ag.reshape(logit, (len(batch_samples),)))
                batch = LabeledBatch(feats, preds, labels)
                ce = cross_entropy(batch)
                if lam == 0:
                    scl_term = None
                    total = ce
                else:
                    scl_term = scl(batch, cfg.loss, counters)
                    total = ag.add(ce, ag.scale(scl_term, lam))
            tape.backward(total)
            adam_step(params, state, cfg)
        except NumericError as exc:
            raise TrainingAborted(
                f"non-finite loss at step {step}; last finite step "
                f"{log.rows[-1][0] if log.rows else 'none'}: {exc}",
                log,
            ) from exc
        log.rows.append((step, float(ce.item()),
                         float(scl_term.item()) if scl_term is not None else 0.0,
                         float(total.item()), counters.skipped))

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "train_log.csv"), "w", encoding="utf-8") as fh:
            fh.write(log.to_csv())
        save_checkpoint(model, os.path.join(out_dir, "checkpoint.ckpt"), adapters)
    return log


def evaluate(model: ModelState, adapters: AdapterSet | None, samples,
             batch_size: int = 64):
    """Sigmoid scores and labels over a dataset, in dataset order."""
    scores = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = _stack_images(chunk, dtype=model.dtype)
        logit, _ = forward(model, images, adapters)
        z = logit.data.reshape(-1).astype(np.float64)
        scores.append(1.0 / (1.0 + np.exp(-z)))
    return np.concatenate(scores) if scores else np.zeros(0), _labels(samples)


def evaluate_report(model, adapters, samples, tag: str = "") -> EvalReport:
    scores, labels = evaluate(model, adapters, samples)
    return report_from_scores(scores, labels, tag=tag)


# --- experiment harnesses ---------------------------------------------------


def fit_variant(model_cfg: ViTConfig, train_cfg: TrainConfig, train_set,
                variant: str = "lora_scl", out_dir=None):
    """Initialize, partition and train one model variant.

    head_only: frozen backbone, trainable head, no adapters, no center
    term. lora: adapters plus head, no center term. lora_scl: the full
    objective.
    """
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {ABLATION_VARIANTS}")
    model = init_model(model_cfg)
    if variant == "head_only":
        adapters = None
        if train_cfg.full_finetune_baseline:
            model.set_all_trainable(True)
        else:
            freeze_backbone(model, train_head=True)
    else:
        adapters = inject(model, train_cfg.lora, freeze_head=train_cfg.freeze_head)
    if variant != "lora_scl":
        train_cfg = replace(train_cfg, loss=replace(train_cfg.loss, lam=0.0))
    log = train(model, adapters, train_set, train_cfg, out_dir=out_dir)
    return model, adapters, log


def average_report(reports, tag: str = "average") -> EvalReport:
    return EvalReport(
        auc=float(np.mean([r.auc for r in reports])),
        acc=float(np.mean([r.acc for r in reports])),
        n_pos=sum(r.n_pos for r in reports),
        n_neg=sum(r.n_neg for r in reports),
        tag=tag,
    )


def reports_to_csv(reports, avg: EvalReport) -> str:
    lines = ["setting,auc,acc"]
    for r in list(reports) + [avg]:
        lines.append(f"{r.tag},{r.auc!r},{r.acc!r}")
    return "\n".join(lines) + "\n"


def cross_manipulation_protocol(model_cfg: ViTConfig, train_cfg: TrainConfig,
                                spec: DatasetSpec, quality: Quality,
                                variant: str = "lora_scl", out_path=None,
                                scorer=None):
    """Four leave-one-out settings; returns (reports, average).

    ``scorer``, when given, maps a test sample list to scores and
    bypasses training (used to verify the harness with oracle scores).
    """
    reports = []
    for protocol in leave_one_out_protocols(quality, spec.domain_id):
        train_set, test_set = make_split(protocol, spec)
        if scorer is None:
            model, adapters, _ = fit_variant(model_cfg, train_cfg, train_set, variant)
            scores, labels = evaluate(model, adapters, test_set)
        else:
            scores = np.asarray(scorer(test_set), dtype=np.float64)
            labels = _labels(test_set)
        reports.append(report_from_scores(scores, labels, tag=protocol.tag))
    avg = average_report(reports)
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(reports_to_csv(reports, avg))
    return reports, avg


def _domain_train_set(spec: DatasetSpec, family: ManipulationFamily):
    base = replace(spec, domain_id=0, quality=spec.quality)
    out = []
    for i in range(spec.n_real):
        s = generate_real(replace(base, quality=Quality.HQ), i)
        out.append(_maybe_degrade(s, base, len(out)))
    for j in range(spec.n_real):
        out.append(_maybe_degrade(generate_fake(base, family, j), base, len(out)))
    return out


def _domain_test_set(spec: DatasetSpec, family: ManipulationFamily, domain: int):
    base = replace(spec, domain_id=domain)
    n = spec.n_fake_per_family
    out = []
    for i in range(n):
        s = generate_real(replace(base, quality=Quality.HQ), i)
        out.append(_maybe_degrade(s, base, len(out)))
    for j in range(n):
        out.append(_maybe_degrade(generate_fake(base, family, j), base, len(out)))
    return out


def _maybe_degrade(sample, spec, index):
    from .data import degrade_quality

    if spec.quality is Quality.LQ and sample.quality is Quality.HQ:
        sample = degrade_quality(sample)
    sample.index = index
    return sample


def cross_dataset_protocol(model_cfg: ViTConfig, train_cfg: TrainConfig,
                           spec: DatasetSpec, n_domains: int = 4,
                           family: ManipulationFamily = ManipulationFamily.BLEND,
                           variant: str = "lora_scl", out_path=None):
    """Train on domain 0, evaluate the same manipulation on shifted
    domains 1..n_domains. Returns (reports, average)."""
    if n_domains < 1:
        raise ConfigError("n_domains must be >= 1")
    train_set = _domain_train_set(spec, family)
    model, adapters, _ = fit_variant(model_cfg, train_cfg, train_set, variant)
    reports = []
    for d in range(1, n_domains + 1):
        test_set = _domain_test_set(spec, family, d)
        scores, labels = evaluate(model, adapters, test_set)
        reports.append(report_from_scores(scores, labels, tag=f"domain_{d}"))
    avg = average_report(reports)
    if out_path is not None:
        header = ",".join(r.tag for r in reports) + ",average"
        row = ",".join(repr(r.auc) for r in reports) + f",{avg.auc!r}"
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(header + "\n" + row + "\n")
    return reports, avg


def ablation_run(model_cfg: ViTConfig, train_cfg: TrainConfig, spec: DatasetSpec,
                 out_path=None):
    """Three LQ cross-manipulation rows: head only, plus adapters, plus
    the center loss. Returns {variant: (reports, average)}."""
    results = {}
    for variant in ABLATION_VARIANTS:
        results[variant] = cross_manipulation_protocol(
            model_cfg, train_cfg, spec, Quality.LQ, variant=variant)
    if out_path is not None:
        lines = ["configuration,auc,acc"]
        for variant in ABLATION_VARIANTS:
            _, avg = results[variant]
            lines.append(f"{variant},{avg.auc!r},{avg.acc!r}")
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    return results


# --- gradient checking oracle ------------------------------------------------


GRADCHECK_CONFIG = ViTConfig(image_size=16, patch_size=8, channels=1, embed_dim=16,
                             depth=1, heads=2, mlp_ratio=2, head_hidden=8, seed=0)


def model_gradient_check(model: ModelState, adapters: AdapterSet | None,
                         images: Tensor, labels, loss_cfg: LossConfig,
                         h: float = 1e-5, names=None):
    """Relative error of reverse-mode vs central finite differences for
    the full objective, per trainable parameter.

    The batch-mean center is frozen at its unperturbed value on both
    sides, matching the stop-gradient semantics of the training loss.
    """
    if model.dtype != np.float64:
        raise ContractError("gradient checking runs in 64-bit mode")
    params = trainable_parameters(model, adapters)
    if names is not None:
        wanted = set(names)
        params = [p for p in params if p.name in wanted]

    def loss_value(center):
        logit, feats = forward(model, images, adapters)
        preds = ag.sigmoid(ag.reshape(logit, (images.shape[0],)))
        batch = LabeledBatch(feats, preds, labels)
        return combined_loss(batch, loss_cfg, center=center)

    with ag.no_tape():
        _, feats0 = forward(model, images, adapters)
    real_rows = feats0.data[np.asarray(labels) == 1]
    center0 = Tensor(real_rows.mean(axis=0)) if real_rows.size else None

    zero_grads(params)
    with Tape() as tape:
        total = loss_value(center0)
    tape.backward(total)
    analytic = {p.name: np.array(p.tensor.grad, copy=True) if p.tensor.grad is not None
                else np.zeros_like(p.tensor.data) for p in params}

    errors = {}
    for p in params:
        original = p.tensor

        def f(t, _p=p, _orig=original):
            _p.tensor = t
            try:
                return loss_value(center0)
            finally:
                _p.tensor = _orig

        numeric = finite_diff_grad(f, original, h=h)
        errors[p.name] = gradient_relative_error(Tensor(analytic[p.name]), numeric)
    return errors
