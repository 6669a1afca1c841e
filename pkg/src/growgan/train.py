"""Alternating generator/discriminator training with per-epoch label
inference and the staged self-growing schedule.

Each iteration generates a batch of images, updates the discriminator on the
combined semi-supervised loss with the generator frozen (fakes detached),
then updates the generator on the feature matching loss with the
discriminator's optimizer untouched. After every epoch the discriminator
re-scores the unlabeled pool and samples whose top softmax confidence
exceeds the threshold move into the latent-labeled pool that feeds the next
epoch's labeled term. Between stages the pair grows in place and batch-norm
statistics of the new blocks are calibrated on training data.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import data as D
from . import growth as GR
from . import layers as L
from . import netspec as NS
from .losses import (
    confidences,
    discriminator_loss,
    generator_loss,
    labeled_cross_entropy,
    real_class_logits,
)
from .mmd import Kernel, mmd2_sample
from .tensor import Tensor

log = logging.getLogger("growgan.train")

METRICS_HEADER = "stage,epoch,iter,loss_d,loss_g,mmd2,w_t,n_labeled,n_latent,n_unlabeled,test_acc"
METRICS_FIELDS = METRICS_HEADER.split(",")


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; carries a diagnostic snapshot."""

    def __init__(self, message, snapshot):
        super().__init__(f"{message}: {snapshot}")
        self.snapshot = snapshot


class MissingGradientError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    epochs_per_stage: int = 20
    threshold: float = 0.98
    metric: str = "mmd"
    route: tuple = ("baby",)
    seed: int = 0
    scale: float = NS.DESK_SCALE
    image: int = NS.DESK_IMAGE
    latent: str = "uniform"
    latent_dim: int = 100
    labels_per_class: int = 10
    test_per_class: int = 50
    validation_per_class: int = 0
    per_class_cap: int = 0  # 0 = unlimited
    dtype: str = "f64"
    stage_epochs: tuple = ()  # per-stage override of epochs_per_stage

    def __post_init__(self):
        self.route = tuple(self.route)
        self.stage_epochs = tuple(self.stage_epochs)
        if self.stage_epochs and len(self.stage_epochs) != len(self.route):
            raise ValueError("stage_epochs must match the route length")
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError("threshold must lie in (0, 1]")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")
        if self.metric not in ("mmd", "l1"):
            raise ValueError(f"unknown feature matching metric {self.metric!r}")
        if self.dtype not in ("f64", "f32"):
            raise ValueError("dtype must be 'f64' or 'f32'")
        if not self.route:
            raise ValueError("route is empty")
        order = [NS.STAGES.index(s) for s in self.route]
        if order != sorted(set(order)) or len(order) != len(set(order)):
            raise ValueError(f"route must be an ordered stage subsequence, got {self.route}")

    def epochs_for_stage(self, route_pos):
        return self.stage_epochs[route_pos] if self.stage_epochs else self.epochs_per_stage

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


@dataclass
class Pools:
    """Disjoint index pools over one dataset."""

    labeled: list
    unlabeled: list
    latent: list  # (index, inferred label, confidence)
    test: list
    validation: list = field(default_factory=list)

    def check_disjoint(self):
        groups = [
            set(self.labeled),
            set(self.unlabeled),
            {i for i, _, _ in self.latent},
            set(self.test),
            set(self.validation),
        ]
        total = sum(len(g) for g in groups)
        if len(set().union(*groups)) != total:
            raise ValueError("sample pools overlap")

    def counts(self):
        return {
            "n_labeled": len(self.labeled),
            "n_latent": len(self.latent),
            "n_unlabeled": len(self.unlabeled),
        }

    def to_meta(self):
        return {
            "labeled": [int(i) for i in self.labeled],
            "unlabeled": [int(i) for i in self.unlabeled],
            "latent": [[int(i), int(c), float(p)] for i, c, p in self.latent],
            "test": [int(i) for i in self.test],
            "validation": [int(i) for i in self.validation],
        }

    @classmethod
    def from_meta(cls, meta):
        return cls(
            labeled=list(meta["labeled"]),
            unlabeled=list(meta["unlabeled"]),
            latent=[(i, c, p) for i, c, p in meta["latent"]],
            test=list(meta["test"]),
            validation=list(meta.get("validation", [])),
        )


def split_pools(ds: D.Dataset, labels_per_class, test_per_class, rng, validation_per_class=0) -> Pools:
    """Per-class split into labeled / test / (validation) / unlabeled pools.

    Samples already marked unlabeled (-1) in the dataset go straight to the
    unlabeled pool; the labels of everything assigned there are hidden from
    training by construction.
    """
    labeled, test, validation, unlabeled = [], [], [], []
    unlabeled.extend(int(i) for i in np.flatnonzero(ds.labels < 0))
    for cls in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == cls)
        idx = idx[rng.permutation(len(idx))]
        need = labels_per_class + test_per_class + validation_per_class
        if len(idx) < need:
            raise ValueError(
                f"class {cls} has {len(idx)} labeled samples, needs {need} for the split"
            )
        labeled.extend(int(i) for i in idx[:labels_per_class])
        pos = labels_per_class
        test.extend(int(i) for i in idx[pos : pos + test_per_class])
        pos += test_per_class
        validation.extend(int(i) for i in idx[pos : pos + validation_per_class])
        pos += validation_per_class
        unlabeled.extend(int(i) for i in idx[pos:])
    pools = Pools(labeled=labeled, unlabeled=unlabeled, latent=[], test=test, validation=validation)
    pools.check_disjoint()
    return pools


@dataclass
class GanCell:
    """One generator/discriminator pair at a growth stage."""

    generator: object
    discriminator: object
    stage: str
    clock: GR.GrowthClock

    def all_clocks(self):
        clocks = [self.clock]
        for model in (self.discriminator, self.generator):
            clocks.extend(b.clock for b in model.grown_blocks())
        out = []
        seen = set()
        for c in clocks:
            if id(c) not in seen:
                seen.add(id(c))
                out.append(c)
        return out

    def tick(self):
        for c in self.all_clocks():
            c.tick()


class Adam:
    """Standard Adam with bias correction; state keyed by parameter name."""

    def __init__(self, params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for p in self.params:
            if not p.trainable:
                continue
            g = p.grad
            if g is None:
                raise MissingGradientError(f"parameter {p.name!r} has no gradient")
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_dict(self):
        return {"step": self.step_count, "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state):
        self.step_count = state["step"]
        for name in self.m:
            if name in state["m"]:
                self.m[name] = state["m"][name].astype(self.m[name].dtype)
                self.v[name] = state["v"][name].astype(self.v[name].dtype)


def _image_batch(ds, indices, dtype):
    return Tensor(D.normalize_pixels(ds.pixels[np.asarray(indices, dtype=np.int64)], dtype))


def _onehot(labels, k, dtype):
    out = np.zeros((len(labels), k), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def evaluate(model, ds, indices, batch_size=256, dtype=np.float64) -> float:
    """Fraction of correct argmax predictions over the k real classes."""
    if len(indices) == 0:
        raise ValueError("evaluation pool is empty")
    k = model.num_classes
    ctx = L.Context(L.EVAL)
    correct = 0
    idx = np.asarray(indices, dtype=np.int64)
    for start in range(0, len(idx), batch_size):
        chunk = idx[start : start + batch_size]
        logits = model.forward(_image_batch(ds, chunk, dtype), ctx).data
        pred = logits[:, :k].argmax(axis=1)
        correct += int((pred == ds.labels[chunk]).sum())
    return correct / len(idx)


def _shifted_logits(logits_k1, k):
    return logits_k1[:, :k] - logits_k1[:, k : k + 1]


def infer_labels(cell: GanCell, pools: Pools, ds, alpha, per_class_cap=0, batch_size=256, dtype=np.float64) -> Pools:
    """Re-score the unlabeled and latent-labeled pools in eval mode; samples
    whose best real-class softmax probability exceeds alpha carry their
    predicted class into the latent-labeled pool, the rest stay unlabeled."""
    d = cell.discriminator
    k = d.num_classes
    ctx = L.Context(L.EVAL)
    candidates = list(pools.unlabeled) + [i for i, _, _ in pools.latent]
    if not candidates:
        return pools
    idx = np.asarray(candidates, dtype=np.int64)
    classes = np.empty(len(idx), dtype=np.int64)
    probs = np.empty(len(idx), dtype=np.float64)
    for start in range(0, len(idx), batch_size):
        chunk = idx[start : start + batch_size]
        logits = d.forward(_image_batch(ds, chunk, dtype), ctx).data
        c, p = confidences(_shifted_logits(logits.astype(np.float64), k))
        classes[start : start + len(chunk)] = c
        probs[start : start + len(chunk)] = p

    qualified = probs > alpha
    if per_class_cap:
        keep = np.zeros(len(idx), dtype=bool)
        for cls in range(k):
            members = np.flatnonzero(qualified & (classes == cls))
            if len(members) > per_class_cap:
                order = np.lexsort((idx[members], -probs[members]))
                members = members[order[:per_class_cap]]
            keep[members] = True
        qualified = keep

    latent = [
        (int(idx[j]), int(classes[j]), float(probs[j]))
        for j in range(len(idx))
        if qualified[j]
    ]
    unlabeled = [int(idx[j]) for j in range(len(idx)) if not qualified[j]]
    out = Pools(
        labeled=list(pools.labeled),
        unlabeled=unlabeled,
        latent=latent,
        test=list(pools.test),
        validation=list(pools.validation),
    )
    out.check_disjoint()
    return out


def _check_finite(value, what, snapshot):
    if not np.isfinite(value):
        raise TrainingDiverged(f"{what} became non-finite", snapshot)


def train_epoch(cell: GanCell, pools: Pools, ds, cfg: TrainConfig, rng) -> dict:
    """One epoch of alternating updates; returns the metrics row."""
    if not pools.labeled:
        raise ValueError("labeled pool is empty")
    if not pools.unlabeled:
        raise ValueError("unlabeled pool is empty")
    dtype = cfg.np_dtype
    kernel = Kernel("inner_product")
    g_model, d_model = cell.generator, cell.discriminator
    k = d_model.num_classes
    m = cfg.batch_size

    opt_d = getattr(cell, "opt_d", None)
    opt_g = getattr(cell, "opt_g", None)
    if opt_d is None or opt_g is None:
        raise ValueError("cell has no optimizers attached; use TrainRun or attach Adam instances")

    sup_items = [(i, int(ds.labels[i])) for i in pools.labeled] + [
        (i, c) for i, c, _ in pools.latent
    ]
    sup_order = rng.permutation(len(sup_items))
    unl_order = rng.permutation(len(pools.unlabeled))
    unl = [pools.unlabeled[j] for j in unl_order]
    iters = max(1, len(unl) // m)

    sums = {"loss_d": 0.0, "loss_g": 0.0, "mmd2": 0.0}
    sup_pos = 0
    gen_var = 0.0
    for it in range(iters):
        snapshot = {"stage": cell.stage, "iter": it, "t": cell.clock.t}
        unl_idx = [unl[(it * m + j) % len(unl)] for j in range(m)]
        lab_pairs = [sup_items[sup_order[(sup_pos + j) % len(sup_items)]] for j in range(m)]
        sup_pos += m
        lab_idx = [i for i, _ in lab_pairs]
        lab_y = [c for _, c in lab_pairs]

        ctx = L.Context(L.TRAIN, rng)
        z = NS.sample_latent(g_model.latent_prior, m, rng, dtype)
        fake_images = g_model.forward(z, ctx)
        fake_view = Tensor(fake_images.data)

        logits_lab = d_model.forward(_image_batch(ds, lab_idx, dtype), ctx)
        logits_unl = d_model.forward(_image_batch(ds, unl_idx, dtype), ctx)
        logits_gen = d_model.forward(fake_view, ctx)
        loss_d = discriminator_loss(
            real_class_logits(logits_lab, k),
            _onehot(lab_y, k, dtype),
            real_class_logits(logits_unl, k),
            real_class_logits(logits_gen, k),
        )
        _check_finite(loss_d.item(), "discriminator loss", snapshot)
        loss_d.backward()
        opt_d.step()
        d_model.zero_grad()
        g_model.zero_grad()

        _, feats_real = d_model.forward_with_features(_image_batch(ds, unl_idx, dtype), ctx)
        _, feats_fake = d_model.forward_with_features(fake_images, ctx)
        feats_real = feats_real.detach()
        loss_g = generator_loss(feats_real, feats_fake, cfg.metric, kernel)
        if cfg.metric == "mmd":
            mmd2_value = loss_g.item()
        else:
            mmd2_value = mmd2_sample(feats_real, feats_fake.detach(), kernel).item()
        _check_finite(loss_g.item(), "generator loss", snapshot)
        loss_g.backward()
        opt_g.step()
        d_model.zero_grad()
        g_model.zero_grad()

        cell.tick()
        sums["loss_d"] += loss_d.item()
        sums["loss_g"] += loss_g.item()
        sums["mmd2"] += mmd2_value
        gen_var = float(feats_fake.data.var(axis=0).mean())

    test_acc = evaluate(d_model, ds, pools.test, dtype=dtype) if pools.test else float("nan")
    log.info(
        "stage=%s t=%.2f loss_d=%.4f loss_g=%.5f generated-feature variance=%.3e",
        cell.stage,
        cell.clock.t,
        sums["loss_d"] / iters,
        sums["loss_g"] / iters,
        gen_var,
    )
    row = {
        "stage": cell.stage,
        "epoch": 0,  # caller fills the stage-relative epoch number
        "iter": cell.clock.iters_done_in_stage,
        "loss_d": sums["loss_d"] / iters,
        "loss_g": sums["loss_g"] / iters,
        "mmd2": sums["mmd2"] / iters,
        "w_t": cell.clock.scale(),
        **pools.counts(),
        "test_acc": test_acc,
    }
    return row


def format_metrics_csv(rows) -> str:
    lines = [METRICS_HEADER]
    for row in rows:
        cells = []
        for name in METRICS_FIELDS:
            value = row[name]
            cells.append(repr(value) if isinstance(value, float) else str(value))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


@dataclass
class RouteResult:
    rows: list
    stage_accuracy: dict
    final_accuracy: float
    best_validation: tuple = ()


class TrainRun:
    """Stateful training run over a route; checkpointable between epochs."""

    def __init__(self, cfg: TrainConfig, ds: D.Dataset, pools: Pools = None):
        self.cfg = cfg
        self.ds = ds
        root = np.random.SeedSequence(cfg.seed)
        seeds = root.spawn(4)
        if pools is None:
            pools = split_pools(
                ds,
                cfg.labels_per_class,
                cfg.test_per_class,
                np.random.default_rng(seeds[0]),
                cfg.validation_per_class,
            )
        self.pools = pools
        prior = NS.LatentPrior(dim=cfg.latent_dim, kind=cfg.latent)
        stage = cfg.route[0]
        d_spec = NS.discriminator_spec(stage, ds.num_classes, scale=cfg.scale, image=cfg.image)
        g_spec = NS.generator_spec(stage, ds.num_classes, scale=cfg.scale, image=cfg.image, prior=prior)
        dtype = cfg.np_dtype
        d_model = NS.build_model(d_spec, rng_seed=seeds[1], dtype=dtype)
        g_model = NS.build_model(g_spec, rng_seed=seeds[2], dtype=dtype)
        ipe = max(1, len(pools.unlabeled) // cfg.batch_size)
        self.cell = GanCell(g_model, d_model, stage, GR.GrowthClock(ipe))
        self._attach_optimizers()
        self.rng = np.random.default_rng(seeds[3])
        self.route_pos = 0
        self.epoch_in_stage = 0
        self.rows = []
        self.stage_accuracy = {}
        self.best_validation = ()

    def _attach_optimizers(self, d_state=None, g_state=None):
        cfg = self.cfg
        self.opt_d = Adam(self.cell.discriminator.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.opt_g = Adam(self.cell.generator.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        if d_state:
            self.opt_d.load_state_dict(d_state)
        if g_state:
            self.opt_g.load_state_dict(g_state)
        self.cell.opt_d = self.opt_d
        self.cell.opt_g = self.opt_g

    @property
    def stage(self):
        return self.cfg.route[self.route_pos]

    def run_epoch(self) -> dict:
        row = train_epoch(self.cell, self.pools, self.ds, self.cfg, self.rng)
        self.epoch_in_stage += 1
        row["epoch"] = self.epoch_in_stage
        self.rows.append(row)
        self.pools = infer_labels(
            self.cell,
            self.pools,
            self.ds,
            self.cfg.threshold,
            self.cfg.per_class_cap,
            dtype=self.cfg.np_dtype,
        )
        if self.pools.validation:
            acc = evaluate(self.cell.discriminator, self.ds, self.pools.validation, dtype=self.cfg.np_dtype)
            if not self.best_validation or acc > self.best_validation[0]:
                self.best_validation = (acc, self.stage, self.epoch_in_stage)
        return row

    def advance_stage(self):
        """Grow the pair to the next stage of the route and calibrate."""
        target = self.cfg.route[self.route_pos + 1]
        ipe = self.cell.clock.iters_per_epoch
        rng = self.rng
        plan_d = GR.plan_for(self.cell.discriminator, target)
        plan_g = GR.plan_for(self.cell.generator, target)
        d_model = GR.grow_network(self.cell.discriminator, plan_d, rng, iters_per_epoch=ipe)
        g_model = GR.grow_network(self.cell.generator, plan_g, rng, iters_per_epoch=ipe)
        train_images = (
            list(self.pools.unlabeled)
            + [i for i, _, _ in self.pools.latent]
            + list(self.pools.labeled)
        )
        calib = train_images[: 4 * self.cfg.batch_size]
        GR.calibrate_norm_stats(d_model, _image_batch(self.ds, calib, self.cfg.np_dtype))
        z = NS.sample_latent(g_model.latent_prior, 4 * self.cfg.batch_size, rng, self.cfg.np_dtype)
        GR.calibrate_norm_stats(g_model, z)
        self.cell = GanCell(g_model, d_model, target, GR.GrowthClock(ipe))
        self._attach_optimizers()
        self.route_pos += 1
        self.epoch_in_stage = 0

    def run_route(self, out_dir=None, sample_count=16):
        from pathlib import Path

        out = Path(out_dir) if out_dir else None
        while True:
            for _ in range(self.cfg.epochs_for_stage(self.route_pos) - self.epoch_in_stage):
                self.run_epoch()
            acc = self.rows[-1]["test_acc"]
            self.stage_accuracy[self.stage] = acc
            if out:
                self.save(out / f"ckpt_{self.stage}.sgck")
                self._dump_samples(out / "samples" / self.stage, sample_count)
            if self.route_pos + 1 >= len(self.cfg.route):
                break
            self.advance_stage()
        if out:
            (out / "metrics.csv").write_text(format_metrics_csv(self.rows))
        return RouteResult(
            rows=self.rows,
            stage_accuracy=dict(self.stage_accuracy),
            final_accuracy=self.rows[-1]["test_acc"],
            best_validation=self.best_validation,
        )

    def _dump_samples(self, directory, count):
        from pathlib import Path

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(self.cfg.seed)
        z = NS.sample_latent(self.cell.generator.latent_prior, count, rng, self.cfg.np_dtype)
        images = self.cell.generator.forward(z, L.Context(L.EVAL)).data
        for i in range(count):
            D.write_image(images[i], directory / f"sample_{i:03d}.ppm")

    def save(self, path):
        meta = {
            "kind": "train_run",
            "config": asdict(self.cfg),
            "route_pos": self.route_pos,
            "epoch_in_stage": self.epoch_in_stage,
            "stage": self.cell.stage,
            "cell_clock": {
                "iters_done": self.cell.clock.iters_done_in_stage,
                "iters_per_epoch": self.cell.clock.iters_per_epoch,
            },
            "rng_state": self.rng.bit_generator.state,
            "pools": self.pools.to_meta(),
            "rows": self.rows,
            "stage_accuracy": self.stage_accuracy,
            "best_validation": list(self.best_validation),
        }
        D.save_checkpoint(
            path,
            self.cell.discriminator,
            self.cell.generator,
            opt_state={"d": self.opt_d.state_dict(), "g": self.opt_g.state_dict()},
            meta=meta,
            dtype=self.cfg.dtype,
        )

    @classmethod
    def resume(cls, path, ds: D.Dataset):
        ck = D.load_checkpoint(path)
        meta = ck.meta
        if meta.get("kind") != "train_run":
            raise ValueError("checkpoint does not hold a training run")
        cfg = TrainConfig(**{**meta["config"], "route": tuple(meta["config"]["route"])})
        run = cls.__new__(cls)
        run.cfg = cfg
        run.ds = ds
        run.pools = Pools.from_meta(meta["pools"])
        clock = GR.GrowthClock(
            meta["cell_clock"]["iters_per_epoch"], meta["cell_clock"]["iters_done"]
        )
        run.cell = GanCell(ck.g_model, ck.d_model, meta["stage"], clock)
        run._attach_optimizers(ck.opt_state.get("d"), ck.opt_state.get("g"))
        rng = np.random.default_rng(0)
        rng.bit_generator.state = meta["rng_state"]
        run.rng = rng
        run.route_pos = meta["route_pos"]
        run.epoch_in_stage = meta["epoch_in_stage"]
        run.rows = list(meta.get("rows", []))
        run.stage_accuracy = dict(meta.get("stage_accuracy", {}))
        run.best_validation = tuple(meta.get("best_validation", ()))
        return run


def run_route(cfg: TrainConfig, ds: D.Dataset, pools: Pools = None, out_dir=None) -> RouteResult:
    """Train along the configured route; reproducible bitwise under one seed."""
    return TrainRun(cfg, ds, pools).run_route(out_dir)


def run_supervised_baseline(cfg: TrainConfig, ds: D.Dataset, pools: Pools, steps_per_epoch=None) -> float:
    """Same discriminator architecture trained on the labeled pool alone with
    the k-class cross entropy; returns final test accuracy."""
    root = np.random.SeedSequence(cfg.seed)
    seeds = root.spawn(4)
    dtype = cfg.np_dtype
    d_spec = NS.discriminator_spec(cfg.route[0], ds.num_classes, scale=cfg.scale, image=cfg.image)
    model = NS.build_model(d_spec, rng_seed=seeds[1], dtype=dtype)
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(seeds[3])
    k = ds.num_classes
    m = cfg.batch_size
    items = list(pools.labeled)
    iters = steps_per_epoch or max(1, len(items) // m)
    for _ in range(cfg.epochs_for_stage(0)):
        order = rng.permutation(len(items))
        for it in range(iters):
            idx = [items[order[(it * m + j) % len(items)]] for j in range(m)]
            y = [int(ds.labels[i]) for i in idx]
            ctx = L.Context(L.TRAIN, rng)
            logits = model.forward(_image_batch(ds, idx, dtype), ctx)
            loss = labeled_cross_entropy(real_class_logits(logits, k), _onehot(y, k, dtype))
            _check_finite(loss.item(), "supervised loss", {"iter": it})
            loss.backward()
            opt.step()
            model.zero_grad()
    return evaluate(model, ds, pools.test, dtype=dtype)
