"""Two-stage training: identity priors on ground-truth residuals, then the SR network."""
import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data
from .checkpoint import load_checkpoint, parameter_hash, save_checkpoint
from .evaluation import psnr
from .network import BaselineNetwork, SRNetwork
from .prior import SCALE_OF_SIZE, cross_entropy, prior_forward
from .ssim import mse_loss, ssim_loss, ssim_value

log = logging.getLogger(__name__)

ALPHA = 0.001
SCALES = data.SCALES
SCALE_INPUT_SIZE = {"2x": 48, "4x": 96, "hr": 192}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Schedule:
    batch_size: int
    initial_lr: float
    lr_decay_factor: float = 1.0 / 3.0
    decay_every: int = 0  # periodic decay; 0 disables
    milestones: tuple = ()
    max_epochs: int = 100
    patience: int = 10
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def stage1(cls):
        return cls(batch_size=128, initial_lr=1e-4, decay_every=20, max_epochs=100, patience=10)

    @classmethod
    def stage2(cls):
        return cls(batch_size=8, initial_lr=10.0 / 3.0 * 1e-3, milestones=(10, 25, 50, 80),
                   max_epochs=100, patience=10)

    def lr_at(self, epoch):
        """Learning rate used during ``epoch`` (1-based); decays apply at epoch ends."""
        n = sum(1 for m in self.milestones if m < epoch)
        if self.decay_every:
            n += (epoch - 1) // self.decay_every
        lr = self.initial_lr
        for _ in range(n):  # repeated products so each decay is exactly prev * factor
            lr *= self.lr_decay_factor
        return lr

    def with_max_epochs(self, max_epochs):
        """Override the epoch budget; milestones scale as ``m * max_epochs / 100``."""
        ms = tuple(sorted({max(1, int(round(m * max_epochs / 100))) for m in self.milestones}))
        return Schedule(**{**asdict(self), "max_epochs": int(max_epochs), "milestones": ms})

    def to_dict(self):
        return asdict(self)


@dataclass
class EarlyStopping:
    """Counts epochs without strict improvement of any monitored metric."""
    modes: dict  # metric -> "max" | "min"
    patience: int = 10
    best: dict = field(default_factory=dict)
    epochs_since_improvement: int = 0

    def update(self, metrics):
        improved = []
        for name, mode in self.modes.items():
            v = metrics[name]
            b = self.best.get(name)
            if b is None or (v > b if mode == "max" else v < b):
                self.best[name] = v
                improved.append(name)
        if improved:
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
        return improved

    @property
    def should_stop(self):
        return self.epochs_since_improvement >= self.patience


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    current_lr: float = 0.0
    best_val: dict = field(default_factory=dict)
    epochs_since_improvement: int = 0
    alpha: float = ALPHA
    seed: int = 0


@dataclass(frozen=True)
class LossConfig:
    recon: str = "ssim"  # "ssim" | "mse"
    multiscale: bool = True
    identity: bool = True

    def __post_init__(self):
        if self.recon not in ("ssim", "mse"):
            raise ValueError(f"unknown reconstruction loss {self.recon!r}")
        if self.identity and not self.multiscale:
            raise ValueError("identity terms are applied at every supervised scale")

    @property
    def scales(self):
        return SCALES if self.multiscale else ("hr",)


# ablation ladder: row -> (cascaded network?, loss configuration)
ABLATION_ROWS = {
    "Baseline": (False, LossConfig("mse", multiscale=False, identity=False)),
    "B+SSIM": (False, LossConfig("ssim", multiscale=False, identity=False)),
    "C+SSIM": (True, LossConfig("ssim", multiscale=False, identity=False)),
    "C+SSIM+M": (True, LossConfig("ssim", multiscale=True, identity=False)),
    "C-SRIP": (True, LossConfig("ssim", multiscale=True, identity=True)),
}


def _epoch_rng(seed, epoch):
    return np.random.default_rng([int(seed), int(epoch)])


def _seed_torch(seed, epoch):
    torch.manual_seed(int(seed) * 1_000_003 + int(epoch))


def _check_finite(value, where):
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss ({value}) during {where}")


# ---------------------------------------------------------------------------
# stage 1

_STEPS_BELOW_HR = {"hr": 0, "4x": 1, "2x": 2}


def scale_residual(hr_images, scale, dtype=torch.float32):
    """Degrade a batch of HR images to ``scale`` and return its residual-detail images."""
    t = torch.from_numpy(np.stack(hr_images)).to(torch.float64)
    for _ in range(_STEPS_BELOW_HR[scale]):
        t = data.degrade_step(t)
    return data.residual_detail(t, scale).to(dtype)


def train_prior(model, train, val, schedule, seed=0, log_path=None, progress=None):
    """Fit one recognition model on (HR image, identity) pairs.

    Augmentation is applied to the HR image; the augmented image is then
    degraded to the model's scale and turned into a residual-detail image,
    so training inputs follow the same pipeline as the quadruplets.
    Returns ``(model, history)`` with the best-validation-accuracy snapshot
    loaded into ``model``.
    """
    scale = SCALE_OF_SIZE[model.input_size]
    if model.frozen:
        raise RuntimeError("cannot train a frozen recognition model")
    train_x = [np.asarray(x, dtype=np.float64) for x, _ in train]
    train_y = torch.tensor([int(y) for _, y in train])
    val_res = scale_residual([np.asarray(x, dtype=np.float64) for x, _ in val], scale)
    val_y = torch.tensor([int(y) for _, y in val])

    opt = torch.optim.Adam(model.parameters(), lr=schedule.initial_lr,
                           betas=schedule.betas, eps=schedule.eps)
    stopper = EarlyStopping({"val_acc": "max"}, schedule.patience)
    best_state = copy.deepcopy(model.state_dict())
    history = []
    step = 0
    for epoch in range(1, schedule.max_epochs + 1):
        lr = schedule.lr_at(epoch)
        for gparam in opt.param_groups:
            gparam["lr"] = lr
        rng = _epoch_rng(seed, epoch)
        _seed_torch(seed, epoch)
        order = rng.permutation(len(train_x))
        model.train()
        total, count, correct = 0.0, 0, 0
        for i in range(0, len(order), schedule.batch_size):
            idx = order[i:i + schedule.batch_size]
            aug = [data.augment(train_x[j], np.random.default_rng([int(seed), epoch, int(j)]))
                   for j in idx]
            x = scale_residual(aug, scale)
            probs = prior_forward(model, x)
            loss = cross_entropy(probs, train_y[idx])
            _check_finite(loss.item(), f"prior training (epoch {epoch})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            total += loss.item() * len(idx)
            count += len(idx)
            correct += int((probs.argmax(-1) == train_y[idx]).sum())
        # running metrics over the augmented epoch
        row = {"epoch": epoch, "step": step, "lr": lr, "train_loss": total / count,
               "train_acc": correct / count}
        row.update(_prior_metrics(model, val_res, val_y, "val"))
        history.append(row)
        if progress:
            progress(row)
        if stopper.update({"val_acc": row["val_acc"]}):
            best_state = copy.deepcopy(model.state_dict())
        if stopper.should_stop:
            log.info("prior %s: early stop after epoch %d", scale, epoch)
            break
    model.load_state_dict(best_state)
    model.eval()
    if log_path:
        write_history_csv(log_path, history)
    return model, history


@torch.no_grad()
def _prior_metrics(model, residuals, labels, prefix, batch=64):
    model.eval()
    losses, correct = 0.0, 0
    for i in range(0, len(labels), batch):
        p = prior_forward(model, residuals[i:i + batch])
        y = labels[i:i + batch]
        losses += cross_entropy(p, y).item() * len(y)
        correct += int((p.argmax(-1) == y).sum())
    n = max(1, len(labels))
    return {f"{prefix}_loss": losses / n, f"{prefix}_acc": correct / n}


# ---------------------------------------------------------------------------
# stage 2

def combined_loss(outputs, targets, identity, priors=None, alpha=ALPHA, loss_config=None):
    """Sum over supervised scales of reconstruction loss plus alpha * identity cross-entropy.

    ``outputs`` maps (or is an SROutputs with) scales 2x/4x/hr to predictions;
    ``targets`` maps the same scales to ground truth. Returns ``(total,
    breakdown)`` where the breakdown holds the additive terms (identity terms
    already weighted by alpha).
    """
    cfg = loss_config or LossConfig()
    if hasattr(outputs, "sr8x"):
        outputs = {"2x": outputs.sr2x, "4x": outputs.sr4x, "hr": outputs.sr8x}
    elif isinstance(outputs, torch.Tensor):
        outputs = {"hr": outputs}
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    breakdown = {}
    for j in cfg.scales:
        if cfg.recon == "ssim":
            breakdown[f"ssim_{j}"] = ssim_loss(targets[j], outputs[j])
        else:
            breakdown[f"mse_{j}"] = mse_loss(targets[j], outputs[j])
    if cfg.identity:
        if priors is None:
            raise ValueError("identity terms need the three frozen priors")
        for j in cfg.scales:
            prior = priors[j]
            if not getattr(prior, "frozen", False):
                raise RuntimeError(f"prior for scale {j} is not frozen")
            res = data.residual_detail(outputs[j], j)
            ce = cross_entropy(prior_forward(prior, res), identity)
            breakdown[f"id_{j}"] = alpha * ce
    total = sum(breakdown.values())
    return total, breakdown


def check_priors(priors, num_classes=None):
    missing = [j for j in SCALES if j not in (priors or {})]
    if missing:
        raise ValueError(f"missing priors for scales {missing}")
    ks = set()
    for j in SCALES:
        p = priors[j]
        if not p.frozen:
            raise RuntimeError(f"prior for scale {j} must be frozen before SR training")
        if p.input_size != SCALE_INPUT_SIZE[j]:
            raise ValueError(f"prior for scale {j} has input size {p.input_size}, "
                             f"expected {SCALE_INPUT_SIZE[j]}")
        ks.add(p.num_classes)
    if len(ks) != 1 or (num_classes is not None and ks != {num_classes}):
        raise ValueError(f"priors disagree on the number of identities: {sorted(ks)}")


@torch.no_grad()
def validate_sr(net, quads, batch=16):
    """Final-scale PSNR/SSIM/MSE (and intermediate SSIM for cascaded nets)."""
    was_training = net.training
    net.eval()
    ssim_hr, mse_hr, psnrs, ssim2, ssim4 = [], [], [], [], []
    for i in range(0, len(quads), batch):
        t = data.quads_to_tensors(quads[i:i + batch])
        out = net(t["lr"])
        sr = out.sr8x if hasattr(out, "sr8x") else out
        ssim_hr.extend(ssim_value(t["hr"].double(), sr.double()).tolist())
        mse_hr.extend(((t["hr"].double() - sr.double()) ** 2).mean(dim=(1, 2, 3)).tolist())
        psnrs.extend(psnr(h, s) for h, s in zip(t["hr"].double().numpy(), sr.double().numpy()))
        if hasattr(out, "sr8x"):
            ssim2.extend(ssim_value(t["2x"].double(), out.sr2x.double()).tolist())
            ssim4.extend(ssim_value(t["4x"].double(), out.sr4x.double()).tolist())
    net.train(was_training)
    finite = [p for p in psnrs if math.isfinite(p)]
    res = {
        "val_ssim": float(np.mean(ssim_hr)),
        "val_mse": float(np.mean(mse_hr)),
        "val_psnr": float(np.mean(finite)) if finite else float("inf"),
    }
    if ssim2:
        res["val_ssim_2x"] = float(np.mean(ssim2))
        res["val_ssim_4x"] = float(np.mean(ssim4))
    return res


def _loss_terms(net, cfg):
    keys = [f"{'ssim' if cfg.recon == 'ssim' else 'mse'}_{j}" for j in cfg.scales]
    if cfg.identity:
        keys += [f"id_{j}" for j in cfg.scales]
    return keys


def train_sr(net, train_quads, val_quads, schedule, loss_config=None, priors=None,
             alpha=ALPHA, seed=0, log_path=None, checkpoint_path=None, resume=None,
             stop_after=None, progress=None, config=None):
    """Train the generator with the configured objective.

    Early stopping follows the combined rule: stop once neither validation
    SSIM nor validation MSE has improved for ``schedule.patience`` epochs.
    The snapshot with the best validation SSIM is loaded before returning.

    ``checkpoint_path`` receives a resumable checkpoint after every epoch;
    ``resume`` continues from such a file. ``stop_after`` ends the run after
    that many epochs in this call (used to simulate interruption).
    """
    cfg = loss_config or LossConfig()
    cascaded = isinstance(net, SRNetwork)
    if not cascaded and cfg.multiscale:
        raise ValueError("multi-scale supervision needs the cascaded network")
    if cfg.identity:
        num_classes = max(q.identity for q in train_quads) + 1
        check_priors(priors, None)
        if priors["hr"].num_classes < num_classes:
            raise ValueError("training identities exceed the priors' class count")
        before = {j: parameter_hash(priors[j]) for j in SCALES}
    opt = torch.optim.Adam(net.parameters(), lr=schedule.initial_lr,
                           betas=schedule.betas, eps=schedule.eps)
    stopper = EarlyStopping({"val_ssim": "max", "val_mse": "min"}, schedule.patience)
    state = TrainState(alpha=alpha, seed=seed)
    history = []
    best_state = copy.deepcopy(net.state_dict())
    meta = {"loss_config": asdict(cfg), "alpha": alpha, "seed": seed,
            "network": net.config.to_dict(), "schedule": schedule.to_dict()}

    if resume is not None:
        payload = resume if isinstance(resume, dict) else load_checkpoint(resume, kind="sr_train")
        net.load_state_dict(payload["model"])
        opt.load_state_dict(payload["optimizer"])
        state = TrainState(**payload["train_state"])
        stopper = EarlyStopping({"val_ssim": "max", "val_mse": "min"}, schedule.patience,
                                dict(state.best_val), state.epochs_since_improvement)
        history = list(payload["history"])
        best_state = payload["best_model"]

    terms = _loss_terms(net, cfg)
    if log_path and resume is None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh).writerow(["epoch", "step", "lr", *terms, "val_psnr", "val_ssim"])

    tensors = data.quads_to_tensors(train_quads)
    n = len(train_quads)
    epochs_run = 0
    for epoch in range(state.epoch + 1, schedule.max_epochs + 1):
        if stopper.should_stop or (stop_after is not None and epochs_run >= stop_after):
            break
        lr = schedule.lr_at(epoch)
        for gparam in opt.param_groups:
            gparam["lr"] = lr
        _seed_torch(seed, epoch)
        order = _epoch_rng(seed, epoch).permutation(n)
        net.train()
        sums = dict.fromkeys(terms, 0.0)
        for i in range(0, n, schedule.batch_size):
            idx = torch.from_numpy(order[i:i + schedule.batch_size])
            targets = {j: tensors[j][idx] for j in SCALES}
            out = net(tensors["lr"][idx])
            loss, parts = combined_loss(out, targets, tensors["identity"][idx], priors,
                                        alpha, cfg)
            _check_finite(loss.item(), f"SR training (epoch {epoch})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            state.step += 1
            for k, v in parts.items():
                sums[k] += v.item() * len(idx)
        metrics = validate_sr(net, val_quads)
        improved = stopper.update(metrics)
        if "val_ssim" in improved:
            best_state = copy.deepcopy(net.state_dict())
        state.epoch = epoch
        state.current_lr = lr
        state.best_val = dict(stopper.best)
        state.epochs_since_improvement = stopper.epochs_since_improvement
        row = {"epoch": epoch, "step": state.step, "lr": lr,
               **{k: sums[k] / n for k in terms}, **metrics}
        history.append(row)
        epochs_run += 1
        if log_path:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh).writerow([epoch, state.step, repr(lr),
                                         *[repr(row[k]) for k in terms],
                                         repr(metrics["val_psnr"]), repr(metrics["val_ssim"])])
        if progress:
            progress(row)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, "sr_train", net.state_dict(), config or meta,
                            meta=meta, optimizer=opt.state_dict(), train_state=asdict(state),
                            history=history, best_model=best_state)
    if cfg.identity:
        after = {j: parameter_hash(priors[j]) for j in SCALES}
        if after != before:
            raise RuntimeError("frozen prior parameters changed during SR training")
    net.load_state_dict(best_state)
    net.eval()
    return net, history, state


def write_history_csv(path, history):
    if not history:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(history[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for row in history:
            w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in keys])
