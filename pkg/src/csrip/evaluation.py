"""PSNR/SSIM scoring, cumulative score distributions, bicubic baseline, sharpening."""
import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .filters import filter2d
from .ssim import ssim_value

PIXEL_MAX = 255.0
INF = float("inf")  # PSNR of identical images
SHARPEN_KERNEL = np.array([[0, -1, 0], [-1, 5, -1], [0, -1, 0]], dtype=np.float64)


def _np(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(x, y):
    """10 log10(255^2 / MSE) over all channels jointly; ``inf`` for identical images."""
    x, y = _np(x), _np(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return INF
    return 10.0 * math.log10(PIXEL_MAX ** 2 / mse)


def ssim_score(x, y):
    x, y = _np(x), _np(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return float(ssim_value(torch.from_numpy(x), torch.from_numpy(y)))


# ---------------------------------------------------------------------------
# bicubic baseline

def cubic(t, a=-0.5):
    t = np.abs(t)
    return np.where(t <= 1, (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1,
                    np.where(t < 2, a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a, 0.0))


def _reflect(i, n):
    if n == 1:
        return np.zeros_like(i)
    period = 2 * (n - 1)
    i = np.mod(i, period)
    return np.where(i > n - 1, period - i, i)


def bicubic_matrix(n_in, factor, a=-0.5):
    """(n_in*factor, n_in) interpolation matrix with pixel-centre alignment."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    base = np.floor(src).astype(int)
    m = np.zeros((n_out, n_in))
    for off in range(-1, 3):
        idx = base + off
        w = cubic(src - idx, a)
        np.add.at(m, (np.arange(n_out), _reflect(idx, n_in)), w)
    return m


def bicubic_upscale(lr, factor):
    if factor not in (2, 4, 8):
        raise ValueError(f"factor must be 2, 4 or 8, got {factor}")
    x = _np(lr)
    h, w = x.shape[-2:]
    mh, mw = bicubic_matrix(h, factor), bicubic_matrix(w, factor)
    out = np.einsum("ij,...jk,lk->...il", mh, x, mw)
    return np.clip(out, 0.0, PIXEL_MAX)


def sharpen(img):
    """3x3 sharpening filter, reflect padding, clipped to [0, 255]."""
    x = torch.from_numpy(_np(img))
    out = filter2d(x, SHARPEN_KERNEL).numpy()
    return np.clip(out, 0.0, PIXEL_MAX)


# ---------------------------------------------------------------------------
# cumulative score distributions

@dataclass
class CSDCurve:
    points: list  # (threshold, fraction of scores <= threshold)
    metric: str = "SSIM"

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "fraction"])
        for t, f in self.points:
            w.writerow([repr(float(t)), repr(float(f))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def csd_curve(scores, metric="SSIM"):
    """Exact empirical CDF evaluated at every distinct score."""
    s = np.sort(np.asarray(list(scores), dtype=np.float64))
    if s.size == 0:
        raise ValueError("csd_curve needs at least one score")
    values, counts = np.unique(s, return_counts=True)
    fractions = np.cumsum(counts) / s.size
    fractions[-1] = 1.0
    return CSDCurve([(float(v), float(f)) for v, f in zip(values, fractions)], metric)


def plot_csd(curves, path, metadata=None):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(curves), figsize=(5 * len(curves), 4))
    axes = np.atleast_1d(axes)
    for ax, (metric, per_model) in zip(axes, curves.items()):
        for label, curve in per_model.items():
            pts = [(t, f) for t, f in curve.points if math.isfinite(t)]
            if pts:
                ts, fs = zip(*pts)
                ax.step(ts, fs, where="post", label=label)
        ax.set_xlabel(metric)
        ax.set_ylabel("fraction of images")
        ax.set_ylim(0, 1.02)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None, **(metadata or {})})
    plt.close(fig)


# ---------------------------------------------------------------------------
# reports

@dataclass
class EvaluationReport:
    per_image: list  # (image id, psnr dB, ssim)
    model_id: str = ""
    dataset_id: str = ""
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def infinite_psnr_count(self):
        return sum(1 for _, p, _ in self.per_image if not math.isfinite(p))

    @property
    def mean_psnr(self):
        finite = [p for _, p, _ in self.per_image if math.isfinite(p)]
        return float(np.mean(finite)) if finite else INF

    @property
    def mean_ssim(self):
        return float(np.mean([s for _, _, s in self.per_image]))

    def aggregates(self):
        return {
            "model_id": self.model_id,
            "dataset_id": self.dataset_id,
            "config_hash": self.config_hash,
            "num_images": len(self.per_image),
            "mean_psnr": self.mean_psnr if math.isfinite(self.mean_psnr) else "inf",
            "mean_ssim": self.mean_ssim,
            "psnr_infinite_count": self.infinite_psnr_count,
            **self.extra,
        }

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image_id", "psnr_db", "ssim", "config_hash"])
        for name, p, s in self.per_image:
            w.writerow([name, repr(float(p)), repr(float(s)), self.config_hash])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_json(self, path=None):
        text = json.dumps(self.aggregates(), indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    def csd(self):
        return {"PSNR": csd_curve([p for _, p, _ in self.per_image], "PSNR"),
                "SSIM": csd_curve([s for _, _, s in self.per_image], "SSIM")}


def evaluate_predictions(predictions, targets, ids, **report_fields):
    """Score predictions against HR targets; rows are ordered by image id."""
    rows = [(str(i), psnr(t, p), ssim_score(t, p)) for i, p, t in zip(ids, predictions, targets)]
    rows.sort(key=lambda r: r[0])
    return EvaluationReport(rows, **report_fields)


def check_identity_disjoint(train_identities, test_identities):
    overlap = sorted(set(map(str, train_identities)) & set(map(str, test_identities)))
    if overlap:
        raise ValueError(f"test identities overlap the training identities: {overlap[:10]}")


@torch.no_grad()
def super_resolve(net, lr_images, batch=16):
    """sr8x for a stack of (3,24,24) images, in inference mode."""
    net.eval()
    outs = []
    lr = torch.as_tensor(np.asarray(lr_images), dtype=torch.float32)
    for i in range(0, len(lr), batch):
        outs.append(net(lr[i:i + batch], intermediates=False).double().numpy())
    return np.concatenate(outs) if outs else np.zeros((0, 3, 192, 192))


def evaluate_model(net, test_quads, train_identities=None, test_identities=None, **report_fields):
    """Per-image PSNR/SSIM of sr8x against HR over a held-out quadruplet set."""
    if train_identities is not None and test_identities is not None:
        check_identity_disjoint(train_identities, test_identities)
    preds = super_resolve(net, [q.lr for q in test_quads])
    return evaluate_predictions(preds, [q.hr for q in test_quads],
                                [q.name or f"{i:06d}" for i, q in enumerate(test_quads)],
                                **report_fields)


def evaluate_bicubic(test_quads, **report_fields):
    preds = [bicubic_upscale(q.lr, 8) for q in test_quads]
    return evaluate_predictions(preds, [q.hr for q in test_quads],
                                [q.name or f"{i:06d}" for i, q in enumerate(test_quads)],
                                **report_fields)
