"""SqueezeNet-style identity classifiers operating on residual-detail images."""
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

INPUT_SIZES = (48, 96, 192)
SCALE_OF_SIZE = {48: "2x", 96: "4x", 192: "hr"}
RESIDUAL_SCALE = 128.0
LOG_CLAMP = 1e-12

# (squeeze, expand) per fire module at width_multiplier=1; expand is per branch
FIRE_TABLE = ((16, 64), (16, 64), (32, 128), (32, 128), (48, 192),
              (48, 192), (64, 256), (64, 256), (64, 256))
STEM_FILTERS = 64
POOL_AFTER = (3, 7)  # max-pool after these fire modules (1-based)
FIRE_GRID = 12  # spatial size seen by the first fire module


def _scaled(n, m):
    return max(1, int(round(n * m)))


class Fire(nn.Module):
    def __init__(self, cin, squeeze, expand, shortcut=False):
        super().__init__()
        self.squeeze = nn.Conv2d(cin, squeeze, 1)
        self.squeeze_bn = nn.BatchNorm2d(squeeze)
        self.expand1x1 = nn.Conv2d(squeeze, expand, 1)
        self.expand3x3 = nn.Conv2d(squeeze, expand, 3, padding=1)
        self.shortcut = shortcut
        self.out_channels = 2 * expand

    def forward(self, x):
        s = F.relu(self.squeeze_bn(self.squeeze(x)))
        out = F.relu(torch.cat([self.expand1x1(s), self.expand3x3(s)], 1))
        return out + x if self.shortcut else out


class RecognitionModel(nn.Module):
    """Residual image (signed) -> K-way identity logits."""

    def __init__(self, input_size, num_classes, width_multiplier=1.0, dropout=0.5):
        super().__init__()
        if input_size not in INPUT_SIZES:
            raise ValueError(f"input_size must be one of {INPUT_SIZES}, got {input_size}")
        if num_classes < 2:
            raise ValueError("need at least two identities")
        self.input_size = input_size
        self.num_classes = num_classes
        self.width_multiplier = width_multiplier
        self.frozen = False

        stem = _scaled(STEM_FILTERS, width_multiplier)
        # the finest scale keeps full resolution in the stem: its residuals are faint
        stride = 1 if input_size == INPUT_SIZES[0] else 2
        self.stem = nn.Conv2d(3, stem, 3, stride=stride, padding=1)
        # residual magnitudes differ by ~30x between scales; normalize after the stem
        self.stem_bn = nn.BatchNorm2d(stem)
        # pools after the stem bring every input size down to FIRE_GRID
        self.stem_pools = int(round(math.log2(input_size // stride // FIRE_GRID)))
        fires, cin = [], stem
        for sq, ex in FIRE_TABLE:
            sq, ex = _scaled(sq, width_multiplier), _scaled(ex, width_multiplier)
            fires.append(Fire(cin, sq, ex, shortcut=(cin == 2 * ex)))
            cin = 2 * ex
        self.fires = nn.ModuleList(fires)
        self.dropout = nn.Dropout(dropout)
        self.classifier = nn.Conv2d(cin, num_classes, 1)

    def forward(self, residual):
        x = residual
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if tuple(x.shape[-3:]) != (3, self.input_size, self.input_size):
            raise ValueError(f"prior expects residuals of shape (3, {self.input_size}, "
                             f"{self.input_size}), got {tuple(residual.shape)}")
        x = F.relu(self.stem_bn(self.stem(x / RESIDUAL_SCALE)))
        for _ in range(self.stem_pools):
            x = F.max_pool2d(x, 3, stride=2, padding=1)
        for i, fire in enumerate(self.fires, 1):
            x = fire(x)
            if i in POOL_AFTER:
                x = F.max_pool2d(x, 3, stride=2, padding=1)
        x = self.classifier(self.dropout(x))
        return x.mean(dim=(-1, -2))

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self

    def train(self, mode=True):
        if mode and self.frozen:
            raise RuntimeError("a frozen recognition model cannot be put in training mode")
        return super().train(mode)


def build_prior(input_size, num_classes, width_multiplier=1.0, seed=0):
    torch.manual_seed(int(seed))  # module constructors draw from the global generator
    g = torch.Generator().manual_seed(int(seed))
    model = RecognitionModel(input_size, num_classes, width_multiplier)
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * math.sqrt(2.0 / fan_in))
                m.bias.zero_()
    return model


def prior_forward(model, residual):
    """Class posterior (softmax) for one residual image or a batch."""
    squeeze = residual.dim() == 3
    probs = F.softmax(model(residual), dim=-1)
    return probs.squeeze(0) if squeeze else probs


def cross_entropy(p_hat, label):
    """-log p_hat[label] with probabilities clamped at 1e-12; batches are averaged."""
    p_hat = torch.as_tensor(p_hat)
    label = torch.as_tensor(label, dtype=torch.long)
    k = p_hat.shape[-1]
    if ((label < 0) | (label >= k)).any():
        raise ValueError(f"label out of range [0, {k})")
    if p_hat.dim() == 1:
        return -torch.log(p_hat[label].clamp_min(LOG_CLAMP))
    picked = p_hat.gather(-1, label.view(-1, 1)).squeeze(-1)
    return -torch.log(picked.clamp_min(LOG_CLAMP)).mean()


@torch.no_grad()
def rank_one_accuracy(model, samples, batch_size=64):
    """Fraction of (residual, label) pairs whose arg-max class equals the label.

    ``torch.argmax`` returns the first maximal index, so ties resolve to the
    lowest class index.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("rank_one_accuracy needs a non-empty sample set")
    was_training = model.training
    model.eval()
    correct = 0
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        x = torch.stack([torch.as_tensor(r, dtype=torch.float32) for r, _ in chunk])
        y = torch.tensor([int(l) for _, l in chunk])
        probs = prior_forward(model, x.to(next(model.parameters()).dtype))
        correct += int((probs.argmax(dim=-1) == y).sum())
    if was_training and not model.frozen:
        model.train()
    return correct / len(samples)
