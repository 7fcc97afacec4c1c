"""Training data: degradation model, quadruplets, residual-detail images, splits."""
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .filters import gaussian_blur, gaussian_kernel_1d, separable_filter, taps_for_sigma

log = logging.getLogger(__name__)

HR_SIZE = 192
LR_SIZE = 24

# anti-alias blur applied before each 2x decimation
DEGRADE_SIGMA = 1.0
DEGRADE_TAPS = 5

# smoothing used to extract residual-detail images at each supervised scale
RESIDUAL_SIGMA = {"2x": 1.0 / 3.0, "4x": 1.0, "hr": 7.0 / 3.0}
SCALE_SIZE = {"2x": 48, "4x": 96, "hr": 192}
SCALES = ("2x", "4x", "hr")

CROP_JITTER = 4


def _to_tensor(img):
    if isinstance(img, torch.Tensor):
        return img, False
    return torch.from_numpy(np.ascontiguousarray(img, dtype=np.float64)), True


def _back(t, was_numpy):
    return t.numpy() if was_numpy else t


@dataclass
class ImageQuadruplet:
    lr: np.ndarray
    x2: np.ndarray
    x4: np.ndarray
    hr: np.ndarray
    identity: int
    name: str = ""

    def at(self, scale):
        return {"lr": self.lr, "2x": self.x2, "4x": self.x4, "hr": self.hr}[scale]


@dataclass
class LabeledImageSet:
    images: list  # of (hr array (3,192,192), identity index)
    num_classes: int
    split_tag: str = "train"
    names: list = field(default_factory=list)  # per-image id (relative path)
    identity_names: list = field(default_factory=list)  # original label per class index
    skipped: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def labels(self):
        return [y for _, y in self.images]


def degrade_step(img):
    """Blur with the anti-alias Gaussian, then keep even-indexed rows and columns."""
    t, was_np = _to_tensor(img)
    h, w = t.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"degrade_step needs even dimensions, got {h}x{w}")
    taps = gaussian_kernel_1d(DEGRADE_TAPS, DEGRADE_SIGMA)
    out = separable_filter(t, taps)[..., ::2, ::2].contiguous()
    return _back(out, was_np)


def make_quadruplet(hr, identity, name=""):
    hr = np.asarray(hr, dtype=np.float64)
    if hr.shape != (3, HR_SIZE, HR_SIZE):
        raise ValueError(f"expected HR image of shape (3, 192, 192), got {hr.shape}")
    x4 = degrade_step(hr)
    x2 = degrade_step(x4)
    lr = degrade_step(x2)
    return ImageQuadruplet(lr=lr, x2=x2, x4=x4, hr=hr, identity=int(identity), name=name)


def residual_detail(img, scale_tag):
    """High-frequency detail ``img - g_sigma * img`` for one of the scales 2x/4x/hr.

    Works on numpy arrays or (batched) torch tensors; gradients propagate
    through the tensor path.
    """
    if scale_tag not in RESIDUAL_SIGMA:
        raise ValueError(f"unknown scale tag {scale_tag!r}; expected one of {SCALES}")
    t, was_np = _to_tensor(img)
    size = SCALE_SIZE[scale_tag]
    if tuple(t.shape[-2:]) != (size, size) or t.shape[-3] != 3:
        raise ValueError(
            f"scale {scale_tag} expects (3, {size}, {size}) images, got {tuple(t.shape)}")
    sigma = RESIDUAL_SIGMA[scale_tag]
    out = t - gaussian_blur(t, sigma, taps_for_sigma(sigma))
    return _back(out, was_np)


def hflip(img):
    return np.ascontiguousarray(np.asarray(img)[..., ::-1])


def augment(img, rng):
    """Random horizontal flip (p=0.5) and a random (H-4)x(W-4) crop resized back."""
    img = np.asarray(img, dtype=np.float64)
    if rng.random() < 0.5:
        img = hflip(img)
    h, w = img.shape[-2:]
    top = int(rng.integers(0, CROP_JITTER + 1))
    left = int(rng.integers(0, CROP_JITTER + 1))
    crop = img[:, top:top + h - CROP_JITTER, left:left + w - CROP_JITTER]
    t = torch.from_numpy(np.ascontiguousarray(crop)).unsqueeze(0)
    t = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return t.squeeze(0).numpy()


def split_identity_stratified(dataset, ratio=0.9, seed=0):
    """Per-identity train/validation partition; every identity lands in both splits."""
    by_id = {}
    for idx, (_, y) in enumerate(dataset.images):
        by_id.setdefault(y, []).append(idx)
    for y, idxs in sorted(by_id.items()):
        if len(idxs) < 2:
            name = dataset.identity_names[y] if dataset.identity_names else y
            raise ValueError(f"identity {name!r} has only {len(idxs)} image; need at least 2")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for y in sorted(by_id):
        idxs = np.array(by_id[y])
        rng.shuffle(idxs)
        n_val = max(1, int(round(len(idxs) * (1.0 - ratio))))
        n_val = min(n_val, len(idxs) - 1)
        val_idx.extend(sorted(idxs[:n_val].tolist()))
        train_idx.extend(sorted(idxs[n_val:].tolist()))

    def subset(idxs, tag):
        return LabeledImageSet(
            images=[dataset.images[i] for i in idxs],
            num_classes=dataset.num_classes,
            split_tag=tag,
            names=[dataset.names[i] for i in idxs] if dataset.names else [],
            identity_names=list(dataset.identity_names),
        )

    return subset(sorted(train_idx), "train"), subset(sorted(val_idx), "val")


def read_manifest(manifest):
    manifest = Path(manifest)
    if not manifest.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    entries = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{manifest}:{lineno}: expected 'path<TAB>label'")
        entries.append((parts[0].strip(), parts[1].strip()))
    return entries


def _label_key(label):
    try:
        return (0, int(label), label)
    except ValueError:
        return (1, 0, label)


def load_image(path, size=HR_SIZE):
    """Decode as 8-bit RGB, center-crop to square and resize to ``size``."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        w, h = im.size
        s = min(w, h)
        if (w, h) != (s, s):
            left, top = (w - s) // 2, (h - s) // 2
            im = im.crop((left, top, left + s, top + s))
        if s != size:
            im = im.resize((size, size), Image.BICUBIC)
        arr = np.asarray(im, dtype=np.float64)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_dataset(root, manifest, split_tag="train"):
    root = Path(root)
    entries = read_manifest(manifest)
    if not entries:
        raise ValueError(f"empty dataset: {manifest}")
    labels = sorted({lab for _, lab in entries}, key=_label_key)
    dense = [str(i) for i in range(len(labels))]
    if labels != dense:
        log.warning("identity labels are not dense in [0, %d); re-indexing %d labels",
                    len(labels), len(labels))
    index = {lab: i for i, lab in enumerate(labels)}

    images, names, skipped = [], [], []
    for rel, lab in entries:
        path = root / rel
        if not path.is_file():
            raise FileNotFoundError(f"image listed in manifest is missing: {path}")
        try:
            img = load_image(path)
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            skipped.append(rel)
            continue
        images.append((img, index[lab]))
        names.append(rel)
    if not images:
        raise ValueError(f"empty dataset: no decodable images in {manifest}")
    return LabeledImageSet(images=images, num_classes=len(labels), split_tag=split_tag,
                           names=names, identity_names=labels, skipped=skipped)


def build_quadruplets(dataset):
    names = dataset.names or [f"{i:06d}" for i in range(len(dataset))]
    return [make_quadruplet(img, y, name) for (img, y), name in zip(dataset.images, names)]


# ---------------------------------------------------------------------------
# prepared-data cache

CACHE_VERSION = 1


def degradation_params():
    return {
        "degrade_sigma": DEGRADE_SIGMA,
        "degrade_taps": DEGRADE_TAPS,
        "decimation": "even",
        "padding": "reflect",
        "residual_sigma": RESIDUAL_SIGMA,
    }


def write_cache(directory, quads, num_classes, identity_names, seed, extra=None):
    """One lossless .npz per quadruplet plus ``index.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, q in enumerate(quads):
        fname = f"quad_{i:06d}.npz"
        np.savez_compressed(directory / fname, lr=q.lr, x2=q.x2, x4=q.x4, hr=q.hr,
                            identity=np.int64(q.identity), name=np.str_(q.name))
        files.append(fname)
    index = {
        "version": CACHE_VERSION,
        "count": len(quads),
        "num_classes": num_classes,
        "identity_names": list(identity_names),
        "seed": seed,
        "degradation": degradation_params(),
        "files": files,
    }
    if extra:
        index.update(extra)
    tmp = directory / "index.json.tmp"
    tmp.write_text(json.dumps(index, indent=2, sort_keys=True))
    os.replace(tmp, directory / "index.json")
    return index


def read_cache_index(directory):
    path = Path(directory) / "index.json"
    if not path.is_file():
        raise FileNotFoundError(f"prepared-data index not found: {path}")
    index = json.loads(path.read_text())
    if index.get("version") != CACHE_VERSION:
        raise ValueError(f"unsupported cache version {index.get('version')} in {path}")
    return index


def read_cache(directory):
    directory = Path(directory)
    index = read_cache_index(directory)
    quads = []
    for fname in index["files"]:
        with np.load(directory / fname) as z:
            quads.append(ImageQuadruplet(lr=z["lr"], x2=z["x2"], x4=z["x4"], hr=z["hr"],
                                         identity=int(z["identity"]), name=str(z["name"])))
    return quads, index


def hash_arrays(arrays):
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def quads_to_tensors(quads, dtype=torch.float32):
    """Stack a list of quadruplets into batched tensors keyed by scale."""
    out = {}
    for key, attr in (("lr", "lr"), ("2x", "x2"), ("4x", "x4"), ("hr", "hr")):
        out[key] = torch.from_numpy(np.stack([getattr(q, attr) for q in quads])).to(dtype)
    out["identity"] = torch.tensor([q.identity for q in quads], dtype=torch.long)
    return out
