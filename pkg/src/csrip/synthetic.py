"""Procedural face-like images for desk-scale experiments.

Each identity owns a fixed set of facial parameters (geometry, colours, a
hair texture and a freckle pattern); individual images of one identity vary
by placement, scale, lighting, background and expression.
"""
from pathlib import Path

import numpy as np
from PIL import Image

SIZE = 192


def _soft(d, edge=0.8):
    # d: signed distance in pixels, negative inside
    return 1.0 / (1.0 + np.exp(np.clip(d / edge, -50, 50)))


def _ellipse(X, Y, cx, cy, rx, ry, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    u = (X - cx) * c + (Y - cy) * s
    v = -(X - cx) * s + (Y - cy) * c
    q = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    return _soft((q - 1.0) * min(rx, ry))


def _blend(canvas, mask, color):
    return canvas * (1 - mask[None]) + np.asarray(color, dtype=np.float64)[:, None, None] * mask[None]


def identity_params(rng):
    return {
        "skin": rng.uniform([150, 105, 80], [235, 190, 160]),
        "hair": rng.uniform([10, 5, 0], [120, 90, 70]),
        "hair_freq": rng.uniform(0.25, 0.6),
        "hair_angle": rng.uniform(-0.8, 0.8),
        "hairline": rng.uniform(0.25, 0.55),
        "face_rx": rng.uniform(48, 60),
        "face_ry": rng.uniform(62, 76),
        "eye_dx": rng.uniform(18, 28),
        "eye_y": rng.uniform(-14, -2),
        "eye_r": rng.uniform(5, 9),
        "iris": rng.uniform([20, 20, 20], [120, 140, 160]),
        "brow_h": rng.uniform(2, 5),
        "brow_tilt": rng.uniform(-0.3, 0.3),
        "nose_len": rng.uniform(10, 22),
        "nose_w": rng.uniform(4, 9),
        "mouth_y": rng.uniform(26, 40),
        "mouth_w": rng.uniform(12, 24),
        "mouth_h": rng.uniform(2.5, 6),
        "lips": rng.uniform([120, 40, 40], [210, 110, 110]),
        "freckles": rng.uniform([-35, -30], [35, 45], size=(int(rng.integers(3, 9)), 2)),
        "glasses": bool(rng.random() < 0.3),
    }


def render_face(p, rng, size=SIZE):
    """Render one RGB image (uint8, H x W x 3) for identity parameters ``p``."""
    Y, X = np.mgrid[0:size, 0:size].astype(np.float64)
    scale = rng.uniform(0.92, 1.08)
    cx = size / 2 + rng.uniform(-8, 8)
    cy = size / 2 + 6 + rng.uniform(-8, 8)
    gain = rng.uniform(0.85, 1.15)
    smile = rng.uniform(-0.4, 0.6)

    bg_a = rng.uniform(40, 230, size=3)
    bg_b = rng.uniform(40, 230, size=3)
    t = (X + Y) / (2 * size)
    canvas = bg_a[:, None, None] * (1 - t) + bg_b[:, None, None] * t

    rx, ry = p["face_rx"] * scale, p["face_ry"] * scale
    # hair: textured ellipse behind and above the face
    hair = _ellipse(X, Y, cx, cy - 0.25 * ry, rx * 1.18, ry * 1.05)
    stripes = 0.5 + 0.5 * np.sin(p["hair_freq"] * ((X - cx) * np.cos(p["hair_angle"])
                                                  + (Y - cy) * np.sin(p["hair_angle"])) / scale)
    hair_col = p["hair"][:, None, None] * (0.7 + 0.6 * stripes[None])
    canvas = canvas * (1 - hair[None]) + hair_col * hair[None]

    face = _ellipse(X, Y, cx, cy, rx, ry)
    canvas = _blend(canvas, face, p["skin"])
    # hairline band across the top of the face
    top = _soft((Y - (cy - ry + p["hairline"] * ry)) * 1.0) * face
    canvas = canvas * (1 - top[None]) + hair_col * top[None]

    for side in (-1, 1):
        ex = cx + side * p["eye_dx"] * scale
        ey = cy + p["eye_y"] * scale
        er = p["eye_r"] * scale
        canvas = _blend(canvas, _ellipse(X, Y, ex, ey, er * 1.6, er), [245, 245, 240])
        canvas = _blend(canvas, _ellipse(X, Y, ex, ey, er * 0.75, er * 0.75), p["iris"])
        canvas = _blend(canvas, _ellipse(X, Y, ex, ey, er * 0.3, er * 0.3), [10, 10, 10])
        brow = _ellipse(X, Y, ex, ey - 2.2 * er, er * 2.0, p["brow_h"] * scale,
                        angle=side * p["brow_tilt"])
        canvas = _blend(canvas, brow, p["hair"] * 0.8)
        if p["glasses"]:
            ring = _ellipse(X, Y, ex, ey, er * 2.3, er * 1.8) - _ellipse(X, Y, ex, ey, er * 2.0, er * 1.5)
            canvas = _blend(canvas, np.clip(ring, 0, 1), [30, 30, 30])

    nose = _ellipse(X, Y, cx, cy + p["nose_len"] * scale * 0.6, p["nose_w"] * scale,
                    p["nose_len"] * scale * 0.5)
    canvas = _blend(canvas, 0.35 * nose, p["skin"] * 0.7)

    my = cy + p["mouth_y"] * scale
    mw = p["mouth_w"] * scale
    curve = my - smile * 6 * (1 - ((X - cx) / mw) ** 2)
    mouth = _soft(np.abs(Y - curve) - p["mouth_h"] * scale / 2) * _soft(np.abs(X - cx) - mw)
    canvas = _blend(canvas, mouth, p["lips"])

    for fx, fy in p["freckles"]:
        dot = _ellipse(X, Y, cx + fx * scale, cy + fy * scale, 1.6 * scale, 1.6 * scale)
        canvas = _blend(canvas, 0.6 * dot * face, p["skin"] * 0.55)

    canvas = canvas * gain + rng.normal(0, 1.5, size=canvas.shape)
    img = np.clip(np.round(canvas), 0, 255).astype(np.uint8)
    return img.transpose(1, 2, 0)


def write_synthetic_dataset(root, num_identities=10, images_per_identity=40,
                            test_identities=0, test_images_per_identity=4, seed=0):
    """Write PNGs plus ``train.txt`` (and ``test.txt``) manifests under ``root``.

    Training identities are labelled ``0..K-1``; test identities get disjoint
    labels ``test_000`` and up.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    splits = [("train.txt", [str(k) for k in range(num_identities)], images_per_identity)]
    if test_identities:
        splits.append(("test.txt", [f"test_{k:03d}" for k in range(test_identities)],
                       test_images_per_identity))
    manifests = {}
    for manifest, labels, n_img in splits:
        lines = []
        for label in labels:
            p = identity_params(rng)
            (root / "images" / label).mkdir(parents=True, exist_ok=True)
            for i in range(n_img):
                rel = f"images/{label}/{i:03d}.png"
                Image.fromarray(render_face(p, rng)).save(root / rel)
                lines.append(f"{rel}\t{label}")
        (root / manifest).write_text("\n".join(lines) + "\n")
        manifests[manifest] = root / manifest
    return manifests
