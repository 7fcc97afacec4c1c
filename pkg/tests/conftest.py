import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def dense_correlate_reflect(img, kernel):
    """Brute-force channelwise correlation with reflect padding (no edge repeat)."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    c, h, w = img.shape
    padded = np.pad(img, ((0, 0), (ph, ph), (pw, pw)), mode="reflect")
    out = np.zeros_like(img, dtype=np.float64)
    for dy in range(kh):
        for dx in range(kw):
            out += kernel[dy, dx] * padded[:, dy:dy + h, dx:dx + w]
    return out


def gaussian_formula_kernel(size, sigma):
    r = size // 2
    y, x = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    g = np.exp(-(x ** 2 + y ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def make_face_quads(num_ids, per_id, seed=0, name_prefix="img"):
    """Small in-memory quadruplet set built from procedural faces."""
    from csrip import data, synthetic

    rng = np.random.default_rng(seed)
    quads = []
    for k in range(num_ids):
        p = synthetic.identity_params(rng)
        for i in range(per_id):
            hr = synthetic.render_face(p, rng).astype(np.float64).transpose(2, 0, 1)
            quads.append(data.make_quadruplet(hr, k, f"{name_prefix}_{k:02d}_{i:02d}"))
    return quads


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(line)
