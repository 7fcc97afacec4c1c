import math

import pytest

from csrip import ablation
from csrip.network import NetworkConfig
from csrip.prior import build_prior
from csrip.training import ABLATION_ROWS, Schedule

from conftest import make_face_quads


@pytest.fixture(scope="module")
def splits():
    return make_face_quads(2, 2, seed=1), make_face_quads(2, 1, seed=2), make_face_quads(2, 1, seed=3)


def test_five_rows_and_failed_row_marked(splits):
    train, val, test = splits
    sched = Schedule.stage2().with_max_epochs(1)
    # no priors: the identity row must fail while the others still report
    table = ablation.run_ablation(train, val, test, [0], NetworkConfig.desk(), sched, priors=None)
    assert [r.row for r in table.rows] == list(ABLATION_ROWS)
    assert len(table.summary()) == 5
    assert table.row("C-SRIP").status == "failed"
    for name in ("Baseline", "B+SSIM", "C+SSIM", "C+SSIM+M"):
        r = table.row(name)
        assert r.status == "ok" and math.isfinite(r.mean_ssim)
    lines = table.to_csv().splitlines()
    assert lines[0] == "row,seed,psnr_db,ssim,status,config_hash"
    assert len(lines) == 6 and "failed" in lines[-1]
    assert set(table.split_hashes) == {"train", "val", "test"}


def test_identity_row_with_priors(splits):
    train, val, test = splits
    priors = {j: build_prior(s, 2, 0.125).freeze() for j, s in (("2x", 48), ("4x", 96), ("hr", 192))}
    table = ablation.run_ablation(train, val, test, [0], NetworkConfig.desk(),
                                  Schedule.stage2().with_max_epochs(1), priors, rows=["C-SRIP"])
    assert table.row("C-SRIP").status == "ok"


def test_split_hash_sensitive(splits):
    train, _, _ = splits
    h = ablation.split_hash(train)
    assert h == ablation.split_hash(list(train))
    assert h != ablation.split_hash(train[:-1])
