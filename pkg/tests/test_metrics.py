import math

import numpy as np
import pytest
import torch

from hcmt.backbone import build_network
from hcmt.errors import ShapeError
from hcmt.metrics import (
    CaseScore,
    aggregate,
    dice_jaccard,
    extract_surface,
    format_table,
    read_case_csv,
    score_case,
    sliding_window_predict,
    surface_distances,
    write_case_csv,
)
from oracles import random_mask_pair, surface_distances_ref, surface_voxels_ref


def test_dice_jaccard_examples():
    m = np.zeros((4, 4, 4), bool)
    m[1:3, 1:3, 1] = True
    assert dice_jaccard(m, m) == (100.0, 100.0)
    other = np.zeros_like(m)
    other[0, 0, 0] = True
    assert dice_jaccard(m, other) == (0.0, 0.0)
    p = np.zeros(8, bool)
    g = np.zeros(8, bool)
    p[:4] = True
    g[2:6] = True
    d, j = dice_jaccard(p.reshape(2, 2, 2), g.reshape(2, 2, 2))
    assert d == pytest.approx(50.0)
    assert j == pytest.approx(100 / 3)
    assert dice_jaccard(np.zeros((2, 2, 2)), np.zeros((2, 2, 2))) == (100.0, 100.0)
    with pytest.raises(ShapeError):
        dice_jaccard(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_surface_single_voxel():
    m = np.zeros((5, 5, 5), bool)
    m[2, 2, 2] = True
    assert np.array_equal(extract_surface(m), m)


def test_surface_cube_has_26_voxels():
    m = np.zeros((7, 7, 7), bool)
    m[2:5, 2:5, 2:5] = True
    s = extract_surface(m)
    assert s.sum() == 26
    assert not s[3, 3, 3]


def test_surface_full_grid_is_border_shell():
    s = extract_surface(np.ones((5, 6, 7), bool))
    shell = np.ones((5, 6, 7), bool)
    shell[1:-1, 1:-1, 1:-1] = False
    assert np.array_equal(s, shell)


def test_surface_empty():
    assert not extract_surface(np.zeros((3, 3, 3))).any()


def test_surface_matches_bruteforce(rng):
    for _ in range(20):
        m, _ = random_mask_pair(rng, 8)
        pts = {tuple(int(v) for v in p) for p in surface_voxels_ref(m)}
        assert pts == set(zip(*np.nonzero(extract_surface(m))))


def test_distances_identical():
    m = np.zeros((6, 6, 6), bool)
    m[1:4, 2:5, 1:3] = True
    assert surface_distances(m, m) == (0.0, 0.0)


def test_distances_single_voxels():
    a = np.zeros((8, 8, 8), bool)
    b = np.zeros((8, 8, 8), bool)
    a[1, 4, 4] = True
    b[4, 4, 4] = True
    assert surface_distances(a, b) == (3.0, 3.0)


def test_distances_offset_cubes_match_oracle():
    a = np.zeros((10, 10, 10), bool)
    b = np.zeros((10, 10, 10), bool)
    a[2:6, 2:6, 2:6] = True
    b[4:8, 2:6, 2:6] = True
    got = surface_distances(a, b)
    ref = surface_distances_ref(a, b)
    assert got[0] == pytest.approx(ref[0], abs=1e-12)
    assert got[1] == pytest.approx(ref[1], abs=1e-12)


def test_distances_empty_mask_is_undefined():
    a = np.zeros((4, 4, 4), bool)
    b = a.copy()
    b[1, 1, 1] = True
    asd, hd = surface_distances(a, b)
    assert math.isnan(asd) and math.isnan(hd)


def test_spacing_aware_distances():
    a = np.zeros((8, 8, 8), bool)
    b = np.zeros((8, 8, 8), bool)
    a[1, 4, 4] = True
    b[4, 4, 4] = True
    assert surface_distances(a, b, spacing=(2.0, 1.0, 1.0)) == (6.0, 6.0)


def test_symmetry_and_translation(rng):
    for _ in range(20):
        p, g = random_mask_pair(rng, 8)
        assert surface_distances(p, g) == surface_distances(g, p)
        pad = [(0, 3)] * 3
        pp = np.roll(np.pad(p, pad), (1, 2, 3), axis=(0, 1, 2))
        gg = np.roll(np.pad(g, pad), (1, 2, 3), axis=(0, 1, 2))
        assert dice_jaccard(pp, gg) == dice_jaccard(p, g)
        # shifting away from the grid border changes which voxels touch it, so
        # compare shifted copies against each other rather than the originals
        ppp = np.roll(pp, (1, 0, 0), axis=(0, 1, 2))
        ggg = np.roll(gg, (1, 0, 0), axis=(0, 1, 2))
        assert surface_distances(ppp, ggg) == pytest.approx(surface_distances(pp, gg), abs=1e-12)


def test_oracle_equivalence_random(rng):
    for _ in range(40):
        p, g = random_mask_pair(rng, 12)
        got = surface_distances(p, g)
        ref = surface_distances_ref(p, g)
        assert got[0] == pytest.approx(ref[0], abs=1e-9)
        assert got[1] == pytest.approx(ref[1], abs=1e-9)
        d, j = dice_jaccard(p, g)
        assert j / 100 == pytest.approx((d / 100) / (2 - d / 100), abs=1e-9)
        assert 0 <= j <= d <= 100


def test_score_case_flags_empty_prediction():
    g = np.zeros((4, 4, 4), bool)
    g[1:3, 1:3, 1:3] = True
    s = score_case(np.zeros_like(g), g, "c1")
    assert s.flag == "empty_prediction"
    assert not s.distances_defined
    assert s.dice == 0.0


def test_aggregate_policies():
    scores = [CaseScore("a", 80, 66.7, 2.0, 4.0), CaseScore("b", 0, 0, math.nan, math.nan, "empty_prediction")]
    agg = aggregate(scores)
    assert agg["dice"] == 40 and agg["asd"] == 2.0 and agg["n_undefined"] == 1
    agg = aggregate(scores, "penalty:10")
    assert agg["asd"] == 6.0 and agg["hd95"] == 7.0


def test_case_csv_sentinel(tmp_path):
    scores = [CaseScore("a", 80, 66.7, 2.0, 4.0), CaseScore("b", 0, 0, math.nan, math.nan, "empty_prediction")]
    rows = read_case_csv(write_case_csv(tmp_path / "m.csv", scores))
    assert rows[1]["asd"] == "undefined" and rows[1]["flag"] == "empty_prediction"
    rows = read_case_csv(write_case_csv(tmp_path / "m2.csv", scores, ("dice", "jaccard")))
    assert set(rows[0]) == {"case_id", "dice", "jaccard", "flag"}


def test_format_table_columns():
    text = format_table({"MT + HU + HS": {"dice": 90.04, "jaccard": 81.98, "asd": 2.18, "hd95": 6.93}})
    header, row = text.splitlines()
    assert header.split()[1:] == ["Dice(%)", "Jaccard(%)", "ASD", "95HD"]
    assert row.split()[-4:] == ["90.04", "81.98", "2.18", "6.93"]


# ---------------------------------------------------------------- sliding window

class ConstantNet(torch.nn.Module):
    """Fixed logits everywhere; ``fg`` chooses which class wins."""

    def __init__(self, fg=True):
        super().__init__()
        self.fg = fg
        self.dummy = torch.nn.Parameter(torch.zeros(1))

    def forward(self, x):
        z = torch.zeros(x.shape[0], 2, *x.shape[2:])
        z[:, 1 if self.fg else 0] = 1.0
        return [z]


class CornerNet(torch.nn.Module):
    """Foreground probability given by the patch's own intensities."""

    def __init__(self):
        super().__init__()
        self.dummy = torch.nn.Parameter(torch.zeros(1))

    def forward(self, x):
        p = x[:, :1].clamp(1e-6, 1 - 1e-6)
        return [torch.cat([torch.log(1 - p), torch.log(p)], 1)]


@pytest.mark.parametrize("stride", [(4, 4, 4), (2, 3, 4), (1, 1, 1)])
def test_constant_net_gives_constant_mask(stride):
    mask, probs, _ = sliding_window_predict(ConstantNet(True), np.zeros((8, 12, 10)), (4, 4, 4), stride)
    assert mask.all()
    mask, _, _ = sliding_window_predict(ConstantNet(False), np.zeros((8, 12, 10)), (4, 4, 4), stride)
    assert not mask.any()


def test_non_overlapping_tiling_equals_per_patch(rng):
    vol = rng.random((8, 8, 8))
    _, probs, _ = sliding_window_predict(CornerNet(), vol, (4, 4, 4), (4, 4, 4))
    assert np.allclose(probs[1], np.clip(vol, 1e-6, 1 - 1e-6), atol=1e-6)


def test_overlap_averaging():
    class PatchIndexNet(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.calls = 0
            self.dummy = torch.nn.Parameter(torch.zeros(1))

        def forward(self, x):
            p = 0.4 if self.calls == 0 else 0.8
            self.calls += 1
            z = torch.empty(1, 2, *x.shape[2:])
            z[:, 0] = math.log(1 - p)
            z[:, 1] = math.log(p)
            return [z]

    _, probs, _ = sliding_window_predict(PatchIndexNet(), np.zeros((4, 4, 6)), (4, 4, 4), (4, 4, 2))
    assert probs[1, 0, 0, 0] == pytest.approx(0.4)
    assert probs[1, 0, 0, 2] == pytest.approx(0.6)
    assert probs[1, 0, 0, 5] == pytest.approx(0.8)


def test_small_volume_padded_and_flagged():
    mask, probs, info = sliding_window_predict(ConstantNet(True), np.zeros((3, 8, 8)), (4, 4, 4))
    assert info["padded"]
    assert mask.shape == (3, 8, 8)
    assert probs.shape == (2, 3, 8, 8)


def test_stride_validation():
    with pytest.raises(ShapeError):
        sliding_window_predict(ConstantNet(), np.zeros((8, 8, 8)), (4, 4, 4), (5, 4, 4))


def test_real_network_covers_volume(tiny_spec):
    net = build_network(tiny_spec, 0).train()
    mask, probs, _ = sliding_window_predict(net, np.random.default_rng(0).normal(size=(12, 16, 8)), (8, 8, 8))
    assert mask.shape == (12, 16, 8)
    assert np.allclose(probs.sum(0), 1, atol=1e-5)
    assert net.training
