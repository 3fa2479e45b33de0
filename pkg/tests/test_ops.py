import time

import numpy as np
import pytest
import torch

from oracles import (
    dense_conv,
    dense_h0,
    dense_hn,
    dense_masked,
    dense_shuffle,
    dense_tconv,
    rel_err,
    rows_at,
)
from spherecodec.healpix import MISSING, InvalidResolutionError, build_grid
from spherecodec.ops import (
    PatchFrame,
    conv_down4,
    conv_h0,
    conv_h1,
    conv_hn,
    extract_patch,
    masked_conv_h1,
    shuffle_up4,
    tconv_up4,
)

SEEDS = range(20)
torch.set_default_dtype(torch.float64)


def rand(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


def vec(t):
    return t.detach().numpy().reshape(-1)


@pytest.mark.parametrize("n_side", [2, 4])
@pytest.mark.parametrize("seed", SEEDS)
def test_dense_oracles(n_side, seed):
    g = torch.Generator().manual_seed(seed)
    grid = build_grid(n_side)
    table = grid.neighbor_table
    n = grid.n_pix
    l_in, l_out = 2, 3
    x = rand(g, n, l_in)
    xv = vec(x)

    w0 = rand(g, l_in, l_out)
    assert rel_err(vec(conv_h0(x, w0)), dense_h0(n, w0.numpy()) @ xv) <= 1e-12

    w = rand(g, 9, l_in, l_out)
    assert rel_err(vec(conv_h1(x, grid, w)), dense_conv(table, w.numpy()) @ xv) <= 1e-12

    ws = [rand(g, 9, l_in, l_out), rand(g, 9, l_out, l_out), rand(g, 9, l_out, l_out)]
    hn = dense_hn(table, [v.numpy() for v in ws])
    assert rel_err(vec(conv_hn(x, grid, ws)), hn @ xv) <= 1e-12

    child0 = range(0, n, 4)
    assert rel_err(vec(conv_down4(x, grid, ws)), rows_at(hn, child0, l_out) @ xv) <= 1e-12
    pool = np.kron(np.kron(np.eye(n // 4), np.full((1, 4), 0.25)), np.eye(l_out))
    assert rel_err(vec(conv_down4(x, grid, ws, mode="pool")), pool @ hn @ xv) <= 1e-12

    wm = rand(g, 8, l_in, l_out)
    assert rel_err(vec(masked_conv_h1(x, grid, wm)), dense_masked(table, wm.numpy()) @ xv) <= 1e-12

    fine = build_grid(2 * n_side).neighbor_table
    assert rel_err(vec(tconv_up4(x, grid, w)), dense_tconv(fine, w.numpy()) @ xv) <= 1e-12

    ws4 = rand(g, 9, l_in, 4 * l_out)
    assert rel_err(vec(shuffle_up4(x, grid, ws4)), dense_shuffle(table, ws4.numpy()) @ xv) <= 1e-12


def test_identity_and_constant_cases():
    grid = build_grid(2)
    x = torch.randn(48, 3)
    w = torch.zeros(9, 3, 3)
    w[0] = torch.eye(3)
    assert torch.equal(conv_h1(x, grid, w), x)
    assert torch.equal(conv_h0(x, torch.eye(3)), x)
    assert torch.equal(conv_down4(x, grid, w), x[::4])

    ones = torch.ones(9, 1, 1)
    out = conv_h1(torch.full((48, 1), 2.0), grid, ones)[:, 0]
    counts = (grid.neighbor_table != MISSING).sum(1)
    assert torch.equal(out, torch.from_numpy(2.0 * (counts + 1)).double())
    assert int((out == 16.0).sum()) == 24


def test_h0_is_h1_without_neighbors():
    grid = build_grid(4)
    x = torch.randn(192, 2)
    w0 = torch.randn(2, 5)
    w = torch.zeros(9, 2, 5)
    w[0] = w0
    b = torch.randn(5)
    assert torch.allclose(conv_h0(x, w0, b), conv_h1(x, grid, w, b), atol=1e-14)


def test_hn_reduces_to_h1_and_receptive_field():
    grid = build_grid(4)
    w = torch.randn(9, 1, 1)
    x = torch.randn(192, 1)
    assert torch.equal(conv_hn(x, grid, [w]), conv_h1(x, grid, w))

    table = grid.neighbor_table
    p = 37
    ring1 = {p} | {int(q) for q in table[p] if q != MISSING}
    ring2 = set(ring1)
    for q in ring1:
        ring2 |= {int(r) for r in table[q] if r != MISSING}
    delta = torch.zeros(192, 1)
    delta[p] = 1.0
    ws = [torch.rand(9, 1, 1) + 0.1, torch.rand(9, 1, 1) + 0.1]
    support = set(torch.nonzero(conv_hn(delta, grid, ws)[:, 0]).flatten().tolist())
    assert support == ring2


def test_linearity():
    grid = build_grid(4)
    g = torch.Generator().manual_seed(3)
    x, y = rand(g, 2, 192, 3).unbind(0)
    a, b = 0.7, -1.9
    w = rand(g, 9, 3, 4)
    wm = rand(g, 8, 3, 4)
    ws = [w, rand(g, 9, 4, 4)]
    ops = [
        lambda t: conv_h1(t, grid, w),
        lambda t: conv_hn(t, grid, ws),
        lambda t: conv_down4(t, grid, ws),
        lambda t: masked_conv_h1(t, grid, wm),
        lambda t: tconv_up4(t, grid, w),
        lambda t: shuffle_up4(t, grid, rand(torch.Generator().manual_seed(9), 9, 3, 8)),
    ]
    for op in ops:
        assert rel_err(op(a * x + b * y), a * op(x) + b * op(y)) <= 1e-12


def test_masked_conv_examples_and_causality():
    grid = build_grid(2)
    w = torch.ones(8, 1, 1)
    bias = torch.tensor([0.5])
    for i in range(48):
        delta_sets = set()
        for j in range(48):
            x = torch.zeros(48, 1)
            x[j] = 1.0
            if masked_conv_h1(x, grid, w)[i, 0] != 0:
                delta_sets.add(j)
        expected = {int(j) for j in grid.neighbor_table[i] if 0 <= j < i}
        assert delta_sets == expected
    six = {int(j) for j in grid.neighbor_table[6] if 0 <= j < 6}
    assert {1, 3, 4, 5} <= six
    x = torch.randn(48, 1)
    assert masked_conv_h1(x, grid, w, bias)[0, 0] == 0.5

    a = dense_masked(grid.neighbor_table, np.random.default_rng(0).normal(size=(8, 1, 1)))
    assert np.all(np.triu(a) == 0)


def test_masked_conv_exhaustive_perturbation():
    grid = build_grid(2)
    g = torch.Generator().manual_seed(0)
    w = rand(g, 8, 2, 3)
    x = rand(g, 48, 2)
    base = masked_conv_h1(x, grid, w)
    for j in range(48):
        x2 = x.clone()
        x2[j:] = rand(g, 48 - j, 2) * 100
        out = masked_conv_h1(x2, grid, w)
        assert torch.equal(out[: j + 1], base[: j + 1])


def test_tconv_footprint_and_zero_kernel():
    grid = build_grid(2)
    fine = build_grid(4)
    assert torch.equal(tconv_up4(torch.randn(48, 2), grid, torch.zeros(9, 2, 3), torch.zeros(3)), torch.zeros(192, 3))
    for i in [0, 5, 17, 47]:
        x = torch.zeros(48, 1)
        x[i] = 1.0
        out = tconv_up4(x, grid, torch.ones(9, 1, 1))[:, 0]
        expected = {4 * i} | {int(j) for j in fine.neighbor_table[4 * i] if j != MISSING}
        assert set(torch.nonzero(out).flatten().tolist()) == expected
        assert torch.all(out[list(expected)] == 1.0)


def test_tconv_adjoint_of_strided_gather():
    grid = build_grid(2)
    fine = build_grid(4)
    w = np.random.default_rng(1).normal(size=(9, 3, 2))
    wt = torch.from_numpy(w)
    a_tconv = dense_tconv(fine.neighbor_table, w)
    # gather reading fine pixel 4i and its neighbors with transposed weights
    w_adj = np.transpose(w, (0, 2, 1))
    a_gather = rows_at(dense_conv(fine.neighbor_table, w_adj), range(0, 192, 4), 3)
    assert rel_err(a_tconv, a_gather.T) <= 1e-15
    # and the strided conv_down4 realizes that gather
    y = torch.randn(192, 2)
    assert rel_err(vec(conv_down4(y, fine, torch.from_numpy(w_adj))), a_gather @ vec(y)) <= 1e-12
    assert wt.shape == (9, 3, 2)


def test_shuffle_rearrangement():
    grid = build_grid(2)
    w = torch.zeros(9, 1, 4)
    w[0, 0] = torch.tensor([1.0, 2.0, 3.0, 4.0])
    out = shuffle_up4(torch.ones(48, 1), grid, w)
    assert out.shape == (192, 1)
    assert torch.equal(out[:, 0], torch.tensor([1.0, 2.0, 3.0, 4.0]).repeat(48))
    with pytest.raises(ValueError):
        shuffle_up4(torch.ones(48, 1), grid, torch.zeros(9, 1, 6))


def test_shape_and_resolution_errors():
    grid = build_grid(2)
    with pytest.raises(ValueError):
        conv_h1(torch.zeros(48, 2), grid, torch.zeros(9, 3, 1))
    with pytest.raises(ValueError):
        conv_h1(torch.zeros(40, 2), grid, torch.zeros(9, 2, 1))
    with pytest.raises(ValueError):
        conv_h0(torch.zeros(48, 2), torch.zeros(3, 1))
    with pytest.raises(ValueError):
        masked_conv_h1(torch.zeros(48, 2), grid, torch.zeros(9, 2, 1))
    with pytest.raises(ValueError):
        conv_hn(torch.zeros(48, 2), grid, [])
    with pytest.raises(InvalidResolutionError):
        conv_down4(torch.zeros(12, 1), build_grid(1), torch.zeros(9, 1, 1))
    with pytest.raises(ValueError):
        conv_down4(torch.zeros(48, 1), grid, torch.zeros(9, 1, 1), mode="max")


def test_batch_dimensions():
    grid = build_grid(2)
    x = torch.randn(5, 48, 2)
    w = torch.randn(9, 2, 3)
    out = conv_h1(x, grid, w)
    for b in range(5):
        assert torch.allclose(out[b], conv_h1(x[b], grid, w))


def test_extract_patch_sizes_and_errors():
    x = torch.randn(12 * 16 * 16, 1)
    p, frame = extract_patch(x, 16, 7, 0)
    assert p.shape == (1, 1) and frame.start == 7
    big = torch.zeros(12 * 256 * 256, 1)
    p, frame = extract_patch(big, 256, 11, 8)
    assert p.shape[0] == 65536 and frame.start == 11 * 65536
    with pytest.raises(IndexError):
        extract_patch(x, 16, 12, 4)
    with pytest.raises(IndexError):
        extract_patch(x, 16, 0, 5)
    with pytest.raises(ValueError):
        extract_patch(x, 8, 0, 1)


@pytest.mark.parametrize("root,depth", [(0, 1), (5, 2), (11, 3), (13, 2)])
def test_patch_matches_global_with_outside_masked(root, depth):
    n_side = 8
    grid = build_grid(n_side)
    g = torch.Generator().manual_seed(root)
    x = rand(g, grid.n_pix, 2)
    w = rand(g, 9, 2, 2)
    patch, frame = extract_patch(x, n_side, root, depth)
    lo, hi = frame.start, frame.start + frame.n_pix
    full = dense_conv(grid.neighbor_table, w.numpy())
    keep = np.zeros(grid.n_pix * 2, dtype=bool)
    keep[2 * lo : 2 * hi] = True
    oracle = full[np.ix_(keep, keep)] @ vec(patch)
    assert rel_err(vec(conv_h1(patch, frame, w)), oracle) <= 1e-12

    # interior pixels agree with the full-sphere convolution exactly
    glob = conv_h1(x, grid, w)[lo:hi]
    loc = conv_h1(patch, frame, w)
    table = grid.neighbor_table[lo:hi]
    interior = np.all((table == MISSING) | ((table >= lo) & (table < hi)), axis=1)
    assert interior.any() or depth < 2
    assert torch.allclose(loc[interior], glob[interior], rtol=0, atol=1e-12)

    # coarsen / refine through a patch
    down = conv_down4(patch, frame, w)
    assert down.shape[0] == frame.n_pix // 4
    up = tconv_up4(patch, frame, w)
    assert up.shape[0] == frame.n_pix * 4
    assert frame.coarser().finer() == frame


def test_patch_tconv_matches_restricted_global():
    coarse = PatchFrame(4, 3, 1)
    fine_grid = build_grid(8)
    g = torch.Generator().manual_seed(4)
    w = rand(g, 9, 2, 2)
    x = rand(g, 4, 2)
    full_x = torch.zeros(192, 2)
    full_x[12:16] = x
    glob = tconv_up4(full_x, build_grid(4), w)[48:64]
    # fine neighbors of 4i that leave the fine patch get dropped
    dropped = torch.zeros(16, 2)
    for i in range(4):
        for k, t in enumerate(fine_grid.neighbor_table[48 + 4 * i]):
            if t != MISSING and not 48 <= t < 64:
                continue
            if t != MISSING:
                dropped[t - 48] += x[i] @ w[k + 1]
        dropped[4 * i] += x[i] @ w[0]
    loc = tconv_up4(x, coarse, w)
    assert torch.allclose(loc, dropped, atol=1e-12)
    assert glob.shape == loc.shape


def _best_time(fn, repeats=7):
    best = float("inf")
    for _ in range(repeats):
        # CPU time, so scheduler throttling of the sandbox does not count
        t0 = time.process_time()
        fn()
        best = min(best, time.process_time() - t0)
    return best


def test_linear_cost_scaling():
    # 16x the pixels: linear cost gives a ratio near 16, quadratic near 256;
    # allocator page faults can double the large case in some processes
    torch.manual_seed(0)
    w = torch.randn(9, 8, 8)
    times = {}
    for n_side in (32, 128):
        grid = build_grid(n_side)
        x = torch.randn(grid.n_pix, 8)
        conv_h1(x, grid, w)
        times[n_side] = _best_time(lambda: conv_h1(x, grid, w), repeats=15)
    assert times[128] / times[32] <= 16 * 4.0
