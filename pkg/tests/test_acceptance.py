"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are collected and echoed in the terminal summary (see conftest),
so they show up in a plain ``pytest -v`` run without ``-s``.
"""
import time

import numpy as np
import pytest

from spackle import training as T
from spackle.cli import main as cli_main
from spackle.dataset_io import generate_synthetic, load_dataset, save_dataset
from spackle.hexgrid import HexIndex, hex_neighbors
from spackle.masking import sample_mask, stream_rng
from spackle.model import ModelConfig, complete_spot, forward, init_params
from spackle.neighborhoods import block_table, build_block
from spackle.preprocess import median_complete, morans_i, normalize, rank_genes

from conftest import finite_difference_errors, make_dataset, record
from test_neighborhoods import bfs_hops
from test_preprocess import moran_oracle, with_values

# end-to-end run shared by criteria 6 and 7
E2E_DATA = dict(num_slides=2, rows=30, cols=30, g=32, dropout_rate=0.3, smoothness_length=4.0, seed=7)
E2E_BATCH = 32
E2E_ITERATIONS = 10_000
SWEEP_RHOS = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]
SWEEP_SEED = 123


def test_c01_gradient_check():
    start = time.perf_counter()
    errors = finite_difference_errors(ModelConfig(g=4, d_k=8, num_layers=1, num_heads=2, ffn_dim=16,
                                                  dtype="float64"))
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and elapsed < 30
    record(1, ok, f"max rel err {errors[worst]:.2e} ({worst}), {elapsed:.1f}s")
    assert ok


def test_c02_kept_centers_bitwise():
    rng = np.random.default_rng(20)
    g = 5
    ds, prov = median_complete(normalize(generate_synthetic(2, 8, 8, g, 0.3, 3.0, seed=2)))
    table = block_table(ds)
    blocks = [build_block(ds, prov, i, table=table) for i in range(ds.num_spots)]
    configs = []
    for k in range(4):
        cfg = ModelConfig(g=g, d_k=8, num_layers=1, num_heads=2, ffn_dim=16,
                          gene_center=tuple(rng.normal(size=g)) if k % 2 else None,
                          gene_scale=tuple(rng.uniform(0.5, 2.0, g)) if k % 2 else None)
        configs.append((cfg, init_params(cfg, k)))
    violations = 0
    for trial in range(10_000):
        block = blocks[trial % len(blocks)]
        cfg, params = configs[trial % len(configs)]
        mask = sample_mask(block, float(rng.uniform(0.0, 1.0)), rng)
        out = complete_spot(block, mask, params, cfg)
        kept = mask.m[:, 0]
        violations += int(out[kept].tobytes() != block.values[kept, 0].tobytes())
    record(2, violations == 0, f"{violations} violations in 10^4 pairs")
    assert violations == 0


def test_c03_mask_legality_and_fraction():
    ds, prov = median_complete(normalize(generate_synthetic(2, 12, 12, 8, 0.3, 4.0, seed=3)))
    table = block_table(ds)
    blocks = [build_block(ds, prov, i, table=table) for i in range(ds.num_spots)]
    details, ok = [], True
    for rho in (0.1, 0.3, 0.7):
        rng = stream_rng(31, int(rho * 10))
        illegal = hidden = real = 0
        for i in range(10_000):
            b = blocks[i % len(blocks)]
            m = sample_mask(b, rho, rng)
            illegal += int((~m.m & ~b.real_mask).sum())
            hidden += int((~m.m).sum())
            real += int(b.real_mask.sum())
        frac = hidden / real
        ok &= illegal == 0 and abs(frac - rho) <= 0.01
        details.append(f"rho={rho}: frac {frac:.4f}, illegal {illegal}")
    record(3, ok, "; ".join(details))
    assert ok


def test_c04_hex_geometry():
    rows = cols = 10
    positions = [(r, c) for r in range(rows) for c in range(cols)]
    rr, cc = zip(*positions)
    index = HexIndex.from_positions("A", rr, cc, range(len(positions)))
    mismatches = 0
    for r, c in positions:
        dist = bfs_hops((r, c), rows, cols)
        for hops in (1, 2):
            got = set(hex_neighbors(index, r, c, hops))
            want = {j for j, p in enumerate(positions) if 1 <= dist[p] <= hops}
            mismatches += got != want
    counts = {(len(hex_neighbors(index, r, c, 1)), len(hex_neighbors(index, r, c, 2)))
              for r, c in positions if 2 <= r < rows - 2 and 2 <= c < cols - 2}
    ok = mismatches == 0 and counts == {(6, 18)}
    record(4, ok, f"{mismatches} ring mismatches over 100 centers x 2 radii; interior counts {sorted(counts)}")
    assert ok


def test_c05_moran_oracle_and_ordering():
    worst = 0.0
    for seed in range(40):
        rng = np.random.default_rng(seed)
        shapes = [(5, 5), (4, 6)] if seed % 2 else [(7, 7)]
        ds = make_dataset(shapes, 2, seed=seed, dropout=0.2 * (seed % 3))
        assert ds.num_spots <= 50
        ds = with_values(ds, rng.normal(size=(ds.num_spots, 2)), ds.observed)
        for j in range(2):
            want = moran_oracle(ds, j)
            if want is not None:
                worst = max(worst, abs(morans_i(ds, j) - want))
    wins = 0
    for trial in range(100):
        raw = generate_synthetic(1, 7, 7, 1, 0.0, 4.0, seed=trial)
        ds = raw.replace(expression=np.log1p(raw.raw_counts.astype(float)), normalization_applied=True)
        perm = np.random.default_rng(10_000 + trial).permutation(ds.num_spots)
        wins += morans_i(ds, 0) > morans_i(ds.replace(expression=ds.expression[perm]), 0)
    ok = worst < 1e-10 and wins >= 95
    record(5, ok, f"max oracle deviation {worst:.1e}; smooth beats permuted {wins}/100")
    assert ok


@pytest.fixture(scope="module")
def end_to_end():
    ds = normalize(generate_synthetic(**E2E_DATA))
    ds, prov = median_complete(ds)
    tc = T.TrainConfig(batch_size=E2E_BATCH, max_iterations=E2E_ITERATIONS, learning_rate=1e-3, rho=0.3,
                       val_every=250, seed=0)
    start = time.perf_counter()
    ck = T.train(ds, prov, ModelConfig(g=ds.g), tc)
    pairs = T.corruption_sweep(ck, ds, prov, SWEEP_RHOS, SWEEP_SEED)
    return ck, pairs, time.perf_counter() - start


@pytest.mark.slow
def test_c06_beats_median(end_to_end):
    ds = normalize(generate_synthetic(**E2E_DATA))
    moran = [s.i_statistic for s in rank_genes(ds)]
    structured = sum(i > 0.3 for i in moran)
    _, pairs, elapsed = end_to_end
    s, m = pairs[SWEEP_RHOS.index(0.3)]
    ratio = s.mse / m.mse
    ok = ratio <= 0.75 and elapsed < 15 * 60 and structured > len(moran) / 2
    record(6, ok, f"spackle/median MSE at rho=0.3: {s.mse:.4f}/{m.mse:.4f} = {ratio:.3f}; "
                  f"{structured}/{len(moran)} genes with I>0.3; train+sweep {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_c07_widening_gap(end_to_end):
    _, pairs, _ = end_to_end
    gap = {s.rho: m.mse / s.mse for s, m in pairs}
    ok = gap[0.7] > gap[0.1]
    curve = ", ".join(f"{r}:{gap[r]:.3f}" for r in SWEEP_RHOS)
    record(7, ok, f"median/spackle MSE ratio by rho: {curve}")
    assert ok


def _cli_run(root, tag):
    out = root / tag
    data = out / "data"
    steps = [
        ["synth", "--slides", 2, "--rows", 8, "--cols", 8, "--genes", 6, "--dropout", 0.3, "--seed", 5,
         "--out", data / "raw"],
        ["normalize", "--data", data / "raw", "--out", data / "norm"],
        ["median-complete", "--data", data / "norm", "--out", data / "med"],
        ["train", "--data", data / "med", "--d-k", 16, "--heads", 2, "--layers", 1, "--batch-size", 16,
         "--iterations", 60, "--val-every", 20, "--seed", 3, "--out", out / "run"],
        ["sweep", "--data", data / "med", "--checkpoint", out / "run" / "checkpoint.ckpt", "--seed", 4,
         "--out", out / "sweep"],
    ]
    for argv in steps:
        assert cli_main([str(a) for a in argv]) == 0
    return (out / "run" / "checkpoint.ckpt").read_bytes(), (out / "sweep" / "sweep.tsv").read_bytes()


def test_c08_reproducible_runs(tmp_path):
    ck_a, sweep_a = _cli_run(tmp_path, "a")
    ck_b, sweep_b = _cli_run(tmp_path, "b")
    ok = ck_a == ck_b and sweep_a == sweep_b
    record(8, ok, f"checkpoint {len(ck_a)} bytes identical={ck_a == ck_b}; "
                  f"sweep.tsv identical={sweep_a == sweep_b}")
    assert ok


def test_c09_io_round_trip(tmp_path):
    rng = np.random.default_rng(99)
    failures = 0
    for k in range(100):
        ds = generate_synthetic(int(rng.integers(1, 4)), int(rng.integers(5, 9)), int(rng.integers(5, 9)),
                                int(rng.integers(1, 6)), float(rng.uniform(0, 0.9)), float(rng.uniform(1, 6)),
                                seed=int(rng.integers(2**31)))
        if k % 3 == 1:
            ds = normalize(ds, drop_empty_spots=True)
        if k % 3 == 2:
            ds = median_complete(normalize(ds, drop_empty_spots=True))[0]
        save_dataset(ds, tmp_path / str(k))
        failures += load_dataset(tmp_path / str(k)) != ds
    record(9, failures == 0, f"{100 - failures}/100 datasets round-trip exactly")
    assert failures == 0


def test_c10_permutation_equivariance():
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        cfg = ModelConfig(g=6, d_k=16, num_layers=2, num_heads=4, dtype="float64")
        params = init_params(cfg, seed)
        presence = np.ones(19, bool)
        presence[rng.choice(np.arange(1, 19), size=seed, replace=False)] = False
        values = rng.normal(size=(6, 19)) * presence
        perm = np.concatenate([[0], 1 + rng.permutation(18)])
        out = forward(params, cfg, values, presence)
        out_p = forward(params, cfg, values[:, perm], presence[perm])
        keep = presence[perm]
        worst = max(worst, float(np.max(np.abs(out_p[:, keep] - out[:, perm][:, keep]))))
    record(10, worst < 1e-9, f"max abs deviation {worst:.1e}")
    assert worst < 1e-9
