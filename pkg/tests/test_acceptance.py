"""Acceptance criteria A1-A8, each at its stated tolerance and time budget.

Every criterion records one ``A<n> PASS|FAIL ...`` line, printed in the
terminal summary.  A4, A5 and A8 share one trained direct toy network.
"""

import io
import time

import numpy as np
import pytest

from basisconv import basis as bs
from basisconv import cli
from basisconv import cost
from basisconv import network as nw
from basisconv.compress import compress_model, read_sweep_csv, retained_percent
from basisconv.cost import LayerDims
from basisconv.data import channel_normalize, synth_split
from basisconv.layer import BasisConvLayer, ConvLayer, forward_basis, to_basis_layer
from basisconv.serialize import model_bytes, parse_model, save_model
from basisconv.tensor import conv_bank, count_mults
import gradcheck

VERDICTS = {}

# shared budget for both toy nets in A4/A5
EPOCHS = 15
SCHEDULE = [(0, 0.007), (12, 0.0007)]
BATCH = 32


def verdict(key, ok, detail, elapsed, budget):
    in_time = elapsed < budget
    status = "PASS" if ok and in_time else "FAIL"
    VERDICTS[key] = f"{key} {status}  {detail}  [{elapsed:.1f}s / {budget:.0f}s]"
    assert ok, VERDICTS[key]
    assert in_time, VERDICTS[key]


def random_conv(rng, p, d, l):
    return ConvLayer(rng.standard_normal((p, d, d, l)), rng.standard_normal(p))


def test_a1_full_rank_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        p, d, l = int(rng.integers(2, 17)), int(rng.choice([1, 3, 5])), int(rng.integers(1, 9))
        conv = random_conv(rng, p, d, l)
        layer, rep = to_basis_layer(conv, q=p * l * d * d)
        assert rep.Q == np.linalg.matrix_rank(bs.build_filter_matrix(conv.bank).A)
        x = rng.standard_normal((int(rng.integers(d, d + 8)), int(rng.integers(d, d + 8)), l))
        worst = max(worst, np.abs(forward_basis(layer, x) - conv_bank(x, conv.bank)).max())
    verdict("A1", worst <= 1e-10, f"max abs error {worst:.2e} <= 1e-10 over 100 layers",
            time.perf_counter() - t0, 30)


def test_a2_eigen_machinery():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_resid = worst_trace = 0.0
    monotone = beats = True
    for p, d, l in [(16, 3, 2), (8, 5, 3), (32, 3, 3), (6, 1, 8), (20, 3, 1)]:
        fm = bs.build_filter_matrix(random_conv(rng, p, d, l).bank)
        sp = bs.eigen_decompose(fm)
        a, lam1 = fm.A, sp.eigenvalues[0]
        aat = a @ a.T
        for lam, f in zip(sp.eigenvalues, sp.eigenvectors.T):
            worst_resid = max(worst_resid, np.linalg.norm(aat @ f - lam * f) / lam1)
        fro2 = np.sum(a * a)
        worst_trace = max(worst_trace, abs(sp.total - fro2) / fro2)
        errs = []
        for q in range(1, sp.rank + 1):
            f = bs.truncate(sp, q).F
            errs.append(np.linalg.norm(a - f @ (f.T @ a)))
        monotone &= all(e2 <= e1 + 1e-12 * errs[0] for e1, e2 in zip(errs, errs[1:]))
        for q in {1, max(1, sp.rank // 2), sp.rank}:
            for seed in range(100):
                g = bs.random_orthonormal(d, l, q, seed=seed).F
                beats &= errs[q - 1] <= np.linalg.norm(a - g @ (g.T @ a)) + 1e-10
    ok = worst_resid <= 1e-8 and worst_trace <= 1e-8 and monotone and beats
    verdict("A2", ok, f"residual {worst_resid:.1e}*lam1, trace {worst_trace:.1e}, "
            f"monotone={monotone}, beats 100 random={beats}", time.perf_counter() - t0, 60)


def test_a3_cost_formulas():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    exact = True
    for k in range(100):
        d = int(rng.choice([1, 3, 5]))
        dims = LayerDims(int(rng.integers(d, d + 6)), int(rng.integers(d, d + 6)),
                         int(rng.integers(1, 5)), d, int(rng.integers(1, 9)))
        dims = LayerDims(dims.M, dims.N, dims.L, d, dims.P,
                         int(rng.integers(1, dims.L * d * d + 1)))
        x = rng.standard_normal((dims.M, dims.N, dims.L))
        with count_mults() as direct:
            conv_bank(x, rng.standard_normal((dims.P, d, d, dims.L)))
        layer = BasisConvLayer(bs.random_orthonormal(d, dims.L, dims.Q, seed=k),
                               rng.standard_normal((dims.P, dims.Q)), np.zeros(dims.P))
        with count_mults() as two_stage:
            forward_basis(layer, x)
        exact &= cost.direct_mults(dims) == direct.total
        exact &= cost.basis_mults(dims) == two_stage.total
    ratio = cost.mult_ratio(LayerDims(32, 32, 32, 5, 64, 16))
    pd = cost.model_cost_report(nw.build_toy_net("direct")).conv_params
    pb = cost.model_cost_report(nw.build_toy_net("basis")).conv_params
    ok = exact and abs(ratio - 3.704) <= 1e-3 and (pd, pb) == (79_328, 6_400)
    verdict("A3", ok, f"counters exact={exact}, ratio {ratio:.4f}, params {pd} -> {pb} "
            f"({pd / pb:.2f}x)", time.perf_counter() - t0, 5)


def test_a6_error_bounds():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    inside = 0
    for seed in range(1000):
        d, l = int(rng.choice([1, 2, 3])), int(rng.integers(1, 4))
        n = d * d * l
        basis = bs.random_orthonormal(d, l, int(rng.integers(1, n + 1)), seed=seed)
        err = bs.approx_error(basis, rng.standard_normal((d, d, l))).rel_sq_err
        inside += bs.error_bounds(basis).contains(err)
    n, q = 18, 6
    mean = np.mean([bs.approx_error(bs.random_orthonormal(3, 2, q, seed=s),
                                    rng.standard_normal((3, 3, 2))).rel_sq_err
                    for s in range(1000)])
    ok = inside == 1000 and abs(mean - (1 - q / n)) <= 0.05
    verdict("A6", ok, f"{inside}/1000 inside bounds, mean {mean:.4f} vs 1-Q/n "
            f"{1 - q / n:.4f}", time.perf_counter() - t0, 10)


def test_a7_gradients():
    t0 = time.perf_counter()
    from test_network import small_net

    rng = np.random.default_rng(5)
    worst = gradcheck.check(small_net(), rng.standard_normal((2, 8, 8, 2)),
                            np.array([0, 2]))
    for kind in ("direct", "basis"):
        toy = nw.build_toy_net(kind, seed=4)
        for _, _, p in toy.named_params():
            if not p.any():  # zero biases would leave the ReLUs untested
                p[...] = 0.05 * rng.standard_normal(p.shape)
        x, y = rng.random((2, 32, 32, 3)) - 0.5, np.array([3, 8])
        for key, err in gradcheck.check(toy, x, y, sample=4, rng=rng).items():
            worst[key] = max(worst.get(key, 0.0), err)
    classes = {k[0] for k in worst}
    ok = classes == {"conv", "basis", "fc"} and ("basis", "coeffs") in worst \
        and max(worst.values()) <= gradcheck.REL_TOL
    detail = ", ".join(f"{k}.{n} {e:.1e}" for (k, n), e in sorted(worst.items()))
    verdict("A7", ok, f"worst relative error per class: {detail}", time.perf_counter() - t0, 60)


@pytest.fixture(scope="module")
def toy_data():
    tr, te = synth_split(200, 50, seed=0)
    tr, means = channel_normalize(tr)
    te, _ = channel_normalize(te, means)
    return tr, te


def budget(seed=0):
    return nw.TrainConfig(epochs=EPOCHS, batch_size=BATCH, lr_schedule=SCHEDULE, seed=seed)


@pytest.fixture(scope="module")
def trained_direct(toy_data):
    tr, te = toy_data
    t0 = time.perf_counter()
    model = nw.build_toy_net("direct", seed=0)
    nw.train(model, tr, budget())
    return model, nw.evaluate(model, te), time.perf_counter() - t0


@pytest.mark.slow
def test_a4_compress_and_recover(toy_data, trained_direct):
    tr, te = toy_data
    model, base, train_time = trained_direct
    t0 = time.perf_counter()
    compressed, _ = compress_model(model, t=0.85)
    pct, _, _ = retained_percent(compressed)
    before = nw.evaluate(compressed, te)
    nw.finetune(compressed, tr, scale=0.5)
    after = nw.evaluate(compressed, te)
    ok = base >= 0.85 and before < base and pct < 100 and abs(after - base) <= 0.03
    verdict("A4", ok, f"baseline {base:.1%}, t=0.85 keeps {pct:.1f}% filters: "
            f"{before:.1%} before fine-tune, {after:.1%} after",
            train_time + time.perf_counter() - t0, 600)


@pytest.mark.slow
def test_a5_random_basis_from_scratch(toy_data, trained_direct):
    tr, te = toy_data
    _, direct_acc, direct_time = trained_direct
    t0 = time.perf_counter()
    model = nw.build_toy_net("basis", seed=0)
    bases = [l.basis.F.tobytes() for l in model.layers if isinstance(l, BasisConvLayer)]
    nw.train(model, tr, budget())
    acc = nw.evaluate(model, te)
    frozen = bases == [l.basis.F.tobytes() for l in model.layers
                       if isinstance(l, BasisConvLayer)]
    ok = frozen and direct_acc - acc <= 0.05
    verdict("A5", ok, f"basis {acc:.1%} vs direct {direct_acc:.1%} "
            f"(gap {100 * (direct_acc - acc):.1f} pts), bases bitwise frozen={frozen}",
            direct_time + time.perf_counter() - t0, 600)


@pytest.mark.slow
def test_a8_serialization_and_sweep(trained_direct, tmp_path):
    model, _, _ = trained_direct
    t0 = time.perf_counter()
    probe = np.random.default_rng(0).standard_normal((8, 32, 32, 3))
    bitwise = True
    for m in (model, compress_model(model, t=0.9)[0], nw.build_toy_net("basis", seed=2)):
        back = parse_model(model_bytes(m))
        bitwise &= nw.forward(back, probe).tobytes() == nw.forward(m, probe).tobytes()
    path, csv_path = tmp_path / "direct.bcnv", tmp_path / "sweep.csv"
    save_model(model, path)
    code = cli.main(["sweep", "--model", str(path), "--t-list", "1.0,0.95,0.9,0.85,0.8",
                     "--csv", str(csv_path), "--no-finetune"])
    rows = read_sweep_csv(io.StringIO(csv_path.read_text())) if code == 0 else []
    pcts = [r.retained_pct for r in rows]
    ok = bitwise and code == 0 and len(rows) == 5 and \
        all(a >= b for a, b in zip(pcts, pcts[1:]))
    verdict("A8", ok, f"f64 round trip bitwise={bitwise}, sweep exit {code}, retained_pct "
            + " ".join(f"{p:.1f}" for p in pcts), time.perf_counter() - t0, 300)
