"""Self-check suites: gradient checks, oracle equivalences and invariants.

Every check returns a :class:`CheckResult`; :func:`run_all` collects them.
The S2M backward under test is a parameter so that a deliberately broken
implementation can be fed through the same checks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from itertools import product

import numpy as np

from . import evaluation, models, numerics as nx, sigsynth, transforms


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _timed(name, fn, *args, **kwargs) -> CheckResult:
    t0 = time.perf_counter()
    try:
        passed, detail = fn(*args, **kwargs)
    except Exception as exc:  # a crashing check is a failing check
        passed, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, bool(passed), detail, time.perf_counter() - t0)


# -- S2M ----------------------------------------------------------------------


def s2m_gradient_errors(case, backward=transforms.s2m_backward, eps=1e-5):
    """Relative errors ``(dF, dSignal)`` of ``backward`` against central differences.

    ``case`` is ``(N, k, h, seed)``. The loss is ``sum(M * R)`` for a fixed
    random ``R``, so ``dM = R``.
    """
    N, k, h, seed = case
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(N)
    F = rng.standard_normal((k, k))
    m = transforms.num_windows(N, k, h)
    R = rng.standard_normal((m, m))

    def loss(sig, filt):
        return float(np.sum(transforms.s2m_forward(transforms.slice_signal(sig, k, h), filt) * R))

    dF, dx = backward(transforms.slice_signal(x, k, h), F, R, N, h)
    num_F = nx.numerical_gradient(lambda f: loss(x, f), F, eps)
    num_x = nx.numerical_gradient(lambda s: loss(s, F), x, eps)
    return nx.relative_error(dF, num_F), nx.relative_error(dx, num_x)


def s2m_cases(n_cases=120, seed=0):
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(n_cases):
        k = int(rng.choice([2, 3, 5]))
        h = int(rng.choice([1, 2]))
        N = int(rng.integers(max(8, k), 33))
        cases.append((N, k, h, seed * 100003 + i))
    return cases


def check_s2m_gradients(backward=transforms.s2m_backward, n_cases=120, tol=1e-6, seed=0):
    worst, worst_case = 0.0, None
    for case in s2m_cases(n_cases, seed):
        err = max(s2m_gradient_errors(case, backward))
        if err > worst:
            worst, worst_case = err, case
    return worst < tol, f"{n_cases} cases, max rel err {worst:.2e} (tol {tol:g}) at N,k,h={worst_case and worst_case[:3]}"


def check_gram_degeneration(tol=1e-12, n_cases=20, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        N, k = int(rng.integers(6, 40)), int(rng.integers(2, 6))
        S = transforms.slice_signal(rng.standard_normal(N), k)
        worst = max(worst, float(np.max(np.abs(transforms.s2m_forward(S, np.eye(k)) - S @ S.T))))
    hand = transforms.gram(np.array([1.0, 2.0, 3.0, 4.0]), k=2)
    exact = np.array_equal(hand, np.array([[5.0, 8.0, 11.0], [8.0, 13.0, 18.0], [11.0, 18.0, 25.0]]))
    return worst <= tol and exact, f"max |M - SS^T| = {worst:.1e}; [1,2,3,4], k=2 hand matrix exact: {exact}"


def check_shapes():
    rng = np.random.default_rng(0)
    got = []
    for N in (128, 512):
        sample = rng.standard_normal((2, N))
        got.append(transforms.s2m_sample(sample, np.eye(3), np.eye(3), k=3, h=1).shape)
    ok = got == [(2, 126, 126), (2, 510, 510)]
    return ok, f"N=128 -> {got[0]}, N=512 -> {got[1]}"


def check_symmetry_laws(n_vectors=100, seed=0):
    rng = np.random.default_rng(seed)
    k, N = 4, 40
    S = transforms.slice_signal(rng.standard_normal(N), k)
    A = rng.standard_normal((k, k))
    M_sym = transforms.s2m_forward(S, A + A.T)
    sym_err = float(np.max(np.abs(M_sym - M_sym.T)))
    G = rng.standard_normal((k, k))
    M_psd = transforms.s2m_forward(S, G.T @ G)
    V = rng.standard_normal((n_vectors, M_psd.shape[0]))
    rayleigh = np.einsum("ij,jk,ik->i", V, M_psd, V) / np.einsum("ij,ij->i", V, V)
    M_asym = transforms.s2m_forward(S, A)
    asym = float(np.max(np.abs(M_asym - M_asym.T)))
    ok = sym_err <= 1e-12 and rayleigh.min() >= -1e-10 and asym > 1e-6
    return ok, f"symmetric F asym {sym_err:.1e}; min Rayleigh {rayleigh.min():.3e}; asymmetric witness {asym:.3f}"


# -- tape ops -------------------------------------------------------------------


def _weighted_sum(y, R):
    """Scalar ``sum(y * R)`` for a constant array ``R``."""
    flat = nx.reshape(y, (1, -1))
    return nx.sum_all(nx.matmul(flat, y.tape.constant(R.reshape(-1, 1))))


def _scalarize(op, x, rng):
    # random output weights make every output coordinate matter to the loss
    tape = nx.Tape()
    R = rng.standard_normal(op(tape.constant(x)).value.shape)
    return lambda node: _weighted_sum(op(node), R)


def _op_cases(rng):
    labels = np.array([0, 2, 1])
    w2 = rng.standard_normal((4, 3, 3, 3))
    w1 = rng.standard_normal((4, 3, 3))
    bias = rng.standard_normal(4)
    gamma, beta = rng.standard_normal(3), rng.standard_normal(3)
    W = rng.standard_normal((5, 3))
    x2 = rng.standard_normal((2, 3, 6, 5))

    cases = [
        ("conv2d dx", lambda x: nx.conv2d(x, x.tape.constant(w2), x.tape.constant(bias), stride=2, padding=1), x2),
        ("conv2d dw", lambda w: nx.conv2d(w.tape.constant(x2), w, stride=2, padding=1), w2),
        ("conv1d dx", lambda x: nx.conv1d(x, x.tape.constant(w1), x.tape.constant(bias), padding=1),
         rng.standard_normal((2, 3, 9))),
        # distinct values, so no pooling window has a tie
        ("max_pool2d", lambda x: nx.max_pool2d(x, 2), rng.permutation(150).reshape(2, 3, 5, 5) * 0.1),
        ("batch_norm", lambda x: nx.batch_norm(
            x, x.tape.constant(gamma), x.tape.constant(beta), np.zeros(3), np.ones(3), "train"),
         rng.standard_normal((4, 3, 2, 2))),
        ("dense", lambda x: nx.dense(x, x.tape.constant(W), x.tape.constant(W[0])), rng.standard_normal((2, 5))),
        ("global_avg_pool", nx.global_avg_pool, rng.standard_normal((2, 3, 4, 4))),
        ("relu", nx.relu, rng.standard_normal((3, 7)) + 0.05),
    ]
    out = [(name, _scalarize(op, x, rng), x) for name, op, x in cases]
    out.append(("softmax_cross_entropy", lambda z: nx.softmax_cross_entropy(z, labels), rng.standard_normal((3, 4))))
    return out


def check_op_gradients(tol=1e-6, seed=0):
    rng = np.random.default_rng(seed)
    errs = {name: nx.finite_diff_check(f, x) for name, f, x in _op_cases(rng)}
    worst = max(errs, key=errs.get)
    return errs[worst] < tol, f"{len(errs)} ops, worst {worst} {errs[worst]:.2e} (tol {tol:g})"


# -- whole models -----------------------------------------------------------------


TINY = dict(widths=(4, 8), blocks=(1, 1), input_length=24, num_classes=3, k=3, hidden=8)


def model_gradient_errors(model, X, y, n_coords=20, eps=1e-6, seed=0):
    """Per-parameter relative error of the backward pass on a random coordinate subset."""
    rng = np.random.default_rng(seed)
    buffers = {k: v.copy() for k, v in model.buffers.items()}

    def loss_value():
        t = nx.Tape()
        return float(nx.softmax_cross_entropy(model.forward(X, mode="train", tape=t), y).value)

    tape = nx.Tape()
    grads = tape.backward(nx.softmax_cross_entropy(model.forward(X, mode="train", tape=tape), y))
    errs = {}
    for name, value in model.params.items():
        flat = value.reshape(-1)
        coords = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        num = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + eps
            up = loss_value()
            flat[c] = orig - eps
            down = loss_value()
            flat[c] = orig
            num[j] = (up - down) / (2 * eps)
        errs[name] = nx.relative_error(grads[name].reshape(-1)[coords], num)
    for k, v in buffers.items():
        model.buffers[k][...] = v
    return errs


def tiny_model(architecture, seed=0, **overrides):
    cfg = models.ModelConfig(architecture=architecture, seed=seed, **{**TINY, **overrides})
    if architecture == "signet2":
        cfg = models.ModelConfig(**{**cfg.__dict__, "frontend_stages": 1})
    return models.build_model(cfg)


def check_model_gradients(architectures=("signet", "signet2"), tol=1e-4, seed=0):
    rng = np.random.default_rng(seed)
    parts, ok = [], True
    for arch in architectures:
        model = tiny_model(arch, seed=seed)
        X = rng.standard_normal((4, 2, model.config.input_length))
        y = rng.integers(0, model.config.num_classes, size=4)
        errs = model_gradient_errors(model, X, y, seed=seed)
        worst = max(errs, key=errs.get)
        ok &= errs[worst] < tol
        parts.append(f"{arch}: {len(errs)} tensors, worst {worst} {errs[worst]:.2e}")
    return ok, "; ".join(parts) + f" (tol {tol:g})"


# -- synthesis -------------------------------------------------------------------------


def check_constellations(tol=1e-12):
    worst = 0.0
    for scheme in sigsynth.SCHEMES:
        if "FSK" in scheme:
            continue
        pts = sigsynth.constellation(scheme)
        power = sum(abs(complex(p)) ** 2 for p in pts) / len(pts)  # plain loop, independent of numpy reductions
        worst = max(worst, abs(power - 1.0))
    return worst <= tol, f"max |mean power - 1| = {worst:.1e}"


def check_zero_isi(tol=1e-12):
    worst = 0.0
    for beta in (0.2, 0.25, 0.35, 0.5, 0.7):
        t = np.array([n for n in range(-6, 7) if n != 0], dtype=np.float64)
        worst = max(worst, float(np.max(np.abs(sigsynth.raised_cosine(t, beta)))))
    return worst < tol, f"max |p(n)| at nonzero symbol instants = {worst:.1e}"


def check_minmax():
    out = sigsynth.minmax(np.array([0.0, 1.0, 2.0]))
    return np.array_equal(out, np.array([-1.0, 0.0, 1.0])), f"[0,1,2] -> {out.tolist()}"


def check_snr_calibration(snr_db=10.0, n=100_000, tol_db=0.1, seed=0):
    rng = np.random.default_rng(seed)
    sig = np.exp(1j * rng.uniform(0, 2 * np.pi, n))
    noisy = sigsynth.add_awgn(sig, snr_db, np.random.default_rng(seed + 1))
    noise = noisy - sig
    measured = 10 * np.log10(np.mean(np.abs(sig) ** 2) / np.mean(np.abs(noise) ** 2))
    return abs(measured - snr_db) <= tol_db, f"target {snr_db} dB, measured {measured:.4f} dB"


# -- metrics ------------------------------------------------------------------------------


# two positives, four negatives: 6 of the 8 positive-negative pairs are ordered correctly
AUC_FIXTURE = (np.array([0.9, 0.35, 0.8, 0.4, 0.3, 0.1]), np.array([1, 1, 0, 0, 0, 0]))


def brute_force_auc(scores, positive):
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    total = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in product(pos, neg))
    return total / (len(pos) * len(neg))


def check_metrics():
    s, pos = AUC_FIXTURE
    scores = np.stack([1 - s, s], axis=1)
    per_class, _ = evaluation.roc_auc_ovr(scores, pos)
    brute = brute_force_auc(s, pos == 1)
    f1 = evaluation.macro_f1(np.array([[1, 1], [1, 1]]))
    ok = per_class[1] == brute == 0.75 and f1 == 0.5
    return ok, f"fixture AUC {per_class[1]} (brute force {brute}); F1([[1,1],[1,1]]) = {f1}"


def check_containers(seed=0):
    cfg = sigsynth.SynthConfig(
        schemes=("BPSK", "QPSK"), symbols_per_sample=4, snr_grid_db=(0, 10), samples_per_class_per_snr=2, seed=seed
    )
    ds = sigsynth.generate_dataset(cfg)
    back = sigsynth.parse_dataset(sigsynth.dataset_bytes(ds))
    model = tiny_model("signet", seed=seed)
    config, state, _ = models.parse_checkpoint(models.checkpoint_bytes(model.state_dict(), model.config))
    ref = model.state_dict()
    same = config == model.config and state.keys() == ref.keys() and all(np.array_equal(state[k], ref[k]) for k in ref)
    return back == ds and same, f"dataset round-trip {back == ds}, checkpoint round-trip {same}"


# -- driver ---------------------------------------------------------------------------------


def run_all(s2m_backward=transforms.s2m_backward, include_models=True) -> list[CheckResult]:
    checks = [
        ("s2m gradients", check_s2m_gradients, {"backward": s2m_backward}),
        ("gram degeneration", check_gram_degeneration, {}),
        ("s2m shapes", check_shapes, {}),
        ("symmetry and psd laws", check_symmetry_laws, {}),
        ("tape op gradients", check_op_gradients, {}),
        ("constellation power", check_constellations, {}),
        ("raised cosine zero isi", check_zero_isi, {}),
        ("awgn calibration", check_snr_calibration, {}),
        ("minmax normalization", check_minmax, {}),
        ("metric oracles", check_metrics, {}),
        ("container round-trips", check_containers, {}),
    ]
    if include_models:
        checks.insert(5, ("model gradients", check_model_gradients, {}))
    return [_timed(name, fn, **kw) for name, fn, kw in checks]
