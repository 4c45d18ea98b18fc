"""Independent oracles and the self-check suites behind ``sits-ssm verify``.

Each suite re-derives expected values along a route that shares no code
with the implementation it checks: central finite differences for
gradients, the convolutional-kernel form for the recurrence, closed-form
scalars for the discretization, exact rational arithmetic for the
segmentation scores, and plain arithmetic for the loss identities.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from . import ssm
from .autodiff import Tensor


def finite_difference_grad(f, tensors: list[Tensor], h: float = 1e-5,
                           max_components: int | None = None,
                           rng: np.random.Generator | None = None):
    """Central-difference gradient of scalar ``f()`` w.r.t. each tensor.

    ``f`` must read the current ``.data`` of the tensors on every call.
    Returns one array per tensor, NaN at components that were not probed
    (when ``max_components`` subsamples large tensors).
    """
    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_components is not None and flat.size > max_components:
            if rng is None:
                rng = np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_components, replace=False)
        g = np.full(flat.size, np.nan)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            g[i] = (fp - fm) / (2 * h)
        grads.append(g.reshape(t.shape))
    return grads


def gradcheck(f, tensors: list[Tensor], h: float = 1e-5,
              max_components: int | None = None,
              rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and finite differences.

    Error per component is |a - n| / max(1, |a|, |n|), so tiny gradients
    are compared absolutely and large ones relatively.
    """
    for t in tensors:
        t.zero_grad()
    loss = f()
    ad.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    numeric = finite_difference_grad(f, tensors, h=h, max_components=max_components, rng=rng)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        probed = ~np.isnan(n)
        if not probed.any():
            continue
        a, n = a[probed], n[probed]
        err = np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(err.max()))
    return worst


# ---------------------------------------------------------------------------
# brute-force segmentation-score oracle (exact rational arithmetic)

def brute_force_scores(labels: np.ndarray, predictions: np.ndarray, num_classes: int,
                       ignore_labels=(), eval_class_set=None):
    """Triple-loop confusion counting and Fraction-exact score formulas.

    Returns (cm, oa, iou, f1, miou, mf1) where cm is an int matrix, oa a
    Fraction, iou/f1 dicts class->Fraction (absent classes omitted), and
    miou/mf1 Fractions over the evaluated present classes.
    """
    labels = np.asarray(labels).reshape(-1)
    predictions = np.asarray(predictions).reshape(-1)
    ignore = set(ignore_labels)
    cm = [[0] * num_classes for _ in range(num_classes)]
    for t, p in zip(labels.tolist(), predictions.tolist()):
        if t in ignore:
            continue
        cm[t][p] += 1
    total = sum(sum(row) for row in cm)
    if total == 0:
        raise ValueError("no scored pixels")
    oa = Fraction(sum(cm[k][k] for k in range(num_classes)), total)
    if eval_class_set is None:
        eval_class_set = range(num_classes)
    iou, f1 = {}, {}
    for k in eval_class_set:
        tp = cm[k][k]
        fp = sum(cm[i][k] for i in range(num_classes)) - tp
        fn = sum(cm[k]) - tp
        if tp + fp + fn == 0:
            continue
        iou[k] = Fraction(tp, tp + fp + fn)
        f1[k] = Fraction(2 * tp, 2 * tp + fp + fn)
    miou = sum(iou.values()) / len(iou) if iou else None
    mf1 = sum(f1.values()) / len(f1) if f1 else None
    return np.array(cm), oa, iou, f1, miou, mf1


# ---------------------------------------------------------------------------
# generator separability oracle

def centroid_accuracy(dataset) -> float:
    """1-nearest-centroid accuracy on per-pixel temporal profiles.

    Fits one mean profile (T*C values) per class over all pixels, then
    classifies every pixel by the nearest centroid. On noise-free data
    with distinct class curves this must reach 1.0; it degrades with
    noise, which is what makes it a generator-quality probe.
    """
    profiles, labels = [], []
    for s in dataset.samples:
        v = s.valid_length
        flat = s.series[:v].reshape(v * s.series.shape[1], -1).T    # (H*W, T*C)
        profiles.append(flat.astype(np.float64))
        labels.append(s.label_map.reshape(-1))
    x = np.concatenate(profiles)
    y = np.concatenate(labels)
    k = dataset.num_classes
    present = [c for c in range(k) if (y == c).any()]
    centroids = np.stack([x[y == c].mean(axis=0) for c in present])
    d2 = ((x ** 2).sum(axis=1)[:, None] - 2.0 * x @ centroids.T
          + (centroids ** 2).sum(axis=1)[None])
    pred = np.asarray(present)[np.argmin(d2, axis=1)]
    return float((pred == y).mean())


# ---------------------------------------------------------------------------
# verification suites

@dataclass
class CheckRow:
    suite: str
    name: str
    value: float
    threshold: float
    passed: bool


@dataclass
class VerifyReport:
    rows: list[CheckRow] = field(default_factory=list)
    elapsed: float = 0.0

    def add(self, suite, name, value, threshold):
        self.rows.append(CheckRow(suite, name, float(value), float(threshold),
                                  bool(value < threshold)))

    def ok(self) -> bool:
        return all(r.passed for r in self.rows)

    def render(self) -> str:
        lines = [f"{'suite':<12} {'check':<44} {'value':>12} {'limit':>10} result"]
        for r in self.rows:
            lines.append(f"{r.suite:<12} {r.name:<44} {r.value:>12.3e} "
                         f"{r.threshold:>10.1e} {'PASS' if r.passed else 'FAIL'}")
        return "\n".join(lines)


def suite_zoh(report: VerifyReport, zoh_fn=None):
    """Closed-form scalar checks of the zero-order-hold discretization."""
    fn = zoh_fn or ssm.discretize_zoh
    cases = [
        # (a, delta, b, expected_a_bar, expected_b_bar)
        (-1.0, 1.0, 2.0, np.exp(-1.0), (1.0 - np.exp(-1.0)) * 2.0),
        (1.0, np.log(2.0), 1.0, 2.0, 1.0),
        (-1.0, 1e-9, 1.0, np.exp(-1e-9), 1e-9 * (1.0 - 0.5e-9)),
    ]
    for i, (a, d, b, ea, eb) in enumerate(cases):
        ab, bb = fn(np.float64(a), np.float64(b), np.float64(d))
        report.add("zoh", f"closed_form_{i}_a_bar", abs(float(ab) - ea), 1e-12)
        report.add("zoh", f"closed_form_{i}_b_bar", abs(float(bb) - eb), 1e-12)
    # series fallback continuity: exact formula vs series at |delta*a| = 1e-5
    a, d, b = -1.0, 1e-5, 1.0
    _, bb = fn(np.float64(a), np.float64(b), np.float64(d))
    exact = (np.expm1(d * a) / (d * a)) * d * b
    report.add("zoh", "series_vs_exact_at_1e-5", abs(float(bb) - exact) / abs(exact), 1e-9)


def suite_scan_kernel(report: VerifyReport, scan_fn=None, n_seeds: int = 10):
    """Recurrence vs convolutional-kernel equivalence on random LTI systems."""
    scan = scan_fn or ssm.scan_recurrence
    worst = 0.0
    for seed in range(n_seeds):
        rng = np.random.default_rng(seed)
        l = int(rng.integers(4, 33))
        d = int(rng.integers(1, 9))
        n = int(rng.integers(1, 9))
        a_bar = rng.uniform(0.05, 0.95, (d, n))
        b_bar = rng.normal(0, 1, (d, n))
        c = rng.normal(0, 1, n)  # readout shared across channels
        x = rng.normal(0, 1, (l, d))
        steps = ssm.DiscreteStep(
            Tensor(np.broadcast_to(a_bar, (l, d, n)).copy()),
            Tensor(np.broadcast_to(b_bar, (l, d, n)) * x[:, :, None]),
            Tensor(np.broadcast_to(c, (l, n)).copy()),
        )
        y_scan = scan(steps).data
        y_kernel = ssm.kernel_convolve(a_bar, b_bar, c, x)
        worst = max(worst, float(np.max(np.abs(y_scan - y_kernel))))
    report.add("scan", "lti_scan_vs_kernel_max_abs", worst, 1e-6)


def suite_gradients(report: VerifyReport):
    """Spot finite-difference checks on the core differentiable pieces."""
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(0, 1, (3, 4)).astype(np.float64), requires_grad=True)
    report.add("grad", "softplus_silu_chain",
               gradcheck(lambda: ad.sum_(ad.silu(ad.softplus(x))), [x]), 1e-4)
    blk = ssm.MambaBlock(ssm.SsmConfig(d_model=4, d_state=4), rng, dtype=np.float64)
    seq = Tensor(rng.normal(0, 1, (2, 5, 4)).astype(np.float64), requires_grad=True)
    params = [seq, blk.a_log, blk.dt_proj.bias, blk.x_proj.weight]
    report.add("grad", "mamba_block_fd",
               gradcheck(lambda: ad.sum_(blk(seq)), params, max_components=24,
                         rng=np.random.default_rng(1)), 1e-4)


def suite_metrics(report: VerifyReport):
    """Vectorized scores vs the rational brute-force oracle."""
    from . import metrics
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        k = int(rng.integers(2, 7))
        labels = rng.integers(0, k, size=64)
        preds = rng.integers(0, k, size=64)
        cm = metrics.ConfusionMatrix(k)
        cm.accumulate(labels, preds)
        s = metrics.scores(cm)
        _, oa, iou, f1, miou, mf1 = brute_force_scores(labels, preds, k)
        worst = max(worst, abs(s.oa - float(oa)))
        for kk, v in iou.items():
            worst = max(worst, abs(s.iou[kk] - float(v)))
        worst = max(worst, abs(s.miou - float(miou)), abs(s.mf1 - float(mf1)))
    report.add("metrics", "vectorized_vs_rational_oracle", worst, 1e-12)
    cm = metrics.ConfusionMatrix(2)
    cm.counts = np.array([[2, 1], [0, 3]], dtype=np.int64)
    s = metrics.scores(cm)
    report.add("metrics", "hand_case_oa", abs(s.oa - 5 / 6), 1e-12)
    report.add("metrics", "hand_case_mf1", abs(s.mf1 - 29 / 35), 1e-6)


def suite_losses(report: VerifyReport):
    """Weighting identities of the combined objective."""
    from . import losses
    pw = losses.positional_weights(4)
    report.add("loss", "pw_L4", float(np.abs(pw - np.array([0.25, 0.5, 0.75, 1.0])).max()), 1e-15)
    l_cls = Tensor(np.float64(0.8), requires_grad=False)
    l_tp = Tensor(np.float64(0.4), requires_grad=False)
    cfg = losses.LossConfig(w0=0.03)
    total, w1 = losses.combined_loss(l_cls, l_tp, cfg)
    report.add("loss", "w1_ratio", abs(w1 - 2.0), 1e-12)
    report.add("loss", "total_equals_1p_w0_times_cls",
               abs(total.item() - 1.03 * 0.8) / (1.03 * 0.8), 1e-12)


def run_all(zoh_fn=None, scan_fn=None) -> VerifyReport:
    """Run every suite; injectable hooks exist so tests can prove the
    suites actually catch defects."""
    report = VerifyReport()
    t0 = time.time()
    suite_zoh(report, zoh_fn=zoh_fn)
    suite_scan_kernel(report, scan_fn=scan_fn)
    suite_gradients(report)
    suite_metrics(report)
    suite_losses(report)
    report.elapsed = time.time() - t0
    return report
