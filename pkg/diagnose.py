'''
The diagnose suite: oracle checks of the statistic gradients, the Taylor
order of compensation, the validity clamp, step-time overhead and the
gradient-ratio diagnostic on a trained checkpoint.
'''

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from rich.table import Table
from tqdm import tqdm

import config
from compensation import IterationRecord, LayerGeometry, aggregate, compensate, stat_grads
from datasets import load_dataset
from harness import load_checkpoint
from network import backward, build_preset, forward, sgd_step, softmax_cross_entropy
from normalizers import BnConfig, NormCache
from oracles import (
    GradRatioReport,
    finite_diff,
    grad_ratio_diagnostic,
    make_replay_bundle,
    naive_stat_jacobian,
    replay_exact_stats,
)
from tensor_core import Rng, conv2d_forward

logger = logging.getLogger(__name__)

TAYLOR_SCALES = (1e-3, 3e-3, 1e-2, 3e-2, 1e-1)
# reference ratios reported next to the measured ones; no match is required
REFERENCE_RATIO_MU = 0.12
REFERENCE_RATIO_NU = 0.39
MAX_TRAIN_OVERHEAD = 1.5
MAX_EVAL_OVERHEAD = 1.05


@dataclass
class CheckResult:
    name: str
    passed: bool
    seconds: float = 0.0
    detail: dict = field(default_factory=dict)


def _rel_err(a, b):
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b))) / scale


def _random_layer(rng):
    kernel = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, kernel))
    c_in, c_out, n = (int(v) for v in rng.integers(1, 5, shape=3))
    h, w = (int(v) for v in rng.integers(max(kernel - 2 * padding, 1), 5, shape=2))
    y = rng.normal((n, c_in, h, w))
    theta = rng.normal((c_out, c_in, kernel, kernel))
    return y, theta, LayerGeometry((kernel, kernel), stride, padding)


def check_stat_gradients(cases=200, seed=0, progress=False):
    """
    Compare stat_grad_mu / stat_grad_nu on random small layers against the
    naive Jacobian (1e-12 relative, off-diagonal blocks exactly zero) and
    central finite differences (1e-6 relative).
    """
    rng = Rng(seed)
    worst_naive = worst_fd = 0.0
    off_diagonal = 0
    for _ in tqdm(range(cases), desc="stat gradients", disable=not progress, leave=False):
        y, theta, geom = _random_layer(rng)
        x = conv2d_forward(y, theta, geom.stride, geom.padding)
        g_mu, g_nu = stat_grads(y, theta, geom, x)
        jac_mu, jac_nu = naive_stat_jacobian(y, theta, x, geom)
        c_out = theta.shape[0]
        diag = np.arange(c_out)
        mask = ~np.eye(c_out, dtype=bool)
        off_diagonal += int(np.count_nonzero(jac_mu[mask])) + int(np.count_nonzero(jac_nu[mask]))
        worst_naive = max(worst_naive,
                          _rel_err(np.broadcast_to(g_mu, jac_mu[diag, diag].shape), jac_mu[diag, diag]),
                          _rel_err(g_nu, jac_nu[diag, diag]))

        def stats(th):
            out = conv2d_forward(y, th, geom.stride, geom.padding)
            return np.concatenate([out.mean(axis=(0, 2, 3)), (out * out).mean(axis=(0, 2, 3))])

        fd = finite_diff(stats, theta)
        worst_fd = max(worst_fd,
                       _rel_err(np.broadcast_to(g_mu, fd[diag, diag].shape), fd[diag, diag]),
                       _rel_err(g_nu, fd[c_out + diag, diag]))
    passed = worst_naive <= 1e-12 and worst_fd <= 1e-6 and off_diagonal == 0
    return CheckResult("stat_gradients", passed, detail={
        "cases": cases, "max_rel_err_naive": worst_naive, "max_rel_err_fd": worst_fd,
        "nonzero_off_diagonal": off_diagonal,
    })


def _slope(scales, errors):
    return float(np.polyfit(np.log(scales), np.log(errors), 1)[0])


def check_taylor_order(directions=20, seed=0, scales=TAYLOR_SCALES):
    """
    Move the weights of a fixed conv layer by s * d and measure how far the
    compensated and the stale statistics are from an exact replay.

    The mean is linear in the weights, so its compensation is exact up to
    rounding; the second moment must show a quadratic error, and stale
    statistics a linear one.
    """
    rng = Rng(seed)
    geom = LayerGeometry((3, 3), 1, 1)
    y = rng.normal((4, 3, 6, 6))
    theta0 = rng.normal((4, 3, 3, 3))
    x = conv2d_forward(y, theta0, geom.stride, geom.padding)
    g_mu, g_nu = stat_grads(y, theta0, geom, x)
    mu0, nu0 = x.mean(axis=(0, 2, 3)), (x * x).mean(axis=(0, 2, 3))
    record = IterationRecord(0, mu0, nu0, g_mu, g_nu, theta0.copy())
    bundle = make_replay_bundle(y, geom, theta0)

    errors = {name: np.zeros(len(scales)) for name in ("comp_mu", "stale_mu", "comp_nu", "stale_nu")}
    for _ in range(directions):
        d = rng.normal(theta0.shape)
        d /= np.linalg.norm(d)
        for i, s in enumerate(scales):
            theta = theta0 + s * d
            exact_mu, exact_nu = replay_exact_stats(bundle, theta)
            comp_mu, comp_nu = compensate(record, theta)
            errors["comp_mu"][i] += np.abs(comp_mu - exact_mu).max() / directions
            errors["comp_nu"][i] += np.abs(comp_nu - exact_nu).max() / directions
            errors["stale_mu"][i] += np.abs(mu0 - exact_mu).max() / directions
            errors["stale_nu"][i] += np.abs(nu0 - exact_nu).max() / directions

    slopes = {name: _slope(scales, errors[name]) for name in ("stale_mu", "comp_nu", "stale_nu")}
    mu_floor = 1e-12 * max(1.0, float(np.abs(mu0).max()))
    passed = (
        abs(slopes["comp_nu"] - 2.0) <= 0.3
        and abs(slopes["stale_mu"] - 1.0) <= 0.3
        and abs(slopes["stale_nu"] - 1.0) <= 0.3
        and float(errors["comp_mu"].max()) <= mu_floor
    )
    detail = {f"slope_{k}": v for k, v in slopes.items()}
    detail["max_err_comp_mu"] = float(errors["comp_mu"].max())
    detail["scales"] = list(scales)
    detail["errors"] = {k: v.tolist() for k, v in errors.items()}
    return CheckResult("taylor_order", passed, detail=detail)


def check_clamp(cases=100_000, seed=0, channels=4):
    """
    Fuzz aggregate with random windows, including second moments below the
    squared mean; nu_bar >= mu_bar^2 and sigma_bar^2 >= 0 must always hold.
    """
    rng = Rng(seed)
    violations = 0
    for _ in range(cases):
        k = int(rng.integers(1, config.MAX_WINDOW + 1))
        mus = rng.normal((k, channels), 3.0)
        # some records valid, some adversarial (nu < mu^2, even negative)
        nus = mus * mus * rng.uniform((k, channels), -0.5, 1.5) + rng.uniform((k, channels), -1.0, 1.0)
        stats = aggregate((mus[0], nus[0]), list(zip(mus[1:], nus[1:])))
        tol = 1e-12 * np.maximum(1.0, np.abs(stats.nu))
        if np.any(stats.var < 0) or np.any(stats.nu < stats.mu * stats.mu - tol):
            violations += 1
    return CheckResult("validity_clamp", violations == 0, detail={"cases": cases, "violations": violations})


def _run_steps(graph, batch, labels, steps, mode):
    trace = None
    for _ in range(steps):
        logits, trace = forward(graph, batch, mode)
        if mode == "train":
            _, grad = softmax_cross_entropy(logits, labels)
            sgd_step(graph, backward(graph, trace, grad), 1e-3, 0.0, 0.0)
    return trace


def _time_interleaved(graphs, batch, labels, mode, samples, reps):
    '''Median per-step time of each graph, alternating which one runs first.'''
    times = {kind: [] for kind in graphs}
    order = list(graphs)
    for i in range(samples):
        for kind in order if i % 2 == 0 else order[::-1]:
            start = time.perf_counter()
            _run_steps(graphs[kind], batch, labels, reps, mode)
            times[kind].append((time.perf_counter() - start) / reps)
    return {kind: float(np.median(v)) for kind, v in times.items()}


def _memory_detail(graphs, batch, labels):
    # one more train step on each graph to get a trace with normalizer caches
    traces = {kind: _run_steps(graph, batch, labels, 1, "train") for kind, graph in graphs.items()}
    activation = sum(c.x.nbytes + c.x_hat.nbytes for c in traces["bn"].caches.values()
                     if isinstance(c, NormCache))
    per_layer = {str(l): s.buffer_nbytes() for l, s in graphs["cbn"].norm_states.items()}
    return {
        "activation_bytes_bn": activation,
        "buffer_bytes_cbn": sum(per_layer.values()),
        "buffer_bytes_per_layer": per_layer,
    }


def check_overhead(model="desk-cnn", batch_size=8, window=4, samples=7, train_reps=20, eval_reps=200, seed=0,
                   image_shape=(3, 16, 16)):
    """
    Train and eval step times of CBN (window filled, no burn-in) against BN on
    the same preset, plus the memory the CBN ring buffers add next to the
    activations BN keeps for backward.

    Each sample times a loop of `train_reps` / `eval_reps` steps; BN and CBN
    samples are interleaved and their medians compared.
    """
    rng = Rng(seed)
    batch = rng.normal((batch_size,) + tuple(image_shape))
    labels = rng.integers(0, 10, shape=batch_size)
    graphs = {}
    for kind in ("bn", "cbn"):
        norm = BnConfig(kind=kind, window=window if kind == "cbn" else 1, burn_in=0)
        graphs[kind] = build_preset(model, image_shape, 10, norm, Rng(seed))
        # fill the window before timing
        _run_steps(graphs[kind], batch, labels, window, "train")
    train_times = _time_interleaved(graphs, batch, labels, "train", samples, train_reps)
    eval_times = _time_interleaved(graphs, batch, labels, "eval", samples, eval_reps)
    train_ratio = train_times["cbn"] / train_times["bn"]
    eval_ratio = eval_times["cbn"] / eval_times["bn"]
    detail = {
        "window": window, "samples": samples,
        "train_step_bn": train_times["bn"], "train_step_cbn": train_times["cbn"],
        "eval_step_bn": eval_times["bn"], "eval_step_cbn": eval_times["cbn"],
        "train_ratio": train_ratio, "eval_ratio": eval_ratio,
    }
    detail.update(_memory_detail(graphs, batch, labels))
    return CheckResult("overhead", train_ratio <= MAX_TRAIN_OVERHEAD and eval_ratio <= MAX_EVAL_OVERHEAD,
                       detail=detail)


def check_grad_ratio(checkpoint_path, cfg, exact=False):
    """
    Gradient-ratio diagnostic for every eligible normalizer of a trained
    network; passes when at least 90% of the ratios are below one.
    """
    payload = load_checkpoint(checkpoint_path)
    graph = payload["graph"]
    _, eval_set = load_dataset(cfg.dataset)
    batch = eval_set.images[: cfg.diagnostics.grad_ratio_batch]
    report = GradRatioReport()
    for l in graph.normalizer_layers():
        if any(r < l - 1 for r in graph.param_layers()):
            report.add(grad_ratio_diagnostic(graph, batch, l, epoch=payload["epoch"], exact=exact,
                                             rng=Rng(cfg.seed)))
    fraction = report.fraction_below_one()
    return CheckResult("grad_ratio", fraction >= 0.9, detail={
        "fraction_below_one": fraction,
        "rows": [asdict(r) for r in report.rows],
        "mean_mu_l1": report.mean("mu_l1"), "mean_nu_l1": report.mean("nu_l1"),
        "reference_mu": REFERENCE_RATIO_MU, "reference_nu": REFERENCE_RATIO_NU,
    })


def run_diagnose(cfg, checkpoint=None, quick=False):
    """
    Run every check and write diagnose.json into cfg.out_dir.

    Args:
        cfg: harness.TrainConfig; supplies the seed, dataset and output directory.
        checkpoint: Trained checkpoint for the gradient-ratio check; defaults to
            the one in cfg.out_dir and is skipped when absent.
        quick: Smaller case counts, for smoke runs.

    Returns:
        List of CheckResult
    """
    checks = [
        lambda: check_stat_gradients(cases=20 if quick else 200, seed=cfg.seed, progress=cfg.progress),
        lambda: check_taylor_order(directions=4 if quick else 20, seed=cfg.seed),
        lambda: check_clamp(cases=1000 if quick else 100_000, seed=cfg.seed),
        lambda: check_overhead(model="tiny-cnn" if quick else "desk-cnn", samples=3 if quick else 7,
                               train_reps=3 if quick else 20, eval_reps=20 if quick else 200, seed=cfg.seed),
    ]
    checkpoint = Path(checkpoint) if checkpoint else Path(cfg.out_dir) / config.CHECKPOINT_FILENAME
    if checkpoint.exists():
        checks.append(lambda: check_grad_ratio(checkpoint, cfg))
    else:
        logger.warning("no checkpoint at %s, skipping the gradient-ratio check", checkpoint)

    results = []
    for check in checks:
        start = time.perf_counter()
        result = check()
        result.seconds = time.perf_counter() - start
        logger.info("%s: %s (%.1fs)", result.name, "ok" if result.passed else "FAILED", result.seconds)
        results.append(result)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / config.DIAGNOSE_FILENAME, "w") as f:
        json.dump([asdict(r) for r in results], f, indent=2, default=float)
    return results


def _headline(result):
    d = result.detail
    if result.name == "stat_gradients":
        return f"naive {d['max_rel_err_naive']:.1e}, fd {d['max_rel_err_fd']:.1e}"
    if result.name == "taylor_order":
        return f"comp nu {d['slope_comp_nu']:.2f}, stale mu {d['slope_stale_mu']:.2f}, stale nu {d['slope_stale_nu']:.2f}"
    if result.name == "validity_clamp":
        return f"{d['violations']} / {d['cases']} violations"
    if result.name == "overhead":
        return (f"train x{d['train_ratio']:.2f}, eval x{d['eval_ratio']:.2f}, "
                f"buffers {d['buffer_bytes_cbn'] / 1024:.0f} KiB vs activations {d['activation_bytes_bn'] / 1024:.0f} KiB")
    return f"{d['fraction_below_one']:.0%} below one (mu {d['mean_mu_l1']:.2f}, nu {d['mean_nu_l1']:.2f})"


def render_results(results):
    table = Table(title="diagnose")
    table.add_column("check")
    table.add_column("result")
    table.add_column("detail")
    table.add_column("seconds", justify="right")
    for r in results:
        table.add_row(r.name, "[green]pass[/green]" if r.passed else "[red]FAIL[/red]",
                      _headline(r), f"{r.seconds:.1f}")
    return table


if __name__ == "__main__":
    from harness import TrainConfig

    logging.basicConfig(level=logging.INFO)
    cfg = replace(TrainConfig(), out_dir="runs/diagnose-demo", progress=False)
    for r in run_diagnose(cfg, quick=True):
        print(f"{r.name}: {'pass' if r.passed else 'FAIL'} {_headline(r)}")
