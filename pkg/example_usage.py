#!/usr/bin/env python3
'''
Example usage of the normalization library.
Demonstrates how the modules work together, from statistic gradients up to a
short training run.
'''

import tempfile

import numpy as np


def example_statistic_gradients():
    """Example: Closed-form statistic gradients against the naive Jacobian"""
    print("=" * 60)
    print("Example 1: Statistic Gradients")
    print("=" * 60)

    from compensation import LayerGeometry, stat_grads
    from oracles import naive_stat_jacobian
    from tensor_core import Rng, conv2d_forward

    rng = Rng(0)
    geom = LayerGeometry((3, 3), 1, 1)
    y = rng.normal((2, 3, 5, 5))
    theta = rng.normal((4, 3, 3, 3))
    x = conv2d_forward(y, theta, 1, 1)

    g_mu, g_nu = stat_grads(y, theta, geom, x)
    jac_mu, jac_nu = naive_stat_jacobian(y, theta, x, geom)
    print(f"g_mu shape: {g_mu.shape}, g_nu shape: {g_nu.shape}")
    print(f"Naive Jacobian shape: {jac_mu.shape}")
    print(f"Max diagonal difference (mu): {np.abs(jac_mu[1, 1] - g_mu).max():.2e}")
    print(f"Max diagonal difference (nu): {np.abs(jac_nu[1, 1] - g_nu[1]).max():.2e}")
    print(f"Off-diagonal block (0, 1) is zero: {not jac_nu[0, 1].any()}")


def example_compensation():
    """Example: Compensated versus stale statistics after a weight update"""
    print("\n" + "=" * 60)
    print("Example 2: Compensation")
    print("=" * 60)

    from compensation import IterationRecord, LayerGeometry, aggregate, compensate, stat_grads
    from oracles import make_replay_bundle, replay_exact_stats
    from tensor_core import Rng, conv2d_forward

    rng = Rng(1)
    geom = LayerGeometry((3, 3), 1, 1)
    y = rng.normal((2, 3, 5, 5))
    theta_old = rng.normal((4, 3, 3, 3))
    x = conv2d_forward(y, theta_old, 1, 1)
    g_mu, g_nu = stat_grads(y, theta_old, geom, x)
    record = IterationRecord(0, x.mean(axis=(0, 2, 3)), (x * x).mean(axis=(0, 2, 3)), g_mu, g_nu, theta_old)

    theta_new = theta_old + 0.02 * rng.normal(theta_old.shape)
    exact_mu, exact_nu = replay_exact_stats(make_replay_bundle(y, geom, theta_old), theta_new)
    comp_mu, comp_nu = compensate(record, theta_new)
    print(f"Stale nu error:       {np.abs(record.nu - exact_nu).max():.2e}")
    print(f"Compensated nu error: {np.abs(comp_nu - exact_nu).max():.2e}")

    stats = aggregate((exact_mu, exact_nu), [(comp_mu, comp_nu)])
    print(f"Aggregated sigma: {np.round(stats.sigma, 4)}")


def example_normalizers():
    """Example: BN, Naive CBN and CBN on a stream of batches"""
    print("\n" + "=" * 60)
    print("Example 3: Normalizers")
    print("=" * 60)

    from compensation import LayerGeometry
    from normalizers import BnConfig, CbnState, train_forward
    from tensor_core import Rng, conv2d_forward

    rng = Rng(2)
    geom = LayerGeometry((3, 3), 1, 1)
    theta = rng.normal((4, 3, 3, 3))
    states = {kind: CbnState.create(4, BnConfig(kind=kind, window=4)) for kind in ("bn", "naive-cbn", "cbn")}
    for t in range(6):
        theta = theta + 0.01 * rng.normal(theta.shape)
        y = rng.normal((2, 3, 5, 5))
        x = conv2d_forward(y, theta, 1, 1)
        for kind, state in states.items():
            _, cache = train_forward(x, state, theta=theta, y_prev=y, geometry=geom)
            state.t += 1
            if t == 5:
                print(f"{kind:>10}: window {cache.window}, mu_bar[0] = {cache.mu_bar[0]:+.4f}")


def example_training():
    """Example: A short training run on synthetic data"""
    print("\n" + "=" * 60)
    print("Example 4: Training")
    print("=" * 60)

    from harness import config_from_dict, train

    with tempfile.TemporaryDirectory() as out_dir:
        cfg = config_from_dict({
            "name": "example",
            "dataset": {"kind": "synthetic-gaussian", "train_subset": 64, "eval_subset": 32,
                        "num_classes": 4, "image_shape": [3, 8, 8]},
            "model": "tiny-cnn",
            "normalizer": {"kind": "cbn", "window": 4, "burn_in_epochs": 0.5},
            "batch_size": 4,
            "epochs": 2,
            "out_dir": out_dir,
            "progress": False,
        })
        result = train(cfg)
        for row in result.rows:
            print(f"epoch {row.epoch} {row.split:>5}: loss {row.loss:.4f}, accuracy {row.accuracy:.3f}")


def main():
    """Run all examples"""
    print("\n" + "=" * 60)
    print("CROSS-ITERATION BATCH NORMALIZATION - EXAMPLE USAGE")
    print("=" * 60 + "\n")

    try:
        example_statistic_gradients()
        example_compensation()
        example_normalizers()
        example_training()

        print("\n" + "=" * 60)
        print("All examples completed successfully!")
        print("=" * 60)
        print("\nNext steps:")
        print("1. Train:    python main.py train --config configs/synthetic.json")
        print("2. Diagnose: python main.py diagnose --config configs/synthetic.json")
        print("3. Compare:  python main.py compare runs/<a> runs/<b>")

    except Exception as e:
        print(f"\n\nError running examples: {e}")
        import traceback
        traceback.print_exc()


if __name__ == "__main__":
    main()
