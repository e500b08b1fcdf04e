#!/usr/bin/env python
# A scaled-down robustness benchmark: three algorithms, three
# heterogeneity seeds, 60 rounds on synthetic blobs, followed by the
# benchmark summary table and the Friedman/Nemenyi rank analysis.
# Takes about a minute.
import dataclasses
import tempfile

import numpy as np

from fedsim import eval as ev
from fedsim import runner

SCENARIOS = (0, 1, 2)
ALGOS = {
    "fedavg": {},
    "fedprox": {},
    # desk-scale rectification: smaller offset than the published 0.5
    # (tuned for far larger models) and the lookahead sign convention
    "fedgps": dict(lambda_g=0.2, nsg_sign=-1.0),
}

with tempfile.TemporaryDirectory() as tmp:
    base = runner.ExperimentConfig(
        num_classes=10, input_dim=16, n_per_class=200, separation=0.8,
        num_clients=10, sample_rate=0.5, rounds=60, alpha=0.1,
        scenario_seeds=SCENARIOS, training_seeds=(0,), out_dir=tmp)

    results = {}
    for algo, extra in ALGOS.items():
        cfg = dataclasses.replace(base, algo=algo, **extra)
        results[algo] = runner.run(cfg)
        accs = [r.final_acc for r in results[algo]]
        print(f"{algo:<8} finals {np.round(accs, 3)}")

    scenarios = runner.results_to_scenarios(results)
    print("\nsummary (best accuracy, mean +- sample std):")
    for row in ev.summarize(scenarios):
        print(f"  {row['algorithm']:<8} {row['mean_acc']:.4f} +- {row['std_acc']:.4f}")

    print("\nround-to-target vs fedavg's best (floored to integer percent):")
    for s in scenarios:
        cells = ", ".join(
            f"{a}: round {s.rounds.get(a)} "
            f"({'%.1fx' % s.speedups[a] if s.speedups.get(a) else 'None'})"
            for a in sorted(s.acc))
        print(f"  {s.scenario}: {cells}")

    algos = sorted(results)
    acc = np.array([[s.acc[a] for a in algos] for s in scenarios])
    ranks = ev.RankMatrix(acc, algos)
    chi2, significant = ev.friedman_statistic(ranks)
    sig_matrix, avg, cd = ev.nemenyi_pairwise(ranks)
    print(f"\nFriedman chi2 = {chi2:.4f}, significant at alpha=0.05: {significant}")
    print(f"critical distance (k={len(algos)}, N={len(scenarios)}): {cd:.4f}")
    for name, rank in zip(algos, avg):
        print(f"  {name:<8} average rank {rank:.2f}")
    print("pairs beyond the critical distance:",
          [(algos[i], algos[j]) for i in range(len(algos))
           for j in range(i + 1, len(algos)) if sig_matrix[i, j]] or "none")
