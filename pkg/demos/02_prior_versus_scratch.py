"""
What a person-generic prior buys
================================

A small version of the speedup experiment in the acceptance suite: train a
renderer on a few identities, then fit an unseen one from the prior and
from random weights and compare how fast validation PSNR climbs.
Takes a few minutes on one CPU core.
"""
from priordub.benchmark import BenchmarkSetup, build_population, held_out_metrics, fit_pair
from priordub.evaluation import format_speedup_table, speedup_table

setup = BenchmarkSetup(n_prior=4, prior_frames=60, actor_frames=100, holdout=30, prior_iterations=800)
pop = build_population(setup)
print("prior trained in %.0f s" % pop.seconds["prior"])

###############################################################################
# Same budget, same seed, same data for both runs.
adapted, scratch = fit_pair(pop, pop.actor_train, iterations=300, seed=0, val_every=10)
rows = speedup_table(adapted.log, scratch.log, [18, 20, 22, 24, 26], round_to=10, budget=300)
print(format_speedup_table(rows))

###############################################################################
# Held-out image metrics after the full budget.
for name, res in (("adapted", adapted), ("scratch", scratch)):
    m = held_out_metrics(res, pop.actor_train, pop.actor_val)
    print(f"{name:8s} PSNR {m['psnr']:.2f}  SSIM {m['ssim']:.3f}  FID {m['fid']:.4f}")
