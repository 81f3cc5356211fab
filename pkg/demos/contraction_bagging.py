"""Contraction vs expansion on the synthetic task, with and without target regularization.

For each scenario this pretrains one source encoder, adapts it twice (target
batches alone, then half source / half target), and bags the two adapted
encoders by confidence. Takes roughly a minute per scenario.

    python3 demos/contraction_bagging.py [seed]
"""

import sys
from dataclasses import replace

from adda_forge import (AdaptConfig, ArchSpec, BaggedModel, SyntheticSpec, bagged_infer,
                        gen_two_domain, infer, pretrain_source, run_experiment)
from adda_forge.pipeline import accuracy

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 1
arch = ArchSpec(hidden=(16,), disc_hidden=(64, 64))

print(f"{'scenario':<12} {'source-only':>12} {'no reg':>8} {'reg':>8} {'bagged':>8}")
for name, (r_source, r_target) in {"contraction": (3.0, 6.0), "expansion": (6.0, 3.0)}.items():
    spec = SyntheticSpec(source_radius=r_source, target_radius=r_target, rotation_deg=55.0, seed=seed)
    source, target = gen_two_domain(spec)
    _, held_out = gen_two_domain(replace(spec, seed=seed + 1000))

    cfg = AdaptConfig(seed=seed, step2_iters=1500)
    source_enc = pretrain_source(cfg, source, arch)
    plain = run_experiment(cfg, arch, source, target, held_out, source_enc)
    regularized = run_experiment(replace(cfg, target_reg=True), arch, source, target, held_out, source_enc)

    bag = BaggedModel(regularized.target_encoder, plain.target_encoder)
    bagged = accuracy(bagged_infer(bag, held_out), held_out.y)
    print(f"{name:<12} {infer(source_enc, held_out)[1]:>12.3f} {plain.final_accuracy:>8.3f} "
          f"{regularized.final_accuracy:>8.3f} {bagged:>8.3f}")
