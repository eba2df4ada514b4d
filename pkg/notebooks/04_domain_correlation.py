"""
Domain similarity and transfer
==============================

Sweep the shared-lexicon fraction of a synthetic source/target pair, then compare
the centroid cosine similarity with the gain from merging the source adapter.
Run with ``python notebooks/04_domain_correlation.py`` (a few minutes on one core).
"""

from loid import EncoderConfig, SynthSpec, TrainConfig, gen_synthetic, run_transfer_experiment

config = TrainConfig(encoder=EncoderConfig(d_model=64, n_layers=2, n_heads=2, d_ffn=128, max_len=32),
                     max_len=32, epochs=15, lr=3e-3, eval_repeats=3, p=0.9)

# Each report has the plain target model (no sources) and the one-source merge.
for shared in (0.1, 0.5, 0.9):
    src, tgt = gen_synthetic(SynthSpec(n_interactions=1000, n_interactions_b=300, lexicon_size=100,
                                       shared_fraction=shared, noise_rate=0.0, seed=0))
    report = run_transfer_experiment({"src": src.interactions}, tgt.interactions, config,
                                     target_name=f"s={shared}", similarity_n=100)
    print(f"shared {shared}: similarity {report.similarity['src']:.4f}  "
          f"val gain {report.gain(('src',)):+.3f}")

# A single seed is noisy at this scale; the acceptance tests take medians over five.

# The same table the CLI prints for one report.
print(report.table())
