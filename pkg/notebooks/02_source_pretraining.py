"""
Training a source-domain adapter
================================

A frozen base encoder plus a trainable low-rank adapter and a small rating head.
Run with ``python notebooks/02_source_pretraining.py`` (about a minute on one core).
"""

import numpy as np
from loid import EncoderConfig, SynthSpec, TrainConfig, build_vocab, gen_synthetic, init_encoder, pretrain_source
from loid import split
from loid.pipeline import source_predictions

# Two synthetic domains. Ratings follow the share of positive sentiment words in each review.
source, target = gen_synthetic(SynthSpec(n_interactions=400, lexicon_size=40, shared_fraction=0.8, seed=0))
print(source.interactions[0])

# Vocabulary over both domains, so one base encoder serves both.
vocab = build_vocab([x.text for x in source.interactions + target.interactions])
config = TrainConfig(encoder=EncoderConfig(d_model=32, n_layers=2, n_heads=2, d_ffn=64, max_len=32),
                     max_len=32, epochs=10, lr=3e-3)
base = init_encoder(len(vocab), config.encoder, seed=config.seed)

train, val, test = split(source.interactions, seed=0)
before = base.checksum()
result = pretrain_source(train, base, vocab, config, val=val, label="source")
print("base untouched:", base.checksum() == before)

# The log has one row per step. Validation MSE is filled in at the end of each epoch.
for row in result.log:
    if row["val_mse"] != "":
        print(f"epoch {row['epoch']:2d}  train {row['l_rec']:.3f}  val {row['val_mse']:.3f}")

# Held-out error against a constant predictor.
preds = np.asarray(source_predictions(test, base, result.adapter, result.head, vocab, config.max_len))
y = np.array([x.rating for x in test])
print("test MSE", np.mean((preds - y) ** 2), "vs mean predictor", np.var(y))
