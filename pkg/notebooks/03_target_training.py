"""
Target-domain training with ID alignment
========================================

Merge a source adapter into the base, then train ID embeddings, a fresh adapter,
fusion and head on the target domain. Run with ``python notebooks/03_target_training.py``.
"""

from loid import EncoderConfig, MergeSpec, SynthSpec, TrainConfig, build_vocab, dare_merge, evaluate
from loid import gen_synthetic, init_encoder, pretrain_source, split, train_target
from loid.data import sample_history
from loid.pipeline import build_target_model

source, target = gen_synthetic(SynthSpec(n_interactions=600, n_interactions_b=300, lexicon_size=60,
                                         shared_fraction=0.8, noise_rate=0.0, seed=1))
vocab = build_vocab([x.text for x in source.interactions + target.interactions])
config = TrainConfig(encoder=EncoderConfig(d_model=32, n_layers=2, n_heads=2, d_ffn=64, max_len=32),
                     max_len=32, epochs=8, lr=3e-3, k=3)
base = init_encoder(len(vocab), config.encoder, seed=0)

s_train, s_val, _ = split(source.interactions, seed=0)
adapter = pretrain_source(s_train, base, vocab, config, val=s_val).adapter
merged = dare_merge(base, MergeSpec(p=0.9, seed=0, adapters=[adapter]))

# Histories come from the training split only, and the current review is never among them.
train, val, test = split(target.interactions, seed=0)
model = build_target_model(target.interactions, train, merged, vocab, config)
x = train[0]
drawn = sample_history(model.index, x.user, k=3, exclude=x.key, seed=0)
print(f"{x.user} has {len(model.index.users[x.user])} train reviews, drew {len(drawn)}")

# Full runs with and without the ID contrastive term.
for label, cfg in (("with ID alignment", config), ("without", TrainConfig.from_dict({**config.to_dict(),
                                                                                      "no_cl": True}))):
    m = train_target(target.interactions, train, merged, vocab, cfg, val=val)
    res = evaluate(m, test, eval_repeats=5, seed=0)
    print(f"{label:18s} test MSE {res.mean_mse:.4f}  per repeat {[round(v, 4) for v in res.per_repeat]}")
    print(f"{'':18s} last step l_cl {m.log[-1]['l_cl']:.4f}")
